//! Labeled datasets with class-disjoint splits, N-way K-shot episode
//! sampling, query augmentation, a procedural synthetic dataset and
//! directory ingestion.

mod augment;
mod ingest;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use augment::{augment_query, color_jitter, erase, hflip, resize_crop, AugmentPolicy, Rect};
pub use ingest::{ingest_directory, write_directory, PARTS_FILE, SPLITS_FILE};
pub use synthetic::{class_part_extent, generate_synthetic, SyntheticSpec};

/// A `3×H×W` image with values in `[0, 1]`.
pub type Image = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn intersection_area(&self, other: &PixelBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn overlaps(&self, other: &PixelBox) -> bool {
        self.intersection_area(other) > 0
    }

    /// Pixel footprint of cell `index` (row-major) on an `h×w` grid laid
    /// over an image of `size = (height, width)`.
    pub fn of_region(index: usize, grid: (usize, usize), size: (usize, usize)) -> PixelBox {
        let (gh, gw) = grid;
        let (r, c) = (index / gw, index % gw);
        PixelBox {
            x0: c * size.1 / gw,
            x1: (c + 1) * size.1 / gw,
            y0: r * size.0 / gh,
            y1: (r + 1) * size.0 / gh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class: usize,
    /// Ground-truth box of the class's distinctive part, when known.
    pub part_box: Option<PixelBox>,
}

/// Samples plus a class-level split assignment.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub image_size: (usize, usize),
    pub class_names: Vec<String>,
    pub class_splits: Vec<Split>,
    pub samples: Vec<Sample>,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        image_size: (usize, usize),
        class_names: Vec<String>,
        class_splits: Vec<Split>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if class_names.len() != class_splits.len() {
            return Err(Error::Invalid("every class needs exactly one split".into()));
        }
        let mut by_class = vec![Vec::new(); class_names.len()];
        let want = [3, image_size.0, image_size.1];
        for (i, s) in samples.iter().enumerate() {
            if s.class >= class_names.len() {
                return Err(Error::Invalid(format!(
                    "sample {i} has unknown class {}",
                    s.class
                )));
            }
            if s.image.shape() != want {
                return Err(Error::Invalid(format!(
                    "sample {i} has shape {:?}, expected {want:?}",
                    s.image.shape()
                )));
            }
            by_class[s.class].push(i);
        }
        Ok(LabeledDataset {
            image_size,
            class_names,
            class_splits,
            samples,
            by_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn classes(&self, split: Split) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.class_splits[c] == split)
            .collect()
    }

    pub fn samples_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn image(&self, sample: usize) -> &Image {
        &self.samples[sample].image
    }
}

/// One N-way K-shot task with `queries` query samples per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Dataset class of each episode label.
    pub classes: Vec<usize>,
    /// Sample indices, label-major (`label = i / shot`).
    pub support: Vec<usize>,
    /// Sample indices, label-major (`label = i / queries`).
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_label(&self, i: usize) -> usize {
        i / self.shot
    }

    pub fn query_label(&self, i: usize) -> usize {
        i / self.queries
    }

    pub fn label_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `[Ns, Nq]` matrix of `1` for same-class pairs, else `0`.
    pub fn targets<T: Real>(&self) -> Tensor<T> {
        let nq = self.query.len();
        Tensor::from_fn(&[self.support.len(), nq], |k| {
            if self.support_label(k / nq) == self.query_label(k % nq) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Draws `way` classes from `split`, then `shot` support and `queries`
/// query samples per class without replacement.
pub fn sample_episode<R: Rng>(
    dataset: &LabeledDataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Invalid(
            "way, shot and queries must be positive".into(),
        ));
    }
    let pool = dataset.classes(split);
    if pool.len() < way {
        return Err(Error::Insufficient(format!(
            "{split} split has {} classes, a {way}-way episode needs {way}",
            pool.len()
        )));
    }
    let need = shot + queries;
    if let Some(&c) = pool.iter().find(|&&c| dataset.samples_of(c).len() < need) {
        return Err(Error::Insufficient(format!(
            "class `{}` has {} samples, an episode needs {need} ({shot} support + {queries} query)",
            dataset.class_names[c],
            dataset.samples_of(c).len()
        )));
    }
    let classes: Vec<usize> = index::sample(rng, pool.len(), way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for &c in &classes {
        let members = dataset.samples_of(c);
        let picks = index::sample(rng, members.len(), need).into_vec();
        support.extend(picks[..shot].iter().map(|&i| members[i]));
        query.extend(picks[shot..].iter().map(|&i| members[i]));
    }
    Ok(Episode {
        split,
        way,
        shot,
        queries,
        classes,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(classes: usize, per_class: usize) -> LabeledDataset {
        let samples = (0..classes * per_class)
            .map(|i| Sample {
                image: Tensor::full(&[3, 2, 2], (i % 7) as f32 / 7.0),
                class: i / per_class,
                part_box: None,
            })
            .collect();
        LabeledDataset::new(
            (2, 2),
            (0..classes).map(|c| format!("c{c}")).collect(),
            (0..classes)
                .map(|c| {
                    if c < classes - 2 {
                        Split::Train
                    } else {
                        Split::Test
                    }
                })
                .collect(),
            samples,
        )
        .unwrap()
    }

    #[test]
    fn five_way_one_shot_fifteen_queries() {
        let d = toy(8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&d, Split::Train, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(e.support.len(), 5);
        assert_eq!(e.query.len(), 75);
    }

    #[test]
    fn two_way_two_shot_layout() {
        let d = toy(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = sample_episode(&d, Split::Train, 2, 2, 1, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (4, 2));
        assert_eq!((e.support_label(3), e.query_label(1)), (1, 1));
        let t = e.targets::<f64>();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn episodes_are_seeded_and_disjoint() {
        let d = toy(8, 20);
        let a =
            sample_episode(&d, Split::Train, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b =
            sample_episode(&d, Split::Train, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.support.iter().all(|s| !a.query.contains(s)));
        for (i, &s) in a.support.iter().enumerate() {
            assert_eq!(d.samples[s].class, a.classes[a.support_label(i)]);
        }
        for (i, &q) in a.query.iter().enumerate() {
            assert_eq!(d.samples[q].class, a.classes[a.query_label(i)]);
        }
    }

    #[test]
    fn insufficient_data_reports_counts() {
        let d = toy(8, 5);
        let err = sample_episode(&d, Split::Test, 5, 1, 1, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(err.to_string().contains("2 classes"), "{err}");
        let err = sample_episode(
            &d,
            Split::Train,
            5,
            1,
            15,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("5 samples"), "{err}");
    }

    #[test]
    fn region_boxes_tile_the_image() {
        let b = PixelBox::of_region(5, (4, 4), (32, 32));
        assert_eq!(
            b,
            PixelBox {
                x0: 8,
                x1: 16,
                y0: 8,
                y1: 16
            }
        );
        let part = PixelBox {
            x0: 14,
            x1: 22,
            y0: 3,
            y1: 11,
        };
        assert!(b.overlaps(&part));
        assert_eq!(b.intersection_area(&part), 2 * 3);
        assert!(!PixelBox::of_region(0, (4, 4), (32, 32)).overlaps(&part));
    }
}
