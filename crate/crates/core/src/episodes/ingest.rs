use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use super::{Image, LabeledDataset, PixelBox, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optional `class name → split` map at the dataset root.
pub const SPLITS_FILE: &str = "splits.json";
/// Optional `"class/file.png" → PixelBox` map at the dataset root.
pub const PARTS_FILE: &str = "parts.json";

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic 60/20/20 split by class-name hash.
fn hash_split(name: &str) -> Split {
    match fnv1a(name) % 10 {
        0..=5 => Split::Train,
        6 | 7 => Split::Val,
        _ => Split::Test,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn load_png(path: &Path) -> std::result::Result<Image, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let area = w * h;
    let mut data = vec![0.0f32; 3 * area];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * area + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

/// Loads one subdirectory per class of same-size PNG images. Unreadable
/// images and images whose size differs from the first readable one are
/// skipped with a warning; a class left without images is an error.
pub fn ingest_directory(root: &Path) -> Result<LabeledDataset> {
    let splits: Option<BTreeMap<String, Split>> = read_json(&root.join(SPLITS_FILE))?;
    let parts: BTreeMap<String, PixelBox> = read_json(&root.join(PARTS_FILE))?.unwrap_or_default();
    let mut names = Vec::new();
    let mut class_splits = Vec::new();
    let mut samples = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let class = names.len();
        let before = samples.len();
        for file in sorted_entries(&dir)? {
            let is_png = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let image = match load_png(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", file.display());
                    continue;
                }
            };
            let hw = (image.shape()[1], image.shape()[2]);
            match size {
                None => size = Some(hw),
                Some(s) if s != hw => {
                    log::warn!(
                        "skipping {}: size {}x{} differs from {}x{}",
                        file.display(),
                        hw.1,
                        hw.0,
                        s.1,
                        s.0
                    );
                    continue;
                }
                _ => {}
            }
            let key = format!(
                "{name}/{}",
                file.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
            );
            samples.push(Sample {
                image,
                class,
                part_box: parts.get(&key).copied(),
            });
        }
        if samples.len() == before {
            return Err(Error::Insufficient(format!(
                "class `{name}` has no usable images"
            )));
        }
        let split = match &splits {
            Some(map) => *map.get(&name).ok_or_else(|| Error::Format {
                path: root.join(SPLITS_FILE),
                message: format!("no split given for class `{name}`"),
            })?,
            None => hash_split(&name),
        };
        names.push(name);
        class_splits.push(split);
    }
    let Some(size) = size else {
        return Err(Error::Insufficient(format!(
            "no class directories with images under {}",
            root.display()
        )));
    };
    LabeledDataset::new(size, names, class_splits, samples)
}

fn to_png(image: &Image) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let area = h * w;
    let d = image.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * area + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes `dataset` in the layout read by [`ingest_directory`].
pub fn write_directory(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut counters = vec![0usize; dataset.num_classes()];
    let mut parts = BTreeMap::new();
    for name in &dataset.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for s in &dataset.samples {
        let name = &dataset.class_names[s.class];
        let file = format!("{:04}.png", counters[s.class]);
        counters[s.class] += 1;
        to_png(&s.image).save(root.join(name).join(&file))?;
        if let Some(b) = s.part_box {
            parts.insert(format!("{name}/{file}"), b);
        }
    }
    let splits: BTreeMap<&str, Split> = dataset
        .class_names
        .iter()
        .map(String::as_str)
        .zip(dataset.class_splits.iter().copied())
        .collect();
    fs::write(
        root.join(SPLITS_FILE),
        serde_json::to_string_pretty(&splits)?,
    )?;
    if !parts.is_empty() {
        fs::write(root.join(PARTS_FILE), serde_json::to_string_pretty(&parts)?)?;
    }
    Ok(())
}
