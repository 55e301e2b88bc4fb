//! Region activation maps and class-level region importance.
//!
//! A region activation map sums `w_i · exp(2 · S^i)` over support regions
//! `i`, where `S^i` is the similarity of support region `i` to every query
//! cell, and is then upsampled bilinearly to the image size.
//!
//! Region importance stacks the weight vectors of one support sample
//! against several queries of its class, drops all-zero columns, fits a
//! normal `N(μ_j, σ_j)` to each remaining column and integrates `x·f(x)`
//! over `[μ_j − 2a, μ_j + 2a]`, with `a` the mean of the `σ_j`.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::episodes::{Image, PixelBox};
use crate::error::{shape_err, Error, Result};
use crate::explainer::RegionWeight;
use crate::matcher::RegionSimilarityMap;
use crate::model::{stack_images, RcnModel};
use crate::tensor::{cast, resample_bilinear, Graph, Real, Tensor};

/// Gain of the activation nonlinearity `k(x) = exp(GAIN · x)`.
pub const RAM_GAIN: f64 = 2.0;
/// Entries below this magnitude count as zero when removing columns.
pub const ZERO_TOL: f64 = 1e-12;
/// Absolute tolerance of the adaptive Simpson rule.
pub const QUAD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RamMap<T> {
    /// `[h, w]` on the query grid.
    pub values: Tensor<T>,
    /// `[H, W]` at image resolution.
    pub upsampled: Tensor<T>,
}

/// Grid-resolution activation map `Σ_i w_i · k(S^i)`.
pub fn ram_values<T: Real>(weight: &[T], maps: &[RegionSimilarityMap<T>]) -> Result<Tensor<T>> {
    if weight.len() != maps.len() || maps.is_empty() {
        return shape_err(
            "ram",
            format!(
                "{} weights for {} similarity maps",
                weight.len(),
                maps.len()
            ),
        );
    }
    let shape = maps[0].values.shape().to_vec();
    let gain: T = cast(RAM_GAIN);
    let mut acc = vec![T::zero(); maps[0].values.numel()];
    for (&w, m) in weight.iter().zip(maps) {
        if m.values.shape() != shape.as_slice() {
            return shape_err(
                "ram",
                format!(
                    "map {} has shape {:?}, expected {shape:?}",
                    m.index,
                    m.values.shape()
                ),
            );
        }
        for (a, &s) in acc.iter_mut().zip(m.values.data()) {
            *a += w * (gain * s).exp();
        }
    }
    Tensor::new(&shape, acc)
}

pub fn ram<T: Real>(
    weight: &RegionWeight<T>,
    maps: &[RegionSimilarityMap<T>],
    image_size: (usize, usize),
) -> Result<RamMap<T>> {
    let values = ram_values(weight.values.data(), maps)?;
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let up = resample_bilinear(values.data(), 1, h, w, image_size.0, image_size.1);
    Ok(RamMap {
        upsampled: Tensor::new(&[image_size.0, image_size.1], up)?,
        values,
    })
}

/// Heat color for `t ∈ [0, 1]`: black, red, yellow, white.
fn heat(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [
        t.min(1.0),
        (t - 1.0).clamp(0.0, 1.0),
        (t - 2.0).clamp(0.0, 1.0),
    ]
}

/// Min-max normalizes `values`; a constant input maps to all zeros.
pub fn normalize<T: Real>(values: &[T]) -> Vec<f32> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > T::zero() {
                ((v - lo) / range).to_f32().unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Blends the normalized map over `base` (`3×H×W`) with equal weight.
pub fn heatmap_overlay<T: Real>(ram: &RamMap<T>, base: &Image) -> Result<Image> {
    let (h, w) = (ram.upsampled.shape()[0], ram.upsampled.shape()[1]);
    if base.shape() != [3, h, w] {
        return shape_err(
            "heatmap",
            format!("map {h}x{w} vs image {:?}", base.shape()),
        );
    }
    let norm = normalize(ram.upsampled.data());
    let area = h * w;
    let mut out = base.clone();
    let data = out.data_mut();
    for (p, &t) in norm.iter().enumerate() {
        for (ch, c) in heat(t).into_iter().enumerate() {
            let v = &mut data[ch * area + p];
            *v = 0.5 * *v + 0.5 * c;
        }
    }
    Ok(out)
}

pub fn to_rgb(image: &Image) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let area = h * w;
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * area + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes the heat overlay of `ram` on `base` as a PNG.
pub fn export_heatmap<T: Real>(ram: &RamMap<T>, base: &Image, path: &Path) -> Result<()> {
    to_rgb(&heatmap_overlay(ram, base)?).save(path)?;
    Ok(())
}

/// Draws a one-pixel outline of `b` in `color`.
pub fn outline(image: &Image, b: PixelBox, color: [f32; 3]) -> Image {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    let data = out.data_mut();
    let (x1, y1) = (b.x1.min(w), b.y1.min(h));
    for y in b.y0..y1 {
        for x in b.x0..x1 {
            if y == b.y0 || y + 1 == y1 || x == b.x0 || x + 1 == x1 {
                for (ch, &c) in color.iter().enumerate() {
                    data[(ch * h + y) * w + x] = c;
                }
            }
        }
    }
    out
}

/// Weight vectors of one support sample against several queries, with
/// all-zero columns removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeightMatrix {
    /// One row per query, surviving columns only.
    pub rows: Vec<Vec<f64>>,
    /// Original region index of every surviving column.
    pub columns: Vec<usize>,
    pub grid: (usize, usize),
}

impl RegionWeightMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, grid: (usize, usize)) -> Result<Self> {
        let hw = grid.0 * grid.1;
        if rows.len() < 2 {
            return Err(Error::Insufficient(format!(
                "need at least 2 weight rows, got {}",
                rows.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != hw) {
            return shape_err(
                "region_weight_matrix",
                format!("row of {} for a {}x{} grid", r.len(), grid.0, grid.1),
            );
        }
        let columns: Vec<usize> = (0..hw)
            .filter(|&j| rows.iter().any(|r| r[j].abs() >= ZERO_TOL))
            .collect();
        if columns.is_empty() {
            return Err(Error::Degenerate(
                "every region weight is zero for this support sample".into(),
            ));
        }
        let rows = rows
            .into_iter()
            .map(|r| columns.iter().map(|&j| r[j]).collect())
            .collect();
        Ok(RegionWeightMatrix {
            rows,
            columns,
            grid,
        })
    }

    /// Surviving column count.
    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }
}

/// Region weights of `support` against each of `queries` (evaluation mode).
pub fn region_weight_matrix<T: Real>(
    model: &RcnModel<T>,
    support: &Image,
    queries: &[&Image],
) -> Result<RegionWeightMatrix> {
    if queries.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 query samples, got {}",
            queries.len()
        )));
    }
    let mut g = Graph::new(&model.params, false);
    let x = g.constant(stack_images::<T>(&[support])?);
    let s = model.backbone.forward(&mut g, x)?;
    let x = g.constant(stack_images::<T>(queries)?);
    let q = model.backbone.forward(&mut g, x)?;
    let weights = model.explainer.weights(&mut g, s, q)?;
    let grid = model.config.grid();
    let hw = grid.0 * grid.1;
    let w = g.value(weights).data();
    let as_f64 = |v: &[T]| {
        v.iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect::<Vec<f64>>()
    };
    let rows = if w.len() == hw {
        vec![as_f64(w); queries.len()]
    } else {
        w.chunks(hw).map(as_f64).collect()
    };
    RegionWeightMatrix::from_rows(rows, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionImportance {
    pub region: usize,
    pub row: usize,
    pub col: usize,
    pub mu: f64,
    pub sigma: f64,
    pub importance: f64,
    /// Position in the descending order, 0 = most important.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub grid: (usize, usize),
    pub rows: usize,
    /// Mean of the surviving columns' standard deviations.
    pub a: f64,
    pub regions: Vec<RegionImportance>,
    /// Region indices by ascending importance.
    pub ascending: Vec<usize>,
}

impl ImportanceReport {
    pub fn top_region(&self) -> usize {
        *self
            .ascending
            .last()
            .expect("at least one surviving region")
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 60)
}

/// `∫ x · N(x; μ, σ) dx` over `[μ − 2a, μ + 2a]` by quadrature; `σ = 0`
/// gives the point-mass value `μ`.
pub fn gaussian_indicator(mu: f64, sigma: f64, a: f64) -> f64 {
    if sigma == 0.0 {
        return mu;
    }
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = move |x: f64| {
        let z = (x - mu) / sigma;
        x * norm * (-0.5 * z * z).exp()
    };
    let (lo, hi) = (mu - 2.0 * a, mu + 2.0 * a);
    // Panel edges at multiples of σ keep narrow peaks resolved.
    let mut edges = vec![lo];
    for k in -8i32..=8 {
        let e = mu + k as f64 * sigma;
        if e > lo && e < hi {
            edges.push(e);
        }
    }
    edges.push(hi);
    let panels = (edges.len() - 1) as f64;
    edges
        .windows(2)
        .map(|p| integrate(&f, p[0], p[1], QUAD_TOL / panels))
        .sum()
}

/// Per-region statistics and importance for a weight matrix.
pub fn importance(matrix: &RegionWeightMatrix) -> Result<ImportanceReport> {
    if matrix.rows.len() < 2 {
        return Err(Error::Insufficient(
            "importance needs at least 2 rows".into(),
        ));
    }
    let stats: Vec<(f64, f64)> = (0..matrix.m())
        .map(|k| mean_std(&matrix.column(k)))
        .collect();
    let a = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let gw = matrix.grid.1;
    let mut regions: Vec<RegionImportance> = matrix
        .columns
        .iter()
        .zip(&stats)
        .map(|(&region, &(mu, sigma))| RegionImportance {
            region,
            row: region / gw,
            col: region % gw,
            mu,
            sigma,
            importance: gaussian_indicator(mu, sigma, a),
            rank: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..regions.len()).collect();
    // Ascending by importance; equal values keep the higher region index
    // later so the top region is the lowest index among ties.
    order.sort_by(|&x, &y| {
        regions[x]
            .importance
            .total_cmp(&regions[y].importance)
            .then(regions[y].region.cmp(&regions[x].region))
    });
    for (pos, &k) in order.iter().rev().enumerate() {
        regions[k].rank = pos;
    }
    Ok(ImportanceReport {
        grid: matrix.grid,
        rows: matrix.rows.len(),
        a,
        ascending: order.iter().map(|&k| regions[k].region).collect(),
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::HeadKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps(vals: &[Vec<f64>], h: usize, w: usize) -> Vec<RegionSimilarityMap<f64>> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| RegionSimilarityMap {
                index: i,
                values: Tensor::new(&[h, w], v.clone()).unwrap(),
            })
            .collect()
    }

    fn weight(v: &[f64]) -> RegionWeight<f64> {
        RegionWeight {
            values: Tensor::new(&[v.len()], v.to_vec()).unwrap(),
            provenance: HeadKind::Meta,
        }
    }

    #[test]
    fn one_hot_weight_constant_maps() {
        let m = maps(
            &[vec![0.0; 4], vec![0.0; 4], vec![1.0; 4], vec![1.0; 4]],
            2,
            2,
        );
        let r = ram(&weight(&[1.0, 0.0, 0.0, 0.0]), &m, (8, 8)).unwrap();
        assert!(r.values.data().iter().all(|&v| v == 1.0));
        assert!(r.upsampled.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let r = ram(&weight(&[0.0, 0.0, 1.0, 0.0]), &m, (8, 8)).unwrap();
        assert!(r
            .values
            .data()
            .iter()
            .all(|&v| (v - 7.389_056_098_930_65).abs() < 1e-12));
    }

    #[test]
    fn ram_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let w: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
        let got = ram_values(&w, &maps(&vals, 3, 3)).unwrap();
        for cell in 0..9 {
            let mut want = 0.0;
            for i in 0..9 {
                want += w[i] * (2.0 * vals[i][cell]).exp();
            }
            assert!((got.data()[cell] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_ram_gives_uniform_overlay() {
        let m = maps(&[vec![0.3; 4]], 2, 2);
        let r = ram(&weight(&[2.0]), &m, (4, 4)).unwrap();
        let base = Tensor::full(&[3, 4, 4], 0.4f32);
        let out = heatmap_overlay(&r, &base).unwrap();
        assert!(out.data()[..16].iter().all(|&v| v == 0.2));
        assert_eq!(normalize(&[1.0f64, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn heatmap_png_is_written() {
        let m = maps(&[vec![0.1, 0.5, 0.9, 0.2]], 2, 2);
        let r = ram(&weight(&[1.0]), &m, (8, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        export_heatmap(&r, &Tensor::full(&[3, 8, 8], 0.5f32), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (8, 8));
    }

    #[test]
    fn zero_columns_are_removed() {
        let m = RegionWeightMatrix::from_rows(
            vec![vec![0.1, 0.0, 0.3, 0.4], vec![0.2, 0.0, 0.0, 0.5]],
            (2, 2),
        )
        .unwrap();
        assert_eq!(m.m(), 3);
        assert_eq!(m.columns, vec![0, 2, 3]);
        assert_eq!(m.rows[1], vec![0.2, 0.0, 0.5]);
        let err =
            RegionWeightMatrix::from_rows(vec![vec![0.0; 4], vec![1e-13; 4]], (2, 2)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn single_region_at_its_own_spread() {
        let i = gaussian_indicator(2.0, 0.5, 0.5);
        assert!((i - 2.0 * 0.954_499_736_103_642).abs() < 1e-9);
        assert_eq!(gaussian_indicator(0.7, 0.0, 0.3), 0.7);
        assert!(gaussian_indicator(0.0, 1.3, 0.9).abs() < 1e-12);
        assert!((gaussian_indicator(0.9, 1e-9, 0.4) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn importance_ranks_by_mean_at_equal_spread() {
        let rows = vec![
            vec![1.0, 0.5, 0.0],
            vec![2.0, 1.5, 0.0],
            vec![3.0, 2.5, 0.0],
        ];
        let m = RegionWeightMatrix::from_rows(rows, (1, 3)).unwrap();
        let r = importance(&m).unwrap();
        assert_eq!(r.regions.len(), 2);
        assert!((r.a - r.regions[0].sigma).abs() < 1e-15);
        assert!(r.regions[0].importance > r.regions[1].importance);
        assert_eq!(r.ascending, vec![1, 0]);
        assert_eq!(r.top_region(), 0);
        assert_eq!((r.regions[0].rank, r.regions[1].rank), (0, 1));
    }
}
