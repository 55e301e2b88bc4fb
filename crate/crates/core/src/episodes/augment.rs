use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::tensor::{resample_bilinear, Tensor};

/// Pixel rectangle with top-left corner `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Query-set augmentation: random resized crop, color jitter, horizontal
/// flip and random erasing, applied in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub p_crop: f32,
    /// Range of the kept area fraction for resized crops.
    pub crop_scale: (f32, f32),
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter`.
    pub jitter: f32,
    pub p_flip: f32,
    pub p_erase: f32,
    /// Range of the erased area fraction.
    pub erase_area: (f32, f32),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            p_crop: 0.5,
            crop_scale: (0.75, 1.0),
            jitter: 0.2,
            p_flip: 0.5,
            p_erase: 0.25,
            erase_area: (0.02, 0.08),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Default::default()
        }
    }
}

fn dims(img: &Image) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

pub fn hflip(img: &Image) -> Image {
    let (c, h, w) = dims(img);
    let src = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Crops `rect` and resamples it bilinearly back to the full image size.
pub fn resize_crop(img: &Image, rect: Rect) -> Image {
    let (c, h, w) = dims(img);
    let rect = Rect {
        x: rect.x.min(w - 1),
        y: rect.y.min(h - 1),
        ..rect
    };
    let (rw, rh) = (rect.w.clamp(1, w - rect.x), rect.h.clamp(1, h - rect.y));
    let mut crop = Vec::with_capacity(c * rw * rh);
    for ch in 0..c {
        for y in rect.y..rect.y + rh {
            let row = (ch * h + y) * w;
            crop.extend_from_slice(&img.data()[row + rect.x..row + rect.x + rw]);
        }
    }
    let data = resample_bilinear(&crop, c, rh, rw, h, w);
    Tensor::new(&[c, h, w], data).expect("resampled to image shape")
}

/// Brightness, contrast and saturation scaling, clamped to `[0, 1]`.
pub fn color_jitter(img: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let (c, h, w) = dims(img);
    let area = h * w;
    let mut data: Vec<f32> = img.data().iter().map(|&v| v * brightness).collect();
    let mean = data.iter().sum::<f32>() / data.len() as f32;
    data.iter_mut()
        .for_each(|v| *v = (*v - mean) * contrast + mean);
    if c == 3 {
        for p in 0..area {
            let gray = 0.299 * data[p] + 0.587 * data[area + p] + 0.114 * data[2 * area + p];
            for ch in 0..3 {
                let v = &mut data[ch * area + p];
                *v = (*v - gray) * saturation + gray;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[c, h, w], data).expect("same shape")
}

/// Replaces the pixels of `rect` (all channels) with values from `fill`.
pub fn erase(img: &Image, rect: Rect, mut fill: impl FnMut() -> f32) -> Image {
    let (c, h, w) = dims(img);
    let mut out = img.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in rect.y..(rect.y + rect.h).min(h) {
            for x in rect.x..(rect.x + rect.w).min(w) {
                data[(ch * h + y) * w + x] = fill().clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn random_rect<R: Rng>(rng: &mut R, h: usize, w: usize, area: (f32, f32)) -> Rect {
    let frac = rng.gen_range(area.0..=area.1);
    let aspect: f32 = rng.gen_range(0.75f32.ln()..=(4.0f32 / 3.0).ln()).exp();
    let target = frac * (h * w) as f32;
    let rw = ((target * aspect).sqrt().round() as usize).clamp(1, w);
    let rh = ((target / aspect).sqrt().round() as usize).clamp(1, h);
    Rect {
        x: rng.gen_range(0..=w - rw),
        y: rng.gen_range(0..=h - rh),
        w: rw,
        h: rh,
    }
}

/// Randomly augments a query image. Output has the input's shape and lies
/// in `[0, 1]`; a disabled policy returns the image unchanged.
pub fn augment_query<R: Rng>(img: &Image, rng: &mut R, policy: &AugmentPolicy) -> Image {
    if !policy.enabled {
        return img.clone();
    }
    let (_, h, w) = dims(img);
    let mut out = img.clone();
    if rng.gen::<f32>() < policy.p_crop {
        out = resize_crop(&out, random_rect(rng, h, w, policy.crop_scale));
    }
    if policy.jitter > 0.0 {
        let j = policy.jitter;
        let (b, c, s) = (
            rng.gen_range(1.0 - j..=1.0 + j),
            rng.gen_range(1.0 - j..=1.0 + j),
            rng.gen_range(1.0 - j..=1.0 + j),
        );
        out = color_jitter(&out, b, c, s);
    }
    if rng.gen::<f32>() < policy.p_flip {
        out = hflip(&out);
    }
    if rng.gen::<f32>() < policy.p_erase {
        let rect = random_rect(rng, h, w, policy.erase_area);
        out = erase(&out, rect, || rng.gen());
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}
