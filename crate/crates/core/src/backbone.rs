//! Convolutional feature extractor.
//!
//! Each block is `conv3x3(pad 1) → batch-norm → relu`, followed by a 2×2 max
//! pool for the first `pooled_blocks` blocks. An optional adaptive average
//! pool brings the final map to the configured region grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers;
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: usize,
    pub channels: usize,
    /// Number of leading blocks followed by a 2×2 max pool.
    pub pooled_blocks: usize,
    /// Input image `(height, width)`.
    pub image_size: (usize, usize),
    /// Target region grid `(h, w)` reached by adaptive average pooling.
    pub output_size: Option<(usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            blocks: 4,
            channels: 64,
            pooled_blocks: 4,
            image_size: (84, 84),
            output_size: None,
        }
    }
}

impl BackboneConfig {
    /// Named presets: `conv4-64` and `conv4-32`. Images of 84 pixels use
    /// four pooled blocks (84 → 5); smaller images pool three times.
    pub fn preset(name: &str, image_size: (usize, usize)) -> Result<Self> {
        let channels = match name {
            "conv4-64" => 64,
            "conv4-32" => 32,
            other => {
                return Err(Error::Invalid(format!(
                    "unknown backbone `{other}` (expected conv4-64|conv4-32)"
                )))
            }
        };
        let pooled_blocks = if image_size.0.min(image_size.1) >= 80 {
            4
        } else {
            3
        };
        Ok(BackboneConfig {
            channels,
            pooled_blocks,
            image_size,
            ..Default::default()
        })
    }

    /// Sets an `hw×hw` region grid, pooling less often when the native map
    /// would be smaller than the grid.
    pub fn with_grid(mut self, hw: usize) -> Result<Self> {
        if hw == 0 {
            return Err(Error::Invalid("region grid must be at least 1x1".into()));
        }
        while self.pooled_blocks > 0 && {
            let (h, w) = self.native_size();
            h.min(w) < hw
        } {
            self.pooled_blocks -= 1;
        }
        self.output_size = Some((hw, hw));
        self.validate()?;
        Ok(self)
    }

    /// Spatial size after the convolutional blocks, before adaptive pooling.
    pub fn native_size(&self) -> (usize, usize) {
        let (mut h, mut w) = self.image_size;
        for _ in 0..self.pooled_blocks.min(self.blocks) {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Region grid `(h, w)` of the produced feature maps.
    pub fn output_hw(&self) -> (usize, usize) {
        self.output_size.unwrap_or_else(|| self.native_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Invalid(
                "backbone needs at least one block and channel".into(),
            ));
        }
        if self.pooled_blocks > self.blocks {
            return Err(Error::Invalid("more pooled blocks than blocks".into()));
        }
        let (nh, nw) = self.native_size();
        if nh == 0 || nw == 0 {
            return Err(Error::Invalid(format!(
                "image {:?} too small for {} pools",
                self.image_size, self.pooled_blocks
            )));
        }
        if let Some((h, w)) = self.output_size {
            if h == 0 || w == 0 || h > nh || w > nw {
                return Err(Error::Invalid(format!(
                    "output grid {h}x{w} must lie within 1x1..{nh}x{nw}"
                )));
            }
        }
        Ok(())
    }
}

/// A `C×h×w` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub source: Option<usize>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 3 {
            return shape_err(
                "feature_map",
                format!("expected [C, h, w], got {:?}", values.shape()),
            );
        }
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "feature_map" });
        }
        Ok(FeatureMap {
            values,
            source: None,
        })
    }

    pub fn with_source(mut self, id: usize) -> Self {
        self.source = Some(id);
        self
    }

    /// `(C, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { config })
    }

    fn block_name(i: usize) -> String {
        format!("backbone.block{i}")
    }

    pub fn register<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) -> Result<()> {
        let mut c_in = self.config.in_channels;
        for i in 0..self.config.blocks {
            let name = Self::block_name(i);
            layers::init_conv(
                params,
                &format!("{name}.conv"),
                self.config.channels,
                c_in,
                3,
                rng,
            )?;
            layers::init_batch_norm(params, &format!("{name}.bn"), self.config.channels)?;
            c_in = self.config.channels;
        }
        Ok(())
    }

    /// Maps a batch `[N, 3, H, W]` to features `[N, C, h, w]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        let (ih, iw) = self.config.image_size;
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || (shape[2], shape[3]) != (ih, iw)
        {
            return shape_err(
                "backbone",
                format!(
                    "expected [N, {}, {ih}, {iw}], got {shape:?}",
                    self.config.in_channels
                ),
            );
        }
        let mut x = images;
        for i in 0..self.config.blocks {
            let name = Self::block_name(i);
            let k = g.param(&format!("{name}.conv.weight"))?;
            x = g.conv2d(x, k, None, 1, 1)?;
            x = layers::batch_norm(g, x, &format!("{name}.bn"))?;
            x = g.relu(x)?;
            if i < self.config.pooled_blocks {
                x = g.max_pool2d(x, 2, 2)?;
            }
        }
        if let Some((h, w)) = self.config.output_size {
            x = g.adaptive_avg_pool2d(x, h, w)?;
        }
        Ok(x)
    }

    /// Feature map of a single `3×H×W` image with values in `[0, 1]`,
    /// using running batch-norm statistics.
    pub fn extract<T: Real>(
        &self,
        params: &ParamSet<T>,
        image: &Tensor<T>,
    ) -> Result<FeatureMap<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return shape_err(
                "extract",
                format!(
                    "expected a {}-channel image, got {s:?}",
                    self.config.in_channels
                ),
            );
        }
        if image.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        let mut g = Graph::new(params, false);
        let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let y = self.forward(&mut g, x)?;
        let v = g.value(y).clone();
        let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
        FeatureMap::new(v.reshape(&[c, h, w])?)
    }
}

/// Adaptive average pooling of a feature map down to `h'×w'`.
pub fn resize_spatial<T: Real>(
    map: &FeatureMap<T>,
    target: (usize, usize),
) -> Result<FeatureMap<T>> {
    let (_, h, w) = map.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::Invalid(format!(
            "cannot resize {h}x{w} to {th}x{tw}: only downsizing is supported"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(map.clone());
    }
    let mut tape = crate::tensor::Tape::new();
    let x = tape.constant(map.values.clone());
    let y = tape.adaptive_avg_pool2d(x, th, tw)?;
    Ok(FeatureMap {
        values: tape.value(y).clone(),
        source: map.source,
    })
}
