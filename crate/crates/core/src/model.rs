//! The full network: feature extractor, region matcher and explain network.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::error::{shape_err, Error, Result};
use crate::explainer::{Explainer, HeadKind, MetaLearnerConfig, RegionWeight};
use crate::matcher::{Matcher, RegionScores, RegionSimilarityMap, SimilarityMetric};
use crate::tensor::{cast, Graph, ParamSet, Real, Tensor, Var};

pub const MODEL_FILE: &str = "model.json";

/// How the scores of a class's K support samples are pooled at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub metric: SimilarityMetric,
    pub meta: MetaLearnerConfig,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, head: HeadKind, metric: SimilarityMetric) -> Self {
        let meta = MetaLearnerConfig::for_feature_channels(backbone.channels);
        ModelConfig {
            backbone,
            head,
            metric,
            meta,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.backbone.output_hw()
    }
}

/// Everything computed for the support/query pairs of one batch.
#[derive(Clone, Copy, Debug)]
pub struct PairForward {
    /// `[Ns, C, h, w]`
    pub support_features: Var,
    /// `[Nq, C, h, w]`
    pub query_features: Var,
    /// `[Ns, Nq, h·w, h·w]`
    pub maps: Var,
    /// `[Ns, Nq, h·w]`
    pub region_scores: Var,
    /// `[h·w]` (shared) or `[Ns, Nq, h·w]` (meta head)
    pub weights: Var,
    /// `[Ns, Nq]`
    pub scores: Var,
}

/// Intermediate quantities for a single support/query pair.
#[derive(Clone, Debug)]
pub struct PairAnalysis<T> {
    pub region_scores: RegionScores<T>,
    pub maps: Vec<RegionSimilarityMap<T>>,
    pub weight: RegionWeight<T>,
    pub score: T,
}

#[derive(Clone, Debug)]
pub struct RcnModel<T: Real> {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub matcher: Matcher,
    pub explainer: Explainer,
    pub params: ParamSet<T>,
}

/// Stacks `3×H×W` images into a `[N, 3, H, W]` tensor of element type `T`.
pub fn stack_images<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return shape_err("stack_images", "no images");
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return shape_err("stack_images", format!("{:?} vs {:?}", img.shape(), shape));
        }
        data.extend(img.data().iter().map(|&v| cast::<T>(v as f64)));
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

impl<T: Real> RcnModel<T> {
    fn assemble(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone())?;
        if config.meta.in_channels != 2 * config.backbone.channels {
            return Err(Error::Invalid(format!(
                "meta learner input {} must be twice the feature channels {}",
                config.meta.in_channels, config.backbone.channels
            )));
        }
        Ok(RcnModel {
            matcher: Matcher::new(config.metric),
            explainer: Explainer::new(config.head, config.meta, config.grid()),
            backbone,
            config,
            params,
        })
    }

    /// Freshly initialized model; parameters depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::assemble(config, ParamSet::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.backbone.register(&mut model.params, &mut rng)?;
        model.matcher.register(&mut model.params);
        model.explainer.register(&mut model.params, &mut rng)?;
        Ok(model)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let fresh = Self::new(config.clone(), 0)?;
        for p in fresh.params.iter() {
            let have = params.get(&p.name)?;
            if have.shape() != p.value.shape() {
                return shape_err(
                    "load",
                    format!(
                        "{}: {:?} vs expected {:?}",
                        p.name,
                        have.shape(),
                        p.value.shape()
                    ),
                );
            }
        }
        Self::assemble(config, params)
    }

    pub fn cast<U: Real>(&self) -> RcnModel<U> {
        RcnModel {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            matcher: self.matcher,
            explainer: self.explainer.clone(),
            params: self.params.cast(),
        }
    }

    /// Writes `model.json` plus the parameter manifest and files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        fs::write(
            dir.join(MODEL_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format {
            path: path.clone(),
            message: format!("cannot read model config: {e}"),
        })?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Self::from_params(config, ParamSet::load(dir)?)
    }

    /// Runs a batch of `ns` support images followed by query images through
    /// the network. Batch-norm statistics span the whole batch in training.
    pub fn forward_pairs(
        &self,
        g: &mut Graph<'_, T>,
        images: Var,
        ns: usize,
    ) -> Result<PairForward> {
        let n = g.shape(images)[0];
        if ns == 0 || ns >= n {
            return shape_err("forward", format!("{ns} support images in a batch of {n}"));
        }
        let features = self.backbone.forward(g, images)?;
        let support_idx: Vec<usize> = (0..ns).collect();
        let query_idx: Vec<usize> = (ns..n).collect();
        let support_features = g.index_select(features, &support_idx)?;
        let query_features = g.index_select(features, &query_idx)?;
        self.forward_features(g, support_features, query_features)
    }

    /// Matching and weighting on precomputed feature maps.
    pub fn forward_features(
        &self,
        g: &mut Graph<'_, T>,
        support_features: Var,
        query_features: Var,
    ) -> Result<PairForward> {
        let maps = self
            .matcher
            .similarity_maps(g, support_features, query_features)?;
        let region_scores = self.matcher.pool(g, maps)?;
        let weights = self
            .explainer
            .weights(g, support_features, query_features)?;
        let scores = self.explainer.combine(g, weights, region_scores)?;
        Ok(PairForward {
            support_features,
            query_features,
            maps,
            region_scores,
            weights,
            scores,
        })
    }

    /// Squared error summed over all pairs.
    pub fn pair_loss(&self, g: &mut Graph<'_, T>, scores: Var, targets: Tensor<T>) -> Result<Var> {
        let t = g.constant(targets);
        let d = g.sub(scores, t)?;
        let sq = g.square(d)?;
        g.sum(sq)
    }

    /// Feature maps for images, in evaluation mode.
    pub fn features(&self, images: &[&Tensor<f32>]) -> Result<Vec<FeatureMap<T>>> {
        let mut g = Graph::new(&self.params, false);
        let x = g.constant(stack_images(images)?);
        let f = self.backbone.forward(&mut g, x)?;
        let v = g.value(f);
        let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
        v.data()
            .chunks(c * h * w)
            .map(|chunk| FeatureMap::new(Tensor::new(&[c, h, w], chunk.to_vec())?))
            .collect()
    }

    /// Scores, maps and weight for one pair of feature maps (evaluation mode).
    pub fn analyze_features(
        &self,
        support: &FeatureMap<T>,
        query: &FeatureMap<T>,
    ) -> Result<PairAnalysis<T>> {
        let (c, h, w) = support.dims();
        if query.dims() != (c, h, w) {
            return shape_err(
                "analyze",
                format!("support {:?} vs query {:?}", support.dims(), query.dims()),
            );
        }
        let hw = h * w;
        let mut g = Graph::new(&self.params, false);
        let s = g.constant(support.values.clone().reshape(&[1, c, h, w])?);
        let q = g.constant(query.values.clone().reshape(&[1, c, h, w])?);
        let out = self.forward_features(&mut g, s, q)?;
        let maps = g
            .value(out.maps)
            .data()
            .chunks(hw)
            .enumerate()
            .map(|(i, m)| {
                Ok(RegionSimilarityMap {
                    index: i,
                    values: Tensor::new(&[h, w], m.to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairAnalysis {
            region_scores: RegionScores {
                values: g.value(out.region_scores).clone().reshape(&[hw])?,
            },
            maps,
            weight: RegionWeight {
                values: g.value(out.weights).clone().reshape(&[hw])?,
                provenance: self.config.head,
            },
            score: g.value(out.scores).item()?,
        })
    }

    pub fn analyze_pair(
        &self,
        support: &Tensor<f32>,
        query: &Tensor<f32>,
    ) -> Result<PairAnalysis<T>> {
        let feats = self.features(&[support, query])?;
        self.analyze_features(&feats[0], &feats[1])
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }
}
