//! Region weighting and the final similarity `s = Wᵀ P`.
//!
//! Three weight sources are supported: a fixed uniform weight, a single
//! learnable positive weight shared by all tasks, and the region meta
//! learner, which reads the channel concatenation `[support, query]` through
//! two `1×1 conv → batch-norm → relu` blocks and emits one weight per cell.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{shape_err, Error, Result};
use crate::layers;
use crate::matcher::RegionScores;
use crate::tensor::{cast, Graph, ParamSet, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Fixed,
    Learnable,
    Meta,
}

impl HeadKind {
    pub fn flag(self) -> &'static str {
        match self {
            HeadKind::Fixed => "fixed",
            HeadKind::Learnable => "learnable",
            HeadKind::Meta => "meta",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(HeadKind::Fixed),
            "learnable" => Ok(HeadKind::Learnable),
            "meta" => Ok(HeadKind::Meta),
            other => Err(Error::Invalid(format!(
                "unknown head `{other}` (expected fixed|learnable|meta)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaLearnerConfig {
    /// Channels of the concatenated pair, `2·C`.
    pub in_channels: usize,
    pub hidden: usize,
}

impl MetaLearnerConfig {
    pub fn for_feature_channels(c: usize) -> Self {
        MetaLearnerConfig {
            in_channels: 2 * c,
            hidden: 64,
        }
    }
}

/// Nonnegative per-region weights for one support/query pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeight<T> {
    pub values: Tensor<T>,
    pub provenance: HeadKind,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SimilarityScore<T>(pub T);

const RAW_WEIGHT: &str = "explainer.raw_weight";

#[derive(Clone, Debug)]
pub struct Explainer {
    pub head: HeadKind,
    pub meta: MetaLearnerConfig,
    /// Region grid `(h, w)`.
    pub grid: (usize, usize),
}

impl Explainer {
    pub fn new(head: HeadKind, meta: MetaLearnerConfig, grid: (usize, usize)) -> Self {
        Explainer { head, meta, grid }
    }

    pub fn regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn register<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) -> Result<()> {
        match self.head {
            HeadKind::Fixed => {}
            HeadKind::Learnable => {
                params.insert(RAW_WEIGHT, Tensor::zeros(&[self.regions()]), true)?;
            }
            HeadKind::Meta => {
                let MetaLearnerConfig {
                    in_channels,
                    hidden,
                } = self.meta;
                layers::init_conv(params, "explainer.block0.conv", hidden, in_channels, 1, rng)?;
                params.insert("explainer.block0.conv.bias", Tensor::zeros(&[hidden]), true)?;
                layers::init_batch_norm(params, "explainer.block0.bn", hidden)?;
                layers::init_conv(params, "explainer.block1.conv", 1, hidden, 1, rng)?;
                params.insert("explainer.block1.conv.bias", Tensor::zeros(&[1]), true)?;
                layers::init_batch_norm(params, "explainer.block1.bn", 1)?;
                // Start near the uniform weight 1/(h·w) with a small spread.
                let uniform = 1.0 / self.regions() as f64;
                *params.get_mut("explainer.block1.bn.gamma")? =
                    Tensor::full(&[1], cast(0.5 * uniform));
                *params.get_mut("explainer.block1.bn.beta")? = Tensor::full(&[1], cast(uniform));
            }
        }
        Ok(())
    }

    /// Region weights for all pairs of `support [Ns, C, h, w]` and
    /// `query [Nq, C, h, w]`. Fixed and learnable heads return one shared
    /// `[h·w]` vector; the meta head returns `[Ns, Nq, h·w]`.
    pub fn weights<T: Real>(&self, g: &mut Graph<'_, T>, support: Var, query: Var) -> Result<Var> {
        let hw = self.regions();
        match self.head {
            HeadKind::Fixed => {
                let w = Tensor::full(&[hw], T::one() / cast(hw as f64));
                Ok(g.constant(w))
            }
            HeadKind::Learnable => {
                let raw = g.param(RAW_WEIGHT)?;
                if g.shape(raw) != [hw] {
                    return shape_err("learnable_weight", format!("raw weight must be [{hw}]"));
                }
                g.softplus(raw)
            }
            HeadKind::Meta => self.meta_weights(g, support, query),
        }
    }

    fn meta_weights<T: Real>(&self, g: &mut Graph<'_, T>, support: Var, query: Var) -> Result<Var> {
        let (ss, qs) = (g.shape(support).to_vec(), g.shape(query).to_vec());
        if ss.len() != 4 || qs.len() != 4 || ss[1..] != qs[1..] {
            return shape_err("meta_weight", format!("support {ss:?} vs query {qs:?}"));
        }
        if 2 * ss[1] != self.meta.in_channels {
            return shape_err(
                "meta_weight",
                format!(
                    "meta learner expects {} input channels, pair has {}",
                    self.meta.in_channels,
                    2 * ss[1]
                ),
            );
        }
        if (ss[2], ss[3]) != self.grid {
            return shape_err(
                "meta_weight",
                format!(
                    "feature grid {:?} != configured {:?}",
                    (ss[2], ss[3]),
                    self.grid
                ),
            );
        }
        let (ns, nq) = (ss[0], qs[0]);
        let s_idx: Vec<usize> = (0..ns).flat_map(|s| std::iter::repeat_n(s, nq)).collect();
        let q_idx: Vec<usize> = (0..ns).flat_map(|_| 0..nq).collect();
        let s_rep = g.index_select(support, &s_idx)?;
        let q_rep = g.index_select(query, &q_idx)?;
        let mut x = g.concat(&[s_rep, q_rep], 1)?;
        for block in 0..2 {
            let name = format!("explainer.block{block}");
            let k = g.param(&format!("{name}.conv.weight"))?;
            let b = g.param(&format!("{name}.conv.bias"))?;
            x = g.conv2d(x, k, Some(b), 1, 0)?;
            x = layers::batch_norm(g, x, &format!("{name}.bn"))?;
            x = g.relu(x)?;
        }
        g.reshape(x, &[ns, nq, self.regions()])
    }

    /// Final similarities `[Ns, Nq]` from region scores `[Ns, Nq, h·w]`.
    pub fn combine<T: Real>(&self, g: &mut Graph<'_, T>, weights: Var, scores: Var) -> Result<Var> {
        let weighted = g.mul(scores, weights)?;
        g.sum_last(weighted)
    }
}

/// Meta-generated weight for one pair, using running batch-norm statistics.
pub fn meta_weight<T: Real>(
    explainer: &Explainer,
    params: &ParamSet<T>,
    support: &FeatureMap<T>,
    query: &FeatureMap<T>,
) -> Result<RegionWeight<T>> {
    if explainer.head != HeadKind::Meta {
        return Err(Error::Invalid("meta_weight needs the meta head".into()));
    }
    if support.dims() != query.dims() {
        return shape_err(
            "meta_weight",
            format!("support {:?} vs query {:?}", support.dims(), query.dims()),
        );
    }
    let (c, h, w) = support.dims();
    let mut g = Graph::new(params, false);
    let s = g.constant(support.values.clone().reshape(&[1, c, h, w])?);
    let q = g.constant(query.values.clone().reshape(&[1, c, h, w])?);
    let out = explainer.weights(&mut g, s, q)?;
    Ok(RegionWeight {
        values: g.value(out).clone().reshape(&[h * w])?,
        provenance: HeadKind::Meta,
    })
}

/// Uniform weight `1/(h·w)`.
pub fn fixed_weight<T: Real>(h: usize, w: usize) -> Result<RegionWeight<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid("grid must be at least 1x1".into()));
    }
    Ok(RegionWeight {
        values: Tensor::full(&[h * w], T::one() / cast((h * w) as f64)),
        provenance: HeadKind::Fixed,
    })
}

/// `softplus(raw)` of the learnable head's parameters.
pub fn learnable_weight<T: Real>(params: &ParamSet<T>) -> Result<RegionWeight<T>> {
    let raw = params.get(RAW_WEIGHT)?;
    Ok(RegionWeight {
        values: raw.map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p()),
        provenance: HeadKind::Learnable,
    })
}

/// Per-region contributions `w_i · P_i`; they sum to the final score.
pub fn contributions<T: Real>(
    weight: &RegionWeight<T>,
    scores: &RegionScores<T>,
) -> Result<Vec<T>> {
    let (w, p) = (weight.values.data(), scores.values.data());
    if w.len() != p.len() {
        return shape_err(
            "combine",
            format!("{} weights for {} region scores", w.len(), p.len()),
        );
    }
    Ok(w.iter().zip(p).map(|(&a, &b)| a * b).collect())
}

/// `s = Wᵀ P`.
pub fn combine<T: Real>(
    weight: &RegionWeight<T>,
    scores: &RegionScores<T>,
) -> Result<SimilarityScore<T>> {
    Ok(SimilarityScore(
        contributions(weight, scores)?.into_iter().sum(),
    ))
}
