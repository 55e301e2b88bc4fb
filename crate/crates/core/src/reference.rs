//! Scalar-loop reference implementations of the network stages.
//!
//! Each function recomputes one stage element by element, in 64-bit, with
//! no shared code beyond parameter lookup. They are slow and exist to
//! cross-check the batched kernels.

use crate::episodes::Episode;
use crate::error::{shape_err, Result};
use crate::explainer::HeadKind;
use crate::layers::BN_EPS;
use crate::matcher::{MetricKind, RegionSimilarityMap, SimilarityMetric};
use crate::model::RcnModel;
use crate::tensor::{Graph, ParamSet, Tensor};

pub fn metric(m: &SimilarityMetric, a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb, mut d2) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
        d2 += (a[k] - b[k]) * (a[k] - b[k]);
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    match m.kind {
        MetricKind::Cosine if na < m.eps || nb < m.eps => 0.0,
        MetricKind::Cosine => dot / (na * nb),
        MetricKind::Tanimoto if na < m.eps || nb < m.eps => 0.0,
        MetricKind::Tanimoto if na * nb - dot < m.eps => 1.0,
        MetricKind::Tanimoto => dot / (na * nb - dot),
        MetricKind::ExpNegDist => (-d2.sqrt()).exp(),
        MetricKind::InvOnePlusDist => 1.0 / (1.0 + d2.sqrt()),
    }
}

/// Channel column at `cell` of item `n` in an `[N, C, h, w]` tensor.
pub fn column(t: &Tensor<f64>, n: usize, cell: usize) -> Vec<f64> {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    (0..c)
        .map(|ch| t.data()[(n * c + ch) * hw + cell])
        .collect()
}

/// Similarity maps `[Ns, Nq, hw, hw]` and max-pooled region scores
/// `[Ns, Nq, hw]` for every support/query pair.
pub fn match_pairs(
    m: &SimilarityMetric,
    support: &Tensor<f64>,
    query: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if support.ndim() != 4 || query.ndim() != 4 || support.shape()[1..] != query.shape()[1..] {
        return shape_err(
            "reference match",
            format!("{:?} vs {:?}", support.shape(), query.shape()),
        );
    }
    let (ns, nq, hw) = (
        support.shape()[0],
        query.shape()[0],
        support.shape()[2] * support.shape()[3],
    );
    let mut maps = Vec::with_capacity(ns * nq * hw * hw);
    let mut scores = Vec::with_capacity(ns * nq * hw);
    for s in 0..ns {
        for q in 0..nq {
            for i in 0..hw {
                let a = column(support, s, i);
                let mut best = f64::NEG_INFINITY;
                for j in 0..hw {
                    let v = metric(m, &a, &column(query, q, j));
                    best = best.max(v);
                    maps.push(v);
                }
                scores.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[ns, nq, hw, hw], maps)?,
        Tensor::new(&[ns, nq, hw], scores)?,
    ))
}

/// `s = Σ_i w_i · P_i` per pair; `weights` is shared `[hw]` or per pair
/// `[Ns, Nq, hw]`.
pub fn combine(weights: &Tensor<f64>, scores: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (ns, nq, hw) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let shared = weights.shape() == [hw];
    if !shared && weights.shape() != scores.shape() {
        return shape_err(
            "reference combine",
            format!("{:?} vs {:?}", weights.shape(), scores.shape()),
        );
    }
    let mut out = Vec::with_capacity(ns * nq);
    for s in 0..ns {
        for q in 0..nq {
            let mut total = 0.0;
            for i in 0..hw {
                let w = if shared {
                    weights.get(&[i])
                } else {
                    weights.get(&[s, q, i])
                };
                total += w * scores.get(&[s, q, i]);
            }
            out.push(total);
        }
    }
    Tensor::new(&[ns, nq], out)
}

/// Region activation values before upsampling: `Σ_i w_i · exp(2·S_i)`.
pub fn ram_values(weight: &[f64], maps: &[RegionSimilarityMap<f64>]) -> Result<Tensor<f64>> {
    if maps.is_empty() || weight.len() != maps.len() {
        return shape_err(
            "reference ram",
            format!("{} weights, {} maps", weight.len(), maps.len()),
        );
    }
    let (h, w) = (maps[0].values.shape()[0], maps[0].values.shape()[1]);
    let mut out = vec![0.0; h * w];
    for a in 0..h {
        for b in 0..w {
            for (i, m) in maps.iter().enumerate() {
                out[a * w + b] += weight[i] * (2.0 * m.values.get(&[a, b])).exp();
            }
        }
    }
    Tensor::new(&[h, w], out)
}

/// Batch normalization over rows using the statistics of the rows.
fn batch_norm_rows(x: &mut [Vec<f64>], gamma: &[f64], beta: &[f64]) {
    let n = x.len() as f64;
    for ch in 0..gamma.len() {
        let mean = x.iter().map(|r| r[ch]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[ch] - mean).powi(2)).sum::<f64>() / n;
        for r in x.iter_mut() {
            r[ch] = gamma[ch] * (r[ch] - mean) / (var + BN_EPS).sqrt() + beta[ch];
        }
    }
}

/// Meta-head weights `[Ns, Nq, hw]` with training-mode batch statistics
/// taken over every (pair, cell).
pub fn meta_weights_train(
    params: &ParamSet<f64>,
    support: &Tensor<f64>,
    query: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (ns, nq, hw) = (
        support.shape()[0],
        query.shape()[0],
        support.shape()[2] * support.shape()[3],
    );
    let p = |name: &str| {
        params
            .get(&format!("explainer.{name}"))
            .map(|t| t.data().to_vec())
    };
    let (k0, b0, g0, be0) = (
        p("block0.conv.weight")?,
        p("block0.conv.bias")?,
        p("block0.bn.gamma")?,
        p("block0.bn.beta")?,
    );
    let (k1, b1, g1, be1) = (
        p("block1.conv.weight")?,
        p("block1.conv.bias")?,
        p("block1.bn.gamma")?,
        p("block1.bn.beta")?,
    );
    let hidden = b0.len();
    let mut rows = Vec::with_capacity(ns * nq * hw);
    for s in 0..ns {
        for q in 0..nq {
            for cell in 0..hw {
                let mut x = column(support, s, cell);
                x.extend(column(query, q, cell));
                let inputs = x.len();
                rows.push(
                    (0..hidden)
                        .map(|o| {
                            b0[o] + (0..inputs).map(|i| k0[o * inputs + i] * x[i]).sum::<f64>()
                        })
                        .collect::<Vec<f64>>(),
                );
            }
        }
    }
    batch_norm_rows(&mut rows, &g0, &be0);
    let mut out: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![b1[0] + (0..hidden).map(|o| k1[o] * r[o].max(0.0)).sum::<f64>()])
        .collect();
    batch_norm_rows(&mut out, &g1, &be1);
    Tensor::new(
        &[ns, nq, hw],
        out.into_iter().map(|r| r[0].max(0.0)).collect(),
    )
}

/// Training-mode episode loss `Σ (s − 1[same class])²` recomputed pair by
/// pair. Backbone features come from the model itself.
pub fn episode_loss(model: &RcnModel<f64>, images: &Tensor<f64>, episode: &Episode) -> Result<f64> {
    let mut g = Graph::new(&model.params, true);
    let x = g.constant(images.clone());
    let f = model.backbone.forward(&mut g, x)?;
    let f = g.value(f);
    let (ns, nq) = (episode.support.len(), episode.query.len());
    let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let cut = ns * c * h * w;
    let support = Tensor::new(&[ns, c, h, w], f.data()[..cut].to_vec())?;
    let query = Tensor::new(&[nq, c, h, w], f.data()[cut..].to_vec())?;
    let hw = h * w;
    let weights = match model.head() {
        HeadKind::Fixed => Tensor::full(&[hw], 1.0 / hw as f64),
        HeadKind::Learnable => model
            .params
            .get("explainer.raw_weight")?
            .map(|r| (1.0 + r.exp()).ln()),
        HeadKind::Meta => meta_weights_train(&model.params, &support, &query)?,
    };
    let (_, scores) = match_pairs(&model.config.metric, &support, &query)?;
    let s = combine(&weights, &scores)?;
    let mut loss = 0.0;
    for i in 0..ns {
        for j in 0..nq {
            let target = if episode.support_label(i) == episode.query_label(j) {
                1.0
            } else {
                0.0
            };
            loss += (s.get(&[i, j]) - target).powi(2);
        }
    }
    Ok(loss)
}
