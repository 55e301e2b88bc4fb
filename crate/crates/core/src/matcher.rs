//! Parameter-free region matching.
//!
//! The support feature map is split into `h·w` region vectors (row-major).
//! Each region is compared against every spatial column of the query map,
//! giving one `h×w` similarity map per region; the maximum of each map is
//! that region's score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{cast, CustomBackward, ParamSet, Real, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Cosine,
    /// `a·b / (‖a‖‖b‖ − a·b)`.
    Tanimoto,
    /// `exp(−‖a − b‖)`.
    ExpNegDist,
    /// `1 / (1 + ‖a − b‖)`.
    InvOnePlusDist,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Cosine,
        MetricKind::Tanimoto,
        MetricKind::ExpNegDist,
        MetricKind::InvOnePlusDist,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::Tanimoto => "tanimoto",
            MetricKind::ExpNegDist => "expdist",
            MetricKind::InvOnePlusDist => "invdist",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.flag() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown metric `{s}` (expected cosine|tanimoto|expdist|invdist)"
                ))
            })
    }
}

/// A vector similarity with its singularity guard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    pub eps: f64,
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric::new(MetricKind::Cosine)
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

impl SimilarityMetric {
    pub fn new(kind: MetricKind) -> Self {
        SimilarityMetric {
            kind,
            eps: DEFAULT_EPS,
        }
    }

    /// Similarity of two equal-length vectors.
    ///
    /// Guards: cosine and Tanimoto return 0 when either vector has norm below
    /// `eps`; Tanimoto returns 1 when its denominator `‖a‖‖b‖ − a·b` falls
    /// below `eps` (parallel vectors).
    pub fn eval<T: Real>(&self, a: &[T], b: &[T]) -> T {
        self.eval_with_norms(a, b, norm(a), norm(b))
    }

    fn eval_with_norms<T: Real>(&self, a: &[T], b: &[T], na: T, nb: T) -> T {
        let eps: T = cast(self.eps);
        match self.kind {
            MetricKind::Cosine => {
                if na < eps || nb < eps {
                    T::zero()
                } else {
                    dot(a, b) / (na * nb)
                }
            }
            MetricKind::Tanimoto => {
                if na < eps || nb < eps {
                    return T::zero();
                }
                let d = dot(a, b);
                let den = na * nb - d;
                if den < eps {
                    T::one()
                } else {
                    d / den
                }
            }
            MetricKind::ExpNegDist => (-dist(a, b)).exp(),
            MetricKind::InvOnePlusDist => T::one() / (T::one() + dist(a, b)),
        }
    }

    /// Adds `g · ∂sim/∂a` into `da` and `g · ∂sim/∂b` into `db`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_grad<T: Real>(
        &self,
        a: &[T],
        b: &[T],
        na: T,
        nb: T,
        value: T,
        g: T,
        da: &mut [T],
        db: &mut [T],
    ) {
        let eps: T = cast(self.eps);
        match self.kind {
            MetricKind::Cosine => {
                if na < eps || nb < eps {
                    return;
                }
                let inv = T::one() / (na * nb);
                let (ka, kb) = (value / (na * na), value / (nb * nb));
                for i in 0..a.len() {
                    da[i] += g * (b[i] * inv - ka * a[i]);
                    db[i] += g * (a[i] * inv - kb * b[i]);
                }
            }
            MetricKind::Tanimoto => {
                if na < eps || nb < eps {
                    return;
                }
                let d = dot(a, b);
                let den = na * nb - d;
                if den < eps {
                    return;
                }
                let k = g / (den * den);
                for i in 0..a.len() {
                    da[i] += k * nb * (b[i] * na - d * a[i] / na);
                    db[i] += k * na * (a[i] * nb - d * b[i] / nb);
                }
            }
            MetricKind::ExpNegDist | MetricKind::InvOnePlusDist => {
                let r = dist(a, b);
                if r <= T::zero() {
                    return;
                }
                // d value / d r
                let dv = match self.kind {
                    MetricKind::ExpNegDist => -value,
                    _ => -value * value,
                };
                let k = g * dv / r;
                for i in 0..a.len() {
                    let diff = a[i] - b[i];
                    da[i] += k * diff;
                    db[i] -= k * diff;
                }
            }
        }
    }
}

/// One region of a support feature map: its channel column.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionVector<T> {
    /// Zero-based row-major cell index.
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub values: Vec<T>,
}

/// Similarity of one support region against every query cell, `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSimilarityMap<T> {
    pub index: usize,
    pub values: Tensor<T>,
}

/// Global-max-pooled region similarities, one per support region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionScores<T> {
    pub values: Tensor<T>,
}

/// Splits a `C×h×w` map into `h·w` region vectors in row-major order.
pub fn decompose<T: Real>(map: &FeatureMap<T>) -> Vec<RegionVector<T>> {
    let (c, h, w) = map.dims();
    let data = map.values.data();
    (0..h * w)
        .map(|i| RegionVector {
            index: i,
            row: i / w,
            col: i % w,
            values: (0..c).map(|ch| data[ch * h * w + i]).collect(),
        })
        .collect()
}

/// Inverse of [`decompose`].
pub fn reassemble<T: Real>(regions: &[RegionVector<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    if regions.len() != h * w || regions.is_empty() {
        return shape_err(
            "reassemble",
            format!("{} regions for a {h}x{w} grid", regions.len()),
        );
    }
    let c = regions[0].values.len();
    let mut data = vec![T::zero(); c * h * w];
    for r in regions {
        for (ch, &v) in r.values.iter().enumerate() {
            data[ch * h * w + r.index] = v;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn similarity_map<T: Real>(
    region: &RegionVector<T>,
    query: &FeatureMap<T>,
    metric: &SimilarityMetric,
) -> Result<RegionSimilarityMap<T>> {
    let (c, h, w) = query.dims();
    if region.values.len() != c {
        return shape_err(
            "similarity_map",
            format!("region has {} channels, query has {c}", region.values.len()),
        );
    }
    let cells = decompose(query);
    let values = cells
        .iter()
        .map(|q| metric.eval(&region.values, &q.values))
        .collect();
    Ok(RegionSimilarityMap {
        index: region.index,
        values: Tensor::new(&[h, w], values)?,
    })
}

/// Matches a single support/query pair: region scores plus the similarity
/// maps they were pooled from.
pub fn match_regions<T: Real>(
    support: &FeatureMap<T>,
    query: &FeatureMap<T>,
    metric: &SimilarityMetric,
) -> Result<(RegionScores<T>, Vec<RegionSimilarityMap<T>>)> {
    if support.dims() != query.dims() {
        return shape_err(
            "match",
            format!("support {:?} vs query {:?}", support.dims(), query.dims()),
        );
    }
    let maps = decompose(support)
        .iter()
        .map(|r| similarity_map(r, query, metric))
        .collect::<Result<Vec<_>>>()?;
    let scores = maps
        .iter()
        .map(|m| {
            m.values
                .data()
                .iter()
                .copied()
                .fold(T::neg_infinity(), T::max)
        })
        .collect();
    Ok((
        RegionScores {
            values: Tensor::new(&[maps.len()], scores)?,
        },
        maps,
    ))
}

/// The region matching stage as a network component. It owns no
/// parameters; registration is a no-op kept for symmetry with the other
/// components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Matcher {
    pub metric: SimilarityMetric,
}

impl Matcher {
    pub fn new(metric: SimilarityMetric) -> Self {
        Matcher { metric }
    }

    pub fn register<T: Real>(&self, _params: &mut ParamSet<T>) -> usize {
        0
    }

    /// Similarity maps for every support/query pair.
    ///
    /// `support` is `[Ns, C, h, w]`, `query` is `[Nq, C, h, w]`; the result
    /// is `[Ns, Nq, h·w, h·w]` with entry `[s, q, i, j]` the similarity of
    /// support region `i` and query cell `j`.
    pub fn similarity_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        support: Var,
        query: Var,
    ) -> Result<Var> {
        let (ss, qs) = (tape.shape(support).to_vec(), tape.shape(query).to_vec());
        if ss.len() != 4 || qs.len() != 4 || ss[1..] != qs[1..] {
            return shape_err("match", format!("support {ss:?} vs query {qs:?}"));
        }
        let (ns, nq, c, hw) = (ss[0], qs[0], ss[1], ss[2] * ss[3]);
        let sv = columns(tape.value(support).data(), ns, c, hw);
        let qv = columns(tape.value(query).data(), nq, c, hw);
        let sn: Vec<T> = sv.chunks(c).map(norm).collect();
        let qn: Vec<T> = qv.chunks(c).map(norm).collect();
        let mut out = Vec::with_capacity(ns * nq * hw * hw);
        for s in 0..ns {
            for q in 0..nq {
                for i in 0..hw {
                    let a = &sv[(s * hw + i) * c..(s * hw + i + 1) * c];
                    for j in 0..hw {
                        let b = &qv[(q * hw + j) * c..(q * hw + j + 1) * c];
                        out.push(
                            self.metric
                                .eval_with_norms(a, b, sn[s * hw + i], qn[q * hw + j]),
                        );
                    }
                }
            }
        }
        let value = Tensor::new(&[ns, nq, hw, hw], out)?;
        tape.custom(
            &[support, query],
            value,
            Box::new(PairwiseBackward {
                metric: self.metric,
                dims: (ns, nq, c, hw),
            }),
        )
    }

    /// Region scores `[Ns, Nq, h·w]` from similarity maps.
    pub fn pool<T: Real>(&self, tape: &mut Tape<T>, maps: Var) -> Result<Var> {
        tape.max_last(maps, 1)
    }
}

/// `[N, C, hw]` → `[N, hw, C]`.
fn columns<T: Real>(data: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * hw * c];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                out[(b * hw + i) * c + ch] = data[(b * c + ch) * hw + i];
            }
        }
    }
    out
}

struct PairwiseBackward {
    metric: SimilarityMetric,
    dims: (usize, usize, usize, usize),
}

impl<T: Real> CustomBackward<T> for PairwiseBackward {
    fn name(&self) -> &'static str {
        "region_similarity"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
    ) -> Vec<Option<Vec<T>>> {
        let (ns, nq, c, hw) = self.dims;
        let sv = columns(inputs[0].data(), ns, c, hw);
        let qv = columns(inputs[1].data(), nq, c, hw);
        let sn: Vec<T> = sv.chunks(c).map(norm).collect();
        let qn: Vec<T> = qv.chunks(c).map(norm).collect();
        let mut ds = vec![T::zero(); sv.len()];
        let mut dq = vec![T::zero(); qv.len()];
        let values = output.data();
        for s in 0..ns {
            for q in 0..nq {
                for i in 0..hw {
                    let ai = (s * hw + i) * c;
                    for j in 0..hw {
                        let k = ((s * nq + q) * hw + i) * hw + j;
                        let g = grad[k];
                        if g == T::zero() {
                            continue;
                        }
                        let bj = (q * hw + j) * c;
                        let (da, db) = (&mut ds[ai..ai + c], &mut dq[bj..bj + c]);
                        self.metric.accumulate_grad(
                            &sv[ai..ai + c],
                            &qv[bj..bj + c],
                            sn[s * hw + i],
                            qn[q * hw + j],
                            values[k],
                            g,
                            da,
                            db,
                        );
                    }
                }
            }
        }
        // back to channel-first layout
        let to_maps = |cols: &[T], n: usize| {
            let mut out = vec![T::zero(); cols.len()];
            for b in 0..n {
                for i in 0..hw {
                    for ch in 0..c {
                        out[(b * c + ch) * hw + i] = cols[(b * hw + i) * c + ch];
                    }
                }
            }
            out
        };
        vec![Some(to_maps(&ds, ns)), Some(to_maps(&dq, nq))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::new(&[c, h, w], data).unwrap()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        map(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn decompose_counts_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 64, 5, 5);
        let regions = decompose(&m);
        assert_eq!(regions.len(), 25);
        assert!(regions.iter().all(|r| r.values.len() == 64));
        assert_eq!((regions[7].row, regions[7].col), (1, 2));
        assert_eq!(reassemble(&regions, 5, 5).unwrap(), m.values);

        let single = map(2, 1, 1, vec![0.3, -0.7]);
        assert_eq!(decompose(&single)[0].values, vec![0.3, -0.7]);
    }

    #[test]
    fn self_similarity_map_is_ones() {
        let region = RegionVector {
            index: 0,
            row: 0,
            col: 0,
            values: vec![0.5, -1.0, 2.0],
        };
        let q = map(
            3,
            2,
            2,
            [
                0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0, 2.0, 2.0, 2.0, 2.0,
            ]
            .to_vec(),
        );
        let s = similarity_map(&region, &q, &SimilarityMetric::default()).unwrap();
        for &v in s.values.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_cosine_is_zero() {
        let m = SimilarityMetric::default();
        assert_eq!(m.eval(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn zero_vector_is_dead_region() {
        let m = SimilarityMetric::default();
        assert_eq!(m.eval(&[0.0, 0.0], &[0.3, 1.0]), 0.0);
        let t = SimilarityMetric::new(MetricKind::Tanimoto);
        assert_eq!(t.eval(&[0.0f64, 0.0], &[0.3, 1.0]), 0.0);
    }

    #[test]
    fn tanimoto_parallel_is_one() {
        let t = SimilarityMetric::new(MetricKind::Tanimoto);
        assert_eq!(t.eval(&[1.0f64, 2.0], &[2.0, 4.0]), 1.0);
        // orthogonal → 0, antiparallel → −1/2
        assert_eq!(t.eval(&[1.0f64, 0.0], &[0.0, 3.0]), 0.0);
        assert!((t.eval(&[1.0f64, 0.0], &[-1.0, 0.0]) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn metric_rejects_unknown_flag() {
        assert_eq!(
            "expdist".parse::<MetricKind>().unwrap(),
            MetricKind::ExpNegDist
        );
        assert!("l2".parse::<MetricKind>().is_err());
    }

    #[test]
    fn identical_maps_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 6, 3, 3);
        let (scores, maps) = match_regions(&m, &m, &SimilarityMetric::default()).unwrap();
        assert_eq!(maps.len(), 9);
        for &s in scores.values.data() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuted_query_still_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_map(&mut rng, 4, 3, 3);
        let mut regions = decompose(&s);
        regions.reverse();
        for (i, r) in regions.iter_mut().enumerate() {
            r.index = i;
        }
        let q = FeatureMap::new(reassemble(&regions, 3, 3).unwrap()).unwrap();
        let (scores, _) = match_regions(&s, &q, &SimilarityMetric::default()).unwrap();
        for &v in scores.values.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_map(&mut rng, 4, 2, 2);
        let b = random_map(&mut rng, 3, 2, 2);
        assert!(match_regions(&a, &b, &SimilarityMetric::default()).is_err());
        let r = &decompose(&a)[0];
        assert!(similarity_map(r, &b, &SimilarityMetric::default()).is_err());
    }

    #[test]
    fn batched_maps_agree_with_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in MetricKind::ALL {
            let metric = SimilarityMetric::new(kind);
            let s = random_map(&mut rng, 5, 2, 3);
            let q = random_map(&mut rng, 5, 2, 3);
            let mut tape = Tape::new();
            let sv = tape.constant(s.values.clone().reshape(&[1, 5, 2, 3]).unwrap());
            let qv = tape.constant(q.values.clone().reshape(&[1, 5, 2, 3]).unwrap());
            let matcher = Matcher::new(metric);
            let maps = matcher.similarity_maps(&mut tape, sv, qv).unwrap();
            let pooled = matcher.pool(&mut tape, maps).unwrap();
            let (scores, single) = match_regions(&s, &q, &metric).unwrap();
            assert_eq!(tape.value(pooled).data(), scores.values.data());
            for m in &single {
                assert_eq!(
                    &tape.value(maps).data()[m.index * 6..(m.index + 1) * 6],
                    m.values.data()
                );
            }
        }
    }

    #[test]
    fn similarity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in MetricKind::ALL {
            let s: Tensor<f64> = Tensor::from_fn(&[2, 4, 2, 2], |_| rng.gen_range(-1.0..1.0));
            let q: Tensor<f64> = Tensor::from_fn(&[3, 4, 2, 2], |_| rng.gen_range(-1.0..1.0));
            let weights: Tensor<f64> = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let matcher = Matcher::new(SimilarityMetric::new(kind));
            let report = gradcheck::check(
                &[s, q],
                |tape, v| {
                    let maps = matcher.similarity_maps(tape, v[0], v[1])?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(maps, w)?;
                    tape.sum(prod)
                },
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{kind}: {report:?}");
        }
    }

    #[test]
    fn matcher_owns_no_parameters() {
        let mut params = ParamSet::<f32>::new();
        assert_eq!(Matcher::default().register(&mut params), 0);
        assert!(params.is_empty());
    }
}
