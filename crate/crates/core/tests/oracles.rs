//! Batched network stages against the scalar-loop references, each over
//! 100+ random instances, agreeing within 1e-6.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcn_core::backbone::BackboneConfig;
use rcn_core::episodes::{Episode, Split};
use rcn_core::explainer::{self, HeadKind, RegionWeight};
use rcn_core::interpret::ram_values;
use rcn_core::matcher::{Matcher, MetricKind, RegionScores, RegionSimilarityMap, SimilarityMetric};
use rcn_core::model::{ModelConfig, RcnModel};
use rcn_core::reference;
use rcn_core::tensor::{Graph, Tape, Tensor};
use rcn_core::trainer::episode_loss;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-6;

fn assert_close(got: &Tensor<f64>, want: &Tensor<f64>, what: &str) {
    assert_eq!(got.shape(), want.shape(), "{what}: shape");
    for (k, (&g, &w)) in got.data().iter().zip(want.data()).enumerate() {
        assert!(
            (g - w).abs() <= TOL * (1.0 + w.abs()),
            "{what}: element {k} {g} vs {w}"
        );
    }
}

/// Random features with an occasional all-zero column (a dead region).
fn features(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(-1.0..1.0));
    let hw = h * w;
    for b in 0..n {
        if rng.gen_bool(0.3) {
            let cell = rng.gen_range(0..hw);
            for ch in 0..c {
                t.data_mut()[(b * c + ch) * hw + cell] = 0.0;
            }
        }
    }
    t
}

#[test]
fn matcher_maps_and_scores_match_loops() {
    for kind in MetricKind::ALL {
        let metric = SimilarityMetric::new(kind);
        let matcher = Matcher::new(metric);
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ns, nq) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let c = rng.gen_range(1..=8);
            let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let s = features(&mut rng, ns, c, h, w);
            let q = features(&mut rng, nq, c, h, w);

            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let qv = tape.constant(q.clone());
            let maps = matcher.similarity_maps(&mut tape, sv, qv).unwrap();
            let pooled = matcher.pool(&mut tape, maps).unwrap();
            let (want_maps, want_scores) = reference::match_pairs(&metric, &s, &q).unwrap();
            assert_close(
                tape.value(maps),
                &want_maps,
                &format!("{kind} seed {seed} maps"),
            );
            assert_close(
                tape.value(pooled),
                &want_scores,
                &format!("{kind} seed {seed} scores"),
            );
        }
    }
}

#[test]
fn paper_sized_matcher_instance() {
    // C = 8 on a 5×5 grid, one pair.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s = features(&mut rng, 1, 8, 5, 5);
    let q = features(&mut rng, 1, 8, 5, 5);
    for kind in MetricKind::ALL {
        let metric = SimilarityMetric::new(kind);
        let mut tape = Tape::new();
        let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));
        let maps = Matcher::new(metric)
            .similarity_maps(&mut tape, sv, qv)
            .unwrap();
        assert_close(
            tape.value(maps),
            &reference::match_pairs(&metric, &s, &q).unwrap().0,
            &format!("{kind}"),
        );
    }
}

#[test]
fn combine_matches_weighted_sum() {
    let model = tiny_model(HeadKind::Meta, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (ns, nq, hw) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=25),
        );
        let shared = rng.gen_bool(0.5);
        let wshape: Vec<usize> = if shared { vec![hw] } else { vec![ns, nq, hw] };
        let weights = Tensor::from_fn(&wshape, |_| rng.gen_range(0.0..1.0));
        let scores = Tensor::from_fn(&[ns, nq, hw], |_| rng.gen_range(-1.0..1.0));
        let want = reference::combine(&weights, &scores).unwrap();

        let mut g = Graph::new(&model.params, false);
        let wv = g.constant(weights.clone());
        let pv = g.constant(scores.clone());
        let s = model.explainer.combine(&mut g, wv, pv).unwrap();
        assert_close(g.value(s), &want, &format!("seed {seed} batched"));

        // Single-pair form used by the interpretation tools.
        let w1: Vec<f64> = (0..hw)
            .map(|i| {
                if shared {
                    weights.get(&[i])
                } else {
                    weights.get(&[0, 0, i])
                }
            })
            .collect();
        let p1: Vec<f64> = (0..hw).map(|i| scores.get(&[0, 0, i])).collect();
        let single = explainer::combine(
            &RegionWeight {
                values: Tensor::new(&[hw], w1).unwrap(),
                provenance: HeadKind::Meta,
            },
            &RegionScores {
                values: Tensor::new(&[hw], p1).unwrap(),
            },
        )
        .unwrap();
        let w00 = want.get(&[0, 0]);
        assert!(
            (single.0 - w00).abs() <= TOL * (1.0 + w00.abs()),
            "seed {seed}: single pair {} vs {w00}",
            single.0
        );
    }
}

#[test]
fn ram_pre_upsample_matches_double_loop() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (h, w) = (3, 3);
        let weight: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let maps: Vec<RegionSimilarityMap<f64>> = (0..h * w)
            .map(|i| RegionSimilarityMap {
                index: i,
                values: Tensor::from_fn(&[h, w], |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let got = ram_values(&weight, &maps).unwrap();
        assert_close(
            &got,
            &reference::ram_values(&weight, &maps).unwrap(),
            &format!("seed {seed}"),
        );
    }
}

fn tiny_model(head: HeadKind, seed: u64) -> RcnModel<f64> {
    let bb = BackboneConfig {
        channels: 4,
        image_size: (16, 16),
        pooled_blocks: 2,
        output_size: Some((3, 3)),
        ..Default::default()
    };
    let mut cfg = ModelConfig::new(bb, head, SimilarityMetric::default());
    cfg.meta.hidden = 6;
    RcnModel::new(cfg, seed).unwrap()
}

/// Randomizes every explain-network parameter so no batch-norm affine or
/// bias sits at its neutral initial value.
fn perturb_explainer(model: &mut RcnModel<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..model.params.len() {
        let p = model.params.entry_mut(i);
        if !p.name.starts_with("explainer.") {
            continue;
        }
        let positive = p.name.ends_with("gamma") || p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if positive {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
}

#[test]
fn episode_loss_matches_pair_loop() {
    let heads = [HeadKind::Fixed, HeadKind::Learnable, HeadKind::Meta];
    let metrics = MetricKind::ALL;
    for seed in 0..SEEDS {
        let head = heads[seed as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut model = tiny_model(head, seed);
        model.config.metric = SimilarityMetric::new(metrics[(seed / 3) as usize % 4]);
        model.matcher.metric = model.config.metric;
        perturb_explainer(&mut model, &mut rng);
        let (way, shot, queries) = (
            rng.gen_range(2..=3),
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
        );
        let (ns, nq) = (way * shot, way * queries);
        let episode = Episode {
            split: Split::Train,
            way,
            shot,
            queries,
            classes: (0..way).collect(),
            support: (0..ns).collect(),
            query: (ns..ns + nq).collect(),
        };
        let images = Tensor::from_fn(&[ns + nq, 3, 16, 16], |_| rng.gen_range(0.0..1.0));

        let mut g = Graph::new(&model.params, true);
        let loss = episode_loss(&model, &mut g, images.clone(), &episode).unwrap();
        let got = g.value(loss).item().unwrap();
        let want = reference::episode_loss(&model, &images, &episode).unwrap();
        assert!(
            (got - want).abs() <= TOL * (1.0 + want.abs()),
            "seed {seed} ({head}): loss {got} vs {want}"
        );
    }
}
