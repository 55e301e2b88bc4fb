//! Acceptance suite: one PASS/FAIL line per criterion, with the tolerance
//! each check is held to. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::Statistics;
use tempfile::TempDir;

use rcn_cli::{cmd_generalize, cmd_train, Cli, Command};
use rcn_core::backbone::{BackboneConfig, FeatureMap};
use rcn_core::episodes::{
    generate_synthetic, sample_episode, AugmentPolicy, Episode, Split, SyntheticSpec,
};
use rcn_core::explainer::{contributions, HeadKind};
use rcn_core::gradcheck::check_params;
use rcn_core::interpret::{gaussian_indicator, ram_values};
use rcn_core::matcher::{Matcher, MetricKind, RegionSimilarityMap, SimilarityMetric};
use rcn_core::model::{ModelConfig, RcnModel};
use rcn_core::reference;
use rcn_core::tensor::{Graph, ParamSet, Tape, Tensor};
use rcn_core::trainer::{
    confidence_interval, episode_images, episode_loss, evaluate, RandomScorer,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel(x, y))
        .fold(0.0, f64::max)
}

fn toy_model(head: HeadKind, metric: MetricKind, seed: u64) -> RcnModel<f64> {
    let bb = BackboneConfig {
        channels: 4,
        image_size: (16, 16),
        pooled_blocks: 2,
        output_size: Some((3, 3)),
        ..Default::default()
    };
    let mut cfg = ModelConfig::new(bb, head, SimilarityMetric::new(metric));
    cfg.meta.hidden = 8;
    RcnModel::new(cfg, seed).unwrap()
}

fn label_major_episode(way: usize, shot: usize, queries: usize) -> Episode {
    let (ns, nq) = (way * shot, way * queries);
    Episode {
        split: Split::Train,
        way,
        shot,
        queries,
        classes: (0..way).collect(),
        support: (0..ns).collect(),
        query: (ns..ns + nq).collect(),
    }
}

// 1. Full-loss gradients.
fn gradients() -> Verdict {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let model = toy_model(HeadKind::Meta, MetricKind::Cosine, 1);
    let episode = label_major_episode(2, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = Tensor::from_fn(&[4, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let r = check_params(
        &model.params,
        true,
        |g| episode_loss(&model, g, images.clone(), &episode),
        STEP,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        r.max_rel_error <= TOL && secs < 60.0,
        format!(
            "2-way 1-shot, C=4, 3x3 grid, 16x16 images, meta head: {} scalars, max rel err {:.2e} (tol {TOL:.0e}, step {STEP:.0e}), {secs:.1} s (limit 60 s)",
            r.checked, r.max_rel_error
        ),
    )
}

// 2. Naive-loop oracles.
fn oracles() -> Verdict {
    const SEEDS: u64 = 100;
    const TOL: f64 = 1e-6;
    let mut worst = [0.0f64; 4];

    for kind in MetricKind::ALL {
        let metric = SimilarityMetric::new(kind);
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
            );
            let s = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(-1.0..1.0));
            let q = Tensor::from_fn(&[3, c, h, w], |_| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));
            let m = Matcher::new(metric);
            let maps = m.similarity_maps(&mut tape, sv, qv).unwrap();
            let pooled = m.pool(&mut tape, maps).unwrap();
            let (rm, rs) = reference::match_pairs(&metric, &s, &q).unwrap();
            worst[0] = worst[0]
                .max(max_rel(tape.value(maps), &rm))
                .max(max_rel(tape.value(pooled), &rs));
        }
    }

    let model = toy_model(HeadKind::Meta, MetricKind::Cosine, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (ns, nq, hw) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=25),
        );
        let weights = Tensor::from_fn(&[ns, nq, hw], |_| rng.gen_range(0.0..1.0));
        let scores = Tensor::from_fn(&[ns, nq, hw], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(&model.params, false);
        let (wv, pv) = (g.constant(weights.clone()), g.constant(scores.clone()));
        let s = model.explainer.combine(&mut g, wv, pv).unwrap();
        worst[1] = worst[1].max(max_rel(
            g.value(s),
            &reference::combine(&weights, &scores).unwrap(),
        ));
    }

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let weight: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let maps: Vec<RegionSimilarityMap<f64>> = (0..9)
            .map(|i| RegionSimilarityMap {
                index: i,
                values: Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let got = ram_values(&weight, &maps).unwrap();
        worst[2] = worst[2].max(max_rel(
            &got,
            &reference::ram_values(&weight, &maps).unwrap(),
        ));
    }

    let heads = [HeadKind::Fixed, HeadKind::Learnable, HeadKind::Meta];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let model = toy_model(
            heads[seed as usize % 3],
            MetricKind::ALL[(seed / 3) as usize % 4],
            seed,
        );
        let (way, shot, queries) = (
            rng.gen_range(2..=3),
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
        );
        let episode = label_major_episode(way, shot, queries);
        let n = way * (shot + queries);
        let images = Tensor::from_fn(&[n, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new(&model.params, true);
        let loss = episode_loss(&model, &mut g, images.clone(), &episode).unwrap();
        let got = g.value(loss).item().unwrap();
        worst[3] = worst[3].max(rel(
            got,
            reference::episode_loss(&model, &images, &episode).unwrap(),
        ));
    }

    verdict(
        worst.iter().all(|&w| w <= TOL),
        format!(
            "{SEEDS} seeds each; max rel deviation matcher(4 metrics) {:.1e}, combine {:.1e}, RAM {:.1e}, episode loss {:.1e} (tol {TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 3. Gaussian indicator.
fn quadrature() -> Verdict {
    const TOL: f64 = 1e-6;
    const TRIPLES: usize = 1000;
    let phi = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..TRIPLES {
        let mu = rng.gen_range(0.0..2.0);
        let sigma = 10f64.powf(rng.gen_range(-4.0..0.5));
        let a = 10f64.powf(rng.gen_range(-4.0..0.5));
        let closed = mu * (2.0 * phi.cdf(2.0 * a / sigma) - 1.0);
        worst = worst.max((gaussian_indicator(mu, sigma, a) - closed).abs());
    }
    let limit_ok = [0.0, 0.3, 1.2]
        .iter()
        .all(|&mu| gaussian_indicator(mu, 0.0, 0.05) == mu)
        && (gaussian_indicator(0.7, 1e-9, 0.05) - 0.7).abs() <= TOL;
    verdict(
        worst <= TOL && limit_ok,
        format!("{TRIPLES} triples, max abs error {worst:.1e} (tol {TOL:.0e}); sigma -> 0 returns mu: {limit_ok}"),
    )
}

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("rcn").chain(args.iter().copied())).unwrap()
}

struct Trained {
    accuracy: f64,
    half_width: f64,
    secs: f64,
    checkpoint: PathBuf,
}

/// Desk-scale training through the `train` command.
fn train_head(head: &str, out: &Path) -> Trained {
    let cli = parse(&[
        "train",
        "--head",
        head,
        "--backbone",
        "conv4-32",
        "--train-queries",
        "5",
        "--episodes-per-iteration",
        "100",
        "--iterations",
        "30",
        "--val-episodes",
        "200",
        "--test-episodes",
        "600",
        "--time-budget",
        "780",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let Command::Train(args) = &cli.command else {
        unreachable!()
    };
    let start = Instant::now();
    let summary = cmd_train(&cli.global, args).unwrap();
    let test = summary.test.expect("test evaluation ran");
    Trained {
        accuracy: test.mean,
        half_width: test.half_width,
        secs: start.elapsed().as_secs_f64(),
        checkpoint: summary.checkpoint,
    }
}

// 4. Desk-scale learning; returns the meta checkpoint for criterion 5.
fn learning(dir: &Path) -> (Verdict, Option<PathBuf>) {
    const TARGET: f64 = 60.0;
    const MARGIN: f64 = 5.0;
    const LIMIT_SECS: f64 = 900.0;
    let meta = train_head("meta", &dir.join("meta"));
    let fixed = train_head("fixed", &dir.join("fixed"));
    let pass = meta.accuracy >= TARGET
        && meta.secs <= LIMIT_SECS
        && meta.accuracy - fixed.accuracy >= MARGIN;
    let detail = format!(
        "5-way 1-shot test: meta {:.2} ± {:.2} in {:.0} s, fixed {:.2} ± {:.2} in {:.0} s; need meta >= {TARGET}% within {LIMIT_SECS} s and meta - fixed >= {MARGIN} (got {:.2})",
        meta.accuracy,
        meta.half_width,
        meta.secs,
        fixed.accuracy,
        fixed.half_width,
        fixed.secs,
        meta.accuracy - fixed.accuracy
    );
    (verdict(pass, detail), Some(meta.checkpoint))
}

// 5. Top region against the ground-truth part box.
fn construct_validity(checkpoint: Option<&Path>, dir: &Path) -> Verdict {
    const TRIALS: u64 = 20;
    const NEEDED: f64 = 0.70;
    let Some(ckpt) = checkpoint else {
        return verdict(false, "no trained checkpoint (criterion 4 did not run)");
    };
    let mut hits = 0;
    for seed in 0..TRIALS {
        let out = dir.join(format!("generalize-{seed}"));
        let cli = parse(&[
            "generalize",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--seed",
            &seed.to_string(),
            "--out",
            out.to_str().unwrap(),
        ]);
        let Command::Generalize(args) = &cli.command else {
            unreachable!()
        };
        if cmd_generalize(&cli.global, args).unwrap().top_overlaps_part == Some(true) {
            hits += 1;
        }
    }
    let rate = hits as f64 / TRIALS as f64;
    verdict(
        rate >= NEEDED,
        format!(
            "top region overlaps the part box in {hits}/{TRIALS} seeded trials (need >= {:.0}%)",
            NEEDED * 100.0
        ),
    )
}

fn matcher_run(c: usize, h: usize, w: usize) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = Tensor::<f32>::from_fn(&[8, c, h, w], |_| rng.gen_range(0.0..1.0));
    let q = Tensor::<f32>::from_fn(&[8, c, h, w], |_| rng.gen_range(0.0..1.0));
    let m = Matcher::new(SimilarityMetric::default());
    move || {
        let t = Instant::now();
        let mut tape = Tape::new();
        let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));
        let maps = m.similarity_maps(&mut tape, sv, qv).unwrap();
        std::hint::black_box(m.pool(&mut tape, maps).unwrap());
        t.elapsed().as_secs_f64()
    }
}

/// Median of `big / small` over interleaved runs, so load drift hits both sides.
fn median_ratio(small: (usize, usize, usize), big: (usize, usize, usize)) -> f64 {
    let mut a = matcher_run(small.0, small.1, small.2);
    let mut b = matcher_run(big.0, big.1, big.2);
    a();
    b();
    let mut ratios: Vec<f64> = (0..RUNS)
        .map(|_| {
            let ta = a();
            b() / ta
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    ratios[RUNS / 2]
}

const RUNS: usize = 21;

// 6. Matcher complexity.
fn complexity() -> Verdict {
    const REGION_BAND: (f64, f64) = (2.5, 6.0);
    const CHANNEL_BAND: (f64, f64) = (1.5, 3.0);
    // Doubling the region count h·w; pairwise work grows with its square.
    let region_ratio = median_ratio((128, 6, 6), (128, 6, 12));
    let channel_ratio = median_ratio((128, 6, 6), (256, 6, 6));
    let inside = |r: f64, b: (f64, f64)| (b.0..=b.1).contains(&r);
    verdict(
        inside(region_ratio, REGION_BAND) && inside(channel_ratio, CHANNEL_BAND),
        format!(
            "median of {RUNS} interleaved runs: 36 -> 72 regions x{region_ratio:.2} (band {REGION_BAND:?}, expect 4), C 128 -> 256 x{channel_ratio:.2} (band {CHANNEL_BAND:?}, expect 2)"
        ),
    )
}

// 7. Protocol arithmetic.
fn protocol() -> Verdict {
    const REL_TOL: f64 = 1e-12;
    const CHANCE_BAND: f64 = 3.0;
    let lists: Vec<Vec<f64>> = vec![
        vec![0.8; 10],
        vec![0.0, 1.0, 0.0, 1.0],
        vec![0.2, 0.4, 0.6, 0.8, 1.0],
        vec![1.0 / 3.0, 2.0 / 3.0, 0.0, 1.0, 0.6, 0.6, 0.9],
        vec![0.5],
    ];
    let mut worst = 0.0f64;
    let mut exact = true;
    for xs in &lists {
        let (_, hw) = confidence_interval(xs).unwrap();
        let n = xs.len() as f64;
        let want = 1.96 * xs.iter().copied().population_std_dev() / n.sqrt();
        worst = worst.max((hw - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        if want == 0.0 || xs.len() == 4 {
            exact &= hw == want;
        }
    }
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let r = evaluate(&RandomScorer, &data, Split::Test, 600, 5, 1, 15, 7).unwrap();
    let chance_ok = (r.mean - 20.0).abs() <= CHANCE_BAND;
    verdict(
        worst <= REL_TOL && exact && chance_ok,
        format!(
            "half-width vs 1.96*stdev/sqrt(n) on {} hand-built lists: max rel diff {worst:.1e} (tol {REL_TOL:.0e}), bit-exact on zero-variance and dyadic lists: {exact}; random scorer {:.2} ± {:.2} over 600 episodes (need 20 ± {CHANCE_BAND})",
            lists.len(),
            r.mean,
            r.half_width
        ),
    )
}

// 8. Invariants.
fn invariants() -> Verdict {
    const CASES: u64 = 200;
    let mut failures = Vec::new();

    // Cosine maps are unchanged by positive rescaling of either side.
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let s = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(-2.0..2.0));
        let q = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(-2.0..2.0));
        let (ks, kq) = (
            10f64.powf(rng.gen_range(-3.0..3.0)),
            10f64.powf(rng.gen_range(-3.0..3.0)),
        );
        let maps = |s: Tensor<f64>, q: Tensor<f64>| {
            let mut tape = Tape::new();
            let (sv, qv) = (tape.constant(s), tape.constant(q));
            let m = Matcher::new(SimilarityMetric::default())
                .similarity_maps(&mut tape, sv, qv)
                .unwrap();
            tape.value(m).clone()
        };
        let d = maps(s.clone(), q.clone())
            .max_abs_diff(&maps(s.map(|x| x * ks), q.map(|x| x * kq)))
            .unwrap();
        worst = worst.max(d);
    }
    if worst > 1e-6 {
        failures.push(format!("cosine scale invariance off by {worst:.1e}"));
    }

    // Attribution completeness for every head.
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let head = [HeadKind::Fixed, HeadKind::Learnable, HeadKind::Meta][seed as usize % 3];
        let model = toy_model(head, MetricKind::ALL[seed as usize % 4], seed);
        let fm = |rng: &mut ChaCha8Rng| {
            FeatureMap::new(Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(0.0..1.5))).unwrap()
        };
        let (s, q) = (fm(&mut rng), fm(&mut rng));
        let a = model.analyze_features(&s, &q).unwrap();
        let total: f64 = contributions(&a.weight, &a.region_scores)
            .unwrap()
            .iter()
            .sum();
        worst = worst.max(rel(total, a.score));
    }
    if worst > 1e-12 {
        failures.push(format!("sum of w_i*P_i differs from s by {worst:.1e}"));
    }

    // Augmentation leaves support images byte-identical.
    let spec = SyntheticSpec {
        classes: 6,
        per_class: 6,
        splits: (4, 1, 1),
        image_size: 16,
        part_size: 4,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let policy = AugmentPolicy {
        p_crop: 1.0,
        p_flip: 1.0,
        p_erase: 1.0,
        ..AugmentPolicy::default()
    };
    let per = 3 * 16 * 16;
    let mut mismatched = 0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_episode(&data, Split::Train, 3, 2, 2, &mut rng).unwrap();
        let batch: Tensor<f32> = episode_images(&data, &ep, &policy, &mut rng).unwrap();
        for (k, &idx) in ep.support.iter().enumerate() {
            let got = batch.data()[k * per..(k + 1) * per]
                .iter()
                .map(|v| v.to_bits());
            if !got.eq(data.samples[idx].image.data().iter().map(|v| v.to_bits())) {
                mismatched += 1;
            }
        }
    }
    if mismatched > 0 {
        failures.push(format!(
            "{mismatched} support images altered by augmentation"
        ));
    }

    // The matcher registers nothing.
    let mut params = ParamSet::<f32>::new();
    let registered: usize = MetricKind::ALL
        .iter()
        .map(|&k| Matcher::new(SimilarityMetric::new(k)).register(&mut params))
        .sum();
    let in_models = [HeadKind::Fixed, HeadKind::Learnable, HeadKind::Meta]
        .iter()
        .map(|&h| {
            toy_model(h, MetricKind::Cosine, 0)
                .params
                .trainable_names("matcher")
                .len()
        })
        .sum::<usize>();
    if registered + params.len() + in_models > 0 {
        failures.push("matcher registered trainable parameters".into());
    }

    // RAM is linear in the region weight.
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let maps: Vec<RegionSimilarityMap<f64>> = (0..9)
            .map(|i| RegionSimilarityMap {
                index: i,
                values: Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let w1: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w2: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (al, be) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| al * a + be * b).collect();
        let lhs = ram_values(&mixed, &maps).unwrap();
        let (r1, r2) = (
            ram_values(&w1, &maps).unwrap(),
            ram_values(&w2, &maps).unwrap(),
        );
        for k in 0..9 {
            worst = worst.max(rel(lhs.data()[k], al * r1.data()[k] + be * r2.data()[k]));
        }
    }
    if worst > 1e-9 {
        failures.push(format!("RAM linearity off by {worst:.1e}"));
    }

    let detail = if failures.is_empty() {
        format!("{CASES} cases each: cosine scale invariance (1e-6), completeness (1e-12), support bytes equal, 0 matcher params, RAM linearity (1e-9)")
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |k: u32| selected.is_empty() || selected.contains(&k);
    let scratch = TempDir::new().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |k: u32, name: &'static str, v: Verdict| {
        println!(
            "{} [{k}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((k, name, v));
    };

    if wanted(1) {
        record(1, "gradient suite", gradients());
    }
    if wanted(2) {
        record(2, "oracle equivalence", oracles());
    }
    if wanted(3) {
        record(3, "gaussian indicator", quadrature());
    }
    if wanted(6) {
        record(6, "matcher complexity", complexity());
    }
    if wanted(7) {
        record(7, "protocol arithmetic", protocol());
    }
    if wanted(8) {
        record(8, "invariant suite", invariants());
    }
    if wanted(4) || wanted(5) {
        let (v, checkpoint) = learning(scratch.path());
        if wanted(4) {
            record(4, "desk-scale learning", v);
        }
        if wanted(5) {
            record(
                5,
                "construct validity",
                construct_validity(checkpoint.as_deref(), scratch.path()),
            );
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
