//! Episodic training, K-shot classification and the evaluation protocol.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::episodes::{
    augment_query, sample_episode, AugmentPolicy, Episode, Image, LabeledDataset, Split,
};
use crate::error::{shape_err, Error, Result};
use crate::model::{stack_images, Aggregation, RcnModel};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    /// Iterations without validation improvement before the rate is cut.
    pub plateau_patience: usize,
    /// Training stops once the rate has been cut this many times.
    pub max_halvings: usize,
    /// Iteration cap.
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub way: usize,
    pub shot: usize,
    /// Query samples per class during training.
    pub train_queries: usize,
    /// Query samples per class during evaluation.
    pub eval_queries: usize,
    pub augment: AugmentPolicy,
    /// Wall-clock limit for the training loop, in seconds.
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 3,
            max_halvings: 6,
            iterations: 100,
            episodes_per_iteration: 500,
            val_episodes: 600,
            test_episodes: 600,
            way: 5,
            shot: 1,
            train_queries: 15,
            eval_queries: 15,
            augment: AugmentPolicy::default(),
            time_budget_secs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be a nonnegative number",
                self.learning_rate
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Invalid("plateau factor must lie in (0, 1)".into()));
        }
        if self.way < 2 || self.shot == 0 || self.train_queries == 0 || self.eval_queries == 0 {
            return Err(Error::Invalid(
                "episodes need way ≥ 2 and positive shot and query counts".into(),
            ));
        }
        if self.episodes_per_iteration == 0 {
            return Err(Error::Invalid(
                "episodes per iteration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = |p: &crate::tensor::Parameter<T>| vec![T::zero(); p.value.numel()];
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. `grads` is
    /// indexed like the parameter set.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            );
        }
        self.step += 1;
        let c = |x: f64| T::from_f64(x).expect("finite constant");
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.step));
        let bc2 = c(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (c(self.lr), c(self.eps));
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = params.entry_mut(i);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau rule driven by validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
    pub halvings: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            best: None,
            stale: 0,
            halvings: 0,
        }
    }

    /// Records a validation accuracy; returns true if it is a new best.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        if self.best.is_none_or(|b| accuracy > b) {
            self.best = Some(accuracy);
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.halvings += 1;
            self.stale = 0;
        }
        false
    }
}

/// Class scores `[way]` from the `Ns` pair scores of one query; support
/// samples are label-major with `shot` per class.
pub fn aggregate(pair_scores: &[f32], way: usize, shot: usize, how: Aggregation) -> Vec<f32> {
    pair_scores
        .chunks(shot)
        .take(way)
        .map(|c| match how {
            Aggregation::Mean => c.iter().sum::<f32>() / c.len() as f32,
            Aggregation::Max => c.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        })
        .collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub class_scores: Vec<f32>,
}

/// Classifies every query of `episode` from its `[Ns, Nq]` score matrix.
pub fn classify(
    scores: &Tensor<f32>,
    episode: &Episode,
    how: Aggregation,
) -> Result<Vec<Classification>> {
    let (ns, nq) = (episode.support.len(), episode.query.len());
    if scores.shape() != [ns, nq] {
        return shape_err(
            "classify",
            format!("scores {:?} for a {ns}x{nq} episode", scores.shape()),
        );
    }
    Ok((0..nq)
        .map(|q| {
            let column: Vec<f32> = (0..ns).map(|s| scores.data()[s * nq + q]).collect();
            let class_scores = aggregate(&column, episode.way, episode.shot, how);
            Classification {
                label: argmax(&class_scores),
                class_scores,
            }
        })
        .collect())
}

/// Fraction of correctly classified queries.
pub fn episode_accuracy(scores: &Tensor<f32>, episode: &Episode, how: Aggregation) -> Result<f64> {
    let preds = classify(scores, episode, how)?;
    let hits = preds
        .iter()
        .enumerate()
        .filter(|(q, c)| c.label == episode.query_label(*q))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Produces the `[Ns, Nq]` pair scores of an episode.
pub trait Scorer: Sync {
    fn score(
        &self,
        dataset: &LabeledDataset,
        episode: &Episode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>>;

    fn aggregation(&self) -> Aggregation {
        Aggregation::Mean
    }
}

/// Scores drawn uniformly from `[0, 1)`.
pub struct RandomScorer;

impl Scorer for RandomScorer {
    fn score(
        &self,
        _: &LabeledDataset,
        episode: &Episode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        Ok(Tensor::from_fn(
            &[episode.support.len(), episode.query.len()],
            |_| rng.gen(),
        ))
    }
}

/// Scores 1 for same-class pairs and 0 otherwise.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(
        &self,
        _: &LabeledDataset,
        episode: &Episode,
        _: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        Ok(episode.targets())
    }
}

/// Evaluation-mode network scorer. Features depend only on the image once
/// batch-norm uses running statistics, so they are computed once per sample.
pub struct RcnScorer<'m> {
    model: &'m RcnModel<f32>,
    features: Vec<Option<FeatureMap<f32>>>,
}

impl<'m> RcnScorer<'m> {
    pub fn new(model: &'m RcnModel<f32>, dataset: &LabeledDataset, split: Split) -> Result<Self> {
        let wanted: Vec<usize> = dataset
            .classes(split)
            .into_iter()
            .flat_map(|c| dataset.samples_of(c).iter().copied())
            .collect();
        let chunks: Vec<Vec<FeatureMap<f32>>> = wanted
            .par_chunks(64)
            .map(|chunk| {
                let imgs: Vec<&Image> = chunk.iter().map(|&i| dataset.image(i)).collect();
                model.features(&imgs)
            })
            .collect::<Result<_>>()?;
        let mut features = vec![None; dataset.samples.len()];
        for (&i, f) in wanted.iter().zip(chunks.into_iter().flatten()) {
            features[i] = Some(f.with_source(i));
        }
        Ok(RcnScorer { model, features })
    }

    fn stacked(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut dims = (0, 0, 0);
        for &i in ids {
            let f = self
                .features
                .get(i)
                .and_then(Option::as_ref)
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "sample {i} is outside the split this scorer was built for"
                    ))
                })?;
            dims = f.dims();
            data.extend_from_slice(f.values.data());
        }
        Tensor::new(&[ids.len(), dims.0, dims.1, dims.2], data)
    }
}

impl Scorer for RcnScorer<'_> {
    fn score(
        &self,
        _: &LabeledDataset,
        episode: &Episode,
        _: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.model.params, false);
        let s = g.constant(self.stacked(&episode.support)?);
        let q = g.constant(self.stacked(&episode.query)?);
        let out = self.model.forward_features(&mut g, s, q)?;
        Ok(g.value(out.scores).clone())
    }

    fn aggregation(&self) -> Aggregation {
        self.model.config.aggregation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    /// Mean accuracy in percent.
    pub mean: f64,
    /// 95% confidence half-width in percent.
    pub half_width: f64,
    /// Per-episode accuracies as fractions.
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    /// Builds the report from per-episode accuracies; the half-width is
    /// `1.96 · stdev / √n` with the population standard deviation.
    pub fn from_accuracies(
        split: Split,
        way: usize,
        shot: usize,
        queries: usize,
        seed: u64,
        accuracies: Vec<f64>,
    ) -> Result<Self> {
        let (mean, half_width) = confidence_interval(&accuracies)?;
        Ok(EvalReport {
            split,
            way,
            shot,
            queries,
            seed,
            mean: 100.0 * mean,
            half_width: 100.0 * half_width,
            accuracies,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.half_width)
    }
}

/// Mean and 95% half-width `1.96 · σ / √n` (population σ).
pub fn confidence_interval(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Invalid("no accuracies to summarize".into()));
    }
    let n = xs.len() as f64;
    // Deviations from the first value keep constant lists exactly zero-variance.
    let shift = xs[0];
    let s1: f64 = xs.iter().map(|x| x - shift).sum();
    let s2: f64 = xs.iter().map(|x| (x - shift) * (x - shift)).sum();
    let var = ((s2 - s1 * s1 / n) / n).max(0.0);
    Ok((shift + s1 / n, 1.96 * var.sqrt() / n.sqrt()))
}

fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Average accuracy over `episodes` seeded episodes, evaluated in parallel.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &LabeledDataset,
    split: Split,
    episodes: usize,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Invalid(
            "evaluation needs at least one episode".into(),
        ));
    }
    let accuracies = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            let episode = sample_episode(dataset, split, way, shot, queries, &mut rng)?;
            let scores = scorer.score(dataset, &episode, &mut rng)?;
            episode_accuracy(&scores, &episode, scorer.aggregation())
        })
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(split, way, shot, queries, seed, accuracies)
}

/// Network input for an episode: support images untouched, then query
/// images passed through `policy`.
pub fn episode_images<T: Real>(
    dataset: &LabeledDataset,
    episode: &Episode,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let augmented: Vec<Image> = episode
        .query
        .iter()
        .map(|&i| augment_query(dataset.image(i), rng, policy))
        .collect();
    let imgs: Vec<&Image> = episode
        .support
        .iter()
        .map(|&i| dataset.image(i))
        .chain(augmented.iter())
        .collect();
    stack_images(&imgs)
}

/// Sum over all support/query pairs of `(s − 1[same class])²`.
pub fn episode_loss<T: Real>(
    model: &RcnModel<T>,
    g: &mut Graph<'_, T>,
    images: Tensor<T>,
    episode: &Episode,
) -> Result<Var> {
    let x = g.constant(images);
    let out = model.forward_pairs(g, x, episode.support.len())?;
    model.pair_loss(g, out.scores, episode.targets())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean episode loss over the iteration.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_half_width: Option<f64>,
    pub learning_rate: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationCap,
    Plateau,
    TimeBudget,
    Diverged,
}

pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint (or the last iteration
    /// when validation is disabled).
    pub model: RcnModel<f32>,
    pub log: Vec<LogRecord>,
    pub best_val: Option<f64>,
    pub stop: StopReason,
    pub checkpoint: Option<PathBuf>,
}

struct Artifacts {
    log: BufWriter<File>,
    checkpoint: PathBuf,
}

/// Trains `model` episodically on the train split, validating after every
/// iteration. With `out`, the best checkpoint and a JSON-lines log are
/// written there.
pub fn train(
    mut model: RcnModel<f32>,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let budget = config.time_budget_secs.map(Duration::from_secs_f64);
    let mut artifacts = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let checkpoint = dir.join(CHECKPOINT_DIR);
            fs::create_dir_all(&checkpoint)?;
            model.save(&checkpoint)?;
            Some(Artifacts {
                log: BufWriter::new(File::create(dir.join(LOG_FILE))?),
                checkpoint,
            })
        }
        None => None,
    };
    let validate = config.val_episodes > 0;
    let mut best = model.params.clone();
    let mut schedule = PlateauSchedule::new(
        config.learning_rate,
        config.plateau_factor,
        config.plateau_patience,
    );
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut stop = StopReason::IterationCap;

    'outer: for iteration in 1..=config.iterations {
        adam.lr = schedule.lr;
        let mut total = 0.0;
        for _ in 0..config.episodes_per_iteration {
            let episode = sample_episode(
                dataset,
                Split::Train,
                config.way,
                config.shot,
                config.train_queries,
                &mut rng,
            )?;
            let images = episode_images(dataset, &episode, &config.augment, &mut rng)?;
            let (loss, grads, buffers) = {
                let mut g = Graph::new(&model.params, true);
                let loss = episode_loss(&model, &mut g, images, &episode)?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    (value, Vec::new(), Vec::new())
                } else {
                    g.backward(loss)?;
                    (value, g.param_grads(), g.take_buffer_updates())
                }
            };
            if !loss.is_finite() {
                log::error!(
                    "non-finite loss at iteration {iteration}; keeping the last good parameters"
                );
                stop = StopReason::Diverged;
                break 'outer;
            }
            adam.step(&mut model.params, &grads)?;
            model.params.apply_buffer_updates(buffers)?;
            total += loss as f64;
        }
        let train_loss = total / config.episodes_per_iteration as f64;
        let val = if validate {
            let scorer = RcnScorer::new(&model, dataset, Split::Val)?;
            let seed = config.seed.wrapping_add(1);
            Some(evaluate(
                &scorer,
                dataset,
                Split::Val,
                config.val_episodes,
                config.way,
                config.shot,
                config.eval_queries,
                seed,
            )?)
        } else {
            None
        };
        let record = LogRecord {
            iteration,
            train_loss,
            val_accuracy: val.as_ref().map(|r| r.mean),
            val_half_width: val.as_ref().map(|r| r.half_width),
            learning_rate: schedule.lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {iteration}: loss {train_loss:.4}, val {}, lr {:.2e}",
            val.as_ref().map_or("-".to_string(), |r| r.to_string()),
            schedule.lr
        );
        let improved = match &val {
            Some(r) => schedule.observe(r.mean),
            None => true,
        };
        if improved {
            best = model.params.clone();
            if let Some(a) = &artifacts {
                model.save(&a.checkpoint)?;
            }
        }
        if let Some(a) = &mut artifacts {
            serde_json::to_writer(&mut a.log, &record)?;
            a.log.write_all(b"\n")?;
            a.log.flush()?;
        }
        log.push(record);
        if schedule.halvings > config.max_halvings {
            stop = StopReason::Plateau;
            break;
        }
        if budget.is_some_and(|b| start.elapsed() >= b) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    model.params = best;
    Ok(TrainOutcome {
        model,
        log,
        best_val: schedule.best,
        stop,
        checkpoint: artifacts.map(|a| a.checkpoint),
    })
}
