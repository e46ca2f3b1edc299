//! Task-sequential rehearsal training and class-incremental evaluation.
//!
//! Random streams for a run with seed `s`:
//!
//! | purpose                                  | generator                         |
//! |------------------------------------------|-----------------------------------|
//! | encoder, classifier and head init        | [`Model::init`]`(spec, s)`        |
//! | synthetic data (unless `data.seed`)      | `RngState::new(s).split(1)`       |
//! | reservoir replacement                    | `RngState::new(s).split(2)`       |
//! | epoch shuffles and buffer batches        | `RngState::new(s).split(3)`       |
//!
//! Within an epoch the batch stream first draws one permutation of the task's
//! training rows, then for each consecutive chunk of at most `batch_size` rows
//! draws a buffer batch of the same size when the buffer is non-empty. The two
//! batches must match in size because the alignment term pairs their rows.
//! After the update, the chunk's rows enter the reservoir in order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, RehearsalBuffer};
use crate::config::{DataSource, ExperimentConfig, TrainingMode};
use crate::data::{self, Split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::losses::{objective, LabeledBatch, LossTerms};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::network::{forward, MlpSpec, ProjectionHead, Sgd};
use crate::rng::RngState;
use crate::{Matrix, Model};

pub const DATA_STREAM: u64 = 1;
pub const RESERVOIR_STREAM: u64 = 2;
pub const BATCH_STREAM: u64 = 3;

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: Model,
    pub optimizer: Sgd<f64>,
    pub buffer: RehearsalBuffer<f64>,
    pub rng: RngState,
    pub seed: u64,
    pub steps: u64,
}

impl TrainerState {
    pub fn new(spec: &MlpSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let root = RngState::new(seed);
        let capacity = match cfg.train.mode {
            TrainingMode::Continual => cfg.train.buffer_capacity,
            TrainingMode::Joint => 0,
        };
        Ok(Self {
            model: Model::init(spec, seed)?,
            optimizer: Sgd::new(cfg.train.lr, cfg.train.momentum)?,
            buffer: RehearsalBuffer::new(capacity, root.split(RESERVOIR_STREAM)),
            rng: root.split(BATCH_STREAM),
            seed,
            steps: 0,
        })
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub task: usize,
    pub epoch: usize,
    pub steps: usize,
    pub mean_terms: LossTerms<f64>,
    pub mean_total: f64,
    /// Accuracy on each seen task after the epoch, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_accuracy: Option<Vec<f64>>,
}

/// Wall-clock seconds spent per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub epochs: Vec<EpochSummary>,
    pub final_average_accuracy: f64,
    /// Undefined for single-task runs.
    pub final_forgetting: Option<f64>,
    pub timings: Vec<PhaseTiming>,
}

/// Timings are wall-clock measurements and do not take part in comparisons.
impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.accuracy == other.accuracy
            && self.epochs == other.epochs
            && self.final_average_accuracy.to_bits() == other.final_average_accuracy.to_bits()
            && self.final_forgetting.map(f64::to_bits) == other.final_forgetting.map(f64::to_bits)
    }
}

impl RunResult {
    pub fn num_tasks(&self) -> usize {
        self.accuracy.num_tasks()
    }
}

fn rows_batch(split: &Split, idx: &[usize]) -> LabeledBatch<f64> {
    LabeledBatch {
        x: split.x.select_rows(idx),
        labels: idx.iter().map(|&i| split.labels[i]).collect(),
        stored_logits: None,
    }
}

/// Trains on one task for `cfg.train.epochs` epochs and returns per-epoch
/// summaries. `seen` holds the test splits evaluated when
/// `eval_each_epoch` is set.
pub fn train_task(
    state: &mut TrainerState,
    task: &Task,
    cfg: &ExperimentConfig,
    seen: &[&Split],
) -> Result<Vec<EpochSummary>> {
    let train = &task.train;
    if train.is_empty() {
        return Err(Error::Config(format!(
            "task {} has no training samples",
            task.id
        )));
    }
    let base = cfg.train.base_loss();
    let keep_logits = matches!(cfg.train.base, crate::config::BaseMethod::Derpp);
    let batch_size = cfg.train.batch_size;
    let mut summaries = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let order = state.rng.permutation(train.len());
        let mut sum = LossTerms::<f64>::default();
        let mut sum_total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            let current = rows_batch(train, chunk);
            let replay = if state.buffer.is_empty() {
                None
            } else {
                Some(state.buffer.sample_batch(chunk.len(), &mut state.rng)?)
            };
            let out = objective(&state.model, &current, replay.as_ref(), base, &cfg.dualhsic)?;
            let total = out.report.total;
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "task {} epoch {epoch} step {}: loss {total} ({:?})",
                    task.id, state.steps, out.report.terms
                )));
            }
            state
                .optimizer
                .step(&mut state.model, &out.grads)
                .map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!(
                        "task {} epoch {epoch} step {}: {msg}",
                        task.id, state.steps
                    )),
                    other => other,
                })?;
            state.steps += 1;

            if epoch == 0 || cfg.train.insert_every_epoch {
                let logits = &out.current_trace.logits;
                for (r, &i) in chunk.iter().enumerate() {
                    state.buffer.observe(BufferEntry {
                        x: train.x.row(i).to_vec(),
                        y: train.labels[i],
                        logits: keep_logits.then(|| logits.row(r).to_vec()),
                        task_id: task.id,
                        insertion_index: 0,
                    });
                }
            }

            let t = out.report.terms;
            sum.base_current += t.base_current;
            sum.base_buffer += t.base_buffer;
            sum.hbr_x += t.hbr_x;
            sum.hbr_y += t.hbr_y;
            sum.ha += t.ha;
            sum_total += total;
            steps += 1;
        }
        let n = steps as f64;
        let mean_terms = LossTerms {
            base_current: sum.base_current / n,
            base_buffer: sum.base_buffer / n,
            hbr_x: sum.hbr_x / n,
            hbr_y: sum.hbr_y / n,
            ha: sum.ha / n,
            lambda_ha: cfg.dualhsic.lambda_ha,
        };
        let seen_accuracy = if cfg.train.eval_each_epoch {
            Some(evaluate(&state.model, seen)?)
        } else {
            None
        };
        summaries.push(EpochSummary {
            task: task.id,
            epoch,
            steps,
            mean_terms,
            mean_total: sum_total / n,
            seen_accuracy,
        });
    }
    Ok(summaries)
}

/// Fraction of rows whose argmax over all classes equals the label; ties go
/// to the lowest class index.
pub fn accuracy(model: &Model, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Config(
            "cannot evaluate on an empty test split".into(),
        ));
    }
    let trace = forward(&model.net, &split.x)?;
    let correct = trace
        .logits
        .argmax_rows()
        .iter()
        .zip(&split.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// One row of the accuracy matrix: accuracy on each given test split.
pub fn evaluate(model: &Model, tests: &[&Split]) -> Result<Vec<f64>> {
    tests.iter().map(|s| accuracy(model, s)).collect()
}

/// Builds the (normalized) task stream a config describes.
pub fn load_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let d = &cfg.data;
    let stream = match d.source {
        DataSource::Blobs => {
            let mut rng = RngState::new(d.seed.unwrap_or(seed)).split(DATA_STREAM);
            data::make_split_blobs(
                d.num_tasks,
                d.classes_per_task,
                d.samples_per_class,
                d.dim,
                d.cluster_spread,
                &mut rng,
            )?
        }
        DataSource::Csv => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is not set".into()))?;
            data::load_csv_dataset(path, d.num_tasks)?
        }
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&d.images, &d.labels) else {
                return Err(Error::Config(
                    "data.images and data.labels must be set".into(),
                ));
            };
            data::load_idx_dataset(images, labels, d.num_tasks)?
        }
    };
    if d.normalize {
        data::normalize(&stream)
    } else {
        Ok(stream)
    }
}

/// Runs the whole task sequence for one seed.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let stream = load_stream(cfg, seed)?;
    run_on_stream(cfg, &stream, seed).map(|(r, _)| r)
}

/// Runs the task sequence on an already built stream and also returns the
/// final trainer state.
pub fn run_on_stream(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    seed: u64,
) -> Result<(RunResult, TrainerState)> {
    cfg.validate()?;
    if let Some(t) = stream.tasks.iter().find(|t| t.test.is_empty()) {
        return Err(Error::Config(format!(
            "task {} has an empty test split",
            t.id
        )));
    }
    let spec = cfg.mlp_spec(stream.dim, stream.num_classes)?;
    let mut state = TrainerState::new(&spec, cfg, seed)?;
    let num_tasks = stream.num_tasks();
    let mut acc = AccuracyMatrix::new(num_tasks);
    let mut epochs = Vec::new();
    let mut timings = Vec::with_capacity(num_tasks);

    for (t, task) in stream.tasks.iter().enumerate() {
        if t > 0 && cfg.train.reset_head_per_task {
            state.model.head = ProjectionHead::init(
                spec.latent_dim(),
                spec.activation,
                seed.wrapping_add(t as u64),
            );
        }
        let seen: Vec<&Split> = stream.tasks[..=t].iter().map(|k| &k.test).collect();
        let started = Instant::now();
        let log = match cfg.train.mode {
            TrainingMode::Continual => train_task(&mut state, task, cfg, &seen)?,
            TrainingMode::Joint => {
                let union = cumulative_task(&stream.tasks[..=t])?;
                train_task(&mut state, &union, cfg, &seen)?
            }
        };
        let train_secs = started.elapsed().as_secs_f64();
        let started = Instant::now();
        acc.push_row(evaluate(&state.model, &seen)?)?;
        timings.push(PhaseTiming {
            train_secs,
            eval_secs: started.elapsed().as_secs_f64(),
        });
        epochs.extend(log);
    }

    let final_average_accuracy = average_accuracy(&acc, num_tasks)?;
    let final_forgetting = if num_tasks >= 2 {
        Some(forgetting(&acc, num_tasks)?)
    } else {
        None
    };
    Ok((
        RunResult {
            seed,
            accuracy: acc,
            epochs,
            final_average_accuracy,
            final_forgetting,
            timings,
        },
        state,
    ))
}

/// The same experiment run with `λ_HA = −|λ|` and `λ_HA = +|λ|` over every
/// configured seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SignProbe {
    pub magnitude: f64,
    pub negative: Vec<RunResult>,
    pub positive: Vec<RunResult>,
}

impl SignProbe {
    pub fn mean_accuracy(runs: &[RunResult]) -> f64 {
        runs.iter().map(|r| r.final_average_accuracy).sum::<f64>() / runs.len() as f64
    }

    /// The sign with the higher mean final accuracy; a tie keeps the negative
    /// sign.
    pub fn better_sign(&self) -> f64 {
        if Self::mean_accuracy(&self.positive) > Self::mean_accuracy(&self.negative) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn better_lambda_ha(&self) -> f64 {
        self.better_sign() * self.magnitude
    }

    pub fn better_runs(&self) -> &[RunResult] {
        if self.better_sign() > 0.0 {
            &self.positive
        } else {
            &self.negative
        }
    }

    /// Compact record of the comparison, for results manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "magnitude": self.magnitude,
            "negative_mean_average_accuracy": Self::mean_accuracy(&self.negative),
            "positive_mean_average_accuracy": Self::mean_accuracy(&self.positive),
            "better_lambda_ha": self.better_lambda_ha(),
        })
    }
}

/// Runs `cfg` once per seed with each sign of its `λ_HA` magnitude.
pub fn probe_lambda_ha_sign(cfg: &ExperimentConfig) -> Result<SignProbe> {
    let magnitude = cfg.dualhsic.lambda_ha.abs();
    if magnitude == 0.0 {
        return Err(Error::Config(
            "sign probe needs a nonzero dualhsic.lambda_ha".into(),
        ));
    }
    let run_all = |lambda: f64| -> Result<Vec<RunResult>> {
        let mut c = cfg.clone();
        c.dualhsic.lambda_ha = lambda;
        c.seeds.iter().map(|&s| run_experiment(&c, s)).collect()
    };
    Ok(SignProbe {
        magnitude,
        negative: run_all(-magnitude)?,
        positive: run_all(magnitude)?,
    })
}

/// Training data of tasks `1..=t` fused, test data of the last one.
fn cumulative_task(tasks: &[Task]) -> Result<Task> {
    let last = tasks.last().expect("at least one task");
    let mut x = Matrix::zeros(0, last.train.x.cols());
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for t in tasks {
        x = x.vstack(&t.train.x)?;
        labels.extend_from_slice(&t.train.labels);
        classes.extend_from_slice(&t.classes);
    }
    Ok(Task {
        id: last.id,
        classes,
        train: Split { x, labels },
        test: last.test.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::DualHsicConfig;
    use crate::network::Activation;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_tasks = 2;
        cfg.data.samples_per_class = 40;
        cfg.data.dim = 6;
        cfg.data.cluster_spread = 0.3;
        cfg.model.hidden_dims = vec![12, 12];
        cfg.train.epochs = 3;
        cfg.train.batch_size = 16;
        cfg.train.lr = 0.1;
        cfg.train.buffer_capacity = 20;
        cfg
    }

    #[test]
    fn zero_network_predicts_class_zero() {
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Relu).unwrap();
        let mut model = Model::init(&spec, 0).unwrap();
        for (_, m) in model.named_tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let split = Split {
            x: Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap(),
            labels: vec![0, 1],
        };
        assert_eq!(accuracy(&model, &split).unwrap(), 0.5);
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = small_cfg();
        let a = run_experiment(&cfg, 3).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = run_experiment(&cfg, 4).unwrap();
        assert_ne!(a.accuracy, c.accuracy);
    }

    #[test]
    fn result_metrics_come_from_the_matrix() {
        let r = run_experiment(&small_cfg(), 0).unwrap();
        assert_eq!(r.accuracy.completed(), 2);
        assert_eq!(
            r.final_average_accuracy,
            average_accuracy(&r.accuracy, 2).unwrap()
        );
        assert_eq!(
            r.final_forgetting,
            Some(forgetting(&r.accuracy, 2).unwrap())
        );
        assert_eq!(r.epochs.len(), 6);
        assert_eq!(r.timings.len(), 2);
    }

    #[test]
    fn single_task_trains_well_and_has_no_forgetting() {
        let mut cfg = small_cfg();
        cfg.data.num_tasks = 1;
        cfg.train.epochs = 10;
        let r = run_experiment(&cfg, 0).unwrap();
        assert!(r.final_average_accuracy > 0.95, "{:?}", r.accuracy);
        assert!(r.final_forgetting.is_none());
    }

    #[test]
    fn buffer_terms_are_absent_until_the_buffer_fills() {
        let cfg = small_cfg();
        let r = run_experiment(&cfg, 1).unwrap();
        let first = &r.epochs[0];
        // the very first step has no replay, later ones do
        assert!(first.mean_terms.base_buffer > 0.0);
        let mut lone = cfg.clone();
        lone.train.buffer_capacity = 0;
        lone.dualhsic = DualHsicConfig::disabled();
        let r = run_experiment(&lone, 1).unwrap();
        assert!(r
            .epochs
            .iter()
            .all(|e| e.mean_terms.base_buffer == 0.0 && e.mean_terms.ha == 0.0));
    }

    #[test]
    fn derpp_runs_with_stored_logits() {
        let mut cfg = small_cfg();
        cfg = cfg.with_override("train.base", "derpp").unwrap();
        let r = run_experiment(&cfg, 2).unwrap();
        assert!(r.final_average_accuracy.is_finite());
    }

    #[test]
    fn joint_mode_keeps_earlier_tasks() {
        let mut cfg = small_cfg();
        cfg.train.mode = TrainingMode::Joint;
        cfg.dualhsic = DualHsicConfig::disabled();
        let r = run_experiment(&cfg, 0).unwrap();
        assert!(r.final_average_accuracy > 0.9, "{:?}", r.accuracy);
    }

    #[test]
    fn per_epoch_evaluation_is_recorded() {
        let mut cfg = small_cfg();
        cfg.train.eval_each_epoch = true;
        let r = run_experiment(&cfg, 0).unwrap();
        assert_eq!(r.epochs[0].seen_accuracy.as_ref().unwrap().len(), 1);
        assert_eq!(r.epochs[5].seen_accuracy.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn sign_probe_picks_the_better_mean() {
        let mut cfg = small_cfg();
        cfg.seeds = vec![0, 1];
        cfg.train.epochs = 1;
        let p = probe_lambda_ha_sign(&cfg).unwrap();
        assert_eq!(p.negative.len(), 2);
        let (neg, pos) = (
            SignProbe::mean_accuracy(&p.negative),
            SignProbe::mean_accuracy(&p.positive),
        );
        assert_eq!(p.better_lambda_ha(), if pos > neg { 0.75 } else { -0.75 });
        assert_eq!(p.to_json()["better_lambda_ha"], p.better_lambda_ha());
        cfg.dualhsic.lambda_ha = 0.0;
        assert!(probe_lambda_ha_sign(&cfg).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut cfg = small_cfg();
        cfg.train.lr = 1e200;
        assert!(matches!(run_experiment(&cfg, 0), Err(Error::Divergence(_))));
    }
}
