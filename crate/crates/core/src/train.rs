//! Two-stage training: stage 1 freezes the transformer side and trains only
//! the history path (compressor, gates, recency embeddings); stage 2 trains
//! everything. Bias-corrected adaptive updates, fully deterministic under a
//! fixed seed on one thread.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::env::Episode;
use crate::error::{Error, Result};
use crate::eval::{element_accuracy, evaluate_model, step_accuracy};
use crate::model::{forward_loss, gold_candidate_index, step_input_from_episode, ModelParams};
use crate::params::{collect_params, ParamVisit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{GradientMap, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning rate and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::InvalidConfig("invalid optimizer hyper-parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let stage = |lr: f64, max_steps: usize| StageConfig {
            lr,
            batch_size: 8,
            max_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 50,
        };
        TrainConfig {
            seed: 0,
            stage1: stage(3e-4, 2000),
            stage2: stage(1e-4, 4000),
        }
    }
}

/// Names trainable at a given stage. Stage 1: the compressor, the gates, and
/// the history recency embeddings; the transformer side (embedder, encoder
/// attention/FFN, heads) stays frozen. Stage 2: everything.
pub fn trainable_set<S: Scalar>(stage: u8, params: &ModelParams<S>) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    params.visit_params("", &mut |name, _| {
        let in_stage1 = name.starts_with("compressor.")
            || name.contains(".gate.")
            || name == "history_index";
        if stage != 1 || in_stage1 {
            names.insert(name);
        }
    });
    names
}

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<S: Scalar> {
    moments: HashMap<String, (Tensor<S>, Tensor<S>)>,
    pub step: usize,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState {
            moments: HashMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected adaptive update over the trainable subset:
/// `m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;`
/// `theta -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
/// Parameters outside the subset are untouched bit-exactly.
pub fn optimizer_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &GradientMap<S>,
    state: &mut OptimizerState<S>,
    cfg: &StageConfig,
    trainable: &BTreeSet<String>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let bc2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);

    let mut failure: Option<Error> = None;
    params.visit_params_mut("", &mut |name, tensor| {
        if failure.is_some() || !trainable.contains(&name) {
            return;
        }
        let grad = match grads.get(&name) {
            Some(g) => g,
            None => {
                failure = Some(Error::UnknownParam(name.clone()));
                return;
            }
        };
        if !grad.all_finite() {
            failure = Some(Error::NanGradient { param: name });
            return;
        }
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (Tensor::zeros(tensor.shape()), Tensor::zeros(tensor.shape())));
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = grad.data();
        for ((theta, (mi, vi)), &g) in tensor
            .data_mut()
            .iter_mut()
            .zip(md.iter_mut().zip(vd.iter_mut()))
            .zip(gd)
        {
            *mi = b1 * *mi + one_m_b1 * g;
            *vi = b2 * *vi + one_m_b2 * g * g;
            let m_hat = *mi * bc1;
            let v_hat = *vi * bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub val_element_acc: Option<f64>,
    pub val_step_acc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreezeReport {
    /// Tensors outside the stage-1 trainable set compared before/after.
    pub checked_tensors: usize,
    pub bit_identical: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub freeze: Option<FreezeReport>,
}

/// All (episode, step) pairs of a split, shuffled per epoch from a named
/// stream of the training seed.
struct SampleStream<'a> {
    episodes: &'a [Episode],
    order: Vec<(usize, usize)>,
    cursor: usize,
    rng: Rng,
}

impl<'a> SampleStream<'a> {
    fn new(episodes: &'a [Episode], seed: u64, stage: u8) -> Self {
        let order: Vec<(usize, usize)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |t| (e, t)))
            .collect();
        let mut s = SampleStream {
            episodes,
            order,
            cursor: 0,
            rng: Rng::stream(seed, &format!("train/stage{stage}/shuffle")),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self, size: usize, n_max: usize) -> Vec<crate::model::LabelledStep> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let (e, t) = self.order[self.cursor];
            self.cursor += 1;
            let ep = &self.episodes[e];
            let input = step_input_from_episode(ep, t, n_max);
            let gold_el = gold_candidate_index(&ep.steps[t]);
            batch.push((input, gold_el, ep.steps[t].gold_op));
        }
        batch
    }
}

/// Run one training stage in place. Divergence (non-finite loss) aborts with
/// the parameters from the last completed step retained.
pub fn run_stage<S: Scalar>(
    params: &mut ModelParams<S>,
    train: &[Episode],
    val: &[Episode],
    cfg: &StageConfig,
    stage: u8,
    seed: u64,
    log: &mut TrainingLog,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Message("empty training split".into()));
    }
    let trainable = trainable_set(stage, params);
    let mut state: OptimizerState<S> = OptimizerState::new();
    let mut stream = SampleStream::new(train, seed, stage);
    let n_max = params.config.compressor.max_histories;

    for step in 0..cfg.max_steps {
        let batch = stream.next_batch(cfg.batch_size, n_max);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape)?;
        let loss_node = forward_loss(&mut tape, &batch, &nodes, &params.config)?;
        let loss = tape.value(loss_node).item().to_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { stage, step });
        }
        let grads = tape.backward(loss_node)?;
        drop(tape);
        optimizer_step(params, &grads, &mut state, cfg, &trainable)?;

        let evaluate_now = cfg.eval_every > 0
            && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps)
            && !val.is_empty();
        let (val_element_acc, val_step_acc) = if evaluate_now {
            let results = evaluate_model(params, val)?;
            (
                Some(element_accuracy(&results)?),
                Some(step_accuracy(&results)?),
            )
        } else {
            (None, None)
        };
        log.records.push(LogRecord {
            stage,
            step,
            loss,
            val_element_acc,
            val_step_acc,
        });
    }
    Ok(())
}

/// Stage 1 then stage 2, with the stage-1 freeze verified bit-exactly and
/// recorded in the log. Fresh optimizer moments at the stage switch.
pub fn run_training<S: Scalar>(
    params: &mut ModelParams<S>,
    train: &[Episode],
    val: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    let stage1_trainable = trainable_set(1, params);
    let frozen_before: Vec<(String, Tensor<S>)> = collect_params(params, "")
        .into_iter()
        .filter(|(name, _)| !stage1_trainable.contains(name))
        .collect();

    run_stage(params, train, val, &cfg.stage1, 1, cfg.seed, &mut log)?;

    let after = collect_params(params, "");
    let after_map: HashMap<&str, &Tensor<S>> =
        after.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let bit_identical = frozen_before
        .iter()
        .all(|(name, t)| after_map[name.as_str()].exact_eq(t));
    log.freeze = Some(FreezeReport {
        checked_tensors: frozen_before.len(),
        bit_identical,
    });
    debug_assert!(bit_identical, "stage 1 modified a frozen tensor");

    run_stage(params, train, val, &cfg.stage2, 2, cfg.seed, &mut log)?;
    Ok(log)
}
