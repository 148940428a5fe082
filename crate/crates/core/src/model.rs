//! The action-prediction agent: compressed histories + current state +
//! instruction go through a self-attention encoder whose blocks gated-attend
//! (zero-initialized) into the history tokens; an element pointer head and an
//! operation head read the encoded stream.

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_encode, BaselineConfig, HistoryMode};
use crate::compressor::{
    compress_on_tape, init_compressor, CompressorConfig, CompressorParams, EmbedderNodes,
    EmbedderParams, HistoryInput,
};
use crate::env::{self, Candidate, Episode, Operation, OPERATIONS};
use crate::error::{Error, Result};
use crate::nn::{
    feed_forward, gated_attention, multi_head_attention, AttentionNodes, AttentionParams,
    FeedForwardParams, GateNodes, GateParams, INIT_STD,
};
use crate::params::{join, ParamVisit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    /// Encoder width; must equal the compressor width.
    pub width: usize,
    pub heads: usize,
    /// L: encoder blocks.
    pub encoder_layers: usize,
    pub compressor: CompressorConfig,
    pub history_mode: HistoryMode,
    pub baselines: BaselineConfig,
    /// Fidelity variant: the gated history stage reuses the self-attention
    /// projections, making each block a gated masked form of joint
    /// concatenation attention.
    pub concat_mode: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            vocab: env::VOCAB_SIZE,
            width: 64,
            heads: 2,
            encoder_layers: 1,
            compressor: CompressorConfig::desk(),
            history_mode: HistoryMode::Ours,
            baselines: BaselineConfig::default(),
            concat_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.compressor.validate()?;
        if self.width != self.compressor.width {
            return Err(Error::InvalidConfig(format!(
                "encoder width {} != compressor width {}",
                self.width, self.compressor.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(
                "encoder head count must divide width".into(),
            ));
        }
        if self.encoder_layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one block".into()));
        }
        if self.vocab == 0 {
            return Err(Error::InvalidConfig("vocab must be positive".into()));
        }
        Ok(())
    }
}

/// One step as the model sees it.
#[derive(Clone, Debug)]
pub struct StepInput {
    /// Oldest-first, consecutive, ending at the step before the current one.
    pub histories: Vec<HistoryInput>,
    pub current_state_tokens: Vec<u32>,
    pub past_action_tokens: Vec<u32>,
    pub instruction_tokens: Vec<u32>,
    /// Spans into `current_state_tokens`.
    pub candidates: Vec<Candidate>,
}

impl StepInput {
    /// The same step with every history removed (the no-history view).
    pub fn without_histories(&self) -> StepInput {
        StepInput {
            histories: Vec::new(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        for c in &self.candidates {
            if c.span_start + c.span_len > self.current_state_tokens.len() || c.span_len == 0 {
                return Err(Error::Message(format!(
                    "candidate {} span out of bounds",
                    c.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ActionPrediction<S: Scalar> {
    pub element_logits: Tensor<S>,
    pub operation_logits: Tensor<S>,
    /// (element id, operation), argmax with lowest-index tie break.
    pub chosen: (usize, Operation),
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams<S: Scalar> {
    pub self_attn: AttentionParams<S>,
    pub cross_attn: AttentionParams<S>,
    pub gate: GateParams<S>,
    pub ffn: FeedForwardParams<S>,
}

impl<S: Scalar> EncoderBlockParams<S> {
    fn init(width: usize, heads: usize, rng: &mut Rng) -> Self {
        EncoderBlockParams {
            self_attn: AttentionParams::init(width, heads, rng),
            cross_attn: AttentionParams::init(width, heads, rng),
            gate: GateParams::init(heads),
            ffn: FeedForwardParams::init(width, rng),
        }
    }

    fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<EncoderBlockNodes> {
        Ok(EncoderBlockNodes {
            self_attn: self.self_attn.register(tape, &join(prefix, "self"))?,
            cross_attn: self.cross_attn.register(tape, &join(prefix, "xattn"))?,
            gate: self.gate.register(tape, &join(prefix, "gate"))?,
            ffn: self.ffn.register(tape, &join(prefix, "ffn"))?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for EncoderBlockParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.self_attn.visit_params(&join(prefix, "self"), f);
        self.cross_attn.visit_params(&join(prefix, "xattn"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.self_attn.visit_params_mut(&join(prefix, "self"), f);
        self.cross_attn.visit_params_mut(&join(prefix, "xattn"), f);
        self.gate.visit_params_mut(&join(prefix, "gate"), f);
        self.ffn.visit_params_mut(&join(prefix, "ffn"), f);
    }
}

pub struct EncoderBlockNodes {
    pub self_attn: AttentionNodes,
    pub cross_attn: AttentionNodes,
    pub gate: GateNodes,
    pub ffn: crate::nn::FeedForwardNodes,
}

#[derive(Clone, Debug)]
pub struct HeadParams<S: Scalar> {
    /// `[d x 1]` pointer read-out vector.
    pub pointer: Tensor<S>,
    pub op_w: Tensor<S>,
    pub op_b: Tensor<S>,
}

impl<S: Scalar> HeadParams<S> {
    fn init(width: usize, rng: &mut Rng) -> Self {
        HeadParams {
            pointer: Tensor::randn(&[width, 1], INIT_STD, rng),
            op_w: Tensor::randn(&[width, OPERATIONS.len()], INIT_STD, rng),
            op_b: Tensor::zeros(&[OPERATIONS.len()]),
        }
    }

    fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<HeadNodes> {
        Ok(HeadNodes {
            pointer: tape.param(&join(prefix, "pointer"), &self.pointer)?,
            op_w: tape.param(&join(prefix, "op_w"), &self.op_w)?,
            op_b: tape.param(&join(prefix, "op_b"), &self.op_b)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for HeadParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "pointer"), &self.pointer);
        f(join(prefix, "op_w"), &self.op_w);
        f(join(prefix, "op_b"), &self.op_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "pointer"), &mut self.pointer);
        f(join(prefix, "op_w"), &mut self.op_w);
        f(join(prefix, "op_b"), &mut self.op_b);
    }
}

pub struct HeadNodes {
    pub pointer: NodeId,
    pub op_w: NodeId,
    pub op_b: NodeId,
}

#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub embedder: EmbedderParams<S>,
    pub compressor: CompressorParams<S>,
    /// Learned recency embedding: row r is added to every token of the
    /// history at recency distance r+1 from the current step.
    pub history_index: Tensor<S>,
    pub encoder: Vec<EncoderBlockParams<S>>,
    pub heads: HeadParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Initialize from named sub-streams of `root_seed`; gates start at zero.
    pub fn init(config: &ModelConfig, root_seed: u64) -> Result<ModelParams<S>> {
        config.validate()?;
        let embedder = EmbedderParams::init(
            config.vocab,
            config.width,
            &mut Rng::stream(root_seed, "init/embed"),
        );
        let compressor = init_compressor(
            &config.compressor,
            &mut Rng::stream(root_seed, "init/compressor"),
        )?;
        let history_index = Tensor::randn(
            &[config.compressor.max_histories, config.width],
            INIT_STD,
            &mut Rng::stream(root_seed, "init/history_index"),
        );
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                EncoderBlockParams::init(
                    config.width,
                    config.heads,
                    &mut Rng::stream(root_seed, &format!("init/encoder/block{i}")),
                )
            })
            .collect();
        let heads = HeadParams::init(config.width, &mut Rng::stream(root_seed, "init/heads"));
        Ok(ModelParams {
            config: config.clone(),
            embedder,
            compressor,
            history_index,
            encoder,
            heads,
        })
    }

    pub fn register(&self, tape: &mut Tape<S>) -> Result<ModelNodes> {
        let embedder = self.embedder.register(tape, "embed")?;
        let compressor = self.compressor.register(tape, "compressor")?;
        let history_index = tape.param("history_index", &self.history_index)?;
        let mut blocks = Vec::with_capacity(self.encoder.len());
        for (i, b) in self.encoder.iter().enumerate() {
            blocks.push(b.register(tape, &format!("encoder.block{i}"))?);
        }
        let heads = self.heads.register(tape, "head")?;
        Ok(ModelNodes {
            embedder,
            compressor,
            history_index,
            blocks,
            heads,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for ModelParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.embedder.visit_params(&join(prefix, "embed"), f);
        self.compressor.visit_params(&join(prefix, "compressor"), f);
        f(join(prefix, "history_index"), &self.history_index);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("encoder.block{i}")), f);
        }
        self.heads.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.embedder.visit_params_mut(&join(prefix, "embed"), f);
        self.compressor
            .visit_params_mut(&join(prefix, "compressor"), f);
        f(join(prefix, "history_index"), &mut self.history_index);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("encoder.block{i}")), f);
        }
        self.heads.visit_params_mut(&join(prefix, "head"), f);
    }
}

pub struct ModelNodes {
    pub embedder: EmbedderNodes,
    pub compressor: crate::compressor::CompressorNodes,
    pub history_index: NodeId,
    pub blocks: Vec<EncoderBlockNodes>,
    pub heads: HeadNodes,
}

/// Embed the current input and produce the history token block (`None` when
/// no history rows exist). History rows carry a learned recency embedding.
pub fn assemble<S: Scalar>(
    tape: &mut Tape<S>,
    step: &StepInput,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
) -> Result<(NodeId, Option<NodeId>)> {
    step.validate()?;
    let n = step.histories.len();
    if n > cfg.compressor.max_histories {
        return Err(Error::TooManyHistories {
            got: n,
            max: cfg.compressor.max_histories,
        });
    }
    let current = crate::compressor::embed_stream(
        tape,
        &nodes.embedder,
        &[
            (&step.current_state_tokens, 0),
            (&step.past_action_tokens, 1),
            (&step.instruction_tokens, 2),
        ],
    )?;

    let mut rows: Vec<NodeId> = Vec::new();
    match cfg.history_mode {
        HistoryMode::Ours => {
            let blocks = compress_on_tape(
                tape,
                &step.histories,
                &nodes.compressor,
                &nodes.embedder,
                &cfg.compressor,
            )?;
            for (i, block) in blocks.into_iter().enumerate() {
                rows.push(with_recency(tape, block, n - i, nodes.history_index)?);
            }
        }
        HistoryMode::None => {}
        mode => {
            let streams = baseline_encode(mode, &step.histories, &cfg.baselines)?;
            for (i, stream) in streams.iter().enumerate() {
                if stream.is_empty() {
                    continue;
                }
                let embedded =
                    crate::compressor::embed_stream(tape, &nodes.embedder, &[(stream, 0)])?;
                rows.push(with_recency(tape, embedded, n - i, nodes.history_index)?);
            }
        }
    }
    let history_tokens = if rows.is_empty() {
        None
    } else {
        Some(tape.concat(&rows, 0)?)
    };
    Ok((current, history_tokens))
}

/// Add the learned recency-distance embedding row (distance 1 = the step
/// immediately before the current one).
fn with_recency<S: Scalar>(
    tape: &mut Tape<S>,
    block: NodeId,
    distance: usize,
    table: NodeId,
) -> Result<NodeId> {
    let row = tape.narrow(table, 0, distance - 1, 1)?;
    tape.add(block, row)
}

/// Run the encoder blocks: self-attention, zero-init gated attention into the
/// history tokens (skipped when there are none), feed-forward.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    current: NodeId,
    history_tokens: Option<NodeId>,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let mut x = current;
    for block in &nodes.blocks {
        x = multi_head_attention(tape, x, x, &block.self_attn, None)?;
        if let Some(h) = history_tokens {
            let attn = if cfg.concat_mode {
                &block.self_attn
            } else {
                &block.cross_attn
            };
            x = gated_attention(tape, x, h, attn, &block.gate)?;
        }
        x = feed_forward(tape, x, &block.ffn)?;
    }
    Ok(x)
}

/// Element and operation logits for one step (both `[1 x n]`).
pub fn forward_logits<S: Scalar>(
    tape: &mut Tape<S>,
    step: &StepInput,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
) -> Result<(NodeId, NodeId)> {
    let (current, history_tokens) = assemble(tape, step, nodes, cfg)?;
    let enc = encode(tape, current, history_tokens, nodes, cfg)?;
    let mut per_candidate = Vec::with_capacity(step.candidates.len());
    for c in &step.candidates {
        let span = tape.narrow(enc, 0, c.span_start, c.span_len)?;
        let pooled = tape.mean_rows(span)?;
        per_candidate.push(tape.matmul(pooled, nodes.heads.pointer)?);
    }
    let element_logits = tape.concat(&per_candidate, 1)?;
    let pooled = tape.mean_rows(enc)?;
    let op_logits = tape.matmul(pooled, nodes.heads.op_w)?;
    let op_logits = tape.add(op_logits, nodes.heads.op_b)?;
    Ok((element_logits, op_logits))
}

fn argmax_lowest<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic prediction for one step.
pub fn predict<S: Scalar>(step: &StepInput, params: &ModelParams<S>) -> Result<ActionPrediction<S>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape)?;
    let (el, op) = forward_logits(&mut tape, step, &nodes, &params.config)?;
    let element_logits = tape.value(el).clone();
    let operation_logits = tape.value(op).clone();
    let el_idx = argmax_lowest(element_logits.data());
    let op_idx = argmax_lowest(operation_logits.data());
    Ok(ActionPrediction {
        chosen: (
            step.candidates[el_idx].id,
            Operation::from_index(op_idx).expect("operation index"),
        ),
        element_logits,
        operation_logits,
    })
}

/// One labelled training example: the step, the gold candidate position
/// (index into `candidates`), and the gold operation.
pub type LabelledStep = (StepInput, usize, Operation);

/// Mean over the batch of element cross-entropy + operation cross-entropy.
pub fn forward_loss<S: Scalar>(
    tape: &mut Tape<S>,
    batch: &[LabelledStep],
    nodes: &ModelNodes,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Message("empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for (step, gold_el, gold_op) in batch {
        if *gold_el >= step.candidates.len() {
            return Err(Error::TargetOutOfRange {
                index: *gold_el,
                classes: step.candidates.len(),
            });
        }
        let (el, op) = forward_logits(tape, step, nodes, cfg)?;
        let ce_el = tape.cross_entropy(el, &[*gold_el])?;
        let ce_op = tape.cross_entropy(op, &[gold_op.index()])?;
        let sample = tape.add(ce_el, ce_op)?;
        total = Some(match total {
            None => sample,
            Some(t) => tape.add(t, sample)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64))
}

// ---- episode adapters -------------------------------------------------------

/// Build the model input for evaluated step `t` of an episode, teacher-forced
/// on the recorded canonical actions. Histories are the most recent
/// `n_max` states before the step (context states included), oldest first.
pub fn step_input_from_episode(episode: &Episode, t: usize, n_max: usize) -> StepInput {
    let m = episode.context_states.len();
    let global_t = m + t;
    let mut histories: Vec<HistoryInput> = Vec::new();
    let first = global_t.saturating_sub(n_max);
    for gs in first..global_t {
        // context states are observation-only: no selection record, no actions
        let (state_tokens, action_tokens) = if gs < m {
            (episode.context_states[gs].clone(), Vec::new())
        } else {
            let j = gs - m;
            let step = &episode.steps[j];
            let view = env::history_view(&step.state_tokens, step.chosen_id);
            let mut acts = Vec::new();
            for prev in &episode.steps[..j] {
                acts.extend(env::action_triple(prev.gold_op, prev.chosen_id));
            }
            (view, acts)
        };
        histories.push(HistoryInput {
            state_tokens,
            action_tokens,
            instruction_tokens: episode.instruction_tokens.clone(),
            step_index: gs,
        });
    }
    let step = &episode.steps[t];
    let mut past_action_tokens = Vec::new();
    for prev in &episode.steps[..t] {
        past_action_tokens.extend(env::action_triple(prev.gold_op, prev.chosen_id));
    }
    StepInput {
        histories,
        current_state_tokens: step.state_tokens.clone(),
        past_action_tokens,
        instruction_tokens: episode.instruction_tokens.clone(),
        candidates: step.candidates.clone(),
    }
}

/// Gold candidate position for a step (candidates are id-ordered, so the
/// position equals the chosen id's index in the candidate table).
pub fn gold_candidate_index(step: &env::EpisodeStep) -> usize {
    step.candidates
        .iter()
        .position(|c| c.id == step.chosen_id)
        .expect("chosen id is always a candidate")
}
