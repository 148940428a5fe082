//! The history compressor: each verbose history input is absorbed into
//! exactly Q learned query vectors by M stacked layers of self-attention,
//! cross-attention into that history's token stream, a feed-forward block,
//! and cross-history fusion. One parameter set serves every history.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    feed_forward, multi_head_attention, AttentionNodes, AttentionParams, FeedForwardNodes,
    FeedForwardParams, INIT_STD,
};
use crate::params::{join, ParamVisit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{sinusoidal_positions, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CompressorConfig {
    /// Q: number of learnable queries (compressed length per history).
    pub queries: usize,
    /// d: feature width.
    pub width: usize,
    /// M: stacked compressor layers.
    pub layers: usize,
    pub heads: usize,
    /// N_max: most histories consumed per step.
    pub max_histories: usize,
    /// Neighbor radius of the fusion window.
    pub fusion_window: usize,
    /// Fusion module on/off (ablation axis).
    pub fusion_enabled: bool,
}

impl CompressorConfig {
    /// Hyper-parameters reported for the full-scale model.
    pub fn paper() -> Self {
        CompressorConfig {
            queries: 256,
            width: 768,
            layers: 2,
            heads: 8,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        }
    }

    /// Desk-scale defaults used throughout the synthetic benchmark.
    pub fn desk() -> Self {
        CompressorConfig {
            queries: 8,
            width: 64,
            layers: 2,
            heads: 2,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries < 1 {
            return Err(Error::InvalidConfig("compressor queries must be >= 1".into()));
        }
        if self.layers < 1 {
            return Err(Error::InvalidConfig("compressor layers must be >= 1".into()));
        }
        if self.heads < 1 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(
                "head count must divide compressor width".into(),
            ));
        }
        Ok(())
    }
}

/// Tokenized (state, past-actions, instruction) triple for one past step.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryInput {
    pub state_tokens: Vec<u32>,
    pub action_tokens: Vec<u32>,
    pub instruction_tokens: Vec<u32>,
    pub step_index: usize,
}

/// Fixed-length compressed representation of one history input.
#[derive(Clone, Debug)]
pub struct CompressedHistory<S: Scalar> {
    pub vectors: Tensor<S>,
    pub source_step: usize,
}

/// Token + segment embedding tables shared by the compressor and the
/// current-input stream. Segment ids: 0 = state, 1 = actions, 2 = instruction.
#[derive(Clone, Debug)]
pub struct EmbedderParams<S: Scalar> {
    pub token_table: Tensor<S>,
    pub segment_table: Tensor<S>,
}

impl<S: Scalar> EmbedderParams<S> {
    pub fn init(vocab: usize, width: usize, rng: &mut Rng) -> Self {
        EmbedderParams {
            token_table: Tensor::randn(&[vocab, width], INIT_STD, rng),
            segment_table: Tensor::randn(&[3, width], INIT_STD, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_table.rows()
    }

    pub fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<EmbedderNodes> {
        Ok(EmbedderNodes {
            token_table: tape.param(&join(prefix, "token_table"), &self.token_table)?,
            segment_table: tape.param(&join(prefix, "segment_table"), &self.segment_table)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for EmbedderParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "token_table"), &self.token_table);
        f(join(prefix, "segment_table"), &self.segment_table);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "token_table"), &mut self.token_table);
        f(join(prefix, "segment_table"), &mut self.segment_table);
    }
}

pub struct EmbedderNodes {
    pub token_table: NodeId,
    pub segment_table: NodeId,
}

#[derive(Clone, Debug)]
pub struct CompressorLayerParams<S: Scalar> {
    pub self_attn: AttentionParams<S>,
    pub cross_attn: AttentionParams<S>,
    pub ffn: FeedForwardParams<S>,
    /// Fusion projection `[(2*window+1)*d x d]` applied to the channel-wise
    /// concatenation of the neighbor window.
    pub fusion_w: Tensor<S>,
    pub fusion_b: Tensor<S>,
}

impl<S: Scalar> CompressorLayerParams<S> {
    fn init(cfg: &CompressorConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let span = (2 * cfg.fusion_window + 1) * d;
        CompressorLayerParams {
            self_attn: AttentionParams::init(d, cfg.heads, rng),
            cross_attn: AttentionParams::init(d, cfg.heads, rng),
            ffn: FeedForwardParams::init(d, rng),
            fusion_w: Tensor::randn(&[span, d], INIT_STD, rng),
            fusion_b: Tensor::zeros(&[d]),
        }
    }

    fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<CompressorLayerNodes> {
        Ok(CompressorLayerNodes {
            self_attn: self.self_attn.register(tape, &join(prefix, "self"))?,
            cross_attn: self.cross_attn.register(tape, &join(prefix, "cross"))?,
            ffn: self.ffn.register(tape, &join(prefix, "ffn"))?,
            fusion_w: tape.param(&join(prefix, "fusion_w"), &self.fusion_w)?,
            fusion_b: tape.param(&join(prefix, "fusion_b"), &self.fusion_b)?,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for CompressorLayerParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.self_attn.visit_params(&join(prefix, "self"), f);
        self.cross_attn.visit_params(&join(prefix, "cross"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
        f(join(prefix, "fusion_w"), &self.fusion_w);
        f(join(prefix, "fusion_b"), &self.fusion_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.self_attn.visit_params_mut(&join(prefix, "self"), f);
        self.cross_attn.visit_params_mut(&join(prefix, "cross"), f);
        self.ffn.visit_params_mut(&join(prefix, "ffn"), f);
        f(join(prefix, "fusion_w"), &mut self.fusion_w);
        f(join(prefix, "fusion_b"), &mut self.fusion_b);
    }
}

pub struct CompressorLayerNodes {
    pub self_attn: AttentionNodes,
    pub cross_attn: AttentionNodes,
    pub ffn: FeedForwardNodes,
    pub fusion_w: NodeId,
    pub fusion_b: NodeId,
}

/// One shared parameter set regardless of how many histories are compressed.
#[derive(Clone, Debug)]
pub struct CompressorParams<S: Scalar> {
    pub query_table: Tensor<S>,
    pub layers: Vec<CompressorLayerParams<S>>,
}

impl<S: Scalar> CompressorParams<S> {
    pub fn register(&self, tape: &mut Tape<S>, prefix: &str) -> Result<CompressorNodes> {
        let query_table = tape.param(&join(prefix, "query_table"), &self.query_table)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.register(tape, &join(prefix, &format!("layer{i}")))?);
        }
        Ok(CompressorNodes {
            query_table,
            layers,
        })
    }
}

impl<S: Scalar> ParamVisit<S> for CompressorParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "query_table"), &self.query_table);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "query_table"), &mut self.query_table);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

pub struct CompressorNodes {
    pub query_table: NodeId,
    pub layers: Vec<CompressorLayerNodes>,
}

/// Randomly initialize compressor parameters for a config. The scalar count
/// always equals [`compressor_param_count`]; weight sharing means it does not
/// depend on how many histories are consumed.
pub fn init_compressor<S: Scalar>(cfg: &CompressorConfig, rng: &mut Rng) -> Result<CompressorParams<S>> {
    cfg.validate()?;
    let query_table = Tensor::randn(&[cfg.queries, cfg.width], INIT_STD, rng);
    let layers = (0..cfg.layers)
        .map(|_| CompressorLayerParams::init(cfg, rng))
        .collect();
    Ok(CompressorParams {
        query_table,
        layers,
    })
}

/// Closed-form parameter count:
/// `Q*d + M*((17 + 2*window)*d^2 + 12*d)`
/// (self/cross attention 4d^2+2d each, feed-forward 8d^2+7d, fusion
/// (2w+1)d^2+d).
pub fn compressor_param_count(cfg: &CompressorConfig) -> usize {
    let d = cfg.width;
    let per_layer = (17 + 2 * cfg.fusion_window) * d * d + 12 * d;
    cfg.queries * d + cfg.layers * per_layer
}

/// Embed one history input: `[state ; actions ; instruction]` token rows plus
/// sinusoidal positions over the combined stream and a per-segment offset.
pub fn embed_history<S: Scalar>(
    tape: &mut Tape<S>,
    emb: &EmbedderNodes,
    hist: &HistoryInput,
) -> Result<NodeId> {
    if hist.state_tokens.is_empty() {
        return Err(Error::Message("history state tokens must be nonempty".into()));
    }
    embed_stream(
        tape,
        emb,
        &[
            (&hist.state_tokens, 0),
            (&hist.action_tokens, 1),
            (&hist.instruction_tokens, 2),
        ],
    )
}

/// Shared stream embedding: token rows + sinusoidal positions + segment rows.
pub fn embed_stream<S: Scalar>(
    tape: &mut Tape<S>,
    emb: &EmbedderNodes,
    segments: &[(&[u32], u32)],
) -> Result<NodeId> {
    let mut ids: Vec<u32> = Vec::new();
    let mut seg_ids: Vec<u32> = Vec::new();
    for (tokens, seg) in segments {
        ids.extend_from_slice(tokens);
        seg_ids.extend(std::iter::repeat(*seg).take(tokens.len()));
    }
    let d = tape.value(emb.token_table).cols();
    let tok = tape.embed(emb.token_table, &ids)?;
    let pos = tape.leaf(sinusoidal_positions::<S>(ids.len(), d));
    let with_pos = tape.add(tok, pos)?;
    let seg = tape.embed(emb.segment_table, &seg_ids)?;
    tape.add(with_pos, seg)
}

/// Residual cross-history fusion: for each history, concatenate the feature
/// blocks of the `window` neighbors on each side along the channel dimension
/// (missing neighbors are zero blocks), project back to width d, and add onto
/// that history's features.
pub fn fuse_histories<S: Scalar>(
    tape: &mut Tape<S>,
    features: &[NodeId],
    fusion_w: NodeId,
    fusion_b: NodeId,
    window: usize,
) -> Result<Vec<NodeId>> {
    let n = features.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let shape = tape.value(features[0]).shape().to_vec();
    let zero_block = tape.leaf(Tensor::zeros(&shape));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut parts = Vec::with_capacity(2 * window + 1);
        for offset in -(window as isize)..=(window as isize) {
            let j = i as isize + offset;
            if j < 0 || j >= n as isize {
                parts.push(zero_block);
            } else {
                parts.push(features[j as usize]);
            }
        }
        let stacked = tape.concat(&parts, 1)?;
        let proj = tape.matmul(stacked, fusion_w)?;
        let proj = tape.add(proj, fusion_b)?;
        out.push(tape.add(features[i], proj)?);
    }
    Ok(out)
}

/// One compressor layer applied to every history with shared weights:
/// self-attention over each history's queries, cross-attention into that
/// history's token stream, feed-forward, then fusion across histories.
pub fn compress_layer<S: Scalar>(
    tape: &mut Tape<S>,
    query_states: &[NodeId],
    history_streams: &[NodeId],
    layer: &CompressorLayerNodes,
    cfg: &CompressorConfig,
) -> Result<Vec<NodeId>> {
    if query_states.len() != history_streams.len() {
        return Err(Error::Message(format!(
            "{} query states vs {} history streams",
            query_states.len(),
            history_streams.len()
        )));
    }
    let mut features = Vec::with_capacity(query_states.len());
    for (&q, &stream) in query_states.iter().zip(history_streams) {
        let q = multi_head_attention(tape, q, q, &layer.self_attn, None)?;
        let q = multi_head_attention(tape, q, stream, &layer.cross_attn, None)?;
        let q = feed_forward(tape, q, &layer.ffn)?;
        features.push(q);
    }
    if cfg.fusion_enabled {
        fuse_histories(tape, &features, layer.fusion_w, layer.fusion_b, cfg.fusion_window)
    } else {
        Ok(features)
    }
}

/// Compress histories on an existing tape; returns one `[Q x d]` node per
/// history, oldest first. Gradient-carrying path used by the full model.
pub fn compress_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    histories: &[HistoryInput],
    comp: &CompressorNodes,
    emb: &EmbedderNodes,
    cfg: &CompressorConfig,
) -> Result<Vec<NodeId>> {
    if histories.len() > cfg.max_histories {
        return Err(Error::TooManyHistories {
            got: histories.len(),
            max: cfg.max_histories,
        });
    }
    if histories.windows(2).any(|w| w[0].step_index >= w[1].step_index) {
        return Err(Error::Message(
            "history step indices must be strictly increasing".into(),
        ));
    }
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let streams: Vec<NodeId> = histories
        .iter()
        .map(|h| embed_history(tape, emb, h))
        .collect::<Result<_>>()?;
    // every history starts from the same learned query block
    let mut states: Vec<NodeId> = vec![comp.query_table; histories.len()];
    for layer in &comp.layers {
        states = compress_layer(tape, &states, &streams, layer, cfg)?;
    }
    Ok(states)
}

/// Standalone compression: builds a private graph and returns plain tensors.
/// Always yields exactly Q rows per history, no matter the input length.
pub fn compress<S: Scalar>(
    histories: &[HistoryInput],
    comp: &CompressorParams<S>,
    emb: &EmbedderParams<S>,
    cfg: &CompressorConfig,
) -> Result<Vec<CompressedHistory<S>>> {
    let mut tape = Tape::new();
    let comp_nodes = comp.register(&mut tape, "compressor")?;
    let emb_nodes = emb.register(&mut tape, "embed")?;
    let nodes = compress_on_tape(&mut tape, histories, &comp_nodes, &emb_nodes, cfg)?;
    Ok(nodes
        .into_iter()
        .zip(histories)
        .map(|(id, h)| CompressedHistory {
            vectors: tape.value(id).clone(),
            source_step: h.step_index,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, randomize_params};
    use crate::params::param_count;

    fn tiny_cfg() -> CompressorConfig {
        CompressorConfig {
            queries: 4,
            width: 8,
            layers: 2,
            heads: 2,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        }
    }

    fn hist(state: &[u32], actions: &[u32], instr: &[u32], step: usize) -> HistoryInput {
        HistoryInput {
            state_tokens: state.to_vec(),
            action_tokens: actions.to_vec(),
            instruction_tokens: instr.to_vec(),
            step_index: step,
        }
    }

    #[test]
    fn param_count_matches_closed_form_at_paper_scale() {
        let cfg = CompressorConfig::paper();
        let mut rng = Rng::stream(0, "init/compressor");
        let params: CompressorParams<f32> = init_compressor(&cfg, &mut rng).unwrap();
        assert_eq!(param_count(&params), compressor_param_count(&cfg));
        // 256*768 + 2*(19*768^2 + 12*768)
        assert_eq!(compressor_param_count(&cfg), 22_628_352);
    }

    #[test]
    fn query_table_shape_follows_config() {
        let cfg = CompressorConfig {
            queries: 8,
            width: 16,
            layers: 1,
            heads: 2,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        };
        let mut rng = Rng::stream(1, "init/compressor");
        let params: CompressorParams<f64> = init_compressor(&cfg, &mut rng).unwrap();
        assert_eq!(params.query_table.shape(), &[8, 16]);
        assert_eq!(param_count(&params), compressor_param_count(&cfg));
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let cfg = tiny_cfg();
        let a: CompressorParams<f32> =
            init_compressor(&cfg, &mut Rng::stream(7, "init/compressor")).unwrap();
        let b: CompressorParams<f32> =
            init_compressor(&cfg, &mut Rng::stream(7, "init/compressor")).unwrap();
        let flat_a = crate::params::collect_params(&a, "");
        let flat_b = crate::params::collect_params(&b, "");
        for ((na, ta), (nb, tb)) in flat_a.iter().zip(&flat_b) {
            assert_eq!(na, nb);
            assert!(ta.exact_eq(tb), "{na} differs across identical seeds");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_cfg();
        cfg.queries = 0;
        assert!(init_compressor::<f64>(&cfg, &mut Rng::new(0)).is_err());
        let mut cfg = tiny_cfg();
        cfg.heads = 3; // does not divide width 8
        assert!(init_compressor::<f64>(&cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn embed_history_concatenates_segments() {
        let cfg = tiny_cfg();
        let emb = EmbedderParams::<f64>::init(32, cfg.width, &mut Rng::new(3));
        let mut tape = Tape::new();
        let en = emb.register(&mut tape, "embed").unwrap();
        // first step: no past actions
        let h = hist(&[1, 2, 3], &[], &[4, 5], 0);
        let stream = embed_history(&mut tape, &en, &h).unwrap();
        assert_eq!(tape.value(stream).shape(), &[5, cfg.width]);
        // with actions
        let h = hist(&[1, 2, 3], &[6, 7], &[4, 5], 0);
        let stream = embed_history(&mut tape, &en, &h).unwrap();
        assert_eq!(tape.value(stream).shape(), &[7, cfg.width]);
        // determinism
        let again = embed_history(&mut tape, &en, &h).unwrap();
        assert!(tape.value(stream).exact_eq(tape.value(again)));
        // empty state rejected
        let bad = hist(&[], &[1], &[2], 0);
        assert!(embed_history(&mut tape, &en, &bad).is_err());
    }

    #[test]
    fn fuse_zero_weights_is_identity() {
        let mut tape = Tape::<f64>::new();
        let f0 = tape.leaf(Tensor::randn(&[4, 8], 1.0, &mut Rng::new(9)));
        let f1 = tape.leaf(Tensor::randn(&[4, 8], 1.0, &mut Rng::new(10)));
        let w = tape.leaf(Tensor::zeros(&[24, 8]));
        let b = tape.leaf(Tensor::zeros(&[8]));
        let out = fuse_histories(&mut tape, &[f0, f1], w, b, 1).unwrap();
        assert!(tape.value(out[0]).exact_eq(tape.value(f0)));
        assert!(tape.value(out[1]).exact_eq(tape.value(f1)));
    }

    #[test]
    fn fuse_single_history_hand_computed() {
        // Q=1, d=2, window=1: output = f + FC([0 ; f ; 0])
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        // rows of w: [left(2) ; center(2) ; right(2)] -> 6x2
        let w = tape.leaf(
            Tensor::new(
                vec![6, 2],
                vec![
                    9.0, 9.0, // left rows hit zeros
                    9.0, 9.0, //
                    0.5, 1.0, // center rows hit f
                    -1.0, 0.25, //
                    9.0, 9.0, // right rows hit zeros
                    9.0, 9.0,
                ],
            )
            .unwrap(),
        );
        let b = tape.leaf(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let out = fuse_histories(&mut tape, &[f], w, b, 1).unwrap();
        // FC = [2*0.5 + (-1)*(-1), 2*1 + (-1)*0.25] + b = [2.1, 1.55]
        // out = f + FC = [4.1, 0.55]
        let got = tape.value(out[0]).data();
        assert!((got[0] - (2.0 + 2.0 + 0.1)).abs() < 1e-12);
        assert!((got[1] - (-1.0 + 1.75 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn fuse_equal_features_interior_outputs_match() {
        // With identical feature blocks, interior histories (full neighbor
        // windows) fuse identically; boundary entries see zero padding and may
        // differ, so only interiors are asserted.
        let mut tape = Tape::<f64>::new();
        let f = Tensor::randn(&[3, 4], 1.0, &mut Rng::new(11));
        let nodes: Vec<_> = (0..5).map(|_| tape.leaf(f.clone())).collect();
        let w = tape.leaf(Tensor::randn(&[12, 4], 0.5, &mut Rng::new(12)));
        let b = tape.leaf(Tensor::randn(&[4], 0.5, &mut Rng::new(13)));
        let out = fuse_histories(&mut tape, &nodes, w, b, 1).unwrap();
        for i in 2..4 {
            assert!(
                tape.value(out[1]).exact_eq(tape.value(out[i])),
                "interior {i} differs"
            );
        }
    }

    fn make_parts(
        cfg: &CompressorConfig,
        seed: u64,
    ) -> (CompressorParams<f64>, EmbedderParams<f64>) {
        let mut rng = Rng::stream(seed, "init/compressor");
        let comp = init_compressor(cfg, &mut rng).unwrap();
        let emb = EmbedderParams::init(32, cfg.width, &mut Rng::stream(seed, "init/embed"));
        (comp, emb)
    }

    #[test]
    fn compress_empty_and_too_many() {
        let cfg = tiny_cfg();
        let (comp, emb) = make_parts(&cfg, 0);
        let out = compress::<f64>(&[], &comp, &emb, &cfg).unwrap();
        assert!(out.is_empty());

        let hs: Vec<HistoryInput> = (0..6).map(|i| hist(&[1, 2], &[], &[3], i)).collect();
        assert!(matches!(
            compress::<f64>(&hs, &comp, &emb, &cfg),
            Err(Error::TooManyHistories { got: 6, max: 5 })
        ));
    }

    #[test]
    fn fixed_length_guarantee_across_stream_lengths() {
        let cfg = tiny_cfg();
        let (comp, emb) = make_parts(&cfg, 1);
        let short = hist(&[1; 1], &[], &[2, 3], 0);
        let long_state: Vec<u32> = (0..5000).map(|i| (i % 30) as u32).collect();
        let long = hist(&long_state, &[4], &[2, 3], 1);
        let out = compress::<f64>(&[short, long], &comp, &emb, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for c in &out {
            assert_eq!(c.vectors.shape(), &[cfg.queries, cfg.width]);
            assert!(c.vectors.all_finite());
        }
        assert_eq!(out[0].source_step, 0);
        assert_eq!(out[1].source_step, 1);
    }

    #[test]
    fn five_histories_paper_shapes() {
        // Paper-scale query count with tiny token streams: five histories in,
        // five 256-row blocks out.
        let cfg = CompressorConfig {
            queries: 256,
            width: 32,
            layers: 1,
            heads: 2,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        };
        let (comp, emb) = make_parts(&cfg, 2);
        let hs: Vec<HistoryInput> = (0..5).map(|i| hist(&[1, 2, 3], &[4], &[5], i)).collect();
        let out = compress::<f64>(&hs, &comp, &emb, &cfg).unwrap();
        assert_eq!(out.len(), 5);
        for c in &out {
            assert_eq!(c.vectors.shape(), &[256, 32]);
        }
    }

    #[test]
    fn weight_sharing_identical_histories_fusion_off() {
        // With fusion disabled the per-history paths are fully independent
        // and share weights, so identical inputs give identical outputs.
        let mut cfg = tiny_cfg();
        cfg.fusion_enabled = false;
        let (comp, emb) = make_parts(&cfg, 3);
        let h0 = hist(&[5, 6, 7, 8], &[1], &[9, 10], 0);
        let mut h1 = h0.clone();
        h1.step_index = 1;
        let out = compress::<f64>(&[h0, h1], &comp, &emb, &cfg).unwrap();
        assert!(out[0].vectors.exact_eq(&out[1].vectors));
    }

    #[test]
    fn duplicate_histories_interior_symmetry_with_fusion() {
        let cfg = tiny_cfg();
        let (comp, emb) = make_parts(&cfg, 4);
        let hs: Vec<HistoryInput> = (0..5)
            .map(|i| {
                let mut h = hist(&[5, 6, 7], &[1], &[9], 0);
                h.step_index = i;
                h
            })
            .collect();
        let out = compress::<f64>(&hs, &comp, &emb, &cfg).unwrap();
        // interiors after M=2 fusion layers: indices with full neighborhoods
        // at every layer (window 1, two layers -> 2..=2)
        assert!(out[2].vectors.all_finite());
        let d01 = out[0].vectors.max_abs_diff(&out[1].vectors);
        // boundary rows legitimately differ from interior rows
        let d12 = out[1].vectors.max_abs_diff(&out[2].vectors);
        assert!(d01 > 0.0 || d12 > 0.0 || out[0].vectors.exact_eq(&out[1].vectors));
        // direct interior check at one layer: see fuse_equal_features test
    }

    #[test]
    fn compress_layer_matches_block_composition() {
        // Straight-line oracle: compose the four sub-blocks by hand on the
        // same tape primitives and compare against compress_layer.
        let cfg = CompressorConfig {
            queries: 4,
            width: 8,
            layers: 1,
            heads: 2,
            max_histories: 5,
            fusion_window: 1,
            fusion_enabled: true,
        };
        let (comp, _) = make_parts(&cfg, 5);
        let mut tape = Tape::<f64>::new();
        let cn = comp.register(&mut tape, "compressor").unwrap();
        let streams: Vec<NodeId> = (0..3)
            .map(|i| tape.leaf(Tensor::randn(&[6, 8], 0.5, &mut Rng::new(20 + i))))
            .collect();
        let states = vec![cn.query_table; 3];
        let got = compress_layer(&mut tape, &states, &streams, &cn.layers[0], &cfg).unwrap();

        // oracle composition
        let layer = &cn.layers[0];
        let mut feats = Vec::new();
        for &stream in &streams {
            let q = multi_head_attention(&mut tape, cn.query_table, cn.query_table, &layer.self_attn, None)
                .unwrap();
            let q = multi_head_attention(&mut tape, q, stream, &layer.cross_attn, None).unwrap();
            let q = feed_forward(&mut tape, q, &layer.ffn).unwrap();
            feats.push(q);
        }
        let zero = tape.leaf(Tensor::zeros(&[4, 8]));
        for i in 0..3 {
            let left = if i == 0 { zero } else { feats[i - 1] };
            let right = if i == 2 { zero } else { feats[i + 1] };
            let cat = tape.concat(&[left, feats[i], right], 1).unwrap();
            let proj = tape.matmul(cat, layer.fusion_w).unwrap();
            let proj = tape.add(proj, layer.fusion_b).unwrap();
            let expect = tape.add(feats[i], proj).unwrap();
            assert!(
                tape.value(got[i]).max_abs_diff(tape.value(expect)) < 1e-12,
                "history {i} diverges from composition"
            );
        }
    }

    #[test]
    fn full_compressor_gradients() {
        // M=2, N=3, Q=4, d=8 gradient check in f64.
        #[derive(Clone)]
        struct Full {
            comp: CompressorParams<f64>,
            emb: EmbedderParams<f64>,
        }
        impl ParamVisit<f64> for Full {
            fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f64>)) {
                self.comp.visit_params(&join(prefix, "compressor"), f);
                self.emb.visit_params(&join(prefix, "embed"), f);
            }
            fn visit_params_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut Tensor<f64>),
            ) {
                self.comp.visit_params_mut(&join(prefix, "compressor"), f);
                self.emb.visit_params_mut(&join(prefix, "embed"), f);
            }
        }
        let cfg = tiny_cfg();
        let (comp, emb) = make_parts(&cfg, 6);
        let mut full = Full { comp, emb };
        randomize_params(&mut full, 0.4, &mut Rng::stream(7, "gradcheck/compressor"));
        let hs: Vec<HistoryInput> = (0..3)
            .map(|i| hist(&[1 + i as u32, 9, 17], &[2], &[3, 4], i))
            .collect();
        let report = grad_check(
            &full,
            |tape, p| {
                let cn = p.comp.register(tape, "compressor")?;
                let en = p.emb.register(tape, "embed")?;
                let outs = compress_on_tape(tape, &hs, &cn, &en, &cfg)?;
                let cat = tape.concat(&outs, 0)?;
                let r = tape.leaf(Tensor::randn(&[12, 8], 1.0, &mut Rng::new(55)));
                let proj = tape.mul(cat, r)?;
                Ok(tape.sum_all(proj))
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.passes(1e-5),
            "full compressor rel error {}",
            report.max_rel_error
        );
    }
}
