//! Comparison compressors: no-history, truncation, instruction-overlap
//! pruning, and a summarizer client with a deterministic offline mock.
//!
//! Every baseline maps a history's state tokens to a shorter token stream
//! that the agent embeds where compressed history vectors would otherwise
//! go. History actions and the instruction are not duplicated per history;
//! they already reach the model through the current input.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::compressor::HistoryInput;
use crate::env;
use crate::error::{Error, Result};

/// How history states reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// MindAct-style: no history rows at all.
    None,
    Truncate,
    Prune,
    Summarize,
    /// The learned history compressor.
    Ours,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrunerScoring {
    LexicalOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    pub top_k: usize,
    pub scoring: PrunerScoring,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            top_k: 50,
            scoring: PrunerScoring::LexicalOverlap,
        }
    }
}

/// Keep the `top_k` page elements scoring highest on token overlap with the
/// instruction (ties break toward earlier elements) and emit their tokens in
/// original document order.
pub fn prune_history(
    state_tokens: &[u32],
    element_spans: &[(usize, usize)],
    instruction_tokens: &[u32],
    cfg: &PrunerConfig,
) -> Vec<u32> {
    if cfg.top_k == 0 || element_spans.is_empty() {
        return Vec::new();
    }
    let PrunerScoring::LexicalOverlap = cfg.scoring;
    let instr: std::collections::BTreeSet<u32> = instruction_tokens.iter().copied().collect();
    let mut ranked: Vec<(usize, usize)> = element_spans
        .iter()
        .enumerate()
        .map(|(idx, &(start, len))| {
            let score = state_tokens[start..start + len]
                .iter()
                .filter(|t| instr.contains(t))
                .count();
            (idx, score)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = ranked.iter().take(cfg.top_k).map(|&(idx, _)| idx).collect();
    keep.sort_unstable();
    let mut out = Vec::new();
    for idx in keep {
        let (start, len) = element_spans[idx];
        out.extend_from_slice(&state_tokens[start..start + len]);
    }
    out
}

/// Lower-bound baseline: first `limit` tokens.
pub fn truncate_history(tokens: &[u32], limit: usize) -> Vec<u32> {
    tokens[..tokens.len().min(limit)].to_vec()
}

// ---- summarizer client -----------------------------------------------------

pub struct SummaryRequest<'a> {
    pub instruction_tokens: &'a [u32],
    pub state_tokens: &'a [u32],
    pub budget: usize,
}

pub struct SummaryResponse {
    pub summary_tokens: Vec<u32>,
}

/// Pluggable summarization backend. Implementations must be safe for
/// concurrent calls; the shipped ones are pure.
pub trait SummarizerTransport: Send + Sync {
    fn call(&self, req: &SummaryRequest<'_>) -> std::result::Result<SummaryResponse, String>;
}

/// Deterministic offline mock: the first `per_element` tokens of every page
/// element, concatenated in document order.
pub struct MockTransport {
    pub per_element: usize,
}

impl SummarizerTransport for MockTransport {
    fn call(&self, req: &SummaryRequest<'_>) -> std::result::Result<SummaryResponse, String> {
        let mut out = Vec::new();
        for (start, len) in env::element_spans(req.state_tokens) {
            let take = len.min(self.per_element);
            out.extend_from_slice(&req.state_tokens[start..start + take]);
        }
        Ok(SummaryResponse {
            summary_tokens: out,
        })
    }
}

/// Transport that always fails; exercises the truncation fallback.
pub struct FailingTransport;

impl SummarizerTransport for FailingTransport {
    fn call(&self, _req: &SummaryRequest<'_>) -> std::result::Result<SummaryResponse, String> {
        Err("transport unavailable".to_string())
    }
}

pub struct SummarizerClient {
    pub endpoint: String,
    pub timeout_ms: u64,
    transport: Box<dyn SummarizerTransport>,
    events: Mutex<Vec<String>>,
}

impl SummarizerClient {
    pub fn new(endpoint: &str, timeout_ms: u64, transport: Box<dyn SummarizerTransport>) -> Self {
        SummarizerClient {
            endpoint: endpoint.to_string(),
            timeout_ms,
            transport,
            events: Mutex::new(Vec::new()),
        }
    }

    /// In-process mock client.
    pub fn mock(per_element: usize) -> Self {
        Self::new("mock://summarizer", 0, Box::new(MockTransport { per_element }))
    }

    /// Summarize one history's state, capped at `budget` tokens. Transport
    /// failure falls back to plain truncation and records an event.
    pub fn summarize_history(&self, hist: &HistoryInput, budget: usize) -> Vec<u32> {
        let req = SummaryRequest {
            instruction_tokens: &hist.instruction_tokens,
            state_tokens: &hist.state_tokens,
            budget,
        };
        match self.transport.call(&req) {
            Ok(resp) => truncate_history(&resp.summary_tokens, budget),
            Err(e) => {
                self.events
                    .lock()
                    .expect("summarizer event log poisoned")
                    .push(format!("fallback to truncation for step {}: {e}", hist.step_index));
                truncate_history(&hist.state_tokens, budget)
            }
        }
    }

    pub fn events(&self) -> Vec<String> {
        self.events
            .lock()
            .expect("summarizer event log poisoned")
            .clone()
    }
}

// ---- baseline encoding -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub truncate_len: usize,
    pub pruner: PrunerConfig,
    pub summary_budget: usize,
    pub summary_per_element: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            truncate_len: 16,
            pruner: PrunerConfig {
                top_k: 8,
                scoring: PrunerScoring::LexicalOverlap,
            },
            summary_budget: 16,
            summary_per_element: 2,
        }
    }
}

/// Produce the per-history token streams a baseline mode feeds the encoder in
/// place of compressed vectors. Mode `None` yields no streams at all.
pub fn baseline_encode(
    mode: HistoryMode,
    histories: &[HistoryInput],
    cfg: &BaselineConfig,
) -> Result<Vec<Vec<u32>>> {
    match mode {
        HistoryMode::None => Ok(Vec::new()),
        HistoryMode::Truncate => Ok(histories
            .iter()
            .map(|h| truncate_history(&h.state_tokens, cfg.truncate_len))
            .collect()),
        HistoryMode::Prune => Ok(histories
            .iter()
            .map(|h| {
                let spans = env::element_spans(&h.state_tokens);
                prune_history(&h.state_tokens, &spans, &h.instruction_tokens, &cfg.pruner)
            })
            .collect()),
        HistoryMode::Summarize => {
            let client = SummarizerClient::mock(cfg.summary_per_element);
            Ok(histories
                .iter()
                .map(|h| client.summarize_history(h, cfg.summary_budget))
                .collect())
        }
        HistoryMode::Ours => Err(Error::InvalidConfig(
            "baseline_encode does not handle the learned compressor".into(),
        )),
    }
}
