//! Deterministic generator of verbose, history-dependent web-automation
//! episodes.
//!
//! States are pseudo-HTML token streams: a page wraps a candidate list of K
//! item elements followed by V filler elements drawn from the same vocabulary
//! distribution, so fillers are lexically indistinguishable from items and an
//! instruction-overlap ranker cannot find the signal.
//!
//! Task kinds:
//! - `DistinctChoice`: click an item not chosen before. The live state never
//!   marks past selections; the marker exists only in history views.
//! - `MemoryRecall`: the gold item of step t was named only in the state m
//!   steps earlier, inside a note element. Episodes carry m pre-episode
//!   context states so every evaluated step has its reveal available.
//!   Reveal tokens rotate through m+1 alphabet classes (class = step index
//!   mod m+1), so a state's note about a *future* step can never collide
//!   with that state's own gold token and golds stay i.i.d. uniform.
//! - `CopyForward`: the instruction names one field per step to TYPE into.
//!
//! Everything is a pure function of (spec, seed).

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const VOCAB_SIZE: usize = 512;
pub const GENERATOR_VERSION: &str = "1";
/// Serialized states must stay under this many tokens.
pub const STATE_TOKEN_CAP: usize = 2048;

/// Structural / control token ids. Slots, reveal tokens, and words occupy
/// fixed ranges behind these.
pub mod tok {
    pub const PAGE_OPEN: u32 = 1;
    pub const PAGE_CLOSE: u32 = 2;
    pub const LIST_OPEN: u32 = 3;
    pub const LIST_CLOSE: u32 = 4;
    pub const ITEM_OPEN: u32 = 5;
    pub const ITEM_CLOSE: u32 = 6;
    pub const NOTE_OPEN: u32 = 7;
    pub const NOTE_CLOSE: u32 = 8;
    pub const ATTR_KEY: u32 = 9;
    pub const ATTR_DONE: u32 = 10;
    pub const ACT: u32 = 11;
    pub const OP_CLICK: u32 = 12;
    pub const OP_TYPE: u32 = 13;
    pub const OP_SELECT: u32 = 14;
    pub const TASK_DISTINCT: u32 = 15;
    pub const TASK_RECALL: u32 = 16;
    pub const TASK_COPY: u32 = 17;
    pub const MODE_CLICK: u32 = 18;
    pub const MODE_SELECT: u32 = 19;

    pub const SLOT_BASE: u32 = 32;
    pub const SLOT_COUNT: u32 = 64;
    pub const REV_BASE: u32 = 96;
    pub const REV_CLASSES: u32 = 8;
    pub const REV_VALUES: u32 = 16;
    pub const WORD_BASE: u32 = 256;
    pub const WORD_COUNT: u32 = 128;
}

/// Stable per-item attribute token (a DOM-id analog).
pub fn slot_token(slot: usize) -> u32 {
    assert!(slot < tok::SLOT_COUNT as usize);
    tok::SLOT_BASE + slot as u32
}

/// Reveal token naming item `value` in rotation class `class`.
pub fn rev_token(class: usize, value: usize) -> u32 {
    assert!(class < tok::REV_CLASSES as usize && value < tok::REV_VALUES as usize);
    tok::REV_BASE + (class as u32) * tok::REV_VALUES + value as u32
}

pub fn word_token(word: usize) -> u32 {
    assert!(word < tok::WORD_COUNT as usize);
    tok::WORD_BASE + word as u32
}

// ---- operations ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    #[serde(rename = "CLICK")]
    Click,
    #[serde(rename = "TYPE")]
    Type,
    #[serde(rename = "SELECT")]
    Select,
}

pub const OPERATIONS: [Operation; 3] = [Operation::Click, Operation::Type, Operation::Select];

impl Operation {
    pub fn index(self) -> usize {
        match self {
            Operation::Click => 0,
            Operation::Type => 1,
            Operation::Select => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Operation> {
        OPERATIONS.get(i).copied()
    }

    pub fn token(self) -> u32 {
        match self {
            Operation::Click => tok::OP_CLICK,
            Operation::Type => tok::OP_TYPE,
            Operation::Select => tok::OP_SELECT,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operation::Click => "CLICK",
            Operation::Type => "TYPE",
            Operation::Select => "SELECT",
        };
        f.write_str(s)
    }
}

// ---- task specs ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DistinctChoice,
    MemoryRecall,
    CopyForward,
}

impl TaskKind {
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::DistinctChoice => "distinct_choice",
            TaskKind::MemoryRecall => "memory_recall",
            TaskKind::CopyForward => "copy_forward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// K: candidate items per state.
    pub num_items: usize,
    /// T: evaluated steps per episode.
    pub episode_len: usize,
    /// V: filler elements per state.
    pub verbosity: usize,
    /// m: reveal lag for MemoryRecall (ignored otherwise).
    pub memory_depth: usize,
    pub vocab_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidTaskSpec(msg));
        if self.num_items < 2 || self.num_items > tok::REV_VALUES as usize {
            return fail(format!(
                "num_items must be in 2..={}, got {}",
                tok::REV_VALUES,
                self.num_items
            ));
        }
        if self.episode_len == 0 {
            return fail("episode_len must be >= 1".into());
        }
        match self.kind {
            TaskKind::DistinctChoice => {
                if self.episode_len > self.num_items {
                    return fail(format!(
                        "distinct_choice requires episode_len <= num_items ({} > {})",
                        self.episode_len, self.num_items
                    ));
                }
            }
            TaskKind::MemoryRecall => {
                if self.memory_depth == 0 || self.memory_depth >= self.episode_len {
                    return fail(format!(
                        "memory_recall requires 0 < memory_depth < episode_len, got m={} T={}",
                        self.memory_depth, self.episode_len
                    ));
                }
                if self.memory_depth + 1 > tok::REV_CLASSES as usize {
                    return fail(format!(
                        "memory_depth {} exceeds reveal alphabet ({} classes)",
                        self.memory_depth,
                        tok::REV_CLASSES
                    ));
                }
            }
            TaskKind::CopyForward => {}
        }
        // page wrapper 3 + K items * 4 + fillers * 5 + note 4 + close 1
        let worst = 4 + self.num_items * 4 + self.verbosity * 5 + 4;
        if worst > STATE_TOKEN_CAP {
            return fail(format!(
                "verbosity {} would exceed the {STATE_TOKEN_CAP}-token state cap",
                self.verbosity
            ));
        }
        Ok(())
    }

    /// Context states preceding step 0 (reveal warm-up for MemoryRecall).
    pub fn context_len(&self) -> usize {
        match self.kind {
            TaskKind::MemoryRecall => self.memory_depth,
            _ => 0,
        }
    }
}

// ---- episodes ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub span_start: usize,
    pub span_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub state_tokens: Vec<u32>,
    pub candidates: Vec<Candidate>,
    /// Acceptable element ids, ascending.
    pub gold_ids: Vec<usize>,
    pub gold_op: Operation,
    /// Canonical recorded action (always one of `gold_ids`); histories and
    /// next-step gold sets are built from it.
    pub chosen_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub instruction_tokens: Vec<u32>,
    /// Observation-only states preceding step 0; available as histories,
    /// never evaluated. Empty except for MemoryRecall.
    pub context_states: Vec<Vec<u32>>,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    /// Global state index of evaluated step `j` (contexts come first).
    pub fn global_index(&self, step: usize) -> usize {
        self.context_states.len() + step
    }
}

// ---- page serialization ---------------------------------------------------

/// One renderable element: an open tag, an attribute token, text words, close.
#[derive(Clone, Debug)]
pub struct ElementSpec {
    pub open: u32,
    pub attr: u32,
    pub words: Vec<u32>,
    pub close: u32,
}

impl ElementSpec {
    fn item(slot: usize, word: u32) -> Self {
        ElementSpec {
            open: tok::ITEM_OPEN,
            attr: slot_token(slot),
            words: vec![word],
            close: tok::ITEM_CLOSE,
        }
    }

    fn tokens(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(3 + self.words.len());
        t.push(self.open);
        t.push(self.attr);
        t.extend_from_slice(&self.words);
        t.push(self.close);
        t
    }

    fn len(&self) -> usize {
        3 + self.words.len()
    }
}

/// Abstract page content prior to serialization.
#[derive(Clone, Debug, Default)]
pub struct PageSpec {
    /// Candidate items, rendered first inside the list, in id order.
    pub items: Vec<ElementSpec>,
    /// Filler elements rendered after the list (the note, when present, is
    /// interleaved among them).
    pub fillers: Vec<ElementSpec>,
    /// (position within fillers, reveal token).
    pub note: Option<(usize, u32)>,
}

/// Render a page to its token stream plus the candidate span table.
pub fn serialize_state(page: &PageSpec) -> (Vec<u32>, Vec<Candidate>) {
    let mut tokens = Vec::new();
    let mut candidates = Vec::with_capacity(page.items.len());
    tokens.push(tok::PAGE_OPEN);
    tokens.push(tok::LIST_OPEN);
    for (id, item) in page.items.iter().enumerate() {
        candidates.push(Candidate {
            id,
            span_start: tokens.len(),
            span_len: item.len(),
        });
        tokens.extend(item.tokens());
    }
    tokens.push(tok::LIST_CLOSE);
    for (i, filler) in page.fillers.iter().enumerate() {
        if let Some((pos, rev)) = page.note {
            if pos == i {
                tokens.extend([tok::NOTE_OPEN, tok::ATTR_KEY, rev, tok::NOTE_CLOSE]);
            }
        }
        tokens.extend(filler.tokens());
    }
    if let Some((pos, rev)) = page.note {
        if pos >= page.fillers.len() {
            tokens.extend([tok::NOTE_OPEN, tok::ATTR_KEY, rev, tok::NOTE_CLOSE]);
        }
    }
    tokens.push(tok::PAGE_CLOSE);
    (tokens, candidates)
}

/// History view of a state: the live tokens plus a selection-record element
/// naming the slot acted on at that step, inserted before the page close.
pub fn history_view(state_tokens: &[u32], chosen_slot: usize) -> Vec<u32> {
    let mut v = Vec::with_capacity(state_tokens.len() + 4);
    v.extend_from_slice(&state_tokens[..state_tokens.len() - 1]);
    v.extend([
        tok::NOTE_OPEN,
        tok::ATTR_DONE,
        slot_token(chosen_slot),
        tok::NOTE_CLOSE,
    ]);
    v.push(tok::PAGE_CLOSE);
    v
}

/// Token triple appended to the action stream for one executed step.
pub fn action_triple(op: Operation, chosen_slot: usize) -> [u32; 3] {
    [tok::ACT, op.token(), slot_token(chosen_slot)]
}

/// Spans of every element in a serialized state (items, fillers, and notes),
/// in document order. This is the element segmentation the pruning baseline
/// ranks over.
pub fn element_spans(state_tokens: &[u32]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open_at: Option<usize> = None;
    for (i, &t) in state_tokens.iter().enumerate() {
        if t == tok::ITEM_OPEN || t == tok::NOTE_OPEN {
            open_at = Some(i);
        } else if t == tok::ITEM_CLOSE || t == tok::NOTE_CLOSE {
            if let Some(s) = open_at.take() {
                spans.push((s, i - s + 1));
            }
        }
    }
    spans
}

// ---- generation -----------------------------------------------------------

fn draw_words(rng: &mut Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| word_token(rng.below(tok::WORD_COUNT as usize))).collect()
}

fn filler_element(rng: &mut Rng) -> ElementSpec {
    let slot = 16 + rng.below(tok::SLOT_COUNT as usize - 16);
    let n_words = 1 + rng.below(2);
    ElementSpec {
        open: tok::ITEM_OPEN,
        attr: slot_token(slot),
        words: draw_words(rng, n_words),
        close: tok::ITEM_CLOSE,
    }
}

fn build_page(spec: &TaskSpec, rng: &mut Rng, note: Option<u32>) -> PageSpec {
    let items = (0..spec.num_items)
        .map(|slot| ElementSpec::item(slot, word_token(rng.below(tok::WORD_COUNT as usize))))
        .collect();
    let fillers: Vec<ElementSpec> = (0..spec.verbosity).map(|_| filler_element(rng)).collect();
    let note = note.map(|rev| (rng.below(spec.verbosity + 1), rev));
    PageSpec {
        items,
        fillers,
        note,
    }
}

/// Deterministically generate one episode from (spec, seed).
pub fn generate_episode(spec: &TaskSpec, seed: u64) -> Result<Episode> {
    spec.validate()?;
    let mut rng = Rng::new(seed ^ spec.vocab_seed.rotate_left(17));
    let k = spec.num_items;
    let t_len = spec.episode_len;
    let m = spec.context_len();

    // instruction
    let flavor = draw_words(&mut rng, 3);
    let (task_tok, mode_tok, episode_op) = match spec.kind {
        TaskKind::DistinctChoice => (tok::TASK_DISTINCT, tok::MODE_CLICK, Operation::Click),
        TaskKind::MemoryRecall => {
            if rng.below(2) == 0 {
                (tok::TASK_RECALL, tok::MODE_CLICK, Operation::Click)
            } else {
                (tok::TASK_RECALL, tok::MODE_SELECT, Operation::Select)
            }
        }
        TaskKind::CopyForward => (tok::TASK_COPY, tok::MODE_CLICK, Operation::Type),
    };

    // canonical gold choices
    let golds: Vec<usize> = match spec.kind {
        TaskKind::DistinctChoice => {
            let mut perm: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut perm);
            perm.truncate(t_len);
            perm
        }
        _ => (0..t_len).map(|_| rng.below(k)).collect(),
    };

    let mut instruction_tokens = vec![task_tok, mode_tok];
    if spec.kind == TaskKind::CopyForward {
        instruction_tokens.extend(golds.iter().map(|&g| slot_token(g)));
    }
    instruction_tokens.extend(&flavor);

    // states: contexts 0..m, then evaluated m..m+T
    let mut states = Vec::with_capacity(m + t_len);
    let mut span_tables = Vec::with_capacity(m + t_len);
    for gs in 0..m + t_len {
        let note = match spec.kind {
            TaskKind::MemoryRecall if gs < t_len => {
                // state gs reveals the gold of global step gs + m
                let target_global = gs + m;
                Some(rev_token(target_global % (m + 1), golds[gs]))
            }
            _ => None,
        };
        let (tokens, spans) = serialize_state(&build_page(spec, &mut rng, note));
        states.push(tokens);
        span_tables.push(spans);
    }

    let mut chosen_so_far: BTreeSet<usize> = BTreeSet::new();
    let mut steps = Vec::with_capacity(t_len);
    for j in 0..t_len {
        let gs = m + j;
        let gold_ids: Vec<usize> = match spec.kind {
            TaskKind::DistinctChoice => (0..k).filter(|i| !chosen_so_far.contains(i)).collect(),
            _ => vec![golds[j]],
        };
        let chosen = match spec.kind {
            TaskKind::DistinctChoice => golds[j],
            _ => golds[j],
        };
        debug_assert!(gold_ids.contains(&chosen));
        chosen_so_far.insert(chosen);
        steps.push(EpisodeStep {
            state_tokens: states[gs].clone(),
            candidates: span_tables[gs].clone(),
            gold_ids,
            gold_op: episode_op,
            chosen_id: chosen,
        });
    }

    Ok(Episode {
        task_id: format!("{}_{seed:016x}", spec.kind.slug()),
        instruction_tokens,
        context_states: states[..m].to_vec(),
        steps,
    })
}

/// Ground-truth acceptable set and operation for step `t`, given an arbitrary
/// set of already-chosen item ids (DistinctChoice depends on it; the other
/// kinds ignore it).
pub fn oracle_action(
    episode: &Episode,
    spec: &TaskSpec,
    t: usize,
    chosen_so_far: &BTreeSet<usize>,
) -> Result<(Vec<usize>, Operation)> {
    let step = episode
        .steps
        .get(t)
        .ok_or_else(|| Error::Message(format!("step {t} out of range")))?;
    let set = match spec.kind {
        TaskKind::DistinctChoice => (0..spec.num_items)
            .filter(|i| !chosen_so_far.contains(i))
            .collect(),
        _ => step.gold_ids.clone(),
    };
    Ok((set, step.gold_op))
}

// ---- audits ---------------------------------------------------------------

/// Structural and information-hygiene checks; run on every generated episode.
pub fn audit_episode(episode: &Episode, spec: &TaskSpec) -> Result<()> {
    let fail = |msg: String| Err(Error::Message(format!("{}: {msg}", episode.task_id)));
    if episode.steps.len() != spec.episode_len {
        return fail("wrong step count".into());
    }
    let mut prefix: BTreeSet<usize> = BTreeSet::new();
    for (j, step) in episode.steps.iter().enumerate() {
        if step.candidates.len() < 2 {
            return fail(format!("step {j} has fewer than 2 candidates"));
        }
        let cand_ids: BTreeSet<usize> = step.candidates.iter().map(|c| c.id).collect();
        if step.gold_ids.is_empty() || !step.gold_ids.iter().all(|g| cand_ids.contains(g)) {
            return fail(format!("step {j} gold ids not within candidates"));
        }
        if !step.gold_ids.contains(&step.chosen_id) {
            return fail(format!("step {j} chosen id not acceptable"));
        }
        for c in &step.candidates {
            let s = &step.state_tokens[c.span_start..c.span_start + c.span_len];
            if s.first() != Some(&tok::ITEM_OPEN)
                || s.get(1) != Some(&slot_token(c.id))
                || s.last() != Some(&tok::ITEM_CLOSE)
            {
                return fail(format!("step {j} candidate {} span mismatch", c.id));
            }
        }
        if step.state_tokens.len() > STATE_TOKEN_CAP {
            return fail(format!("step {j} exceeds state token cap"));
        }
        if spec.kind == TaskKind::DistinctChoice {
            for g in &step.gold_ids {
                if prefix.contains(g) {
                    return fail(format!("step {j} gold set contains a chosen item"));
                }
            }
        }
        prefix.insert(step.chosen_id);
    }
    if spec.kind == TaskKind::MemoryRecall {
        audit_memory_recall(episode, spec)?;
    }
    Ok(())
}

/// MemoryRecall signal-absence audit: the token naming step t's gold never
/// occurs in step t's own state, and occurs in the state exactly m steps
/// earlier.
pub fn audit_memory_recall(episode: &Episode, spec: &TaskSpec) -> Result<()> {
    let m = spec.memory_depth;
    let fail = |msg: String| Err(Error::Message(format!("{}: {msg}", episode.task_id)));
    for (j, step) in episode.steps.iter().enumerate() {
        let global = episode.global_index(j);
        let gold = step.gold_ids[0];
        let gold_tok = rev_token(global % (m + 1), gold);
        if step.state_tokens.contains(&gold_tok) {
            return fail(format!("step {j}: gold reveal token occurs in current state"));
        }
        let source_global = global - m;
        let source = if source_global < episode.context_states.len() {
            &episode.context_states[source_global]
        } else {
            &episode.steps[source_global - episode.context_states.len()].state_tokens
        };
        let count = source.iter().filter(|&&t| t == gold_tok).count();
        if count != 1 {
            return fail(format!(
                "step {j}: reveal token occurs {count} times in state {source_global}"
            ));
        }
    }
    Ok(())
}

// ---- ceilings (exhaustive enumeration) -------------------------------------

/// Exact probability that a fixed item is still acceptable at step `t` of a
/// DistinctChoice episode, enumerated over all ordered t-prefixes of the
/// uniform choice permutation. Any function of (current state, instruction)
/// alone cannot beat this, because the live state carries no selection
/// markers.
pub fn distinct_choice_step_ceiling(k: usize, t: usize) -> f64 {
    assert!(t < k && k <= 10);
    // count ordered t-prefixes (sequences of t distinct items) avoiding item 0
    fn count(k: usize, t: usize, avoid: usize, used: &mut Vec<bool>) -> (u64, u64) {
        if t == 0 {
            return (1, 1);
        }
        let mut total = 0;
        let mut avoiding = 0;
        for i in 0..k {
            if used[i] {
                continue;
            }
            used[i] = true;
            let (sub_avoid, sub_total) = count(k, t - 1, avoid, used);
            total += sub_total;
            if i != avoid {
                avoiding += sub_avoid;
            }
            used[i] = false;
        }
        (avoiding, total)
    }
    let mut used = vec![false; k];
    let (avoiding, total) = count(k, t, 0, &mut used);
    avoiding as f64 / total as f64
}

/// Mean of the per-step ceiling over steps 0..t_len.
pub fn distinct_choice_ceiling_avg(k: usize, t_len: usize) -> f64 {
    (0..t_len).map(|t| distinct_choice_step_ceiling(k, t)).sum::<f64>() / t_len as f64
}

// ---- datasets ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub index: usize,
    pub seed: u64,
    pub task_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub root_seed: u64,
    pub spec: TaskSpec,
    pub episodes: Vec<ManifestEntry>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn episode_seed(root: u64, split: &str, index: usize) -> u64 {
    Rng::stream_indexed(root, &format!("data/{split}"), index as u64).next_u64()
}

/// Generate and write `train/val/test` episode files (one JSON record per
/// line) plus a manifest recording spec and per-episode seeds. Every episode
/// is audited before it is written.
pub fn make_dataset(
    spec: &TaskSpec,
    counts: SplitCounts,
    root_seed: u64,
    dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        root_seed,
        spec: *spec,
        episodes: Vec::new(),
    };
    for (split, count) in SPLITS.iter().zip([counts.train, counts.val, counts.test]) {
        let path = dir.join(format!("{split}.jsonl"));
        let mut buf = Vec::new();
        for index in 0..count {
            let seed = episode_seed(root_seed, split, index);
            let episode = generate_episode(spec, seed)?;
            audit_episode(&episode, spec)?;
            serde_json::to_writer(&mut buf, &episode)
                .map_err(|e| Error::Message(format!("serialize episode: {e}")))?;
            buf.push(b'\n');
            manifest.episodes.push(ManifestEntry {
                split: split.to_string(),
                index,
                seed,
                task_id: episode.task_id.clone(),
            });
        }
        write_atomic(&path, &buf)?;
    }
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Message(format!("serialize manifest: {e}")))?;
    write_atomic(&dir.join("manifest.json"), &manifest_bytes)?;
    Ok(manifest)
}

/// Write-temp-then-rename so partially written files never go live.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::Message(format!("parse episode: {e}")))
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Message(format!("parse manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recall_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::MemoryRecall,
            num_items: 8,
            episode_len: 5,
            verbosity: 20,
            memory_depth: 2,
            vocab_seed: 0,
        }
    }

    fn distinct_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::DistinctChoice,
            num_items: 8,
            episode_len: 3,
            verbosity: 10,
            memory_depth: 0,
            vocab_seed: 0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = distinct_spec();
        let a = generate_episode(&spec, 7).unwrap();
        let b = generate_episode(&spec, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_episode(&spec, 8).unwrap();
        assert_ne!(a.steps[0].state_tokens, c.steps[0].state_tokens);
    }

    #[test]
    fn distinct_choice_first_step_gold_is_everything() {
        let spec = distinct_spec();
        let ep = generate_episode(&spec, 7).unwrap();
        assert_eq!(ep.steps[0].gold_ids, (0..8).collect::<Vec<_>>());
        audit_episode(&ep, &spec).unwrap();
        // later golds shrink by exactly the chosen prefix
        assert_eq!(ep.steps[1].gold_ids.len(), 7);
        assert!(!ep.steps[1].gold_ids.contains(&ep.steps[0].chosen_id));
    }

    #[test]
    fn memory_recall_reveal_placement() {
        let spec = recall_spec();
        for seed in 0..30 {
            let ep = generate_episode(&spec, seed).unwrap();
            assert_eq!(ep.context_states.len(), 2);
            audit_memory_recall(&ep, &spec).unwrap();
            // spec example, m=2: the reveal for evaluated step 3 sits in
            // evaluated step 1's state and not in step 3's own state
            let global3 = ep.global_index(3);
            let gold3 = ep.steps[3].gold_ids[0];
            let tok3 = rev_token(global3 % 3, gold3);
            assert!(ep.steps[1].state_tokens.contains(&tok3));
            assert!(!ep.steps[3].state_tokens.contains(&tok3));
        }
    }

    #[test]
    fn memory_recall_golds_near_uniform() {
        let spec = recall_spec();
        let mut counts = [0usize; 8];
        let mut n = 0;
        for seed in 0..400 {
            let ep = generate_episode(&spec, 10_000 + seed).unwrap();
            for s in &ep.steps {
                counts[s.gold_ids[0]] += 1;
                n += 1;
            }
        }
        let expected = n as f64 / 8.0;
        let sigma = (n as f64 * 0.125 * 0.875).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 4.0 * sigma,
                "item {i}: {c} vs {expected}"
            );
        }
    }

    #[test]
    fn serialize_minimal_state() {
        let spec = TaskSpec {
            kind: TaskKind::DistinctChoice,
            num_items: 2,
            episode_len: 2,
            verbosity: 0,
            memory_depth: 0,
            vocab_seed: 0,
        };
        let ep = generate_episode(&spec, 1).unwrap();
        let state = &ep.steps[0].state_tokens;
        // PAGE_OPEN LIST_OPEN 2 items(4 each) LIST_CLOSE PAGE_CLOSE
        assert_eq!(state.len(), 12);
        assert_eq!(element_spans(state).len(), 2);
        assert_eq!(ep.steps[0].candidates.len(), 2);
    }

    #[test]
    fn verbosity_growth_has_exact_count() {
        // counting oracle: skeleton + sum of filler element lengths + note
        let mut spec = recall_spec();
        spec.verbosity = 500;
        spec.validate().unwrap_err(); // 500 * 5 exceeds the state cap
        spec.verbosity = 300;
        let ep = generate_episode(&spec, 3).unwrap();
        for (gs, state) in ep
            .context_states
            .iter()
            .chain(ep.steps.iter().map(|s| &s.state_tokens))
            .enumerate()
        {
            let list_close = state.iter().position(|&t| t == tok::LIST_CLOSE).unwrap();
            let mut filler_tokens = 0usize;
            let mut filler_count = 0usize;
            let mut note_tokens = 0usize;
            for (start, len) in element_spans(&state[list_close..]) {
                if state[list_close + start] == tok::ITEM_OPEN {
                    filler_tokens += len;
                    filler_count += 1;
                } else {
                    note_tokens += len;
                }
            }
            assert_eq!(filler_count, 300, "state {gs}");
            let skeleton = 4 + 4 * spec.num_items;
            assert_eq!(state.len(), skeleton + filler_tokens + note_tokens);
            // every filler is 4 or 5 tokens: open + attr + 1..2 words + close
            assert!(filler_tokens >= 4 * 300 && filler_tokens <= 5 * 300);
        }
    }

    #[test]
    fn candidate_spans_round_trip() {
        let ep = generate_episode(&recall_spec(), 11).unwrap();
        for step in &ep.steps {
            for c in &step.candidates {
                let span = &step.state_tokens[c.span_start..c.span_start + c.span_len];
                assert_eq!(span[0], tok::ITEM_OPEN);
                assert_eq!(span[1], slot_token(c.id));
                assert_eq!(*span.last().unwrap(), tok::ITEM_CLOSE);
            }
        }
    }

    #[test]
    fn oracle_action_examples() {
        let spec = distinct_spec();
        let ep = generate_episode(&spec, 5).unwrap();
        let chosen: BTreeSet<usize> = [1, 4].into_iter().collect();
        let (set, op) = oracle_action(&ep, &spec, 2, &chosen).unwrap();
        assert_eq!(set, vec![0, 2, 3, 5, 6, 7]);
        assert_eq!(op, Operation::Click);

        let rspec = recall_spec();
        let rep = generate_episode(&rspec, 5).unwrap();
        let (set, _) = oracle_action(&rep, &rspec, 1, &BTreeSet::new()).unwrap();
        assert_eq!(set.len(), 1);

        let cspec = TaskSpec {
            kind: TaskKind::CopyForward,
            num_items: 6,
            episode_len: 4,
            verbosity: 5,
            memory_depth: 0,
            vocab_seed: 0,
        };
        let cep = generate_episode(&cspec, 5).unwrap();
        let (_, op) = oracle_action(&cep, &cspec, 0, &BTreeSet::new()).unwrap();
        assert_eq!(op, Operation::Type);
        assert!(oracle_action(&cep, &cspec, 9, &BTreeSet::new()).is_err());
    }

    #[test]
    fn copy_forward_instruction_names_fields() {
        let spec = TaskSpec {
            kind: TaskKind::CopyForward,
            num_items: 6,
            episode_len: 4,
            verbosity: 5,
            memory_depth: 0,
            vocab_seed: 0,
        };
        let ep = generate_episode(&spec, 9).unwrap();
        for (j, step) in ep.steps.iter().enumerate() {
            assert_eq!(ep.instruction_tokens[2 + j], slot_token(step.gold_ids[0]));
            assert_eq!(step.gold_op, Operation::Type);
        }
    }

    #[test]
    fn history_view_appends_selection_record() {
        let ep = generate_episode(&distinct_spec(), 2).unwrap();
        let live = &ep.steps[0].state_tokens;
        let view = history_view(live, ep.steps[0].chosen_id);
        assert_eq!(view.len(), live.len() + 4);
        assert_eq!(*view.last().unwrap(), tok::PAGE_CLOSE);
        assert_eq!(view[view.len() - 2], tok::NOTE_CLOSE);
        assert_eq!(view[view.len() - 3], slot_token(ep.steps[0].chosen_id));
        assert_eq!(view[view.len() - 4], tok::ATTR_DONE);
        // the live state never contains a selection record
        assert!(!live.contains(&tok::ATTR_DONE));
    }

    #[test]
    fn distinct_choice_ceiling_matches_closed_form() {
        for t in 0..4 {
            let got = distinct_choice_step_ceiling(8, t);
            let expect = (8 - t) as f64 / 8.0;
            assert!((got - expect).abs() < 1e-12, "t={t}: {got} vs {expect}");
        }
        let avg = distinct_choice_ceiling_avg(8, 4);
        assert!((avg - 0.8125).abs() < 1e-12, "avg {avg}");
    }

    #[test]
    fn dataset_files_deterministic_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = recall_spec();
        let counts = SplitCounts {
            train: 8,
            val: 1,
            test: 1,
        };
        let m1 = make_dataset(&spec, counts, 42, dir.path()).unwrap();
        let train1 = std::fs::read(dir.path().join("train.jsonl")).unwrap();
        let manifest1 = std::fs::read(dir.path().join("manifest.json")).unwrap();

        let m2 = make_dataset(&spec, counts, 42, dir.path()).unwrap();
        let train2 = std::fs::read(dir.path().join("train.jsonl")).unwrap();
        let manifest2 = std::fs::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(train1, train2);
        assert_eq!(manifest1, manifest2);
        assert_eq!(m1.episodes.len(), 10);

        // line counts per split
        let lines = |name: &str| {
            std::fs::read_to_string(dir.path().join(name))
                .unwrap()
                .lines()
                .count()
        };
        assert_eq!(lines("train.jsonl"), 8);
        assert_eq!(lines("val.jsonl"), 1);
        assert_eq!(lines("test.jsonl"), 1);

        // seed replay regenerates the exact stored episode
        let episodes = read_episodes(&dir.path().join("train.jsonl")).unwrap();
        let entry = &m2.episodes[3];
        let replay = generate_episode(&spec, entry.seed).unwrap();
        assert_eq!(episodes[3], replay);

        // split seeds are pairwise distinct
        let mut seeds: Vec<u64> = m2.episodes.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = distinct_spec();
        s.episode_len = 9; // > K
        assert!(s.validate().is_err());
        let mut s = recall_spec();
        s.memory_depth = 5; // >= T
        assert!(s.validate().is_err());
        let mut s = recall_spec();
        s.num_items = 1;
        assert!(s.validate().is_err());
    }
}
