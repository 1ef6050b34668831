//! Toy instruction-following tasks.
//!
//! Layout of the token alphabet for `n` symbols:
//!
//! ```text
//! 0..4            PAD BOS EOS SEP
//! 4..8            task markers COPY REVERSE REPEAT SORT
//! 8..8+n          input symbols (instruction content)
//! 8+n..8+2n       output symbols (response content)
//! ```
//!
//! An instruction body is `[marker, s_1, .., s_k]` with `k >= 1` input
//! symbols. Its target is the mapped output symbols, transformed by the task.
//! Input and output alphabets are disjoint so the response contexts of the
//! policy never collide with instruction contexts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Sequence, TokenId, Vocab};

const FIRST_MARKER: TokenId = 4;
const N_MARKERS: TokenId = 4;
const FIRST_SYMBOL: TokenId = FIRST_MARKER + N_MARKERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    RepeatK,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::RepeatK,
        TaskKind::Sort,
    ];

    fn marker(self) -> TokenId {
        FIRST_MARKER
            + match self {
                TaskKind::Copy => 0,
                TaskKind::Reverse => 1,
                TaskKind::RepeatK => 2,
                TaskKind::Sort => 3,
            }
    }

    fn from_marker(tok: TokenId) -> Option<Self> {
        match tok.checked_sub(FIRST_MARKER)? {
            0 => Some(TaskKind::Copy),
            1 => Some(TaskKind::Reverse),
            2 => Some(TaskKind::RepeatK),
            3 => Some(TaskKind::Sort),
            _ => None,
        }
    }
}

/// Parameters of the task domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDomain {
    /// Number of content symbols in each of the input and output alphabets.
    pub n_symbols: usize,
    pub min_content: usize,
    pub max_content: usize,
    /// Repetition count of the REPEAT_K task.
    pub repeat_k: usize,
}

impl Default for TaskDomain {
    fn default() -> Self {
        Self {
            n_symbols: 10,
            min_content: 1,
            max_content: 3,
            repeat_k: 4,
        }
    }
}

impl TaskDomain {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 {
            return Err(Error::InvalidInput("n_symbols must be >= 2".into()));
        }
        Vocab::new(self.vocab_size())?;
        if self.min_content == 0 || self.min_content > self.max_content {
            return Err(Error::InvalidInput(
                "content bounds must satisfy 1 <= min_content <= max_content".into(),
            ));
        }
        if self.repeat_k == 0 {
            return Err(Error::InvalidInput("repeat_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_SYMBOL as usize + 2 * self.n_symbols
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size())
    }

    pub fn input_symbol(&self, i: usize) -> TokenId {
        FIRST_SYMBOL + i as TokenId
    }

    pub fn output_symbol(&self, i: usize) -> TokenId {
        FIRST_SYMBOL + (self.n_symbols + i) as TokenId
    }

    pub fn is_input_symbol(&self, tok: TokenId) -> bool {
        (FIRST_SYMBOL..FIRST_SYMBOL + self.n_symbols as TokenId).contains(&tok)
    }

    pub fn is_output_symbol(&self, tok: TokenId) -> bool {
        let lo = FIRST_SYMBOL + self.n_symbols as TokenId;
        (lo..lo + self.n_symbols as TokenId).contains(&tok)
    }

    fn to_output(&self, tok: TokenId) -> TokenId {
        tok + self.n_symbols as TokenId
    }

    /// Parses an instruction; `None` when it is not a well-formed task.
    pub fn decode(&self, instruction: &Sequence) -> Option<TaskSpec> {
        if !instruction.ends_with_eos() {
            return None;
        }
        let body = instruction.body();
        let (&marker, content) = body.split_first()?;
        let kind = TaskKind::from_marker(marker)?;
        if content.is_empty() || !content.iter().all(|&t| self.is_input_symbol(t)) {
            return None;
        }
        Some(TaskSpec {
            kind,
            content: content.to_vec(),
        })
    }

    pub fn target(&self, spec: &TaskSpec) -> Sequence {
        let mapped: Vec<TokenId> = spec.content.iter().map(|&t| self.to_output(t)).collect();
        let body = match spec.kind {
            TaskKind::Copy => mapped,
            TaskKind::Reverse => mapped.into_iter().rev().collect(),
            TaskKind::RepeatK => mapped.repeat(self.repeat_k),
            TaskKind::Sort => {
                let mut m = mapped;
                m.sort_unstable();
                m
            }
        };
        Sequence::from_body(&body)
    }

    pub fn instruction(&self, spec: &TaskSpec) -> Sequence {
        let mut body = vec![spec.kind.marker()];
        body.extend_from_slice(&spec.content);
        Sequence::from_body(&body)
    }

    /// A task drawn uniformly over kinds, content lengths and symbols.
    pub fn random_task<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let kind = TaskKind::ALL[rng.random_range(0..TaskKind::ALL.len())];
        let len = rng.random_range(self.min_content..=self.max_content);
        let content = (0..len)
            .map(|_| self.input_symbol(rng.random_range(0..self.n_symbols)))
            .collect();
        TaskSpec { kind, content }
    }
}

/// A decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input-symbol parameters of the task.
    pub content: Vec<TokenId>,
}
