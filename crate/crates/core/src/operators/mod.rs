//! The five LLM-enhanced relational operators.

mod cluster;
mod impute;
mod matching;
mod order;
mod select;
mod taxonomy;

use std::fmt;
use std::ops::Range;
use std::sync::{Arc, Mutex};

pub use cluster::{repair_partition, Cluster, ClusterResult};
pub use impute::ImputeTarget;
pub use matching::{
    distinct_key_values, join_columns, materialize_join, materialize_row_join, MatchResult,
};
pub use select::Selected;
pub use taxonomy::*;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompt::{
    format_reminder, parse, ParseError, Payload, PromptError, PromptKit, PromptOptions, PromptTask,
    Shape,
};
use crate::relation::{Granularity, RelationError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("{kind} is not defined at {granularity} granularity")]
    UnsupportedGranularity {
        kind: LroKind,
        granularity: Granularity,
    },
    #[error("{variant} is not an implementation of {kind} at {granularity} granularity")]
    UnsupportedVariant {
        kind: LroKind,
        granularity: Granularity,
        variant: Variant,
    },
    #[error("requirement text is empty")]
    EmptyRequirement,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("unusable completion for {tag} after retry: {error}")]
    Parse {
        tag: String,
        error: ParseError,
        raw: String,
    },
    #[error("prompt needs ~{tokens} tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("match result references element {id}, but only {len} exist")]
    StaleId { id: usize, len: usize },
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Prompt(PromptError),
    #[error(transparent)]
    Gateway(GatewayError),
}

impl From<PromptError> for OperatorError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::ContextOverflow { tokens, limit } => {
                Self::ContextOverflow { tokens, limit }
            }
            other => Self::Prompt(other),
        }
    }
}

impl From<GatewayError> for OperatorError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::ContextOverflow { tokens, limit } => {
                Self::ContextOverflow { tokens, limit }
            }
            other => Self::Gateway(other),
        }
    }
}

impl OperatorError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, Self::Gateway(GatewayError::Timeout(_)))
    }
}

/// Natural-language condition handed to an operator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Requirement(String);

impl Requirement {
    pub fn new(text: impl Into<String>) -> Result<Self, OperatorError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(OperatorError::EmptyRequirement);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<&str> for Requirement {
    type Error = OperatorError;

    fn try_from(s: &str) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteKind {
    Warning,
    Degradation,
    Retry,
}

/// Something an operator run did that the caller may want to surface.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Note {
    pub kind: NoteKind,
    pub message: String,
}

/// Picks the variant to run: the explicit one if valid, otherwise the
/// best-practice default.
pub fn resolve_variant(
    kind: LroKind,
    g: Granularity,
    variant: Option<Variant>,
) -> Result<Variant, OperatorError> {
    if !kind.supports(g) {
        return Err(OperatorError::UnsupportedGranularity {
            kind,
            granularity: g,
        });
    }
    let v = match variant {
        Some(v) => v,
        None => best_practice_variant(kind, g).ok_or(OperatorError::UnsupportedGranularity {
            kind,
            granularity: g,
        })?,
    };
    if !v.valid_for(kind, g) {
        return Err(OperatorError::UnsupportedVariant {
            kind,
            granularity: g,
            variant: v,
        });
    }
    Ok(v)
}

/// Runs operators against one gateway.
#[derive(Debug, Clone)]
pub struct Engine {
    gateway: Gateway,
    kit: Arc<PromptKit>,
    options: PromptOptions,
    overflow_fallback: bool,
    notes: Arc<Mutex<Vec<Note>>>,
}

impl Engine {
    /// The kit's token budget is set to the gateway's context length.
    pub fn new(gateway: Gateway, kit: PromptKit) -> Self {
        let kit = kit.with_budget(gateway.config().max_context_tokens);
        Self {
            gateway,
            kit: Arc::new(kit),
            options: PromptOptions::default(),
            overflow_fallback: true,
            notes: Arc::default(),
        }
    }

    pub fn with_options(mut self, options: PromptOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_overflow_fallback(mut self, on: bool) -> Self {
        self.overflow_fallback = on;
        self
    }

    pub fn options(&self) -> &PromptOptions {
        &self.options
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn kit(&self) -> &PromptKit {
        &self.kit
    }

    /// A copy with its own ledger, notes and per-query deadline.
    pub fn begin_query(&self) -> Self {
        Self {
            gateway: self.gateway.begin_query(),
            kit: Arc::clone(&self.kit),
            options: self.options.clone(),
            overflow_fallback: self.overflow_fallback,
            notes: Arc::default(),
        }
    }

    pub fn notes(&self) -> Vec<Note> {
        self.notes.lock().expect("notes lock").clone()
    }

    fn note(&self, kind: NoteKind, message: String) {
        log::warn!("{message}");
        self.notes
            .lock()
            .expect("notes lock")
            .push(Note { kind, message });
    }

    fn build(
        &self,
        variant: Variant,
        task: &PromptTask<'_>,
        l: &Requirement,
    ) -> Result<(ChatRequest, Shape), OperatorError> {
        let req = self
            .kit
            .build_prompt(variant, task, l.as_str(), &self.options)?;
        Ok((req, task.shape()))
    }

    /// Sends every request and parses each answer. An unparsable answer is
    /// re-asked once with a format reminder.
    async fn ask(&self, asks: Vec<(ChatRequest, Shape)>) -> Result<Vec<Payload>, OperatorError> {
        let reqs: Vec<ChatRequest> = asks.iter().map(|(r, _)| r.clone()).collect();
        let resps = self.gateway.complete_many(&reqs).await?;
        let mut out: Vec<Option<Payload>> = vec![None; asks.len()];
        let mut again = Vec::new();
        for (i, ((req, shape), resp)) in asks.iter().zip(&resps).enumerate() {
            match parse(*shape, &resp.text) {
                Ok(p) => out[i] = Some(p.payload),
                Err(e) => {
                    self.note(NoteKind::Retry, format!("re-asking {}: {e}", req.tag));
                    let mut retry = req.clone();
                    retry.user.push_str(&format_reminder(*shape, &e));
                    again.push((i, retry));
                }
            }
        }
        if !again.is_empty() {
            let retry_reqs: Vec<ChatRequest> = again.iter().map(|(_, r)| r.clone()).collect();
            let resps = self.gateway.complete_many(&retry_reqs).await?;
            for ((i, req), resp) in again.iter().zip(resps) {
                let shape = asks[*i].1;
                match parse(shape, &resp.text) {
                    Ok(p) => out[*i] = Some(p.payload),
                    Err(error) => {
                        return Err(OperatorError::Parse {
                            tag: req.tag.to_string(),
                            error,
                            raw: resp.text,
                        })
                    }
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|p| p.expect("every answer parsed"))
            .collect())
    }

    async fn ask_one(&self, ask: (ChatRequest, Shape)) -> Result<Payload, OperatorError> {
        Ok(self.ask(vec![ask]).await?.remove(0))
    }

    /// Asks whether each pair of strings denotes the same thing, one
    /// request per pair.
    pub async fn judge_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<bool>, OperatorError> {
        let l = Requirement::new("semantic equivalence")?;
        let asks = pairs
            .iter()
            .map(|&(a, b)| self.build(Variant::One, &PromptTask::Judge { a, b }, &l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .ask(asks)
            .await?
            .into_iter()
            .map(|p| matches!(p, Payload::Verdict(true)))
            .collect())
    }

    /// Splits `0..n` into prompts of `b` elements (all of them for ALL). If an
    /// ALL prompt overflows the context and fallback is on, degrades to the
    /// largest batch size whose prompts all fit.
    fn plan_chunks<F>(
        &self,
        n: usize,
        variant: Variant,
        build: F,
    ) -> Result<Vec<ChunkAsk>, OperatorError>
    where
        F: Fn(Range<usize>, Variant) -> Result<(ChatRequest, Shape), OperatorError>,
    {
        let b = match variant {
            Variant::Batch(b) => b,
            _ => n,
        };
        match build_chunks(n, b, variant, &build) {
            Err(OperatorError::ContextOverflow { tokens, limit })
                if variant == Variant::All && self.overflow_fallback && n > 1 =>
            {
                let (mut lo, mut hi, mut best) = (0, n - 1, None);
                while lo < hi {
                    let mid = (lo + hi).div_ceil(2);
                    match build_chunks(n, mid, Variant::Batch(mid), &build) {
                        Ok(c) => {
                            lo = mid;
                            best = Some(c);
                        }
                        Err(OperatorError::ContextOverflow { .. }) => hi = mid - 1,
                        Err(e) => return Err(e),
                    }
                }
                let chunks = match best {
                    Some(c) if lo > 0 => c,
                    _ => return Err(OperatorError::ContextOverflow { tokens, limit }),
                };
                self.note(
                    NoteKind::Degradation,
                    format!("ALL prompt needs ~{tokens} tokens (limit {limit}); fell back to BATCH({lo})"),
                );
                Ok(chunks)
            }
            other => other,
        }
    }
}

type ChunkAsk = (Range<usize>, ChatRequest, Shape);

fn build_chunks<F>(
    n: usize,
    b: usize,
    variant: Variant,
    build: &F,
) -> Result<Vec<ChunkAsk>, OperatorError>
where
    F: Fn(Range<usize>, Variant) -> Result<(ChatRequest, Shape), OperatorError>,
{
    let b = b.max(1);
    (0..n)
        .step_by(b)
        .map(|s| {
            let r = s..(s + b).min(n);
            let (req, shape) = build(r.clone(), variant)?;
            Ok((r, req, shape))
        })
        .collect()
}
