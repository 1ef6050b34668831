//! Tabular autoregressive token policy.
//!
//! The policy is a context -> logits table. A context is the last `order`
//! tokens of the running stream (left-padded with PAD), so an order-2 policy is
//! a trigram model. Prompt and response are scored as one stream: the prompt's
//! tokens followed by the response's tokens after its BOS.
//!
//! # Checkpoint layout
//!
//! Little-endian, stable across versions:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PREFCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     vocab_size (u32)
//! 16      4     order (u32)
//! 20      8     policy version (u64)
//! 28      8     logit count = vocab_size^(order+1) (u64)
//! 36      8*n   logits (f64), row-major [context][next token]
//! ```

use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u16;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

/// Longest prompt+response stream the policy will score.
pub const CONTEXT_CAPACITY: usize = 4096;

const CKPT_MAGIC: &[u8; 8] = b"PREFCKPT";
const CKPT_FORMAT: u32 = 1;
const CKPT_HEADER: usize = 36;

/// Token alphabet. Ids 0..4 are reserved for PAD, BOS, EOS, SEP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub const MIN_SIZE: usize = 4;
    pub const MAX_SIZE: usize = 256;

    pub fn new(size: usize) -> Result<Self> {
        if !(Self::MIN_SIZE..=Self::MAX_SIZE).contains(&size) {
            return Err(Error::InvalidInput(format!(
                "vocab size must be in [{}, {}], got {size}",
                Self::MIN_SIZE,
                Self::MAX_SIZE
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token: token as usize,
                vocab_size: self.size,
            })
        }
    }
}

/// A token sequence starting with BOS. `len()` excludes the BOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct Sequence {
    tokens: Vec<TokenId>,
}

impl TryFrom<Vec<TokenId>> for Sequence {
    type Error = Error;
    fn try_from(tokens: Vec<TokenId>) -> Result<Self> {
        Sequence::new(tokens)
    }
}

impl From<Sequence> for Vec<TokenId> {
    fn from(s: Sequence) -> Self {
        s.tokens
    }
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::InvalidInput("sequence must begin with BOS".into()));
        }
        Ok(Self { tokens })
    }

    /// `[BOS, body.., EOS]`.
    pub fn from_body(body: &[TokenId]) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(body);
        tokens.push(EOS);
        Self { tokens }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Tokens after BOS.
    pub fn after_bos(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Tokens after BOS with a trailing EOS or SEP stripped.
    pub fn body(&self) -> &[TokenId] {
        let rest = self.after_bos();
        match rest.last() {
            Some(&EOS) | Some(&SEP) => &rest[..rest.len() - 1],
            _ => rest,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS) && self.tokens.len() > 1
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        self.tokens.iter().try_for_each(|&t| vocab.check(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 64,
        }
    }
}

impl SamplerConfig {
    /// Below this temperature sampling is greedy.
    pub const GREEDY_BELOW: f64 = 1e-6;

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidInput("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Context -> logit table over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    order: usize,
    logits: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    pub fn zeros(vocab: Vocab, order: usize) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(Error::InvalidInput(format!(
                "policy order must be 1 or 2, got {order}"
            )));
        }
        let n = vocab.size().pow(order as u32 + 1);
        Ok(Self {
            vocab,
            order,
            logits: vec![0.0; n],
            version: 0,
        })
    }

    /// Logits drawn i.i.d. from Normal(0, std).
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocab,
        order: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(vocab, order)?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidInput(format!("init std {std}: {e}")))?;
        for l in params.logits.iter_mut() {
            *l = normal.sample(rng);
        }
        Ok(params)
    }

    pub fn from_logits(vocab: Vocab, order: usize, logits: Vec<f64>, version: u64) -> Result<Self> {
        let mut params = Self::zeros(vocab, order)?;
        if logits.len() != params.logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits, got {}",
                params.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("logits must be finite".into()));
        }
        params.logits = logits;
        params.version = version;
        Ok(params)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_contexts(&self) -> usize {
        self.vocab.size().pow(self.order as u32)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        let v = self.vocab.size();
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Context index of the last `order` tokens of `history` (left-padded).
    pub fn context_of(&self, history: &[TokenId]) -> usize {
        let v = self.vocab.size();
        let mut ctx = 0;
        for k in (1..=self.order).rev() {
            let tok = if history.len() >= k {
                history[history.len() - k]
            } else {
                PAD
            };
            ctx = ctx * v + tok as usize;
        }
        ctx
    }

    pub fn softmax_row(&self, ctx: usize) -> Vec<f64> {
        softmax(self.row(ctx), 1.0)
    }

    pub fn log_prob_at(&self, ctx: usize, token: TokenId) -> f64 {
        let row = self.row(ctx);
        row[token as usize] - log_sum_exp(row)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    fn stream(&self, prompt: &Sequence, response: &Sequence) -> Result<Vec<TokenId>> {
        prompt.check_vocab(&self.vocab)?;
        response.check_vocab(&self.vocab)?;
        if response.is_empty() {
            return Err(Error::InvalidInput("response must not be empty".into()));
        }
        let total = prompt.tokens().len() + response.len();
        if total > CONTEXT_CAPACITY {
            return Err(Error::InvalidInput(format!(
                "stream of {total} tokens exceeds context capacity {CONTEXT_CAPACITY}"
            )));
        }
        let mut stream = Vec::with_capacity(total);
        stream.extend_from_slice(prompt.tokens());
        stream.extend_from_slice(response.after_bos());
        Ok(stream)
    }

    /// (context, realized token) for every response step.
    fn response_steps(
        &self,
        prompt: &Sequence,
        response: &Sequence,
    ) -> Result<Vec<(usize, TokenId)>> {
        let stream = self.stream(prompt, response)?;
        let start = prompt.tokens().len();
        Ok((start..stream.len())
            .map(|i| (self.context_of(&stream[..i]), stream[i]))
            .collect())
    }
}

/// Immutable shared copy of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Arc<PolicyParams>);

impl Snapshot {
    pub fn to_params(&self) -> PolicyParams {
        (*self.0).clone()
    }
}

impl Deref for Snapshot {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot(params: &PolicyParams) -> Snapshot {
    params.snapshot()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Sum of response-token log-probs (EOS included) given the prompt.
pub fn seq_log_prob(params: &PolicyParams, prompt: &Sequence, response: &Sequence) -> Result<f64> {
    Ok(params
        .response_steps(prompt, response)?
        .into_iter()
        .map(|(ctx, tok)| params.log_prob_at(ctx, tok))
        .sum())
}

/// A sampled response with its log-prob under the (untempered) policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub sequence: Sequence,
    pub log_prob: f64,
}

/// Sample until EOS or `cfg.max_len` tokens.
pub fn sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Sequence,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sampled> {
    sample_until(params, prompt, cfg, &[EOS], rng)
}

/// Sample until any of `stops` is emitted (it is kept) or `cfg.max_len` tokens.
pub fn sample_until<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Sequence,
    cfg: &SamplerConfig,
    stops: &[TokenId],
    rng: &mut R,
) -> Result<Sampled> {
    prompt.check_vocab(&params.vocab)?;
    let mut stream = prompt.tokens().to_vec();
    let mut out = vec![BOS];
    let mut log_prob = 0.0;
    while out.len() <= cfg.max_len {
        let ctx = params.context_of(&stream);
        let row = params.row(ctx);
        let tok = if cfg.temperature < SamplerConfig::GREEDY_BELOW {
            argmax(row)
        } else {
            draw(&softmax(row, cfg.temperature), rng)
        };
        log_prob += params.log_prob_at(ctx, tok);
        stream.push(tok);
        out.push(tok);
        if stops.contains(&tok) {
            break;
        }
    }
    Ok(Sampled {
        sequence: Sequence { tokens: out },
        log_prob,
    })
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}

/// Gradient accumulator shaped like a policy's logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    vocab_size: usize,
    order: usize,
    values: Vec<f64>,
}

impl GradTable {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            vocab_size: params.vocab.size(),
            order: params.order,
            values: vec![0.0; params.logits.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matches(&self, params: &PolicyParams) -> bool {
        self.vocab_size == params.vocab.size() && self.order == params.order
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|g| *g *= k);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Adds `weight * d log pi(response|prompt) / d logits` into `grad`.
pub fn accumulate_grad(
    params: &PolicyParams,
    prompt: &Sequence,
    response: &Sequence,
    weight: f64,
    grad: &mut GradTable,
) -> Result<()> {
    if !grad.matches(params) {
        return Err(Error::ShapeMismatch(format!(
            "gradient table ({}^{}) does not match policy ({}^{})",
            grad.vocab_size,
            grad.order,
            params.vocab.size(),
            params.order
        )));
    }
    let steps = params.response_steps(prompt, response)?;
    if weight == 0.0 {
        return Ok(());
    }
    let v = params.vocab.size();
    for (ctx, tok) in steps {
        let probs = params.softmax_row(ctx);
        let g = &mut grad.values[ctx * v..(ctx + 1) * v];
        for (gi, p) in g.iter_mut().zip(&probs) {
            *gi -= weight * p;
        }
        g[tok as usize] += weight;
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &PolicyParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(CKPT_HEADER + 8 * params.logits.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_FORMAT.to_le_bytes());
    out.extend_from_slice(&(params.vocab.size() as u32).to_le_bytes());
    out.extend_from_slice(&(params.order as u32).to_le_bytes());
    out.extend_from_slice(&params.version.to_le_bytes());
    out.extend_from_slice(&(params.logits.len() as u64).to_le_bytes());
    for l in &params.logits {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn params_from_checkpoint(bytes: &[u8], path: &Path) -> Result<PolicyParams> {
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < CKPT_HEADER || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(8) != CKPT_FORMAT {
        return Err(bad("unsupported checkpoint format version"));
    }
    let vocab = Vocab::new(u32_at(12) as usize).map_err(|e| bad(&e.to_string()))?;
    let order = u32_at(16) as usize;
    let version = u64_at(20);
    let n = u64_at(28) as usize;
    if bytes.len() != CKPT_HEADER + 8 * n {
        return Err(bad("truncated logit table"));
    }
    let logits = bytes[CKPT_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_logits(vocab, order, logits, version).map_err(|e| bad(&e.to_string()))
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    params_from_checkpoint(&fs::read(path)?, path)
}
