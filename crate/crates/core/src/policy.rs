//! Autoregressive linear-softmax token policy over hashed n-gram features.
//!
//! Logits are `z = W f + b` where `f` is a binary feature vector built from
//! the last [`FEATURE_WINDOW`] context tokens. Every quantity the objective
//! needs (token log-probabilities, full next-token distributions and their
//! gradients) is exact and cheap.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::trajectory::action_mask;
use crate::vocab::{Token, Vocabulary};

pub const FEATURE_WINDOW: usize = 8;
pub const MAX_NGRAM: usize = 3;
pub const MAX_THINK_TOKENS: usize = 4;
pub const MAX_COMMAND_TOKENS: usize = 12;

/// FNV-1a of the byte string `"n|id_1,...,id_n"`.
#[inline]
pub fn ngram_hash(ngram: &[Token]) -> u64 {
    hash_ngram(Fnv1a::default(), ngram)
}

/// FNV-1a of `"h|n|id_1,...,id_n"`: an n-gram read from a hindsight block.
#[inline]
pub fn hindsight_ngram_hash(ngram: &[Token]) -> u64 {
    let mut h = Fnv1a::default();
    h.write_byte(b'h');
    h.write_byte(b'|');
    hash_ngram(h, ngram)
}

#[inline]
fn hash_ngram(mut h: Fnv1a, ngram: &[Token]) -> u64 {
    h.write_decimal(ngram.len() as u64);
    h.write_byte(b'|');
    for (i, t) in ngram.iter().enumerate() {
        if i > 0 {
            h.write_byte(b',');
        }
        h.write_decimal(t.0 as u64);
    }
    h.finish()
}

/// Sparse binary features; the bias index `dim - 1` is always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    indices: Vec<u32>,
    dim: usize,
}

impl FeatureVector {
    /// Sorted, unique active indices.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, j: usize) -> f64 {
        if self.indices.binary_search(&(j as u32)).is_ok() {
            1.0
        } else {
            0.0
        }
    }
}

/// Binary n-gram features of the last [`FEATURE_WINDOW`] tokens plus a bias.
///
/// A `<hind> … </hind>` block (the last one, if several) is read as a side
/// channel: it is cut out before the window is taken, and all of its n-grams
/// are hashed under their own `h|` key. Without a block this is the plain
/// window featurization.
pub fn featurize(context: &[Token], dim: usize) -> FeatureVector {
    assert!(dim >= 2, "feature dimension must be at least 2");
    let buckets = (dim - 1) as u64;
    let mut indices: Vec<u32> = Vec::with_capacity(3 * FEATURE_WINDOW + 1);
    let spliced;
    let (main, block): (&[Token], &[Token]) =
        match context.iter().rposition(|&t| t == Token::HIND_BEGIN) {
            None => (context, &[]),
            Some(open) => {
                let rest = &context[open + 1..];
                let close = rest.iter().position(|&t| t == Token::HIND_END).unwrap_or(rest.len());
                let after = rest.get(close + 1..).unwrap_or(&[]);
                let keep = FEATURE_WINDOW.saturating_sub(after.len());
                let before = &context[open.saturating_sub(keep)..open];
                spliced = [before, after].concat();
                (&spliced[..], &rest[..close])
            }
        };
    let window = &main[main.len().saturating_sub(FEATURE_WINDOW)..];
    for n in 1..=MAX_NGRAM.min(window.len()) {
        for gram in window.windows(n) {
            indices.push((ngram_hash(gram) % buckets) as u32);
        }
    }
    for n in 1..=MAX_NGRAM.min(block.len()) {
        for gram in block.windows(n) {
            indices.push((hindsight_ngram_hash(gram) % buckets) as u32);
        }
    }
    indices.push((dim - 1) as u32);
    indices.sort_unstable();
    indices.dedup();
    FeatureVector { indices, dim }
}

/// `log softmax(z / temperature)` with max subtraction.
pub fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|&x| (x - max) / temperature).collect();
    let lse = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|x| x - lse).collect()
}

pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(z, temperature).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    dim: usize,
    /// Feature-major storage: the logit column of feature `j` is
    /// `w[j * V .. (j + 1) * V]`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        PolicyParams {
            vocab_size,
            dim,
            w: vec![0.0; vocab_size * dim],
            b: vec![0.0; vocab_size],
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`; for tests and probes.
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, dim);
        for x in p.w.iter_mut().chain(p.b.iter_mut()) {
            *x = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w(&self, v: usize, j: usize) -> f64 {
        self.w[j * self.vocab_size + v]
    }

    pub fn set_w(&mut self, v: usize, j: usize, x: f64) {
        self.w[j * self.vocab_size + v] = x;
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn num_params(&self) -> usize {
        self.vocab_size * self.dim + self.vocab_size
    }

    /// Flat view: W row-major (`v * D + j`) followed by b.
    pub fn get_flat(&self, i: usize) -> f64 {
        let vd = self.vocab_size * self.dim;
        if i < vd {
            self.w(i / self.dim, i % self.dim)
        } else {
            self.b[i - vd]
        }
    }

    pub fn set_flat(&mut self, i: usize, x: f64) {
        let vd = self.vocab_size * self.dim;
        if i < vd {
            self.set_w(i / self.dim, i % self.dim, x);
        } else {
            self.b[i - vd] = x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|x| x.is_finite())
    }

    pub fn logits(&self, f: &FeatureVector) -> Vec<f64> {
        debug_assert_eq!(f.dim(), self.dim);
        let v = self.vocab_size;
        let mut z = self.b.clone();
        for &j in f.indices() {
            let col = &self.w[j as usize * v..(j as usize + 1) * v];
            for (zi, wi) in z.iter_mut().zip(col) {
                *zi += wi;
            }
        }
        z
    }

    pub fn context_logits(&self, context: &[Token]) -> Vec<f64> {
        self.logits(&featurize(context, self.dim))
    }

    /// `params -= lr * grad`
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) {
        assert_eq!(grad.w.len(), self.w.len());
        for (p, g) in self.w.iter_mut().zip(&grad.w) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(&grad.b) {
            *p -= lr * g;
        }
    }
}

/// Dense gradient over `(W, b)` with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    vocab_size: usize,
    dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Gradient {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Gradient {
            vocab_size,
            dim,
            w: vec![0.0; vocab_size * dim],
            b: vec![0.0; vocab_size],
        }
    }

    pub fn like(params: &PolicyParams) -> Self {
        Self::zeros(params.vocab_size, params.dim)
    }

    /// Adds `scale * dz ⊗ f` (and `scale * dz` to the bias).
    pub fn add_outer(&mut self, features: &FeatureVector, dz: &[f64], scale: f64) {
        let v = self.vocab_size;
        for (bi, d) in self.b.iter_mut().zip(dz) {
            *bi += scale * d;
        }
        for &j in features.indices() {
            let col = &mut self.w[j as usize * v..(j as usize + 1) * v];
            for (ci, d) in col.iter_mut().zip(dz) {
                *ci += scale * d;
            }
        }
    }

    pub fn add_sparse(&mut self, g: &SparseGrad, scale: f64) {
        self.add_outer(&g.features, &g.dz, scale);
    }

    /// `self ← decay·self + other`, a heavy-ball velocity update.
    pub fn decay_add(&mut self, decay: f64, other: &Gradient) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a = decay * *a + b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a = decay * *a + b;
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let vd = self.vocab_size * self.dim;
        if i < vd {
            let (v, j) = (i / self.dim, i % self.dim);
            self.w[j * self.vocab_size + v]
        } else {
            self.b[i - vd]
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().chain(&self.b).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.w
            .iter()
            .zip(&other.w)
            .chain(self.b.iter().zip(&other.b))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Flat indices whose entry is non-zero.
    pub fn nonzero_indices(&self) -> Vec<usize> {
        (0..self.num_params()).filter(|&i| self.get_flat(i) != 0.0).collect()
    }
}

/// Gradient of one token's log-probability: `dz` on the logits, shared by
/// the bias and every active feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub features: FeatureVector,
    pub dz: Vec<f64>,
}

pub fn log_prob(params: &PolicyParams, context: &[Token], token: Token, temperature: f64) -> f64 {
    log_softmax(&params.context_logits(context), temperature)[token.index()]
}

pub fn distribution(params: &PolicyParams, context: &[Token], temperature: f64) -> Vec<f64> {
    softmax(&params.context_logits(context), temperature)
}

/// Inverse-CDF draw, accumulating in vocabulary-id order.
pub fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return Token(i as u32);
        }
    }
    Token(last_positive as u32)
}

pub fn sample_token<R: Rng + ?Sized>(
    params: &PolicyParams,
    context: &[Token],
    temperature: f64,
    rng: &mut R,
) -> Token {
    sample_from(&distribution(params, context, temperature), rng)
}

/// Highest logit, ties to the lowest id.
pub fn argmax(z: &[f64]) -> Token {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    Token(best as u32)
}

/// `∂ log p(token) / ∂z = onehot(token) - p` at temperature 1.
pub fn log_prob_grad(params: &PolicyParams, context: &[Token], token: Token) -> SparseGrad {
    let features = featurize(context, params.dim());
    let mut dz = softmax(&params.logits(&features), 1.0);
    for p in dz.iter_mut() {
        *p = -*p;
    }
    dz[token.index()] += 1.0;
    SparseGrad { features, dz }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Sample { temperature: f64 },
    Greedy,
}

/// One emitted response.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedAction {
    pub tokens: Vec<Token>,
    /// Temperature-1 log-probabilities of the emitted tokens.
    pub logprobs: Vec<f64>,
    pub mask: Vec<bool>,
}

struct Emitter<'a> {
    params: &'a PolicyParams,
    window: Vec<Token>,
    out: GeneratedAction,
}

impl Emitter<'_> {
    fn next_logits(&self) -> Vec<f64> {
        self.params.context_logits(&self.window)
    }

    fn choose<R: Rng + ?Sized>(&self, z: &[f64], decoding: Decoding, rng: &mut R) -> Token {
        match decoding {
            Decoding::Sample { temperature } => sample_from(&softmax(z, temperature), rng),
            Decoding::Greedy => argmax(z),
        }
    }

    fn emit(&mut self, token: Token, z: &[f64]) {
        self.out.logprobs.push(log_softmax(z, 1.0)[token.index()]);
        self.out.tokens.push(token);
        self.window.push(token);
        if self.window.len() > 2 * FEATURE_WINDOW {
            self.window.drain(..FEATURE_WINDOW);
        }
    }
}

/// Emits up to [`MAX_THINK_TOKENS`] free tokens, then `<act>`, then command
/// tokens until `</act>` or [`MAX_COMMAND_TOKENS`]. Forced markers are
/// recorded at the model's own log-probability.
pub fn generate_action_with<R: Rng + ?Sized>(
    params: &PolicyParams,
    history: &[Token],
    decoding: Decoding,
    rng: &mut R,
) -> GeneratedAction {
    let mut em = Emitter {
        params,
        window: history[history.len().saturating_sub(FEATURE_WINDOW)..].to_vec(),
        out: GeneratedAction {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            mask: Vec::new(),
        },
    };
    let mut opened = false;
    for _ in 0..MAX_THINK_TOKENS {
        let z = em.next_logits();
        let tok = em.choose(&z, decoding, rng);
        em.emit(tok, &z);
        if tok == Token::ACT_BEGIN {
            opened = true;
            break;
        }
    }
    if !opened {
        let z = em.next_logits();
        em.emit(Token::ACT_BEGIN, &z);
    }
    let mut closed = false;
    for _ in 0..MAX_COMMAND_TOKENS {
        let z = em.next_logits();
        let tok = em.choose(&z, decoding, rng);
        em.emit(tok, &z);
        if tok == Token::ACT_END {
            closed = true;
            break;
        }
    }
    if !closed {
        let z = em.next_logits();
        em.emit(Token::ACT_END, &z);
    }
    let mut out = em.out;
    out.mask = action_mask(&out.tokens);
    out
}

pub fn generate_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    history: &[Token],
    temperature: f64,
    rng: &mut R,
) -> GeneratedAction {
    generate_action_with(params, history, Decoding::Sample { temperature }, rng)
}

/// Frozen copy of the policy used as the hindsight teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    params: PolicyParams,
    step: usize,
}

impl TeacherSnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

pub fn snapshot(params: &PolicyParams, step: usize) -> TeacherSnapshot {
    TeacherSnapshot {
        params: params.clone(),
        step,
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub step: usize,
    pub vocab: Vocabulary,
}

pub fn write_checkpoint(params: &PolicyParams, step: usize, vocab: &Vocabulary) -> String {
    use std::fmt::Write;
    let (v, d) = (params.vocab_size, params.dim);
    let mut s = String::with_capacity(v * d * 3 + 256);
    let _ = writeln!(s, "SERLCKPT v1 V={v} D={d} step={step}");
    let join = |xs: &mut dyn Iterator<Item = f64>| {
        xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    };
    s.push_str(&join(&mut params.b.iter().copied()));
    s.push('\n');
    for row in 0..v {
        s.push_str(&join(&mut (0..d).map(|j| params.w(row, j))));
        s.push('\n');
    }
    s.push_str(&vocab.dump());
    s
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "SERLCKPT" || fields[1] != "v1" {
        return Err(bad("bad header"));
    }
    let field = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .strip_prefix(name)
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(&format!("bad header field {name}")))
    };
    let (v, d, step) = (field(2, "V=")?, field(3, "D=")?, field(4, "step=")?);
    if v == 0 || d < 2 {
        return Err(bad("bad dimensions"));
    }
    let parse_row = |line: Option<&str>, len: usize, what: &str| -> Result<Vec<f64>> {
        let line = line.ok_or_else(|| bad(&format!("missing {what}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(&format!("unparseable number in {what}")))?;
        if row.len() != len || row.iter().any(|x| !x.is_finite()) {
            return Err(bad(&format!("{what} must hold {len} finite numbers")));
        }
        Ok(row)
    };
    let mut params = PolicyParams::zeros(v, d);
    params.b = parse_row(lines.next(), v, "bias")?;
    for row in 0..v {
        let values = parse_row(lines.next(), d, "weight row")?;
        for (j, x) in values.into_iter().enumerate() {
            params.set_w(row, j, x);
        }
    }
    let rest: Vec<&str> = lines.collect();
    let vocab = Vocabulary::parse_dump(&rest.join("\n"))?;
    if vocab.len() != v {
        return Err(bad("vocabulary size does not match V"));
    }
    Ok(Checkpoint {
        params,
        step,
        vocab,
    })
}
