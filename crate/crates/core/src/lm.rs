//! A tiny causal language model with low-rank adapters and a value head.
//!
//! Small enough to train on a CPU in seconds, but structurally the same as
//! the large-model setup: a frozen base, trainable low-rank updates on its
//! projection matrices, masked next-token loss over the assistant target,
//! and a linear value head reading the hidden state at the last non-padding
//! position.
//!
//! At position `l` the model sees the current token embedding `x_l` and the
//! running mean `c_l` of all embeddings up to `l`:
//!
//! ```text
//! h_l      = tanh((W_x + s B_x A_x) x_l + (W_c + s B_c A_c) c_l + b)
//! logits_l = (W_o + s B_o A_o) h_l + b_o
//! ```
//!
//! where `s = lora_alpha / rank`. Because `h_l` has no recurrence, the loss
//! at a masked position only needs the hidden state at that position.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::providers::{
    stable_hash, ChatRole, DecodingParams, LmScorer, Message, ReferenceTokenizer, Tokenizer,
};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SYSTEM: u32 = 4;
pub const USER: u32 = 5;
pub const ASSISTANT: u32 = 6;
const SPECIALS: [&str; 7] = [
    "<pad>",
    "<unk>",
    "<bos>",
    "<eos>",
    "<system>",
    "<user>",
    "<assistant>",
];

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += scale * M x`
    fn mul_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out += scale * M^T y`
    fn mul_t_add(&self, y: &[f64], scale: f64, out: &mut [f64]) {
        for (yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            let f = scale * yi;
            if f == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += f * a;
            }
        }
    }

    /// `M += scale * a b^T`
    fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let f = scale * ai;
            if f == 0.0 {
                continue;
            }
            for (m, bj) in row.iter_mut().zip(b) {
                *m += f * bj;
            }
        }
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Ok(Vocab::from_tokens(tokens))
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Specials first, then every lowercased token of `texts` in order of
    /// first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for t in ReferenceTokenizer.tokenize(&text.to_lowercase()) {
                if seen.insert(t.clone()) {
                    tokens.push(t);
                }
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        ReferenceTokenizer
            .tokenize(&text.to_lowercase())
            .iter()
            .map(|t| *self.index.get(t).unwrap_or(&UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = &self.tokens[id as usize];
            let is_word = tok.chars().next().is_some_and(char::is_alphanumeric);
            if !out.is_empty() && is_word {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

/// A rendered training/scoring sequence. `labels[l]` is the token to predict
/// at position `l`; only positions with `mask[l]` contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Last position holding a real token.
    pub fn last_non_padding(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != PAD).unwrap_or(0)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.tokens.push(PAD);
            self.labels.push(PAD);
            self.mask.push(false);
        }
    }
}

/// Right-pads every sequence to the batch maximum.
pub fn collate(mut seqs: Vec<Encoded>) -> Vec<Encoded> {
    let max = seqs.iter().map(Encoded::len).max().unwrap_or(0);
    seqs.iter_mut().for_each(|s| s.pad_to(max));
    seqs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lora {
    /// rank x in
    pub a: Mat,
    /// out x rank
    pub b: Mat,
}

impl Lora {
    fn new(out: usize, inp: usize, rank: usize, rng: &mut impl Rng) -> Self {
        Lora {
            a: Mat::random(rank, inp, 1.0 / (inp as f64).sqrt(), rng),
            b: Mat::zeros(out, rank),
        }
    }

    fn zeros_like(&self) -> Self {
        Lora {
            a: Mat::zeros(self.a.rows, self.a.cols),
            b: Mat::zeros(self.b.rows, self.b.cols),
        }
    }
}

/// Low-rank updates on the three projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub rank: usize,
    pub scale: f64,
    pub x: Lora,
    pub c: Lora,
    pub out: Lora,
}

impl Adapter {
    pub fn zeros_like(&self) -> Self {
        Adapter {
            rank: self.rank,
            scale: self.scale,
            x: self.x.zeros_like(),
            c: self.c.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.x.a.data,
            &self.x.b.data,
            &self.c.a.data,
            &self.c.b.data,
            &self.out.a.data,
            &self.out.b.data,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.x.a.data,
            &mut self.x.b.data,
            &mut self.c.a.data,
            &mut self.c.b.data,
            &mut self.out.a.data,
            &mut self.out.b.data,
        ]
    }

    pub fn add_assign(&mut self, o: &Adapter) {
        for (a, b) in self.tensors_mut().into_iter().zip(o.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub emb: Mat,
    pub w_x: Mat,
    pub w_c: Mat,
    pub bias: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl BaseParams {
    fn zeros_like(&self) -> Self {
        BaseParams {
            emb: Mat::zeros(self.emb.rows, self.emb.cols),
            w_x: Mat::zeros(self.w_x.rows, self.w_x.cols),
            w_c: Mat::zeros(self.w_c.rows, self.w_c.cols),
            bias: vec![0.0; self.bias.len()],
            w_out: Mat::zeros(self.w_out.rows, self.w_out.cols),
            b_out: vec![0.0; self.b_out.len()],
        }
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.emb.data,
            &mut self.w_x.data,
            &mut self.w_c.data,
            &mut self.bias,
            &mut self.w_out.data,
            &mut self.b_out,
        ]
    }

    fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.emb.data,
            &self.w_x.data,
            &self.w_c.data,
            &self.bias,
            &self.w_out.data,
            &self.b_out,
        ]
    }

    fn add_assign(&mut self, o: &BaseParams) {
        self.emb.add_assign(&o.emb);
        self.w_x.add_assign(&o.w_x);
        self.w_c.add_assign(&o.w_c);
        self.w_out.add_assign(&o.w_out);
        for (a, b) in self.bias.iter_mut().zip(&o.bias) {
            *a += b;
        }
        for (a, b) in self.b_out.iter_mut().zip(&o.b_out) {
            *a += b;
        }
    }

    /// Hash of the exact parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        stable_hash(&bytes)
    }
}

/// Linear map from the hidden state to a scalar return estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ValueHead {
    pub fn zeros(dim: usize) -> Self {
        ValueHead {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn predict(&self, hidden: &[f64]) -> f64 {
        self.w.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub dim: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 32,
            rank: 4,
            lora_alpha: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub base: BaseParams,
    pub adapter: Adapter,
    pub value_head: ValueHead,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

/// Which parameters a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Base,
    Adapter,
}

#[derive(Debug, Clone)]
pub enum Grad {
    Base(BaseParams),
    Adapter(Adapter),
}

/// Log-likelihood of the masked labels of one sequence, the gradient of
/// `-weight * loglik` and the hidden state at the last non-padding position.
#[derive(Debug, Clone)]
pub struct SeqPass {
    pub loglik: f64,
    pub masked: usize,
    pub grad: Option<Grad>,
    pub value_hidden: Vec<f64>,
}

struct Position {
    x: Vec<f64>,
    c: Vec<f64>,
    ax: Vec<f64>,
    ac: Vec<f64>,
    h: Vec<f64>,
    ah: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl TinyLm {
    /// Randomly initialized base and a no-op adapter (`B = 0`).
    pub fn new(vocab: Vocab, config: LmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = vocab.len();
        let d = config.dim;
        let base = BaseParams {
            emb: Mat::random(v, d, 0.5, &mut rng),
            w_x: Mat::random(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
            w_c: Mat::random(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
            bias: vec![0.0; d],
            w_out: Mat::random(v, d, 1.0 / (d as f64).sqrt(), &mut rng),
            b_out: vec![0.0; v],
        };
        let r = config.rank;
        let adapter = Adapter {
            rank: r,
            scale: config.lora_alpha / r as f64,
            x: Lora::new(d, d, r, &mut rng),
            c: Lora::new(d, d, r, &mut rng),
            out: Lora::new(v, d, r, &mut rng),
        };
        TinyLm {
            config,
            vocab,
            base,
            adapter,
            value_head: ValueHead::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn parameter_count(&self) -> usize {
        self.base.tensors().iter().map(|t| t.len()).sum::<usize>()
            + self.adapter.tensors().iter().map(|t| t.len()).sum::<usize>()
            + self.value_head.w.len()
            + 1
    }

    fn role_token(role: ChatRole) -> u32 {
        match role {
            ChatRole::System => SYSTEM,
            ChatRole::User => USER,
            ChatRole::Assistant => ASSISTANT,
        }
    }

    fn encode_prefix(&self, context: &[Message]) -> Vec<u32> {
        let mut toks = vec![BOS];
        for m in context {
            toks.push(Self::role_token(m.role));
            toks.extend(self.vocab.encode_text(&m.content));
            toks.push(EOS);
        }
        toks
    }

    /// Context messages, then `<assistant> target <eos>`. The mask covers
    /// the target tokens and the closing `<eos>`.
    pub fn encode_example(&self, context: &[Message], target: &str) -> Encoded {
        let mut tokens = self.encode_prefix(context);
        tokens.push(ASSISTANT);
        let start = tokens.len();
        tokens.extend(self.vocab.encode_text(target));
        tokens.push(EOS);
        let n = tokens.len();
        let mut labels = tokens[1..].to_vec();
        labels.push(PAD);
        let mask = (0..n).map(|l| l + 1 >= start && l + 1 < n).collect();
        Encoded {
            tokens,
            labels,
            mask,
        }
    }

    /// `<bos> text <eos>` with every next-token position in the loss.
    pub fn encode_plain(&self, text: &str) -> Encoded {
        let mut tokens = vec![BOS];
        tokens.extend(self.vocab.encode_text(text));
        tokens.push(EOS);
        let mut labels = tokens[1..].to_vec();
        labels.push(PAD);
        let n = tokens.len();
        let mask = (0..n).map(|l| l + 1 < n).collect();
        Encoded {
            tokens,
            labels,
            mask,
        }
    }

    fn running_means(&self, tokens: &[u32], upto: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut out = Vec::with_capacity(upto + 1);
        for (l, &t) in tokens.iter().take(upto + 1).enumerate() {
            for (s, e) in sum.iter_mut().zip(self.base.emb.row(t as usize)) {
                *s += e;
            }
            out.push(sum.iter().map(|s| s / (l + 1) as f64).collect());
        }
        out
    }

    fn position(&self, token: u32, c: &[f64]) -> Position {
        let d = self.dim();
        let a = &self.adapter;
        let s = a.scale;
        let x = self.base.emb.row(token as usize).to_vec();
        let mut ax = vec![0.0; a.rank];
        a.x.a.mul_add(&x, 1.0, &mut ax);
        let mut ac = vec![0.0; a.rank];
        a.c.a.mul_add(c, 1.0, &mut ac);
        let mut pre = self.base.bias.clone();
        self.base.w_x.mul_add(&x, 1.0, &mut pre);
        self.base.w_c.mul_add(c, 1.0, &mut pre);
        a.x.b.mul_add(&ax, s, &mut pre);
        a.c.b.mul_add(&ac, s, &mut pre);
        let h: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
        let mut ah = vec![0.0; a.rank];
        a.out.a.mul_add(&h, 1.0, &mut ah);
        debug_assert_eq!(h.len(), d);
        Position {
            x,
            c: c.to_vec(),
            ax,
            ac,
            h,
            ah,
        }
    }

    fn logits(&self, p: &Position) -> Vec<f64> {
        let mut logits = self.base.b_out.clone();
        self.base.w_out.mul_add(&p.h, 1.0, &mut logits);
        self.adapter
            .out
            .b
            .mul_add(&p.ah, self.adapter.scale, &mut logits);
        logits
    }

    /// Forward pass over one (possibly padded) sequence; with `target` set,
    /// also the gradient of `-weight * loglik`.
    pub fn sequence_pass(&self, seq: &Encoded, weight: f64, target: Option<GradTarget>) -> SeqPass {
        let last = seq.last_non_padding();
        let means = self.running_means(&seq.tokens, last);
        let mut grad = target.map(|t| match t {
            GradTarget::Base => Grad::Base(self.base.zeros_like()),
            GradTarget::Adapter => Grad::Adapter(self.adapter.zeros_like()),
        });
        let d = self.dim();
        // d loss / d c_l, for the base embedding gradient.
        let mut dc_all = vec![vec![0.0; d]; if matches!(target, Some(GradTarget::Base)) { last + 1 } else { 0 }];
        let mut loglik = 0.0;
        let mut masked = 0;
        for l in 0..=last {
            if !seq.mask[l] {
                continue;
            }
            masked += 1;
            let p = self.position(seq.tokens[l], &means[l]);
            let logp = log_softmax(&self.logits(&p));
            let label = seq.labels[l] as usize;
            loglik += logp[label];
            let Some(g) = grad.as_mut() else { continue };
            let mut dlogits: Vec<f64> = logp.iter().map(|lp| weight * lp.exp()).collect();
            dlogits[label] -= weight;
            match g {
                Grad::Adapter(ga) => self.adapter_backward(&p, &dlogits, ga),
                Grad::Base(gb) => {
                    let dc = self.base_backward(&p, seq.tokens[l], &dlogits, gb);
                    dc_all[l] = dc;
                }
            }
        }
        if let Some(Grad::Base(gb)) = grad.as_mut() {
            // c_l = mean(e_0..e_l): token m receives sum_{l >= m} dc_l / (l + 1).
            let mut suffix = vec![0.0; d];
            for l in (0..=last).rev() {
                for (s, g) in suffix.iter_mut().zip(&dc_all[l]) {
                    *s += g / (l + 1) as f64;
                }
                let t = seq.tokens[l] as usize;
                for (e, s) in gb.emb.data[t * d..(t + 1) * d].iter_mut().zip(&suffix) {
                    *e += s;
                }
            }
        }
        let value_hidden = self.position(seq.tokens[last], &means[last]).h;
        SeqPass {
            loglik,
            masked,
            grad,
            value_hidden,
        }
    }

    fn adapter_backward(&self, p: &Position, dlogits: &[f64], g: &mut Adapter) {
        let a = &self.adapter;
        let s = a.scale;
        g.out.b.add_outer(dlogits, &p.ah, s);
        let mut dah = vec![0.0; a.rank];
        a.out.b.mul_t_add(dlogits, s, &mut dah);
        g.out.a.add_outer(&dah, &p.h, 1.0);
        let mut dh = vec![0.0; self.dim()];
        self.base.w_out.mul_t_add(dlogits, 1.0, &mut dh);
        a.out.a.mul_t_add(&dah, 1.0, &mut dh);
        let dpre: Vec<f64> = dh.iter().zip(&p.h).map(|(g, h)| g * (1.0 - h * h)).collect();
        g.x.b.add_outer(&dpre, &p.ax, s);
        let mut dax = vec![0.0; a.rank];
        a.x.b.mul_t_add(&dpre, s, &mut dax);
        g.x.a.add_outer(&dax, &p.x, 1.0);
        g.c.b.add_outer(&dpre, &p.ac, s);
        let mut dac = vec![0.0; a.rank];
        a.c.b.mul_t_add(&dpre, s, &mut dac);
        g.c.a.add_outer(&dac, &p.c, 1.0);
    }

    /// Base-parameter backward at one position (adapter treated as fixed).
    /// Returns the gradient with respect to the running mean `c_l`.
    fn base_backward(&self, p: &Position, token: u32, dlogits: &[f64], g: &mut BaseParams) -> Vec<f64> {
        let d = self.dim();
        let a = &self.adapter;
        g.w_out.add_outer(dlogits, &p.h, 1.0);
        for (b, dl) in g.b_out.iter_mut().zip(dlogits) {
            *b += dl;
        }
        let mut dh = vec![0.0; d];
        self.base.w_out.mul_t_add(dlogits, 1.0, &mut dh);
        let mut dah = vec![0.0; a.rank];
        a.out.b.mul_t_add(dlogits, a.scale, &mut dah);
        a.out.a.mul_t_add(&dah, 1.0, &mut dh);
        let dpre: Vec<f64> = dh.iter().zip(&p.h).map(|(g, h)| g * (1.0 - h * h)).collect();
        g.w_x.add_outer(&dpre, &p.x, 1.0);
        g.w_c.add_outer(&dpre, &p.c, 1.0);
        for (b, dp) in g.bias.iter_mut().zip(&dpre) {
            *b += dp;
        }
        let mut dx = vec![0.0; d];
        self.base.w_x.mul_t_add(&dpre, 1.0, &mut dx);
        let mut dax = vec![0.0; a.rank];
        a.x.b.mul_t_add(&dpre, a.scale, &mut dax);
        a.x.a.mul_t_add(&dax, 1.0, &mut dx);
        let t = token as usize;
        for (e, v) in g.emb.data[t * d..(t + 1) * d].iter_mut().zip(&dx) {
            *e += v;
        }
        let mut dc = vec![0.0; d];
        self.base.w_c.mul_t_add(&dpre, 1.0, &mut dc);
        let mut dac = vec![0.0; a.rank];
        a.c.b.mul_t_add(&dpre, a.scale, &mut dac);
        a.c.a.mul_t_add(&dac, 1.0, &mut dc);
        dc
    }

    /// Trains the base parameters on plain text (every position in the
    /// loss) with Adam. Returns the mean per-token loss of each epoch.
    pub fn pretrain_base(
        &mut self,
        texts: &[String],
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        exec: Exec,
    ) -> Vec<f64> {
        let seqs: Vec<Encoded> = texts.iter().map(|t| self.encode_plain(t)).collect();
        let mut adam = Adam::new(learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut history = Vec::new();
        for _ in 0..epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in order.chunks(batch_size.max(1)) {
                let n_tok: usize = chunk.iter().map(|&i| seqs[i].masked_count()).sum();
                let w = 1.0 / n_tok.max(1) as f64;
                let passes = exec.map(chunk, |&i| self.sequence_pass(&seqs[i], w, Some(GradTarget::Base)));
                let mut g = self.base.zeros_like();
                for p in &passes {
                    total -= p.loglik;
                    count += p.masked;
                    if let Some(Grad::Base(gb)) = &p.grad {
                        g.add_assign(gb);
                    }
                }
                adam.step(&mut self.base.tensors_mut(), &g.tensors());
            }
            history.push(total / count.max(1) as f64);
        }
        history
    }

    /// Hidden state at the last position of an encoded sequence.
    pub fn hidden_at_end(&self, seq: &Encoded) -> Vec<f64> {
        let last = seq.last_non_padding();
        let means = self.running_means(&seq.tokens, last);
        self.position(seq.tokens[last], &means[last]).h
    }
}

impl LmScorer for TinyLm {
    fn id(&self) -> String {
        format!(
            "tiny-lm(d={},r={},v={},seed={})",
            self.config.dim,
            self.config.rank,
            self.vocab.len(),
            self.config.seed
        )
    }

    fn score_target(&self, context: &[Message], target: &str) -> Result<Vec<f64>> {
        let seq = self.encode_example(context, target);
        let last = seq.last_non_padding();
        let means = self.running_means(&seq.tokens, last);
        // The final masked position predicts <eos>; perplexity counts only
        // the target's own tokens.
        let positions: Vec<usize> = (0..=last).filter(|&l| seq.mask[l]).collect();
        let positions = &positions[..positions.len().saturating_sub(1)];
        Ok(positions
            .iter()
            .map(|&l| {
                let p = self.position(seq.tokens[l], &means[l]);
                log_softmax(&self.logits(&p))[seq.labels[l] as usize]
            })
            .collect())
    }

    fn generate(&self, context: &[Message], params: &DecodingParams) -> Result<String> {
        let mut tokens = self.encode_prefix(context);
        tokens.push(ASSISTANT);
        let d = self.dim();
        let mut sum = vec![0.0; d];
        for &t in &tokens {
            for (s, e) in sum.iter_mut().zip(self.base.emb.row(t as usize)) {
                *s += e;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut out = Vec::new();
        for _ in 0..params.max_new_tokens {
            let n = tokens.len() as f64;
            let c: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let p = self.position(*tokens.last().expect("nonempty"), &c);
            let mut logp = log_softmax(&self.logits(&p));
            for special in [PAD, UNK, BOS, SYSTEM, USER, ASSISTANT] {
                logp[special as usize] = f64::NEG_INFINITY;
            }
            let next = if params.temperature <= 0.0 {
                logp.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i as u32)
                    .expect("nonempty vocab")
            } else {
                let weights: Vec<f64> = logp.iter().map(|l| (l / params.temperature).exp()).collect();
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::Provider(format!("sampling: {e}")))?;
                dist.sample(&mut rng) as u32
            };
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
            for (s, e) in sum.iter_mut().zip(self.base.emb.row(next as usize)) {
                *s += e;
            }
        }
        Ok(self.vocab.decode(&out))
    }

    fn hidden_state(&self, messages: &[Message]) -> Result<Vec<f64>> {
        let mut tokens = self.encode_prefix(messages);
        if tokens.is_empty() {
            tokens.push(BOS);
        }
        let n = tokens.len();
        Ok(self.hidden_at_end(&Encoded {
            tokens,
            labels: vec![PAD; n],
            mask: vec![false; n],
        }))
    }
}

/// Adam over a list of flat tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (pi, gi)) in p.iter_mut().zip(g.iter()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TinyLm {
        let vocab = Vocab::build(["where did you grow up ?", "on a farm near the river ."]);
        let mut lm = TinyLm::new(
            vocab,
            LmConfig {
                dim: 6,
                rank: 2,
                lora_alpha: 2.0,
                seed: 3,
            },
        );
        // Nonzero B so every adapter path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        lm.adapter.x.b = Mat::random(6, 2, 0.3, &mut rng);
        lm.adapter.c.b = Mat::random(6, 2, 0.3, &mut rng);
        lm.adapter.out.b = Mat::random(lm.vocab.len(), 2, 0.3, &mut rng);
        lm
    }

    fn ctx() -> Vec<Message> {
        vec![
            Message::new(ChatRole::System, "act as an agent"),
            Message::new(ChatRole::User, "on a farm near the river ."),
        ]
    }

    #[test]
    fn mask_covers_target_and_eos_only() {
        let lm = tiny();
        let e = lm.encode_example(&ctx(), "where did you grow up ?");
        assert_eq!(e.masked_count(), 6 + 1);
        assert_eq!(e.labels[e.len() - 2], EOS);
        assert_eq!(e.last_non_padding(), e.len() - 1);
        let mut p = e.clone();
        p.pad_to(e.len() + 4);
        assert_eq!(p.last_non_padding(), e.len() - 1);
    }

    fn check_fd(lm: &TinyLm, target: GradTarget) {
        let seq = lm.encode_example(&ctx(), "where did you grow up ?");
        let pass = lm.sequence_pass(&seq, 0.7, Some(target));
        let loss = |m: &TinyLm| -0.7 * m.sequence_pass(&seq, 0.7, None).loglik;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..6 {
            for i in (0..20).map(|i| i * 7) {
                let mut plus = lm.clone();
                let mut minus = lm.clone();
                let analytic = match (&pass.grad, target) {
                    (Some(Grad::Adapter(g)), GradTarget::Adapter) => {
                        if i >= g.tensors()[k].len() {
                            continue;
                        }
                        plus.adapter.tensors_mut()[k][i] += eps;
                        minus.adapter.tensors_mut()[k][i] -= eps;
                        g.tensors()[k][i]
                    }
                    (Some(Grad::Base(g)), GradTarget::Base) => {
                        if i >= g.tensors()[k].len() {
                            continue;
                        }
                        plus.base.tensors_mut()[k][i] += eps;
                        minus.base.tensors_mut()[k][i] -= eps;
                        g.tensors()[k][i]
                    }
                    _ => unreachable!(),
                };
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        check_fd(&tiny(), GradTarget::Adapter);
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        check_fd(&tiny(), GradTarget::Base);
    }

    #[test]
    fn zero_adapter_is_identity() {
        let lm = TinyLm::new(Vocab::build(["a b c"]), LmConfig::default());
        let mut no_adapter = lm.clone();
        for t in no_adapter.adapter.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let a = lm.score_target(&ctx(), "a b").unwrap();
        let b = no_adapter.score_target(&ctx(), "a b").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scoring_and_generation() {
        let lm = tiny();
        let lp = lm.score_target(&ctx(), "where did you").unwrap();
        assert_eq!(lp.len(), 3);
        assert!(lp.iter().all(|x| *x <= 0.0));
        let p = DecodingParams {
            max_new_tokens: 5,
            ..Default::default()
        };
        let g1 = lm.generate(&ctx(), &p).unwrap();
        assert_eq!(g1, lm.generate(&ctx(), &p).unwrap());
        assert!(ReferenceTokenizer.count(&g1) <= 5);
        let sampled = DecodingParams {
            temperature: 1.0,
            seed: 4,
            ..p
        };
        assert_eq!(lm.generate(&ctx(), &sampled).unwrap(), lm.generate(&ctx(), &sampled).unwrap());
        assert_eq!(lm.hidden_state(&ctx()).unwrap().len(), 6);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let texts: Vec<String> = (0..20)
            .map(|i| format!("we lived on a farm near the river for {} years .", i % 3))
            .collect();
        let mut lm = TinyLm::new(Vocab::build(texts.iter().map(String::as_str)), LmConfig::default());
        let h = lm.pretrain_base(&texts, 5, 4, 0.02, Exec::Sequential);
        assert!(h.last().unwrap() < &h[0], "{h:?}");
    }
}
