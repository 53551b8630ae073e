//! A small pre-LayerNorm decoder-only transformer with hookable projections.

pub(crate) mod checkpoint;
mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Rng};
use crate::synthbench::Example;
use crate::{Graph, Matrix, Real};

pub use tokenizer::{
    char_to_id, detokenize, encode_pair, encode_prompt, id_to_char, tokenize, TokenSeq, ALPHABET, BOS, EOS, N_SPECIAL,
    PAD, SEP,
};

const LN_EPS: Real = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 64,
            max_seq: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers > u16::MAX as usize {
            return Err(Error::Config("too many layers".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count implied by the layer shapes.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + 2 * d
    }

    /// `(d_in, d_out)` of a projection site.
    pub fn site_shape(&self, _site: Site) -> (usize, usize) {
        (self.d_model, self.d_model)
    }
}

/// Attention projection inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "q_proj")]
    Query,
    #[serde(rename = "k_proj")]
    Key,
    #[serde(rename = "v_proj")]
    Value,
    #[serde(rename = "o_proj")]
    Output,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::Query, Site::Key, Site::Value, Site::Output];
    /// Sites that receive adapters.
    pub const ADAPTED: [Site; 2] = [Site::Query, Site::Value];

    pub fn name(self) -> &'static str {
        match self {
            Site::Query => "q_proj",
            Site::Key => "k_proj",
            Site::Value => "v_proj",
            Site::Output => "o_proj",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Site> {
        Site::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Graph nodes of one low-rank update `scale · B · (C · A)` at a site.
#[derive(Debug, Clone, Copy)]
pub struct SiteUpdate {
    pub a: NodeId,
    pub b: NodeId,
    pub c: Option<NodeId>,
    pub scale: Real,
    pub dropout: Real,
}

/// Low-rank updates keyed by `(layer, site)`, already placed in a graph.
pub type Attachments = BTreeMap<(usize, Site), SiteUpdate>;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub(crate) ln1_gain: Matrix,
    pub(crate) ln1_bias: Matrix,
    pub(crate) proj: [Matrix; 4],
    pub(crate) ln2_gain: Matrix,
    pub(crate) ln2_bias: Matrix,
    pub(crate) up: Matrix,
    pub(crate) up_bias: Matrix,
    pub(crate) down: Matrix,
    pub(crate) down_bias: Matrix,
}

/// Frozen base model. Weights are `d_out × d_in` and applied as `x · Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub(crate) tok_emb: Matrix,
    pub(crate) layers: Vec<Layer>,
    pub(crate) lnf_gain: Matrix,
    pub(crate) lnf_bias: Matrix,
    pub(crate) head: Matrix,
    positions: Matrix,
}

fn sinusoidal(max_seq: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_seq, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Backbone {
    pub fn build(cfg: BackboneConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let resid_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
        let mut r = rng.split("backbone/embed");
        // Unit-variance token embeddings keep token identity on the same
        // scale as the positional code.
        let tok_emb = Matrix::randn(cfg.vocab_size, d, 1.0, &mut r);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut r = rng.split_indexed("backbone/layer", l as u64);
                let mut w = |std: f64, rows: usize, cols: usize| Matrix::randn(rows, cols, std, &mut r);
                let wq = w(INIT_STD, d, d);
                let wk = w(INIT_STD, d, d);
                let wv = w(INIT_STD, d, d);
                // o_proj and the head use unit-gain scaling so q/v updates
                // reach the logits without heavy attenuation.
                let wo = w(1.0 / (d as f64).sqrt(), d, d);
                let up = w(INIT_STD, cfg.d_ff, d);
                let down = w(resid_std, d, cfg.d_ff);
                Layer {
                    ln1_gain: Matrix::filled(1, d, 1.0),
                    ln1_bias: Matrix::zeros(1, d),
                    proj: [wq, wk, wv, wo],
                    ln2_gain: Matrix::filled(1, d, 1.0),
                    ln2_bias: Matrix::zeros(1, d),
                    up,
                    up_bias: Matrix::zeros(1, cfg.d_ff),
                    down,
                    down_bias: Matrix::zeros(1, d),
                }
            })
            .collect();
        let mut r = rng.split("backbone/head");
        let head = Matrix::randn(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut r);
        Ok(Self {
            cfg,
            tok_emb,
            layers,
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
            head,
            positions: sinusoidal(cfg.max_seq, d),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Effective (base) weight of a projection site.
    pub fn projection(&self, layer: usize, site: Site) -> &Matrix {
        &self.layers[layer].proj[site as usize]
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn named_weights(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("l{l}.ln1.gain"), &layer.ln1_gain));
            out.push((format!("l{l}.ln1.bias"), &layer.ln1_bias));
            for site in Site::ALL {
                out.push((format!("l{l}.{site}"), &layer.proj[site as usize]));
            }
            out.push((format!("l{l}.ln2.gain"), &layer.ln2_gain));
            out.push((format!("l{l}.ln2.bias"), &layer.ln2_bias));
            out.push((format!("l{l}.ffn.up"), &layer.up));
            out.push((format!("l{l}.ffn.up_bias"), &layer.up_bias));
            out.push((format!("l{l}.ffn.down"), &layer.down));
            out.push((format!("l{l}.ffn.down_bias"), &layer.down_bias));
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub(crate) fn named_weights_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            for p in layer.proj.iter_mut() {
                out.push(p);
            }
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.up);
            out.push(&mut layer.up_bias);
            out.push(&mut layer.down);
            out.push(&mut layer.down_bias);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_weights().iter().map(|(_, m)| m.len()).sum()
    }

    /// Bitwise equality of every weight.
    pub fn bits_eq(&self, other: &Backbone) -> bool {
        self.cfg == other.cfg
            && self
                .named_weights()
                .iter()
                .zip(other.named_weights())
                .all(|((_, a), (_, b))| a.bits_eq(b))
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn project<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: NodeId,
        layer: usize,
        site: Site,
        att: &Attachments,
        dropout_rng: &mut Option<&mut Rng>,
    ) -> Result<NodeId> {
        let w = g.constant_ref(&self.layers[layer].proj[site as usize]);
        let base = g.matmul_nt(x, w)?;
        let Some(up) = att.get(&(layer, site)) else {
            return Ok(base);
        };
        let a_eff = match up.c {
            Some(c) => g.matmul(c, up.a)?,
            None => up.a,
        };
        let input = match dropout_rng.as_deref_mut() {
            Some(rng) if up.dropout > 0.0 => {
                let (rows, cols) = g.value(x).shape();
                let keep = 1.0 / (1.0 - up.dropout);
                let mask = Matrix::from_fn(rows, cols, |_, _| if rng.bernoulli(up.dropout) { 0.0 } else { keep });
                g.mask_mul(x, mask)?
            }
            _ => x,
        };
        let low = g.matmul_nt(input, a_eff)?;
        let mut delta = g.matmul_nt(low, up.b)?;
        if up.scale != 1.0 {
            delta = g.scale(delta, up.scale);
        }
        Ok(g.add(base, delta)?)
    }

    /// Builds the forward pass into `g` and returns the `T × vocab` logits
    /// node. Dropout on adapter inputs is applied only when `dropout_rng` is
    /// given.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        att: &Attachments,
        ids: &[usize],
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        self.check_tokens(ids)?;
        let n = ids.len();
        let cfg = &self.cfg;
        let dh = cfg.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as Real).sqrt();

        let emb = g.constant_ref(&self.tok_emb);
        let tok = g.gather_rows(emb, ids)?;
        let pos_rows: Vec<usize> = (0..n).collect();
        let pos_table = g.constant_ref(&self.positions);
        let pos = g.gather_rows(pos_table, &pos_rows)?;
        let mut x = g.add(tok, pos)?;

        for (l, layer) in self.layers.iter().enumerate() {
            let gain = g.constant_ref(&layer.ln1_gain);
            let bias = g.constant_ref(&layer.ln1_bias);
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let q = self.project(g, h, l, Site::Query, att, &mut dropout_rng)?;
            let k = self.project(g, h, l, Site::Key, att, &mut dropout_rng)?;
            let v = self.project(g, h, l, Site::Value, att, &mut dropout_rng)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qs = g.slice_cols(q, hd * dh, dh)?;
                let ks = g.slice_cols(k, hd * dh, dh)?;
                let vs = g.slice_cols(v, hd * dh, dh)?;
                let scores = g.matmul_nt(qs, ks)?;
                let scores = g.scale(scores, inv_sqrt_dh);
                let probs = g.causal_softmax(scores)?;
                heads.push(g.matmul(probs, vs)?);
            }
            let mixed = g.concat_cols(&heads)?;
            let attn = self.project(g, mixed, l, Site::Output, att, &mut dropout_rng)?;
            x = g.add(x, attn)?;

            let gain = g.constant_ref(&layer.ln2_gain);
            let bias = g.constant_ref(&layer.ln2_bias);
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let up = g.constant_ref(&layer.up);
            let up_bias = g.constant_ref(&layer.up_bias);
            let f = g.matmul_nt(h, up)?;
            let f = g.add_row(f, up_bias)?;
            let f = g.gelu(f);
            let down = g.constant_ref(&layer.down);
            let down_bias = g.constant_ref(&layer.down_bias);
            let f = g.matmul_nt(f, down)?;
            let f = g.add_row(f, down_bias)?;
            x = g.add(x, f)?;
        }
        let gain = g.constant_ref(&self.lnf_gain);
        let bias = g.constant_ref(&self.lnf_bias);
        let h = g.layer_norm(x, gain, bias, LN_EPS)?;
        let head = g.constant_ref(&self.head);
        Ok(g.matmul_nt(h, head)?)
    }

    /// Logits for every position (`len × vocab`), evaluation mode.
    pub fn forward(&self, adapters: Option<&AdapterSet>, seq: &TokenSeq) -> Result<Matrix> {
        self.forward_ids(adapters, &seq.ids)
    }

    pub fn forward_ids(&self, adapters: Option<&AdapterSet>, ids: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let att = match adapters {
            Some(set) => set.attach_frozen(&mut g, &self.cfg)?,
            None => Attachments::new(),
        };
        let logits = self.forward_graph(&mut g, &att, ids, None)?;
        let out = g.value(logits).clone();
        if !out.is_finite() {
            return Err(crate::numerics::NumericsError::NonFinite("logits".into()).into());
        }
        Ok(out)
    }

    /// Greedy decoding from `prompt`; stops after EOS, `max_new` tokens or
    /// at `max_seq`.
    pub fn generate(&self, adapters: Option<&AdapterSet>, prompt: &TokenSeq, max_new: usize) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        let mut seq = prompt.clone();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.max_seq {
                break;
            }
            let logits = self.forward_ids(adapters, &seq.ids)?;
            let next = logits.argmax_row(logits.rows() - 1);
            seq.ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }

    /// Sum of completion-token log-likelihoods of `seq`.
    pub fn completion_log_likelihood(&self, adapters: Option<&AdapterSet>, seq: &TokenSeq) -> Result<Real> {
        let logits = self.forward(adapters, seq)?;
        let targets = seq.completion_targets();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= token_nll(logits.row(i), t);
            }
        }
        Ok(total)
    }

    /// Token-mean completion loss over `examples`, evaluation mode.
    pub fn dataset_loss(&self, adapters: Option<&AdapterSet>, examples: &[Example]) -> Result<Real> {
        if examples.is_empty() {
            return Err(Error::Data("no examples to score".into()));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for ex in examples {
            let seq = encode_pair(&ex.input, &ex.output)?;
            let logits = self.forward(adapters, &seq)?;
            for (i, t) in seq.completion_targets().iter().enumerate() {
                if let Some(t) = *t {
                    total += token_nll(logits.row(i), t);
                    count += 1;
                }
            }
        }
        Ok(total / count as Real)
    }
}

fn token_nll(row: &[Real], target: usize) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
    lse - row[target]
}

/// Mean cross-entropy over the completion tokens of `seq`.
pub fn lm_loss(logits: &Matrix, seq: &TokenSeq) -> Result<Real> {
    if logits.rows() != seq.len() {
        return Err(Error::Data(format!(
            "logits have {} rows for a sequence of {}",
            logits.rows(),
            seq.len()
        )));
    }
    let targets = seq.completion_targets();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            total += token_nll(logits.row(i), t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("sequence has no completion tokens".into()));
    }
    Ok(total / count as Real)
}

/// Graph version: returns `(sum of completion CE, completion token count)`.
pub fn lm_loss_sum(g: &mut Graph<'_>, logits: NodeId, seq: &TokenSeq) -> Result<(NodeId, usize)> {
    let targets = seq.completion_targets();
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Data("sequence has no completion tokens".into()));
    }
    Ok((g.cross_entropy_sum(logits, &targets)?, count))
}
