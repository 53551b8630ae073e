//! Hypernetwork mapping a task description to per-layer LoRA factors.

mod pretrain;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::format::{Container, ContainerKind, Payload, Record};
use crate::adapters::{AdapterSet, LoraPair, Role, DEFAULT_RANK};
use crate::backbone::checkpoint::{config_from_record, config_record};
use crate::backbone::{char_to_id, BackboneConfig, Site, SiteUpdate};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{NodeId, Rng};
use crate::{Graph, Matrix, Real};

pub use pretrain::{pretrain_hypernet, reconstruction_fit, PretrainConfig, PretrainLog, PretrainMode, PretrainTask};

pub const D_TASK: usize = 128;
pub const HIDDEN: usize = 256;

const GLOBAL: u16 = u16::MAX;
const ROLE_SHAPE: u8 = 253;

/// Signed hashed bag of character 3-grams, L2-normalized. The text is padded
/// with one space on each side so word edges form their own grams.
pub fn embed_description(text: &str) -> Result<Vec<Real>> {
    embed_with_dim(text, D_TASK)
}

pub fn embed_with_dim(text: &str, dim: usize) -> Result<Vec<Real>> {
    for c in text.chars() {
        char_to_id(c)?;
    }
    let mut v = vec![0.0; dim];
    if text.trim().is_empty() {
        return Ok(v);
    }
    let padded: Vec<char> = format!(" {text} ").chars().collect();
    for w in padded.windows(3) {
        let gram: String = w.iter().collect();
        let digest = Sha256::digest(gram.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % dim as u64;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub backbone: BackboneConfig,
    pub rank: usize,
    pub d_task: usize,
    pub hidden: usize,
}

impl HypernetConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            rank: DEFAULT_RANK,
            d_task: D_TASK,
            hidden: HIDDEN,
        }
    }

    fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (d_in, d_out) = self.backbone.site_shape(Site::Query);
        if Site::ADAPTED
            .iter()
            .any(|&s| self.backbone.site_shape(s) != (d_in, d_out))
        {
            return Err(Error::Config("adapted sites must share one shape".into()));
        }
        if self.rank == 0 || self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!("rank {} out of range", self.rank)));
        }
        if self.d_task == 0 || self.hidden == 0 {
            return Err(Error::Config("hypernet widths must be positive".into()));
        }
        Ok(())
    }

    fn a_len(&self) -> usize {
        self.rank * self.backbone.site_shape(Site::Query).0
    }

    fn b_len(&self) -> usize {
        self.rank * self.backbone.site_shape(Site::Query).1
    }

    /// Parameter names and shapes in storage order.
    fn layout(&self) -> Vec<(&'static str, (usize, usize))> {
        let h = self.hidden;
        vec![
            ("desc_proj", (self.d_task, h)),
            ("desc_bias", (1, h)),
            ("layer_emb", (self.backbone.n_layers, h)),
            ("site_emb", (Site::ADAPTED.len(), h)),
            ("role_emb", (2, h)),
            ("trunk1", (h, h)),
            ("trunk1_bias", (1, h)),
            ("trunk2", (h, h)),
            ("trunk2_bias", (1, h)),
            ("head_a", (h, self.a_len())),
            ("head_a_bias", (1, self.a_len())),
            ("head_b", (h, self.b_len())),
            ("head_b_bias", (1, self.b_len())),
        ]
    }
}

const P_DESC: usize = 0;
const P_DESC_BIAS: usize = 1;
const P_LAYER: usize = 2;
const P_SITE: usize = 3;
const P_ROLE: usize = 4;
const P_T1: usize = 5;
const P_T1_BIAS: usize = 6;
const P_T2: usize = 7;
const P_T2_BIAS: usize = 8;
const P_HEAD_A: usize = 9;
const P_HEAD_A_BIAS: usize = 10;
const P_HEAD_B: usize = 11;
const P_HEAD_B_BIAS: usize = 12;

/// Description projection, conditioning embeddings for (layer, site, role),
/// a two-layer tanh trunk and one linear head per factor role.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypernet {
    cfg: HypernetConfig,
    seed: u64,
    params: Vec<Matrix>,
}

/// Factor nodes produced inside a graph, keyed by adapter position.
pub(crate) type FactorNodes = BTreeMap<(usize, Site), (NodeId, NodeId)>;

impl Hypernet {
    /// Fresh network. The B head is all zero so every generated update is
    /// zero; the A head has zero weights and a random bias so B receives
    /// gradient from the first step.
    pub fn new(cfg: HypernetConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden as f64;
        let mut params = Vec::new();
        for (i, (name, (r, c))) in cfg.layout().into_iter().enumerate() {
            let mut sub = rng.split(&format!("hypernet/{name}"));
            let m = match i {
                P_DESC => Matrix::randn(r, c, 1.0, &mut sub),
                P_LAYER | P_SITE | P_ROLE => Matrix::randn(r, c, 0.5, &mut sub),
                P_T1 | P_T2 => Matrix::randn(r, c, 1.0 / h.sqrt(), &mut sub),
                P_HEAD_A_BIAS => Matrix::randn(r, c, 1.0 / (cfg.rank as f64).sqrt(), &mut sub),
                _ => Matrix::zeros(r, c),
            };
            params.push(m);
        }
        Ok(Self {
            cfg,
            seed: rng.seed(),
            params,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Matrix)> {
        self.cfg
            .layout()
            .into_iter()
            .zip(&self.params)
            .map(|((n, _), m)| (n, m))
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn bits_eq(&self, other: &Hypernet) -> bool {
        self.cfg == other.cfg
            && self.seed == other.seed
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bits_eq(b))
    }

    fn adapter_keys(&self) -> Vec<(usize, Site)> {
        (0..self.cfg.backbone.n_layers)
            .flat_map(|l| Site::ADAPTED.map(|s| (l, s)))
            .collect()
    }

    /// Builds the generator in `g`. With `train`, parameters are leaves
    /// whose ids are returned in storage order.
    pub(crate) fn build_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        embedding: &[Real],
        train: bool,
    ) -> Result<(FactorNodes, Vec<NodeId>)> {
        if embedding.len() != self.cfg.d_task {
            return Err(Error::Config(format!(
                "embedding has {} entries, hypernet expects {}",
                embedding.len(),
                self.cfg.d_task
            )));
        }
        let p: Vec<NodeId> = self
            .params
            .iter()
            .map(|m| if train { g.param_ref(m) } else { g.constant_ref(m) })
            .collect();
        let keys = self.adapter_keys();
        let n = keys.len();
        // rows 0..n generate A, rows n..2n generate B
        let mut layer_idx = Vec::with_capacity(2 * n);
        let mut site_idx = Vec::with_capacity(2 * n);
        let mut role_idx = Vec::with_capacity(2 * n);
        for role in [0usize, 1] {
            for &(l, s) in &keys {
                layer_idx.push(l);
                site_idx.push(Site::ADAPTED.iter().position(|&x| x == s).expect("adapted"));
                role_idx.push(role);
            }
        }
        let e = g.constant(Matrix::from_raw(1, embedding.len(), embedding.to_vec())?);
        let h0 = g.matmul(e, p[P_DESC])?;
        let h0 = g.add(h0, p[P_DESC_BIAS])?;
        let le = g.gather_rows(p[P_LAYER], &layer_idx)?;
        let se = g.gather_rows(p[P_SITE], &site_idx)?;
        let re = g.gather_rows(p[P_ROLE], &role_idx)?;
        let x = g.add(le, se)?;
        let x = g.add(x, re)?;
        let x = g.add_row(x, h0)?;
        let x = g.tanh(x);
        let x = g.matmul(x, p[P_T1])?;
        let x = g.add_row(x, p[P_T1_BIAS])?;
        let x = g.tanh(x);
        let x = g.matmul(x, p[P_T2])?;
        let x = g.add_row(x, p[P_T2_BIAS])?;
        let x = g.tanh(x);
        let a_rows = g.gather_rows(x, &(0..n).collect::<Vec<_>>())?;
        let b_rows = g.gather_rows(x, &(n..2 * n).collect::<Vec<_>>())?;
        let a_out = g.matmul(a_rows, p[P_HEAD_A])?;
        let a_out = g.add_row(a_out, p[P_HEAD_A_BIAS])?;
        let b_out = g.matmul(b_rows, p[P_HEAD_B])?;
        let b_out = g.add_row(b_out, p[P_HEAD_B_BIAS])?;
        let r = self.cfg.rank;
        let mut out = FactorNodes::new();
        for (k, &(l, s)) in keys.iter().enumerate() {
            let (d_in, d_out) = self.cfg.backbone.site_shape(s);
            let a = g.gather_rows(a_out, &[k])?;
            let a = g.reshape(a, r, d_in)?;
            let b = g.gather_rows(b_out, &[k])?;
            let b = g.reshape(b, d_out, r)?;
            out.insert((l, s), (a, b));
        }
        Ok((out, if train { p } else { Vec::new() }))
    }

    /// Anchor adapters for a description; pure in `(self, description)`.
    pub fn generate_anchor(&self, description: &str, cfg: &BackboneConfig) -> Result<AdapterSet> {
        if *cfg != self.cfg.backbone {
            return Err(Error::Config(
                "backbone config differs from the one the hypernet was built for".into(),
            ));
        }
        if description.trim().is_empty() {
            return Err(Error::Config("task description is empty".into()));
        }
        let emb = embed_with_dim(description, self.cfg.d_task)?;
        let mut g = Graph::new();
        let (nodes, _) = self.build_graph(&mut g, &emb, false)?;
        let mut pairs = BTreeMap::new();
        for (key, (a, b)) in nodes {
            let pair = LoraPair::new(g.value(a).clone(), g.value(b).clone())?;
            pairs.insert(key, pair);
        }
        Ok(AdapterSet::anchor(pairs))
    }

    pub fn to_container(&self) -> Container {
        let shape = Matrix::from_raw(
            1,
            4,
            vec![
                self.cfg.rank as f64,
                self.cfg.d_task as f64,
                self.cfg.hidden as f64,
                // seeds are recorded bit-exact through the f64 payload
                f64::from_bits(self.seed),
            ],
        )
        .expect("1x4");
        let mut records = vec![
            config_record(&self.cfg.backbone),
            Record::matrix(GLOBAL, 0, ROLE_SHAPE, shape),
        ];
        for (i, m) in self.params.iter().enumerate() {
            records.push(Record::matrix(i as u16, 0, Role::A.code(), m.clone()));
        }
        Container {
            kind: ContainerKind::Hypernet,
            variant: 0,
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, FormatError> {
        if c.records.len() < 2 {
            return Err(FormatError::Shape("hypernet file lacks its header records".into()));
        }
        let backbone = config_from_record(&c.records[0])?;
        let bad = |what: &str| FormatError::Shape(format!("hypernet {what}"));
        let shape = match (&c.records[1].payload, c.records[1].layer, c.records[1].role) {
            (Payload::Matrix(m), GLOBAL, ROLE_SHAPE) if m.shape() == (1, 4) => m.data().to_vec(),
            _ => return Err(bad("shape record")),
        };
        let as_count = |x: f64| {
            if x >= 1.0 && x.fract() == 0.0 && x < 1e7 {
                Ok(x as usize)
            } else {
                Err(bad("shape record"))
            }
        };
        let cfg = HypernetConfig {
            backbone,
            rank: as_count(shape[0])?,
            d_task: as_count(shape[1])?,
            hidden: as_count(shape[2])?,
        };
        cfg.validate().map_err(|e| FormatError::Shape(e.to_string()))?;
        let layout = cfg.layout();
        let body = &c.records[2..];
        if body.len() != layout.len() {
            return Err(bad("parameter count"));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (i, (r, (name, dims))) in body.iter().zip(layout).enumerate() {
            match &r.payload {
                Payload::Matrix(m) if r.layer as usize == i && m.shape() == dims => params.push(m.clone()),
                _ => return Err(FormatError::Shape(format!("hypernet parameter {name}"))),
            }
        }
        Ok(Self {
            cfg,
            seed: shape[3].to_bits(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, ContainerKind::Hypernet)?;
        Ok(Self::from_container(&c)?)
    }
}

/// Adds generated factor nodes to an attachment map without a bridge.
pub(crate) fn attach_generated(nodes: &FactorNodes, scale: Real) -> crate::backbone::Attachments {
    nodes
        .iter()
        .map(|(&k, &(a, b))| {
            (
                k,
                SiteUpdate {
                    a,
                    b,
                    c: None,
                    scale,
                    dropout: 0.0,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests;
