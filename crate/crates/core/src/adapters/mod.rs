//! Low-rank adapters, bridged adapters, variant masks and their file format.

pub mod format;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Attachments, BackboneConfig, Site, SiteUpdate};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{NodeId, Optimizer, ParamSlot, Rng};
use crate::{Graph, Matrix, Real};

use format::{Container, ContainerKind, Payload, Record};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_DROPOUT: Real = 0.05;

/// Which factors a personalization run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FullLora,
    NoBridge,
    BridgeOnly,
    Ours,
    #[serde(rename = "oppu")]
    OppuFresh,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::FullLora, Variant::NoBridge, Variant::BridgeOnly, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullLora => "full-lora",
            Variant::NoBridge => "no-bridge",
            Variant::BridgeOnly => "bridge-only",
            Variant::Ours => "ours",
            Variant::OppuFresh => "oppu",
        }
    }

    pub fn mask(self) -> TrainMask {
        match self {
            Variant::FullLora | Variant::OppuFresh => TrainMask {
                a: true,
                b: true,
                c: false,
            },
            Variant::NoBridge => TrainMask {
                a: false,
                b: true,
                c: false,
            },
            Variant::BridgeOnly => TrainMask {
                a: false,
                b: false,
                c: true,
            },
            Variant::Ours => TrainMask {
                a: false,
                b: true,
                c: true,
            },
        }
    }

    /// Whether the update carries a bridge matrix between B and A.
    pub fn has_bridge(self) -> bool {
        matches!(self, Variant::BridgeOnly | Variant::Ours)
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::FullLora => 1,
            Variant::NoBridge => 2,
            Variant::BridgeOnly => 3,
            Variant::Ours => 4,
            Variant::OppuFresh => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Option<Variant>> {
        match code {
            0 => Some(None),
            1 => Some(Some(Variant::FullLora)),
            2 => Some(Some(Variant::NoBridge)),
            3 => Some(Some(Variant::BridgeOnly)),
            4 => Some(Some(Variant::Ours)),
            5 => Some(Some(Variant::OppuFresh)),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full-lora" | "fulllora" | "full" => Ok(Variant::FullLora),
            "no-bridge" | "nobridge" => Ok(Variant::NoBridge),
            "bridge-only" | "bridgeonly" => Ok(Variant::BridgeOnly),
            "ours" | "prisp" => Ok(Variant::Ours),
            "oppu" | "oppu-fresh" => Ok(Variant::OppuFresh),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TrainMask {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl TrainMask {
    pub const FROZEN: TrainMask = TrainMask {
        a: false,
        b: false,
        c: false,
    };

    pub fn get(self, role: Role) -> bool {
        match role {
            Role::A => self.a,
            Role::B => self.b,
            Role::C => self.c,
        }
    }

    pub fn bits(self) -> u8 {
        self.a as u8 | (self.b as u8) << 1 | (self.c as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 8).then_some(TrainMask {
            a: bits & 1 != 0,
            b: bits & 2 != 0,
            c: bits & 4 != 0,
        })
    }
}

/// Factor of a (bridged) low-rank update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
    C,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::A, Role::B, Role::C];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::A => "A",
            Role::B => "B",
            Role::C => "C",
        })
    }
}

const ROLE_META: u8 = 3;

/// Low-rank pair: `Δ = scale · B · A` with `A: r×d_in`, `B: d_out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: Real,
    pub dropout: Real,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let pair = Self {
            a,
            b,
            scale: 1.0,
            dropout: DEFAULT_DROPOUT,
        };
        pair.check()?;
        Ok(pair)
    }

    /// Fresh pair with `A ~ N(0, 1/r)` and `B = 0`, so `Δ = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {rank} must be in 1..={} for a {d_out}x{d_in} weight",
                d_in.min(d_out)
            )));
        }
        let a = Matrix::randn(rank, d_in, 1.0 / (rank as f64).sqrt(), rng);
        Self::new(a, Matrix::zeros(d_out, rank))
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    fn check(&self) -> Result<()> {
        let r = self.a.rows();
        if self.b.cols() != r {
            return Err(Error::Config(format!(
                "B is {}x{} but A has rank {r}",
                self.b.rows(),
                self.b.cols()
            )));
        }
        if r == 0 || r > self.d_in().min(self.d_out()) {
            return Err(Error::Config(format!("rank {r} exceeds min(d_in, d_out)")));
        }
        Ok(())
    }

    pub fn delta(&self) -> Matrix {
        let d = self.b.matmul(&self.a).expect("pair shapes checked");
        scaled(d, self.scale)
    }
}

fn scaled(m: Matrix, s: Real) -> Matrix {
    if s == 1.0 {
        m
    } else {
        m.scale(s)
    }
}

/// Anchor pair plus an optional bridge `C` and a trainable mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeAdapter {
    pub pair: LoraPair,
    pub c: Option<Matrix>,
    pub mask: TrainMask,
}

impl BridgeAdapter {
    /// Wraps an anchor pair for a variant; bridged variants start at `C = I`.
    pub fn new(anchor: &LoraPair, variant: Variant) -> Self {
        Self {
            pair: anchor.clone(),
            c: variant.has_bridge().then(|| Matrix::identity(anchor.rank())),
            mask: variant.mask(),
        }
    }

    fn frozen(pair: LoraPair) -> Self {
        Self {
            pair,
            c: None,
            mask: TrainMask::FROZEN,
        }
    }

    /// `scale · B · (C · A)`, or the plain pair delta without a bridge.
    pub fn delta(&self) -> Matrix {
        match &self.c {
            Some(c) => {
                let ca = c.matmul(&self.pair.a).expect("bridge shapes checked");
                scaled(self.pair.b.matmul(&ca).expect("bridge shapes checked"), self.pair.scale)
            }
            None => self.pair.delta(),
        }
    }

    pub fn factor(&self, role: Role) -> Option<&Matrix> {
        match role {
            Role::A => Some(&self.pair.a),
            Role::B => Some(&self.pair.b),
            Role::C => self.c.as_ref(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        Role::ALL
            .iter()
            .filter(|&&r| self.mask.get(r))
            .filter_map(|&r| self.factor(r))
            .map(Matrix::len)
            .sum()
    }
}

pub type AdapterKey = (usize, Site);

/// One adapter per `(layer, site)` and the variant that fixed their masks.
/// `variant == None` marks a task-level anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    variant: Option<Variant>,
    members: BTreeMap<AdapterKey, BridgeAdapter>,
}

/// Trainable graph leaf created by [`AdapterSet::attach`].
#[derive(Debug, Clone, Copy)]
pub struct TrainableLeaf {
    pub key: AdapterKey,
    pub role: Role,
    pub node: NodeId,
}

/// Gradients keyed by `(layer, site, role)`.
pub type AdapterGrads = BTreeMap<(usize, Site, Role), Matrix>;

impl AdapterSet {
    /// Anchor set from plain pairs.
    pub fn anchor(pairs: BTreeMap<AdapterKey, LoraPair>) -> Self {
        Self {
            variant: None,
            members: pairs.into_iter().map(|(k, p)| (k, BridgeAdapter::frozen(p))).collect(),
        }
    }

    /// Fresh `A ~ N(0, 1/r)`, `B = 0` pairs at every adapted site, trained
    /// with full masks.
    pub fn fresh(cfg: &BackboneConfig, rank: usize, rng: &Rng) -> Result<Self> {
        let mut members = BTreeMap::new();
        for layer in 0..cfg.n_layers {
            for site in Site::ADAPTED {
                let (d_in, d_out) = cfg.site_shape(site);
                let mut r = rng.split(&format!("fresh/{layer}/{site}"));
                let pair = LoraPair::init(d_in, d_out, rank, &mut r)?;
                members.insert((layer, site), BridgeAdapter::new(&pair, Variant::OppuFresh));
            }
        }
        Ok(Self {
            variant: Some(Variant::OppuFresh),
            members,
        })
    }

    /// Re-wraps every member's pair for `variant` (bridge at identity).
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant: Some(variant),
            members: self
                .members
                .iter()
                .map(|(k, m)| (*k, BridgeAdapter::new(&m.pair, variant)))
                .collect(),
        }
    }

    /// Collapses any bridge into the pair (`A ← C·A`) and marks the set as
    /// an anchor. Used when a trained set seeds another run.
    pub fn to_anchor(&self) -> Self {
        Self {
            variant: None,
            members: self
                .members
                .iter()
                .map(|(k, m)| {
                    let mut pair = m.pair.clone();
                    if let Some(c) = &m.c {
                        pair.a = c.matmul(&pair.a).expect("bridge shapes checked");
                    }
                    (*k, BridgeAdapter::frozen(pair))
                })
                .collect(),
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, layer: usize, site: Site) -> Option<&BridgeAdapter> {
        self.members.get(&(layer, site))
    }

    pub fn get_mut(&mut self, layer: usize, site: Site) -> Option<&mut BridgeAdapter> {
        self.members.get_mut(&(layer, site))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AdapterKey, &BridgeAdapter)> {
        self.members.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&AdapterKey, &mut BridgeAdapter)> {
        self.members.iter_mut()
    }

    pub fn set_dropout(&mut self, p: Real) {
        for m in self.members.values_mut() {
            m.pair.dropout = p;
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.members.values().map(BridgeAdapter::trainable_count).sum()
    }

    /// All factor entries concatenated in key order, for similarity checks.
    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for m in self.members.values() {
            for role in Role::ALL {
                if let Some(f) = m.factor(role) {
                    out.extend_from_slice(f.data());
                }
            }
        }
        out
    }

    pub fn bits_eq(&self, other: &AdapterSet) -> bool {
        self.variant == other.variant
            && self.members.len() == other.members.len()
            && self.members.iter().zip(&other.members).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.mask == b.mask
                    && a.pair.scale.to_bits() == b.pair.scale.to_bits()
                    && a.pair.dropout.to_bits() == b.pair.dropout.to_bits()
                    && a.pair.a.bits_eq(&b.pair.a)
                    && a.pair.b.bits_eq(&b.pair.b)
                    && match (&a.c, &b.c) {
                        (Some(x), Some(y)) => x.bits_eq(y),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }

    /// Checks every member against the backbone's site shapes.
    pub fn check_against(&self, cfg: &BackboneConfig) -> Result<()> {
        for (&(layer, site), m) in &self.members {
            if layer >= cfg.n_layers {
                return Err(Error::Config(format!(
                    "adapter at layer {layer} but backbone has {} layers",
                    cfg.n_layers
                )));
            }
            let (d_in, d_out) = cfg.site_shape(site);
            if m.pair.d_in() != d_in || m.pair.d_out() != d_out {
                return Err(Error::Config(format!(
                    "adapter {layer}.{site} is {}x{} but the site is {d_out}x{d_in}",
                    m.pair.d_out(),
                    m.pair.d_in()
                )));
            }
            if let Some(c) = &m.c {
                let r = m.pair.rank();
                if c.shape() != (r, r) {
                    return Err(Error::Config(format!(
                        "bridge {layer}.{site} is {}x{}, expected {r}x{r}",
                        c.rows(),
                        c.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Places every factor in `g` as a constant.
    pub fn attach_frozen<'a>(&'a self, g: &mut Graph<'a>, cfg: &BackboneConfig) -> Result<Attachments> {
        Ok(self.attach(g, cfg, false)?.0)
    }

    /// Places every factor in `g`; with `train`, masked-trainable factors
    /// become differentiable leaves and are returned alongside.
    pub fn attach<'a>(
        &'a self,
        g: &mut Graph<'a>,
        cfg: &BackboneConfig,
        train: bool,
    ) -> Result<(Attachments, Vec<TrainableLeaf>)> {
        self.check_against(cfg)?;
        let mut att = Attachments::new();
        let mut leaves = Vec::new();
        for (&key, m) in &self.members {
            let mut place = |role: Role, mat: &'a Matrix| {
                if train && m.mask.get(role) {
                    let node = g.param_ref(mat);
                    leaves.push(TrainableLeaf { key, role, node });
                    node
                } else {
                    g.constant_ref(mat)
                }
            };
            let a = place(Role::A, &m.pair.a);
            let b = place(Role::B, &m.pair.b);
            let c = m.c.as_ref().map(|c| place(Role::C, c));
            att.insert(
                key,
                SiteUpdate {
                    a,
                    b,
                    c,
                    scale: m.pair.scale,
                    dropout: m.pair.dropout,
                },
            );
        }
        Ok((att, leaves))
    }

    /// One optimizer update. Every factor is offered to the optimizer;
    /// only masked-trainable ones change.
    pub fn apply_step(&mut self, opt: &mut Optimizer<Real>, grads: &AdapterGrads) -> Result<()> {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut trainable = Vec::new();
        let mut grad_refs = Vec::new();
        for (&(layer, site), m) in self.members.iter_mut() {
            let BridgeAdapter { pair, c, mask } = m;
            let factors = [
                (Role::A, Some(&mut pair.a)),
                (Role::B, Some(&mut pair.b)),
                (Role::C, c.as_mut()),
            ];
            for (role, f) in factors {
                let grad = grads.get(&(layer, site, role));
                let Some(f) = f else {
                    continue;
                };
                keys.push(format!("l{layer}.{site}.{role}"));
                values.push(f);
                trainable.push(mask.get(role));
                grad_refs.push(grad);
            }
        }
        let mut slots: Vec<ParamSlot<'_, Real>> = values
            .into_iter()
            .zip(&keys)
            .zip(trainable.into_iter().zip(grad_refs))
            .map(|((value, key), (trainable, grad))| ParamSlot {
                key,
                value,
                grad,
                trainable,
            })
            .collect();
        opt.step(&mut slots)?;
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut records = Vec::new();
        for (&(layer, site), m) in &self.members {
            let (l, s) = (layer as u16, site.code());
            records.push(Record::matrix(l, s, Role::A.code(), m.pair.a.clone()));
            records.push(Record::matrix(l, s, Role::B.code(), m.pair.b.clone()));
            if let Some(c) = &m.c {
                records.push(Record::matrix(l, s, Role::C.code(), c.clone()));
            }
            let meta = Matrix::from_raw(1, 2, vec![m.pair.scale, m.pair.dropout]).expect("1x2 meta");
            records.push(Record::matrix(l, s, ROLE_META, meta));
            records.push(Record {
                layer: l,
                site: s,
                role: format::ROLE_MASK,
                payload: Payload::Mask(m.mask.bits()),
            });
        }
        Container {
            kind: ContainerKind::Adapters,
            variant: self.variant.map_or(0, Variant::code),
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, FormatError> {
        let variant = Variant::from_code(c.variant)
            .ok_or_else(|| FormatError::Shape(format!("unknown variant code {}", c.variant)))?;
        #[derive(Default)]
        struct Parts {
            a: Option<Matrix>,
            b: Option<Matrix>,
            c: Option<Matrix>,
            meta: Option<Matrix>,
            mask: Option<TrainMask>,
        }
        let mut parts: BTreeMap<AdapterKey, Parts> = BTreeMap::new();
        for r in &c.records {
            let site =
                Site::from_code(r.site).ok_or_else(|| FormatError::Shape(format!("unknown site code {}", r.site)))?;
            let entry = parts.entry((r.layer as usize, site)).or_default();
            let dup = || FormatError::Shape(format!("duplicate record at {}.{site}", r.layer));
            match (&r.payload, r.role) {
                (Payload::Mask(bits), _) => {
                    let mask = TrainMask::from_bits(*bits)
                        .ok_or_else(|| FormatError::Shape(format!("bad mask bits {bits:#x}")))?;
                    if entry.mask.replace(mask).is_some() {
                        return Err(dup());
                    }
                }
                (Payload::Matrix(m), ROLE_META) => {
                    if entry.meta.replace(m.clone()).is_some() {
                        return Err(dup());
                    }
                }
                (Payload::Matrix(m), role) => {
                    let role =
                        Role::from_code(role).ok_or_else(|| FormatError::Shape(format!("unknown role code {role}")))?;
                    let slot = match role {
                        Role::A => &mut entry.a,
                        Role::B => &mut entry.b,
                        Role::C => &mut entry.c,
                    };
                    if slot.replace(m.clone()).is_some() {
                        return Err(dup());
                    }
                }
            }
        }
        let mut members = BTreeMap::new();
        for ((layer, site), p) in parts {
            let missing = |what: &str| FormatError::Shape(format!("{layer}.{site} lacks {what}"));
            let a = p.a.ok_or_else(|| missing("A"))?;
            let b = p.b.ok_or_else(|| missing("B"))?;
            let meta = p.meta.ok_or_else(|| missing("metadata"))?;
            let mask = p.mask.ok_or_else(|| missing("mask"))?;
            if meta.shape() != (1, 2) {
                return Err(FormatError::Shape(format!("{layer}.{site} metadata shape")));
            }
            let r = a.rows();
            if b.cols() != r || r == 0 || r > a.cols().min(b.rows()) {
                return Err(FormatError::Shape(format!(
                    "{layer}.{site}: A is {}x{}, B is {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            if let Some(c) = &p.c {
                if c.shape() != (r, r) {
                    return Err(FormatError::Shape(format!("{layer}.{site}: C is not {r}x{r}")));
                }
            }
            let pair = LoraPair {
                a,
                b,
                scale: meta.data()[0],
                dropout: meta.data()[1],
            };
            members.insert((layer, site), BridgeAdapter { pair, c: p.c, mask });
        }
        Ok(Self { variant, members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, ContainerKind::Adapters)?;
        Ok(Self::from_container(&c)?)
    }
}
