use std::path::Path;

use crate::adapters::format::{Container, ContainerKind, Payload, Record};
use crate::adapters::AdapterSet;
use crate::error::{FormatError, Result};
use crate::numerics::Rng;
use crate::Matrix;

use super::{Backbone, BackboneConfig};

const GLOBAL: u16 = u16::MAX;
const ROLE_CONFIG: u8 = 254;

pub(crate) fn config_record(cfg: &BackboneConfig) -> Record {
    let vals = [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_seq,
    ]
    .map(|v| v as f64);
    Record::matrix(
        GLOBAL,
        0,
        ROLE_CONFIG,
        Matrix::from_raw(1, 6, vals.to_vec()).expect("1x6"),
    )
}

pub(crate) fn config_from_record(r: &Record) -> Result<BackboneConfig, FormatError> {
    let bad = || FormatError::Shape("backbone config record".into());
    let Payload::Matrix(m) = &r.payload else {
        return Err(bad());
    };
    if r.role != ROLE_CONFIG || m.shape() != (1, 6) {
        return Err(bad());
    }
    let mut v = [0usize; 6];
    for (slot, &x) in v.iter_mut().zip(m.data()) {
        if !(x >= 0.0 && x.fract() == 0.0 && x < 1e9) {
            return Err(bad());
        }
        *slot = x as usize;
    }
    let cfg = BackboneConfig {
        n_layers: v[0],
        d_model: v[1],
        n_heads: v[2],
        d_ff: v[3],
        vocab_size: v[4],
        max_seq: v[5],
    };
    cfg.validate().map_err(|e| FormatError::Shape(e.to_string()))?;
    Ok(cfg)
}

impl Backbone {
    pub fn to_container(&self) -> Container {
        let mut records = vec![config_record(&self.cfg)];
        let per_layer = 13;
        for (i, (_, m)) in self.named_weights().into_iter().enumerate() {
            let (layer, role) = if i == 0 {
                (GLOBAL, 0)
            } else if i <= self.cfg.n_layers * per_layer {
                (((i - 1) / per_layer) as u16, ((i - 1) % per_layer) as u8)
            } else {
                (GLOBAL, (i - self.cfg.n_layers * per_layer) as u8)
            };
            records.push(Record::matrix(layer, 0, role, m.clone()));
        }
        Container {
            kind: ContainerKind::Backbone,
            variant: 0,
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, FormatError> {
        let first = c
            .records
            .first()
            .ok_or_else(|| FormatError::Shape("backbone file has no records".into()))?;
        let cfg = config_from_record(first)?;
        let mut model = Backbone::build(cfg, &Rng::new(0)).map_err(|e| FormatError::Shape(e.to_string()))?;
        let slots = model.named_weights_mut();
        if c.records.len() != slots.len() + 1 {
            return Err(FormatError::Shape(format!(
                "backbone file holds {} weights, config implies {}",
                c.records.len() - 1,
                slots.len()
            )));
        }
        for (slot, r) in slots.into_iter().zip(&c.records[1..]) {
            let Payload::Matrix(m) = &r.payload else {
                return Err(FormatError::Shape("mask record in backbone file".into()));
            };
            if m.shape() != slot.shape() {
                return Err(FormatError::Shape(format!(
                    "weight is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = m.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, ContainerKind::Backbone)?;
        Ok(Self::from_container(&c)?)
    }

    /// Copy of the model with every adapter delta added into its site weight.
    pub fn merged(&self, set: &AdapterSet) -> Result<Backbone> {
        set.check_against(&self.cfg)?;
        let mut out = self.clone();
        for (&(layer, site), m) in set.iter() {
            out.layers[layer].proj[site as usize].add_assign(&m.delta())?;
        }
        Ok(out)
    }
}
