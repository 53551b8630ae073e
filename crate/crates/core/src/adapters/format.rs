//! Little-endian checkpoint container shared by adapters, backbones and
//! hypernetworks.
//!
//! Header: magic `PRSP`, version `u16`, kind `u8`, variant `u8`, record
//! count `u32`. Each record: layer `u16`, site `u8`, role `u8`, rows `u32`,
//! cols `u32`, then `rows·cols` `f64` values. A record with role
//! [`ROLE_MASK`] carries a single bitfield byte instead of floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::Matrix;

pub const MAGIC: [u8; 4] = *b"PRSP";
pub const VERSION: u16 = 1;
pub const ROLE_MASK: u8 = 255;

const HEADER_LEN: usize = 12;
const RECORD_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Adapters = 0,
    Backbone = 1,
    Hypernet = 2,
}

impl ContainerKind {
    pub fn name(self) -> &'static str {
        match self {
            ContainerKind::Adapters => "adapters",
            ContainerKind::Backbone => "backbone",
            ContainerKind::Hypernet => "hypernet",
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Adapters),
            1 => Some(Self::Backbone),
            2 => Some(Self::Hypernet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Matrix(Matrix),
    Mask(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub layer: u16,
    pub site: u8,
    pub role: u8,
    pub payload: Payload,
}

impl Record {
    pub fn matrix(layer: u16, site: u8, role: u8, m: Matrix) -> Self {
        Self {
            layer,
            site,
            role,
            payload: Payload::Matrix(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub variant: u8,
    pub records: Vec<Record>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.variant);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.layer.to_le_bytes());
            out.push(r.site);
            match &r.payload {
                Payload::Matrix(m) => {
                    out.push(r.role);
                    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Mask(bits) => {
                    out.push(ROLE_MASK);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.push(*bits);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated("missing header".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated("missing header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let kind = ContainerKind::from_code(bytes[6])
            .ok_or_else(|| FormatError::Shape(format!("unknown container kind {}", bytes[6])))?;
        let variant = bytes[7];
        let declared = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked"));

        let mut pos = HEADER_LEN;
        let mut records = Vec::new();
        for i in 0..declared {
            if pos == bytes.len() {
                return Err(FormatError::RecordCount { declared, found: i });
            }
            if bytes.len() - pos < RECORD_HEADER_LEN {
                return Err(FormatError::Truncated(format!("record {i} header")));
            }
            let h = &bytes[pos..pos + RECORD_HEADER_LEN];
            let layer = u16::from_le_bytes([h[0], h[1]]);
            let site = h[2];
            let role = h[3];
            let rows = u32::from_le_bytes(h[4..8].try_into().expect("slice of 4")) as usize;
            let cols = u32::from_le_bytes(h[8..12].try_into().expect("slice of 4")) as usize;
            pos += RECORD_HEADER_LEN;
            if role == ROLE_MASK {
                if (rows, cols) != (1, 1) {
                    return Err(FormatError::Shape(format!("mask record {i} has shape {rows}x{cols}")));
                }
                let Some(&bits) = bytes.get(pos) else {
                    return Err(FormatError::Truncated(format!("record {i} mask")));
                };
                pos += 1;
                records.push(Record {
                    layer,
                    site,
                    role,
                    payload: Payload::Mask(bits),
                });
                continue;
            }
            let need = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::Shape(format!("record {i} shape {rows}x{cols}")))?;
            if bytes.len() - pos < need {
                return Err(FormatError::Truncated(format!("record {i} payload ({rows}x{cols})")));
            }
            let data: Vec<f64> = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            pos += need;
            let m = Matrix::from_raw(rows, cols, data).map_err(|e| FormatError::Shape(e.to_string()))?;
            records.push(Record::matrix(layer, site, role, m));
        }
        if pos != bytes.len() {
            return Err(FormatError::Trailing(bytes.len() - pos));
        }
        Ok(Self { kind, variant, records })
    }

    /// Reads a container and checks its kind.
    pub fn read(path: &Path, expected: ContainerKind) -> Result<Self> {
        let bytes = fs::read(path)?;
        let c = Self::from_bytes(&bytes)?;
        if c.kind != expected {
            return Err(FormatError::WrongKind {
                found: c.kind.name(),
                expected: expected.name(),
            }
            .into());
        }
        Ok(c)
    }

    /// Writes via a temporary sibling and a rename so readers never see a
    /// partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}
