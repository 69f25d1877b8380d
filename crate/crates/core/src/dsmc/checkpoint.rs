//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `GRNL`, version `u32`, `N: u64`,
//! `time: f64`, `lambda: f64`, model tag `u32` and three `f64` parameters,
//! master seed `u64`, step counter `u64`, then `N×3` positions and `N×3`
//! velocities as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kinematics::Vec3;
use crate::restitution::RestitutionModel;

pub const MAGIC: &[u8; 4] = b"GRNL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 4 + 24 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub lambda: f64,
    pub model: RestitutionModel,
    pub seed: u64,
    pub step: u64,
    pub ensemble: ParticleEnsemble,
}

fn model_fields(model: &RestitutionModel) -> (u32, [f64; 3]) {
    match *model {
        RestitutionModel::Constant { e0 } => (0, [e0, 0.0, 0.0]),
        RestitutionModel::Viscoelastic { a } => (1, [a, 0.0, 0.0]),
        RestitutionModel::CappedPowerLaw { a, gamma, e_min } => (2, [a, gamma, e_min]),
    }
}

fn model_from_fields(tag: u32, p: [f64; 3]) -> Option<RestitutionModel> {
    match tag {
        0 => Some(RestitutionModel::Constant { e0: p[0] }),
        1 => Some(RestitutionModel::Viscoelastic { a: p[0] }),
        2 => Some(RestitutionModel::CappedPowerLaw {
            a: p[0],
            gamma: p[1],
            e_min: p[2],
        }),
        _ => None,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.ensemble.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 48 * n);
        let (tag, params) = model_fields(&self.model);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.ensemble.time.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for block in [&self.ensemble.positions, &self.ensemble.velocities] {
            for x in block.iter() {
                for c in x.iter() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail("missing GRNL magic".into()));
        }
        let mut at = 4;
        let mut take = |len: usize| {
            let s = &bytes[at..at + len];
            at += len;
            s
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4));
        if version != VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let n = u64_at(take(8)) as usize;
        let time = f64_at(take(8));
        let lambda = f64_at(take(8));
        let tag = u32_at(take(4));
        let params = [f64_at(take(8)), f64_at(take(8)), f64_at(take(8))];
        let seed = u64_at(take(8));
        let step = u64_at(take(8));
        let model = model_from_fields(tag, params).ok_or_else(|| fail(format!("unknown model tag {tag}")))?;
        let expected = n
            .checked_mul(48)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| fail(format!("particle count {n} is implausible")))?;
        if bytes.len() != expected {
            return Err(fail(format!("expected {expected} bytes for {n} particles, found {}", bytes.len())));
        }
        let read_block = |offset: usize| -> Vec<Vec3> {
            (0..n)
                .map(|i| {
                    let base = offset + 24 * i;
                    Vec3::new(
                        f64_at(&bytes[base..base + 8]),
                        f64_at(&bytes[base + 8..base + 16]),
                        f64_at(&bytes[base + 16..base + 24]),
                    )
                })
                .collect()
        };
        let positions = read_block(HEADER_LEN);
        let velocities = read_block(HEADER_LEN + 24 * n);
        let mut ensemble = ParticleEnsemble::new(positions, velocities).map_err(|e| fail(e.to_string()))?;
        ensemble.time = time;
        Ok(Self {
            lambda,
            model,
            seed,
            step,
            ensemble,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&self.to_bytes())?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
