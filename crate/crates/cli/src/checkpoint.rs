//! Search checkpoints.
//!
//! Layout: `DPFNAS1`, a tensor list in the wire encoding holding the
//! architecture scores under `arch/` and the supernet weights under
//! `weights/`, the discrete architecture text as a u32 length plus UTF-8
//! bytes, then the CRC32 of everything after the header.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dpfnas_core::wire::{crc32, decode_tensors, encode_tensors, Reader};
use dpfnas_core::{
    ArchitectureVariables, CandidateOpSet, DiscreteArchitecture, Error, NamedTensors,
    WeightParameters,
};

pub const MAGIC: &[u8; 7] = b"DPFNAS1";

const ARCH_PREFIX: &str = "arch/";
const WEIGHTS_PREFIX: &str = "weights/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureVariables,
    pub weights: WeightParameters,
    pub discrete: DiscreteArchitecture,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = NamedTensors::new();
        for (prefix, set) in [(ARCH_PREFIX, &self.arch), (WEIGHTS_PREFIX, &self.weights)] {
            for (k, t) in set.iter() {
                tensors.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        let mut body = Vec::new();
        encode_tensors(&tensors, &mut body);
        let text = self.discrete.to_text();
        body.extend_from_slice(&(text.len() as u32).to_le_bytes());
        body.extend_from_slice(text.as_bytes());
        let mut out = Vec::with_capacity(body.len() + 11);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], ops: &CandidateOpSet) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            bail!("not a checkpoint: missing DPFNAS1 header");
        }
        let body = &bytes[MAGIC.len()..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed })
                .context("checkpoint is corrupt (CRC32 mismatch)");
        }
        let mut r = Reader::new(body);
        let tensors = decode_tensors(&mut r)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes(len)?).context("architecture text is not UTF-8")?;
        r.finish()?;
        let mut arch = NamedTensors::new();
        let mut weights = NamedTensors::new();
        for (k, t) in tensors.into_inner() {
            if let Some(name) = k.strip_prefix(ARCH_PREFIX) {
                arch.insert(name, t);
            } else if let Some(name) = k.strip_prefix(WEIGHTS_PREFIX) {
                weights.insert(name, t);
            } else {
                bail!("unexpected tensor `{k}` in checkpoint");
            }
        }
        Ok(Self {
            arch,
            weights,
            discrete: DiscreteArchitecture::parse_text(text, ops)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path, ops: &CandidateOpSet) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes, ops).with_context(|| format!("loading {}", path.display()))
    }
}
