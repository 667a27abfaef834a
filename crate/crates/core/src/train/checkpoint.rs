//! `.aqs` training checkpoints.
//!
//! ```text
//! magic "AQS1", u64 iteration, [u8; 32] config hash,
//! u32 len + config text, u64 len + PLY bytes, u64 len + AQMD bytes,
//! u32 count, then per frame weight: u32 len + id, f64 log gamma
//! ```
//! All integers little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::ply::{cloud_from_ply, cloud_to_ply, PlyData};
use crate::medium::{FrameWeight, MediumNet};
use crate::scene::GaussianCloud;

use super::TrainConfig;

const MAGIC: &[u8; 4] = b"AQS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    pub medium: MediumNet,
    pub frame_weights: Vec<FrameWeight>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.aqs")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.config.hash());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let ply = cloud_to_ply(&self.cloud).to_bytes();
        out.extend_from_slice(&(ply.len() as u64).to_le_bytes());
        out.extend_from_slice(&ply);
        let med = self.medium.to_checkpoint_bytes();
        out.extend_from_slice(&(med.len() as u64).to_le_bytes());
        out.extend_from_slice(&med);
        out.extend_from_slice(&(self.frame_weights.len() as u32).to_le_bytes());
        for w in &self.frame_weights {
            out.extend_from_slice(&(w.frame_id.len() as u32).to_le_bytes());
            out.extend_from_slice(w.frame_id.as_bytes());
            out.extend_from_slice(&w.gamma_logparam.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let bad = |m: String| Error::Unsupported(format!("{source}: {m}"));
        let mut r = Cursor::new(bytes);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|_| bad("truncated checkpoint".into()))?;
            Ok(b)
        };
        if take(4)? != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let iteration = u64_of(take(8)?);
        let hash = take(32)?;
        let len = u32_of(take(4)?);
        let text = String::from_utf8(take(len)?).map_err(|_| bad("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text, source)?.train;
        if config.hash().as_slice() != hash.as_slice() {
            return Err(bad("config hash mismatch".into()));
        }
        let len = u64_of(take(8)?) as usize;
        let ply = PlyData::from_reader(Cursor::new(take(len)?), source)?;
        let cloud = cloud_from_ply(&ply)?;
        let len = u64_of(take(8)?) as usize;
        let medium = MediumNet::read_checkpoint(Cursor::new(take(len)?))?;
        let count = u32_of(take(4)?);
        let mut frame_weights = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32_of(take(4)?);
            let frame_id = String::from_utf8(take(len)?).map_err(|_| bad("frame id is not UTF-8".into()))?;
            let gamma_logparam = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            frame_weights.push(FrameWeight {
                gamma_logparam,
                frame_id,
            });
        }
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            iteration,
            config,
            cloud,
            medium,
            frame_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
