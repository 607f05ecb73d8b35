//! Weight persistence: a little-endian container holding a header (format
//! version, stage tag, model-spec echo, latent scale, step, seed) and a
//! named tensor table. Loads are bitwise and spec-checked; a canonical
//! SHA-256 over the table backs the stage-1 freeze contract.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{RegType, RunConfig};
use crate::error::{Result, VoxError};
use crate::params::ParamStore;
use crate::tensor::array::Array;

const MAGIC: &[u8; 4] = b"VXCP";
const VERSION: u16 = 1;

pub const STAGE_AE: u8 = 1;
pub const STAGE_LDM: u8 = 2;

/// Everything the architecture depends on, echoed into the file so a load
/// under a different model shape fails loudly instead of reshaping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    pub stage: u8,
    pub ae_channels: Vec<usize>,
    pub d_emb: usize,
    pub codebook_size: usize,
    pub groups: usize,
    pub spade_channels: Vec<usize>,
    pub unet_channels: Vec<usize>,
    pub time_mult: usize,
    pub use_diffusion: bool,
    pub use_palette: bool,
    pub use_spade: bool,
    pub reg_type: RegType,
    pub modalities: Vec<String>,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl SpecEcho {
    pub fn from_config(cfg: &RunConfig, stage: u8, modalities: &[String]) -> SpecEcho {
        SpecEcho {
            stage,
            ae_channels: cfg.model.ae_channels.clone(),
            d_emb: cfg.model.d_emb,
            codebook_size: cfg.model.codebook_size,
            groups: cfg.model.groups,
            spade_channels: cfg.model.spade_channels.clone(),
            unet_channels: cfg.model.unet_channels.clone(),
            time_mult: cfg.model.time_mult,
            use_diffusion: cfg.ablation.use_diffusion,
            use_palette: cfg.ablation.use_palette,
            use_spade: cfg.ablation.use_spade,
            reg_type: cfg.ablation.reg_type,
            modalities: modalities.to_vec(),
            t_count: cfg.stage2.t_count,
            beta_start: cfg.stage2.beta_start,
            beta_end: cfg.stage2.beta_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub echo: SpecEcho,
    /// Latent standardization factor fit during stage 2; 1.0 for stage 1.
    pub latent_scale: f64,
    pub step: u64,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn ensure_stage(&self, stage: u8) -> Result<()> {
        if self.echo.stage != stage {
            return Err(VoxError::Checkpoint(format!(
                "stage tag {} in file, expected {}",
                self.echo.stage, stage
            )));
        }
        Ok(())
    }

    pub fn ensure_matches(&self, expected: &SpecEcho) -> Result<()> {
        if &self.echo != expected {
            return Err(VoxError::Checkpoint(format!(
                "model spec mismatch.\n  file:     {}\n  expected: {}",
                toml::to_string(&self.echo).unwrap_or_default().replace('\n', " "),
                toml::to_string(expected).unwrap_or_default().replace('\n', " "),
            )));
        }
        Ok(())
    }
}

fn sorted_names(store: &ParamStore<f32>) -> Vec<String> {
    let mut names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    names.sort();
    names
}

/// Canonical digest over (name, shape, payload) in sorted name order.
pub fn table_hash(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for name in sorted_names(store) {
        let arr = store.get(&name).expect("name from store");
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((arr.shape().len() as u32).to_le_bytes());
        for &e in arr.shape() {
            h.update((e as u32).to_le_bytes());
        }
        for v in arr.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<f32>,
) -> Result<()> {
    let meta_text =
        toml::to_string(meta).map_err(|e| VoxError::config(format!("meta serialize: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());
    let names = sorted_names(store);
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        let arr = store.get(name)?;
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(arr.shape().len() as u8);
        for &e in arr.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VoxError::Format {
                path: self.path.to_path_buf(),
                reason: format!(
                    "truncated at offset {}: wanted {n} more bytes of {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let bad = |reason: String| VoxError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic at offset 0, expected \"VXCP\"".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let meta_text = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|e| bad(format!("meta block is not utf-8: {e}")))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| bad(format!("meta block: {e}")))?;
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| bad(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = cur
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(&name, Array::new(shape, data)?)?;
    }
    Ok((meta, store))
}
