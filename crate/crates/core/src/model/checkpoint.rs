//! Checkpoint container: the magic line `FNAT1\n`, a little-endian `u64`
//! header length, a JSON header (arch, config, metadata, parameter names and
//! shapes), then every parameter's values as little-endian `f64` in header
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ArTransformer, FourierNat, ModelConfig, Seq2Seq};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"FNAT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Either decoder family, as restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel<F: Real = f64> {
    Nat(FourierNat<F>),
    Ar(ArTransformer<F>),
}

impl<F: Real> AnyModel<F> {
    pub fn new(cfg: ModelConfig, arch: Arch, seed: u64) -> Result<Self> {
        Ok(match arch {
            Arch::ArBaseline => AnyModel::Ar(ArTransformer::new(cfg, seed)?),
            _ => AnyModel::Nat(FourierNat::new(cfg, arch, seed)?),
        })
    }

    pub fn as_dyn(&self) -> &dyn Seq2Seq<F> {
        match self {
            AnyModel::Nat(m) => m,
            AnyModel::Ar(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Seq2Seq<F> {
        match self {
            AnyModel::Nat(m) => m,
            AnyModel::Ar(m) => m,
        }
    }

    pub fn arch(&self) -> Arch {
        self.as_dyn().arch()
    }

    pub fn config(&self) -> &ModelConfig {
        self.as_dyn().config()
    }

    pub fn into_nat(self) -> Result<FourierNat<F>> {
        match self {
            AnyModel::Nat(m) => Ok(m),
            AnyModel::Ar(_) => Err(Error::config(
                "expected a non-autoregressive checkpoint, found ar-baseline",
            )),
        }
    }

    pub fn into_ar(self) -> Result<ArTransformer<F>> {
        match self {
            AnyModel::Ar(m) => Ok(m),
            AnyModel::Nat(m) => Err(Error::config(format!(
                "expected an ar-baseline checkpoint, found {}",
                m.arch()
            ))),
        }
    }
}

/// Writes `model` with free-form `meta` (for example the training step).
pub fn save_checkpoint<F: Real>(
    model: &dyn Seq2Seq<F>,
    meta: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let ps = model.params();
    let header = Header {
        arch: model.arch(),
        config: model.config().clone(),
        meta,
        params: ps
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header.len() + 8 * ps.num_scalars() + 16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in ps.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores a model and its metadata. Every parameter of the architecture
/// must be present with the right shape, and nothing else.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(AnyModel<F>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| bad("missing FNAT1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| bad(&format!("header: {e}")))?;
    let mut values = &rest[hlen..];
    let mut model = AnyModel::<F>::new(header.config, header.arch, 0)?;
    let ps: &mut ParamStore<F> = model.as_dyn_mut().params_mut();
    if header.params.len() != ps.len() {
        return Err(bad(&format!(
            "{} parameters stored, architecture has {}",
            header.params.len(),
            ps.len()
        )));
    }
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if values.len() < 8 * n {
            return Err(bad(&format!("truncated values for {}", e.name)));
        }
        let data: Vec<f64> = values[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values = &values[8 * n..];
        let t = Tensor::<F>::from_f64(&e.shape, &data)?;
        ps.assign(&e.name, t)?;
    }
    if !values.is_empty() {
        return Err(bad("trailing bytes after parameter values"));
    }
    Ok((model, header.meta))
}
