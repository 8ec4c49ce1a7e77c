use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::frames::InputScaler;
use super::train::{Checkpoint, TrainConfig};
use crate::dependency::{packed_len, Base, DependencyModel, Family, MarginalMode};
use crate::diffcore::Tensor;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::evaluation::report::extended;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DependencyMeta {
    family: Family,
    base: Base,
    marginal_mode: MarginalMode,
    dim: usize,
    nu_raw: Option<f64>,
    learn_nu: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    epoch: usize,
    #[serde(with = "extended::opt")]
    threshold: Option<f64>,
    train: TrainConfig,
    dependency: DependencyMeta,
    arrays: Vec<ArrayRecord>,
}

fn record(name: &str, shape: Vec<usize>, values: &[f64]) -> ArrayRecord {
    ArrayRecord {
        name: name.to_string(),
        shape,
        values: values.to_vec(),
    }
}

fn to_manifest(ckpt: &Checkpoint) -> Manifest {
    let dep = &ckpt.dependency;
    let d = dep.dim;
    let mut arrays: Vec<ArrayRecord> = ckpt
        .encoder
        .names
        .iter()
        .zip(&ckpt.encoder.tensors)
        .map(|(n, t)| record(n, t.shape().to_vec(), t.data()))
        .collect();
    arrays.push(record("dependency.phi", vec![dep.phi.len()], &dep.phi));
    arrays.push(record("dependency.mu", vec![d], &dep.mu));
    arrays.push(record("dependency.sigma", vec![d], &dep.sigma));
    if let Some(cols) = &dep.reference {
        let n = cols.first().map_or(0, Vec::len);
        arrays.push(record("dependency.reference", vec![cols.len(), n], &cols.concat()));
    }
    let dim = ckpt.scaler.mean.len();
    arrays.push(record("scaler.mean", vec![dim], &ckpt.scaler.mean));
    arrays.push(record("scaler.std", vec![dim], &ckpt.scaler.std));
    Manifest {
        version: CHECKPOINT_VERSION,
        epoch: ckpt.epoch,
        threshold: ckpt.threshold,
        train: ckpt.config.clone(),
        dependency: DependencyMeta {
            family: dep.family,
            base: dep.base,
            marginal_mode: dep.marginal_mode,
            dim: d,
            nu_raw: dep.nu_raw,
            learn_nu: dep.learn_nu,
        },
        arrays,
    }
}

/// Serializes the checkpoint as a JSON manifest. Every float is written in
/// its shortest exactly round-tripping decimal form.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_manifest(ckpt))?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let found = raw.get("version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::VersionMismatch {
            found: found.map_or(0, |v| v.min(u64::from(u32::MAX)) as u32),
            expected: CHECKPOINT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw)?;
    m.train.validate()?;
    from_manifest(m)
}

fn corrupt(name: &str, reason: impl Into<String>) -> Error {
    Error::CorruptArray {
        name: name.to_string(),
        reason: reason.into(),
    }
}

struct Arrays(Vec<ArrayRecord>);

impl Arrays {
    fn take(&mut self, name: &str, shape: Option<&[usize]>) -> Result<ArrayRecord> {
        let pos = self
            .0
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| corrupt(name, "missing"))?;
        let a = self.0.remove(pos);
        if let Some(s) = shape {
            if a.shape != s {
                return Err(corrupt(name, format!("expected shape {s:?}, found {:?}", a.shape)));
            }
        }
        Ok(a)
    }
}

fn check_len(a: &ArrayRecord) -> Result<()> {
    let n: usize = a.shape.iter().product();
    if n != a.values.len() {
        return Err(corrupt(
            &a.name,
            format!("shape {:?} needs {n} values, found {}", a.shape, a.values.len()),
        ));
    }
    Ok(())
}

fn from_manifest(m: Manifest) -> Result<Checkpoint> {
    for a in &m.arrays {
        check_len(a)?;
    }
    let mut arrays = Arrays(m.arrays);
    let enc_cfg = &m.train.encoder;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in enc_cfg.layout() {
        let a = arrays.take(&name, Some(&shape))?;
        tensors.push(Tensor::new(a.shape, a.values)?.with_grad());
        names.push(name);
    }
    let encoder = EncoderParams { names, tensors };
    encoder.check_layout(enc_cfg)?;

    let meta = m.dependency;
    let d = meta.dim;
    if d != enc_cfg.latent_dim {
        return Err(corrupt(
            "dependency",
            format!("dimension {d} differs from latent_dim {}", enc_cfg.latent_dim),
        ));
    }
    if (meta.base == Base::StudentT) != meta.nu_raw.is_some() {
        return Err(corrupt("dependency.nu_raw", "presence does not match the base"));
    }
    let phi = arrays.take("dependency.phi", Some(&[packed_len(d)]))?.values;
    let mu = arrays.take("dependency.mu", Some(&[d]))?.values;
    let sigma = arrays.take("dependency.sigma", Some(&[d]))?.values;
    let reference = match arrays.take("dependency.reference", None) {
        Ok(a) => {
            if a.shape.len() != 2 || a.shape[0] != d {
                return Err(corrupt(&a.name, format!("expected shape [{d}, n], found {:?}", a.shape)));
            }
            Some(a.values.chunks(a.shape[1].max(1)).map(<[f64]>::to_vec).collect())
        }
        Err(_) => None,
    };
    let input = enc_cfg.input_dim;
    let scaler = InputScaler {
        mean: arrays.take("scaler.mean", Some(&[input]))?.values,
        std: arrays.take("scaler.std", Some(&[input]))?.values,
    };
    if let Some(extra) = arrays.0.first() {
        return Err(corrupt(&extra.name, "unexpected array"));
    }
    Ok(Checkpoint {
        dependency: DependencyModel {
            family: meta.family,
            base: meta.base,
            marginal_mode: meta.marginal_mode,
            dim: d,
            phi,
            nu_raw: meta.nu_raw,
            learn_nu: meta.learn_nu,
            mu,
            sigma,
            reference,
        },
        encoder,
        scaler,
        config: m.train,
        epoch: m.epoch,
        threshold: m.threshold,
    })
}
