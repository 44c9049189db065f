//! Seeded parameter initialization, checksums and snapshots over a
//! [`VarMap`]. Candle's CPU generator cannot be seeded, so every network is
//! re-initialized here after construction.

use std::collections::HashMap;

use candle_core::{DType, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{LearnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// He-normal convolutions, uniform linear layers.
    Kaiming,
    /// N(0, 0.02) weights, N(1, 0.02) batch-norm scales.
    Dcgan,
}

/// Variables sorted by name.
pub fn named_vars(map: &VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().expect("var map lock");
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Variables an optimizer should update.
pub fn trainable(map: &VarMap) -> Vec<Var> {
    named_vars(map)
        .into_iter()
        .filter(|(n, _)| !is_running_stat(n))
        .map(|(_, v)| v)
        .collect()
}

pub fn parameter_count(map: &VarMap) -> usize {
    trainable(map).iter().map(|v| v.elem_count()).sum()
}

pub fn get(map: &VarMap, name: &str) -> Result<Var> {
    map.data()
        .lock()
        .expect("var map lock")
        .get(name)
        .cloned()
        .ok_or_else(|| LearnError::Mismatch(format!("no parameter named {name}")))
}

fn stream_of(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_values(name: &str, dims: &[usize], scheme: InitScheme, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let parent = name.rsplit('.').nth(1).unwrap_or("");
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        (0..n).map(|_| mean + std * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    if name.ends_with("running_mean") {
        return vec![0.0; n];
    }
    if name.ends_with("running_var") {
        return vec![1.0; n];
    }
    if parent.starts_with("bn") {
        return match (name.ends_with("weight"), scheme) {
            (true, InitScheme::Dcgan) => normal(rng, 1.0, 0.02),
            (true, InitScheme::Kaiming) => vec![1.0; n],
            (false, _) => vec![0.0; n],
        };
    }
    if parent.starts_with("embed") {
        return normal(rng, 0.0, 1.0);
    }
    if name.ends_with("bias") {
        return vec![0.0; n];
    }
    match (scheme, dims.len()) {
        (InitScheme::Dcgan, _) => normal(rng, 0.0, 0.02),
        (InitScheme::Kaiming, 4) => {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            normal(rng, 0.0, (2.0 / fan_in).sqrt())
        }
        (InitScheme::Kaiming, _) => {
            let fan_in = dims.last().copied().unwrap_or(1) as f64;
            let bound = 1.0 / fan_in.sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    }
}

/// Overwrites every variable with values drawn from a per-name stream of
/// `seed`, so the result does not depend on construction order.
pub fn initialize(map: &VarMap, scheme: InitScheme, seed: u64) -> Result<()> {
    for (name, var) in named_vars(map) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_of(&name));
        let values = init_values(&name, var.dims(), scheme, &mut rng);
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// SHA-256 over names, shapes and `f64` values of all variables.
pub fn checksum(map: &VarMap) -> Result<[u8; 32]> {
    let mut hasher = Sha256::new();
    for (name, var) in named_vars(map) {
        hasher.update(name.as_bytes());
        for d in var.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher.finalize().into())
}

/// Detached copies of all variables.
#[derive(Debug, Clone)]
pub struct Snapshot(Vec<(String, Tensor)>);

impl Snapshot {
    pub fn take(map: &VarMap) -> Result<Self> {
        named_vars(map)
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().detach().copy()?)))
            .collect::<Result<_>>()
            .map(Snapshot)
    }

    pub fn restore(&self, map: &VarMap) -> Result<()> {
        for (name, t) in &self.0 {
            get(map, name)?.set(t)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.0
    }
}

/// Loads named tensors into `map`; names and shapes must match exactly.
pub fn load_into(map: &VarMap, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let vars = named_vars(map);
    if vars.len() != tensors.len() {
        return Err(LearnError::Mismatch(format!(
            "expected {} tensors, found {}",
            vars.len(),
            tensors.len()
        )));
    }
    for (name, var) in vars {
        let t = tensors
            .get(&name)
            .ok_or_else(|| LearnError::Mismatch(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(LearnError::Mismatch(format!(
                "{name}: shape {:?} does not match {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
