//! Named parameter tensors, initialization, the SGD-with-momentum optimizer
//! and binary checkpoint serialization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};

const PARAMS_MAGIC: &[u8; 8] = b"MFDPARAM";
const PARAMS_VERSION: u32 = 1;

/// Ordered map of parameter name -> tensor. Iteration order is the sorted
/// name order, which makes optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Serialize to the checkpoint byte format (little-endian `f64`s).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cursor.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != PARAMS_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        cursor.read_exact(&mut u32buf).map_err(|_| corrupt("truncated version"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != PARAMS_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: PARAMS_VERSION });
        }
        cursor.read_exact(&mut u32buf).map_err(|_| corrupt("truncated count"))?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut params = Params::new();
        for _ in 0..count {
            cursor.read_exact(&mut u32buf).map_err(|_| corrupt("truncated name length"))?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            cursor.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| corrupt("non-utf8 name"))?;
            cursor.read_exact(&mut u32buf).map_err(|_| corrupt("truncated ndim"))?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                cursor.read_exact(&mut u32buf).map_err(|_| corrupt("truncated shape"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut f64buf = [0u8; 8];
            for _ in 0..len {
                cursor.read_exact(&mut f64buf).map_err(|_| corrupt("truncated tensor data"))?;
                data.push(f64::from_le_bytes(f64buf));
            }
            params.insert(&name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Params::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized bytes; used for frozen-weight verification.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter nodes registered in a [`Graph`], keyed by name.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Insert every parameter tensor into the graph as a trainable leaf.
    pub fn bind(graph: &mut Graph, params: &Params) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), graph.param(tensor.clone()));
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients back into a name-keyed map (zeros where untouched).
    pub fn grads(&self, params: &Params, grads: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, tensor) in params.iter() {
            out.insert(name, grads.wrt(self.var(name), tensor.shape()));
        }
        out
    }
}

/// Accumulate `delta` into `acc`, elementwise (parameter-set addition).
pub fn add_params(acc: &mut Params, delta: &Params) {
    for (name, tensor) in delta.iter() {
        *acc.get_mut(name) += tensor;
    }
}

/// Scale every tensor in place.
pub fn scale_params(params: &mut Params, factor: f64) {
    for (_, tensor) in params.tensors.iter_mut() {
        tensor.mapv_inplace(|v| v * factor);
    }
}

/// Plain stochastic gradient descent with classical momentum:
/// `v <- mu * v + g`, `theta <- theta - lr * v`.
pub struct SgdMomentum {
    momentum: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        for (name, tensor) in params.tensors.iter_mut() {
            let grad = grads.get(name);
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(tensor.raw_dim()));
            vel.zip_mut_with(grad, |v, &g| *v = self.momentum * *v + g);
            tensor.zip_mut_with(vel, |t, &v| *t -= lr * v);
        }
    }
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform initialization with an explicit bound.
pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], value: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), value)
}

/// SHA-256 hex digest of arbitrary bytes (config hashing for sidecars).
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn params_roundtrip_bitexact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut p = Params::new();
        p.insert("a.weight", he_uniform(&[3, 2, 3, 3], 18, &mut rng));
        p.insert("a.bias", zeros(&[3]));
        p.insert("z", full(&[2, 2], -0.125));

        let bytes = p.to_bytes();
        let q = Params::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.hash(), q.hash());
    }

    #[test]
    fn params_rejects_bad_magic_and_version() {
        let p = Params::new();
        let mut bytes = p.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Params::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Checkpoint { .. })
        ));

        let mut bytes = p.to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Params::from_bytes(&bytes, Path::new("mem")),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Params::new();
        p.insert("w", full(&[1], 1.0));
        let mut g = Params::new();
        g.insert("w", full(&[1], 0.5));

        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut p, &g, 0.1);
        // v = 0.5, w = 1 - 0.05
        assert!((p.get("w")[[0]] - 0.95).abs() < 1e-12);
        opt.step(&mut p, &g, 0.1);
        // v = 0.95, w = 0.95 - 0.095
        assert!((p.get("w")[[0]] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = he_uniform(&[4, 4], 16, &mut ChaCha20Rng::seed_from_u64(11));
        let b = he_uniform(&[4, 4], 16, &mut ChaCha20Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }
}
