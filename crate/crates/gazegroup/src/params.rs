//! Named parameter tensors, gradient accumulation, the Adam update rule,
//! and a flat binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `GZCK`, format version u32,
//! tensor count u32, then per tensor a u32 name length, the UTF-8 name,
//! u32 rows, u32 cols, and rows*cols f32 values in row-major order.
//! Training runs in f64; checkpoints round to f32 on save.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Mat;

const MAGIC: &[u8; 4] = b"GZCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("checkpoint is not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, mat: Mat) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.index.insert(name.to_string(), self.mats.len());
        self.names.push(name.to_string());
        self.mats.push(mat);
        Ok(())
    }

    pub fn idx(&self, name: &str) -> Result<usize, ParamError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Mat, ParamError> {
        Ok(&self.mats[self.idx(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat, ParamError> {
        let i = self.idx(name)?;
        Ok(&mut self.mats[i])
    }

    pub fn by_idx(&self, i: usize) -> &Mat {
        &self.mats[i]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.mats.iter())
    }

    pub fn n_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.mats.len() as u32).to_le_bytes())?;
        for (name, mat) in self.iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            let (r, c) = mat.dim();
            out.write_all(&(r as u32).to_le_bytes())?;
            out.write_all(&(c as u32).to_le_bytes())?;
            for v in mat.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ParamError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(ParamError::BadVersion(version));
        }
        input.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf);
        let mut store = ParamStore::new();
        for _ in 0..count {
            input.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            if name_len > 4096 {
                return Err(ParamError::Corrupt("oversized tensor name".into()));
            }
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ParamError::Corrupt("tensor name is not UTF-8".into()))?;
            input.read_exact(&mut u32buf)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            input.read_exact(&mut u32buf)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut data = vec![0f64; rows * cols];
            for v in data.iter_mut() {
                input.read_exact(&mut u32buf)?;
                *v = f32::from_le_bytes(u32buf) as f64;
            }
            let mat = Mat::from_shape_vec((rows, cols), data)
                .map_err(|_| ParamError::Corrupt(format!("tensor `{name}` shape")))?;
            store.insert(&name, mat)?;
        }
        Ok(store)
    }

    /// Round every tensor through f32, matching a save/load cycle.
    pub fn quantized(&self) -> Self {
        let mut out = ParamStore::new();
        for (name, mat) in self.iter() {
            out.insert(name, mat.mapv(|v| v as f32 as f64)).unwrap();
        }
        out
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
pub struct GradStore {
    grads: Vec<Mat>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            grads: params.mats.iter().map(|m| Mat::zeros(m.dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, idx: usize, delta: &Mat) {
        self.grads[idx] += delta;
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.grads[idx]
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.mats.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.mats.iter().map(|p| Mat::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.mats.len() {
            let g = &grads.grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let (m, v) = (&self.m[i], &self.v[i]);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut params.mats[i])
                .and(m)
                .and(v)
                .for_each(|p, &mv, &vv| {
                    *p -= lr * (mv / b1t) / ((vv / b2t).sqrt() + eps);
                });
        }
    }
}

/// Builder for deterministic parameter initialization.
pub struct ParamInit {
    rng: ChaCha8Rng,
    pub store: ParamStore,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    /// Dense weight with std sqrt(2 / (fan_in + fan_out)).
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        self.normal(name, rows, cols, std);
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        let mat = Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng));
        self.store.insert(name, mat).expect("init name collision");
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.store
            .insert(name, Mat::from_elem((rows, cols), value))
            .expect("init name collision");
    }

    pub fn row(&mut self, name: &str, values: &[f64]) {
        self.store
            .insert(
                name,
                Mat::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
            )
            .expect("init name collision");
    }
}
