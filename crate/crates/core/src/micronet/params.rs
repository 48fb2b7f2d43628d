//! Named parameter storage, Adam, and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"WSDETCKP"  u32 version (=1)  u32 count
//! count x { u32 name_len, name bytes (UTF-8), u32 ndim, ndim x u64 dim }
//! count x payload of prod(dims) f64 values, in table order
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use super::{MicronetError, Tensor};

const MAGIC: &[u8; 8] = b"WSDETCKP";
const VERSION: u32 = 1;

type Result<T> = std::result::Result<T, MicronetError>;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Ordered, name-addressed weights. Models read them through [`Bound`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(MicronetError::ShapeMismatch(format!("{name}: {shape:?} vs {} values", data.len())));
        }
        let e = Entry { name: name.to_string(), shape: shape.to_vec(), data };
        match self.index.get(name) {
            Some(&i) => self.entries[i] = e,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(e);
            }
        }
        Ok(())
    }

    /// Uniform init in `±scale`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        self.insert(name, shape, data).expect("shape matches by construction");
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n]).expect("shape matches by construction");
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.index.get(name).map(|&i| (self.entries[i].shape.as_slice(), self.entries[i].data.as_slice()))
    }

    /// Sets every weight to `v`.
    pub fn fill(&mut self, v: f64) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Fresh leaf tensors for one forward pass; trainable leaves collect gradients.
    pub fn bind(&self, trainable: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let t = if trainable {
                    Tensor::param(&e.shape, e.data.clone())
                } else {
                    Tensor::new(&e.shape, e.data.clone())
                };
                (e.name.clone(), t.expect("stored weights are finite and shaped"))
            })
            .collect();
        Bound { tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(MicronetError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MicronetError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| MicronetError::Checkpoint("name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut store = ParamStore::new();
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(&name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(MicronetError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MicronetError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MicronetError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Leaf tensors bound from a [`ParamStore`] for one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<(String, Tensor)>,
}

impl Bound {
    /// Binds caller-made tensors, e.g. to difference a model's weights.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Self {
        Bound { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MicronetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Adam over a [`ParamStore`], reading gradients from the tensors of a [`Bound`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, t) in bound.iter() {
            let Some(g) = t.grad() else { continue };
            let Some(&i) = store.index.get(name) else { continue };
            let e = &mut store.entries[i];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                e.data[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}
