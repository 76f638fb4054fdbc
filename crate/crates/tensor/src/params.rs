//! Named parameter collections and the checkpoint file format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic   b"SVBRDFCK"
//! u32     format version (1)
//! u32     entry count
//! entry*  u32 name length, UTF-8 name, u32 rank, rank x u64 dims
//! payload f32 values of every entry, in entry order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SVBRDFCK";
const VERSION: u32 = 1;

/// Standard deviation of the normal initializer for convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Normal(0, `std`) initialized tensor.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace values with those of `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Checkpoint(format!(
                "parameter names differ: expected {} entries, got {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for ((dst, src), name) in self.tensors.iter_mut().zip(&other.tensors).zip(&self.names) {
            if dst.shape() != src.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Graph leaves of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every bound parameter, zero where unreachable.
    pub fn grads<T: Element>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl ParamSet<f32> {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        fn u32_of(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = u32_of(&mut r)?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32_of(&mut r)? as usize;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = u32_of(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            header.push((name, shape));
        }
        let mut set = ParamSet::new();
        for (name, shape) in header {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.add(name, Tensor::new(&shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorError::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_set() -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::new();
        set.add_normal("conv.weight", &[4, 3, 3, 3], INIT_STD, &mut rng);
        set.add("conv.bias", Tensor::zeros(&[4]));
        set.add("odd", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        set
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let set = sample_set();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = ParamSet::read_from(&buf[..]).unwrap();
        assert_eq!(back.names(), set.names());
        for (a, b) in back.tensors().iter().zip(set.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamSet::read_from(&buf[..]).is_err());
        assert!(ParamSet::read_from(&b"NOTACKPT0000"[..]).is_err());
    }

    #[test]
    fn init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = ParamSet::<f64>::new();
        let id = set.add_normal("w", &[64, 64, 3, 3], INIT_STD, &mut rng);
        let d = set.get(id).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }
}
