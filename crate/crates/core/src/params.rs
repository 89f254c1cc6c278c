//! Named parameter arrays and the checkpoint file format.
//!
//! Checkpoint layout (little-endian): magic `VCGMCKPT`, `u32` version,
//! `u32` metadata length followed by that many bytes of JSON, `u32` array
//! count, then per array: `u32` name length, UTF-8 name, `u64` rows,
//! `u64` cols, `rows * cols` `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCGMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn slot(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Slot of `name`, checking it has the expected shape.
    pub fn require(&self, name: &str, shape: (usize, usize)) -> Result<usize> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
        if self.tensors[i].shape() != shape {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                self.tensors[i].shape()
            )));
        }
        Ok(i)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Records every tensor as a leaf on `tape`, in slot order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Gradients for each slot, zeros for slots the loss did not touch.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for (n, t) in other.names.iter().zip(&other.tensors) {
            self.push(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.names.push(rest.to_string());
                out.tensors.push(t.clone());
            }
        }
        out
    }
}

/// Index pair of a dense layer's weight (`in x out`) and bias (`1 x out`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Adds a uniformly initialized layer with bound `1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
        let w = store.push(format!("{name}.w"), w)?;
        let b = store.push(format!("{name}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// Looks up an existing layer by name and shape.
    pub fn find(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.require(&format!("{name}.w"), (fan_in, fan_out))?,
            b: store.require(&format!("{name}.b"), (1, fan_out))?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.w])?;
        tape.add_row(h, vars[self.b])
    }
}

/// A checkpoint: JSON metadata plus named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(32 + meta.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("array size overflow".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(name, Tensor::new(rows, cols, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, params })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::init(&mut s, "l0", 3, 4, &mut rng).unwrap();
        s.push("extra", Tensor::scalar(-2.5)).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            meta: serde_json::json!({"kind": "test", "step": 7}),
            params: store(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        ck.write_atomic(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), ck);
        assert!(!dir.path().join("c.bin.tmp").exists());
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            params: store(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn lookup_and_prefixes() {
        let s = store();
        assert_eq!(s.names(), &["l0.w", "l0.b", "extra"]);
        assert!(s.require("l0.w", (3, 4)).is_ok());
        assert!(matches!(s.require("l0.w", (4, 3)), Err(Error::Shape(_))));
        assert!(s.require("nope", (1, 1)).is_err());
        let mut both = ParamStore::new();
        both.extend_prefixed("g.", &s).unwrap();
        assert_eq!(both.strip_prefix("g."), s);
        assert!(both.push("g.extra", Tensor::scalar(0.0)).is_err());
    }
}
