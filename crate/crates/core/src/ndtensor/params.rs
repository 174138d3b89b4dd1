//! Named parameter sets and their flat binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LMPARAM1"
//! count    u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 bit patterns, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::collections::HashMap;

use super::{Tape, Tensor, TensorError, Var};

pub const PARAM_MAGIC: &[u8; 8] = b"LMPARAM1";
const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

/// Ordered `(name, tensor)` list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Format(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every entry of `other` whose name matches, replacing values here.
    pub fn merge_from(&mut self, other: &ParamSet) -> Result<(), TensorError> {
        for (name, t) in other.iter() {
            match self.get_mut(name) {
                Some(dst) if dst.shape() == t.shape() => *dst = t.clone(),
                Some(dst) => {
                    return Err(TensorError::Format(format!(
                        "parameter '{name}' has shape {:?}, source has {:?}",
                        dst.shape(),
                        t.shape()
                    )))
                }
                None => self.insert(name, t.clone())?,
            }
        }
        Ok(())
    }

    /// Places every parameter on `tape`; those for which `trainable` is
    /// false become constants.
    pub fn bind_with<'a>(&'a self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams<'a> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { set: self, vars }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        self.bind_with(tape, |_| true)
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        self.bind_with(tape, |_| false)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * 8);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    /// Parses the format written by [`ParamSet::to_bytes`]. Trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let set = Self::read(&mut r)?;
        if r.pos != bytes.len() {
            return Err(TensorError::Format(format!(
                "{} trailing bytes after parameter block",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, TensorError> {
        if r.take(8)? != PARAM_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME {
                return Err(TensorError::Format(format!("name length {name_len} too large")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(TensorError::Format(format!("'{name}': bad rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| TensorError::Format(format!("'{name}': extent overflow")))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| TensorError::Format(format!("'{name}': size overflow")))?;
                shape.push(d);
            }
            let nbytes = n
                .checked_mul(8)
                .ok_or_else(|| TensorError::Format(format!("'{name}': size overflow")))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(format!("'{name}': {e}")))?;
            set.insert(name, t)?;
        }
        Ok(set)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// Tape handle of a parameter.
    ///
    /// Panics if the name is absent; model constructors validate names up front.
    pub fn var(&self, name: &str) -> Var {
        match self.set.position(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter '{name}' is not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn set(&self) -> &ParamSet {
        self.set
    }
}
