use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TTTE2EPB";
const VERSION: u32 = 1;

/// Storage precision of a parameter blob. Computation is always `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

/// Named model parameters split into slow (outer-loop) and fast
/// (inner-loop) subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    fast: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            fast: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, fast: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        self.fast.push(fast);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn set(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {}: shape {:?} does not match {:?}",
                self.names[i],
                value.shape(),
                self.values[i].shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn is_fast(&self, i: usize) -> bool {
        self.fast[i]
    }

    pub fn fast_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fast[i]).collect()
    }

    pub fn slow_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.fast[i]).collect()
    }

    pub fn fast_names(&self) -> Vec<&str> {
        self.fast_indices()
            .into_iter()
            .map(|i| self.name(i))
            .collect()
    }

    pub fn slow_names(&self) -> Vec<&str> {
        self.slow_indices()
            .into_iter()
            .map(|i| self.name(i))
            .collect()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn fast_count(&self) -> usize {
        self.fast_indices()
            .iter()
            .map(|&i| self.values[i].len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.fast)
            .map(|((n, v), &f)| (n.as_str(), v, f))
    }

    /// Places every parameter on `tape`; entries selected by `grad` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, grad: impl Fn(usize, bool) -> bool) -> Vec<Var<'t>> {
        (0..self.len())
            .map(|i| {
                let t = &self.values[i];
                tape.shared_leaf(t.shape().to_vec(), t.shared_data(), grad(i, self.fast[i]))
            })
            .collect()
    }

    /// Largest absolute elementwise difference over all entries.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    // ---- binary blob -----------------------------------------------------

    /// Little-endian blob: magic, version, dtype, entry count, then per entry
    /// name, fast flag, rank and dims, followed by all data in entry order.
    pub fn write_blob(&self, w: &mut impl Write, dtype: Dtype) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match dtype {
            Dtype::F64 => 0u8,
            Dtype::F32 => 1u8,
        }])?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t, fast) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[fast as u8, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for (_, t, _) in self.iter() {
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => w.write_all(&v.to_le_bytes())?,
                    Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated blob: {e}")))?;
            Ok(b)
        }
        if &take::<8>(r)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = match take::<1>(r)?[0] {
            0 => Dtype::F64,
            1 => Dtype::F32,
            d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
        };
        let n = u32::from_le_bytes(take(r)?) as usize;
        let mut header = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(take(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Format("non-utf8 name".into()))?;
            let [fast, rank] = take::<2>(r)?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(r)?) as usize);
            }
            header.push((name, fast != 0, shape));
        }
        let mut set = ParamSet::new();
        for (name, fast, shape) in header {
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(match dtype {
                    Dtype::F64 => f64::from_le_bytes(take(r)?),
                    Dtype::F32 => f32::from_le_bytes(take(r)?) as f64,
                });
            }
            set.push(name, Tensor::new(&shape, data)?, fast)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_blob(&mut f, dtype)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_blob(&mut f)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push(
            "embed",
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-300, 5.0, -7.25]).unwrap(),
            false,
        )
        .unwrap();
        p.push("block0.mlp.w_up", Tensor::from_vec(vec![1.0, 2.0]), true)
            .unwrap();
        p
    }

    #[test]
    fn blob_roundtrip_f64_is_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_blob(&mut buf, Dtype::F64).unwrap();
        let q = ParamSet::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.fast_names(), vec!["block0.mlp.w_up"]);
    }

    #[test]
    fn blob_f32_is_close() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_blob(&mut buf, Dtype::F32).unwrap();
        let q = ParamSet::read_blob(&mut buf.as_slice()).unwrap();
        assert!(p.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_blob(&mut buf, Dtype::F64).unwrap();
        assert!(ParamSet::read_blob(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamSet::read_blob(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.push("embed", Tensor::scalar(1.0), false).is_err());
    }
}
