//! Self-describing binary container for resumable solver state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ELASTCKP"
//! version   u32
//! header    u32 length + UTF-8 `key=value` lines
//! arrays    u32 count, then per array:
//!           u32 length + UTF-8 name
//!           u8 length + dtype name ("f32" or "f64")
//!           u32 rank, u64 per dim
//!           raw little-endian elements
//! ```

use std::path::Path;

use super::record::{BestIterate, Manifest};
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::image_io::ImageGrid;
use crate::network::NamedTensor;
use crate::optimizer::AdamState;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ELASTCKP";
const VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Run description; informational apart from the keys the solver checks.
    pub header: Manifest,
    /// Number of completed update steps.
    pub iteration: u64,
    /// Network weights (deep-prior mode) or the pixel array (direct mode).
    pub state: Vec<NamedTensor<T>>,
    pub adam: Option<AdamState<T>>,
    pub best: Option<BestIterate>,
}

enum Array<T> {
    Native(String, Tensor<T>),
    Double(String, Tensor<f64>),
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.set("iteration", self.iteration);
        if let Some(adam) = &self.adam {
            header
                .set("adam.t", adam.t)
                .set("adam.beta1", adam.beta1)
                .set("adam.beta2", adam.beta2)
                .set("adam.epsilon", adam.epsilon);
        }
        if let Some(best) = &self.best {
            header.set("best.iteration", best.iteration).set("best.mae", best.mae);
        }

        let mut arrays: Vec<Array<T>> = Vec::new();
        for p in &self.state {
            arrays.push(Array::Native(format!("state/{}", p.name), p.value.clone()));
        }
        if let Some(adam) = &self.adam {
            for (k, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
                let flat = |d: &Vec<T>| Tensor::new(vec![d.len()], d.clone()).expect("flat");
                arrays.push(Array::Native(format!("adam.m/{k}"), flat(m)));
                arrays.push(Array::Native(format!("adam.v/{k}"), flat(v)));
            }
        }
        if let Some(best) = &self.best {
            let img = &best.image;
            let t = Tensor::new(vec![img.height(), img.width()], img.data().to_vec()).expect("image dims");
            arrays.push(Array::Double("best.image".into(), t));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str32(&mut out, &header.render());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            match a {
                Array::Native(name, t) => put_array(&mut out, name, t),
                Array::Double(name, t) => put_array(&mut out, name, t),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut header = Manifest::parse(&r.str32()?)?;
        let count = r.u32()?;
        let mut state = Vec::new();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        let mut best_image = None;
        for _ in 0..count {
            let name = r.str32()?;
            let dtype_len = r.take(1)?[0] as usize;
            let dtype = std::str::from_utf8(r.take(dtype_len)?)
                .map_err(|_| Error::Checkpoint("dtype is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            if name == "best.image" {
                let t = r.array::<f64>(&dtype, dims, numel)?;
                best_image = Some(t);
            } else if let Some(param) = name.strip_prefix("state/") {
                state.push(NamedTensor {
                    name: param.to_string(),
                    value: r.array::<T>(&dtype, dims, numel)?,
                });
            } else if name.starts_with("adam.m/") {
                ms.push(r.array::<T>(&dtype, dims, numel)?.into_data());
            } else if name.starts_with("adam.v/") {
                vs.push(r.array::<T>(&dtype, dims, numel)?.into_data());
            } else {
                return Err(Error::Checkpoint(format!("unknown array {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }

        let num = |h: &Manifest, key: &str| -> Result<Option<f64>> {
            h.get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
                })
                .transpose()
        };
        let int = |h: &Manifest, key: &str| -> Result<Option<u64>> {
            h.get(key)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
                })
                .transpose()
        };
        let iteration = int(&header, "iteration")?.ok_or_else(|| Error::Checkpoint("missing iteration".into()))?;
        let adam = match int(&header, "adam.t")? {
            Some(t) => {
                if ms.len() != vs.len() {
                    return Err(Error::Checkpoint("unpaired Adam moments".into()));
                }
                let missing = || Error::Checkpoint("incomplete Adam header".into());
                Some(AdamState {
                    beta1: num(&header, "adam.beta1")?.ok_or_else(missing)?,
                    beta2: num(&header, "adam.beta2")?.ok_or_else(missing)?,
                    epsilon: num(&header, "adam.epsilon")?.ok_or_else(missing)?,
                    t,
                    m: ms,
                    v: vs,
                })
            }
            None => None,
        };
        let best = match (int(&header, "best.iteration")?, num(&header, "best.mae")?, best_image) {
            (Some(iteration), Some(mae), Some(t)) => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                Some(BestIterate {
                    iteration,
                    mae,
                    image: ImageGrid::new(h, w, t.into_data())?,
                })
            }
            (None, None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete best iterate".into())),
        };
        for key in [
            "iteration",
            "adam.t",
            "adam.beta1",
            "adam.beta2",
            "adam.epsilon",
            "best.iteration",
            "best.mae",
        ] {
            header.remove(key);
        }
        Ok(Checkpoint {
            header,
            iteration,
            state,
            adam,
            best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was written by a run with the same mode
    /// and seed as `config`.
    pub fn ensure_matches(&self, config: &SolverConfig) -> Result<()> {
        let expected = config.manifest();
        for key in ["mode", "seed"] {
            if self.header.get(key) != expected.get(key) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {key} {:?} does not match the configured {:?}",
                    self.header.get(key),
                    expected.get(key)
                )));
            }
        }
        Ok(())
    }
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_array<U: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<U>) {
    put_str32(out, name);
    out.push(U::NAME.len() as u8);
    out.extend_from_slice(U::NAME.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn array<U: Scalar>(&mut self, dtype: &str, dims: Vec<usize>, numel: usize) -> Result<Tensor<U>> {
        if dtype != U::NAME {
            return Err(Error::Checkpoint(format!("expected {} data, found {dtype}", U::NAME)));
        }
        let size = std::mem::size_of::<U>();
        let raw = self.take(
            numel
                .checked_mul(size)
                .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
        )?;
        let data = raw.chunks_exact(size).map(U::read_le).collect();
        Tensor::new(dims, data)
    }
}
