use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::exec::padded_dims;
use crate::model::{Model, ParamSlot, ParamTable};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPFW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::from_vec(padded_dims(&self.shape)?, self.data.clone())
    }
}

/// Ordered collection of uniquely named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate tensor name '{name}'")));
        }
        if shape.is_empty() || shape.len() > u8::MAX as usize || shape.contains(&0) {
            return Err(Error::Argument(format!(
                "'{name}': invalid shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "'{name}': shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Result<()> {
        if self.index.contains_key(to) {
            return Err(Error::Argument(format!("duplicate tensor name '{to}'")));
        }
        let i = self
            .index
            .remove(from)
            .ok_or_else(|| Error::Argument(format!("no tensor named '{from}'")))?;
        self.entries[i].name = to.to_string();
        self.index.insert(to.to_string(), i);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<NamedTensor> {
        let i = self.index.remove(name)?;
        let e = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(e)
    }

    /// Store holding `table`'s tensors for `slots`, in slot order.
    pub fn from_table(slots: &[ParamSlot], table: &ParamTable<f32>) -> Result<Self> {
        let mut store = Self::new();
        for s in slots {
            store.insert(
                s.name.clone(),
                s.shape.clone(),
                table.get(&s.name)?.data().to_vec(),
            )?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 2 + 4 * (e.shape.len() + e.data.len()))
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected TPFW".into(),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return r.fail(at, format!("unsupported version {version}"));
        }
        let count = r.u32("record count")?;
        let mut store = Self::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64 + 2,
                    detail: "name is not valid UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return r.fail(dtype_at, format!("unsupported dtype {dtype} for '{name}'"));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, shape, data).map_err(|e| Error::Format {
                offset: at as u64,
                detail: e.to_string(),
            })?;
        }
        if r.pos != bytes.len() {
            return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn fail<T>(&self, offset: usize, detail: String) -> Result<T> {
        Err(Error::Format {
            offset: offset as u64,
            detail,
        })
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}

/// Seeded Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases,
/// identity batch norm.
pub fn random_init(model: &Model, seed: u64) -> Result<WeightStore> {
    let slots = model.param_slots();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightStore::from_table(&slots, &ParamTable::kaiming(&slots, &mut rng)?)
}
