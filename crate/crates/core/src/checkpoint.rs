//! Binary checkpoint records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RLCT" | version u32 | record count u32
//! per record: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | payload f32 * numel
//! ```
//!
//! Payloads are 32-bit, so values are rounded to f32 when a record is added.
//! A checkpoint read back from bytes compares equal to the one written.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{u64_from_chunks, u64_to_chunks};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLCT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    records: Vec<(String, Tensor)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            records: Vec::new(),
        }
    }
}

fn round_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    if t.rank() == 0 {
        Tensor::scalar(t.item() as f32 as f64)
    } else {
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a record; values are rounded to f32.
    pub fn insert(&mut self, name: &str, tensor: &Tensor) {
        let t = round_f32(tensor);
        match self.records.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.records.push((name.to_string(), t)),
        }
    }

    pub fn insert_values(&mut self, name: &str, values: &[f64]) {
        self.insert(name, &Tensor::vector(values.to_vec()));
    }

    /// Stores integers exactly as four 16-bit chunks each.
    pub fn insert_u64s(&mut self, name: &str, values: &[u64]) {
        let chunks: Vec<f64> = values.iter().flat_map(|&v| u64_to_chunks(v)).collect();
        self.insert_values(name, &chunks);
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let t = self.require(name)?;
        if t.numel() % 4 != 0 {
            return Err(Error::Format(format!("record {name} is not a u64 list")));
        }
        t.data()
            .chunks(4)
            .map(|c| u64_from_chunks(c).ok_or_else(|| Error::Format(format!("record {name} is not a u64 list"))))
            .collect()
    }

    /// Stores reals bit-exactly (no f32 rounding).
    pub fn insert_f64s(&mut self, name: &str, values: &[f64]) {
        let bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        self.insert_u64s(name, &bits);
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_u64s(name)?.into_iter().map(f64::from_bits).collect())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record {name}")))
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.records.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores every parameter under `prefix + name`.
    pub fn add_params(&mut self, store: &ParamStore, prefix: &str) {
        for (name, t) in store.iter() {
            self.insert(&format!("{prefix}{name}"), t);
        }
    }

    /// Copies records into the parameters of `store` whose names start with
    /// `prefix`; other parameters are left alone.
    pub fn load_params_matching(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with(prefix))
            .collect();
        for name in &names {
            store.set_data(name, self.require(name)?)?;
        }
        Ok(names.len())
    }

    /// Copies `prefix + name` records into matching parameters of `store`.
    /// Every parameter must be present.
    pub fn load_params(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let rec = self.require(&format!("{prefix}{name}"))?;
            store.set_data(&name, rec)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("record name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing RLCT magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("record name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = if rank == 0 {
                Tensor::scalar(data[0])
            } else {
                Tensor::new(shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?
            };
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { version, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert("a", &Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap());
        c.insert("step", &Tensor::scalar(7.0));
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"RLCT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        // name length, name, rank, two dims, two payload floats
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'a');
        assert_eq!(b[15], 2);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut c = Checkpoint::new();
        c.insert("x", &Tensor::vector(vec![1.0]));
        let mut b = c.to_bytes().unwrap();
        b.pop();
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            recs in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                1..6,
            )
        ) {
            let mut c = Checkpoint::new();
            for (i, (name, shape, seed)) in recs.iter().enumerate() {
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = (0..numel)
                    .map(|k| ((seed.wrapping_mul(2654435761).wrapping_add(k as u32 * 97)) as f64).sin() * 1e3)
                    .collect();
                let t = if shape.is_empty() { Tensor::scalar(data[0]) } else { Tensor::new(shape.clone(), data).unwrap() };
                c.insert(&format!("{name}{i}"), &t);
            }
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
