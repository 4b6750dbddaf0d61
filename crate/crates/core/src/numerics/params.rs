use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Grid, Tape, Var};
use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"PNPW";
const VERSION: u32 = 1;

/// Named trainable grids, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Grid>,
}

/// Tape handles for every entry of a [`ParamSet`] bound to one tape.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| shape_err!("parameter '{name}' is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut grid: Grid) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(shape_err!("duplicate parameter name '{name}'"));
        }
        grid.set_requires_grad(true);
        self.entries.insert(name, grid);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Grid)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(Grid::len).sum()
    }

    /// Records every entry on `tape`, as tracked leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, g)| {
                let mut value = g.clone();
                value.set_requires_grad(false);
                let v = if trainable {
                    tape.leaf(value)
                } else {
                    tape.constant(value)
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds the tape's gradients for `vars` into each entry's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamVars) {
        for (name, var) in vars.iter() {
            let (Some(grid), Some(g)) = (self.entries.get_mut(name), tape.grad(var)) else {
                continue;
            };
            if let Some(acc) = grid.grad_mut() {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Grid::zero_grad);
    }

    /// FNV-1a over names, shapes and value bits; equal sets hash equal.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, g) in &self.entries {
            eat(name.as_bytes());
            for e in g.shape() {
                eat(&(*e as u64).to_le_bytes());
            }
            for v in g.values() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, g) in &self.entries {
            let bytes = name.as_bytes();
            let len =
                u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[g.rank() as u8])?;
            for e in g.shape() {
                w.write_all(&(*e as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(g.len() * 4);
            for v in g.values() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                "PNPW"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = read_u32(r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(truncated)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(truncated)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let grid = Grid::new(&shape, values).map_err(|e| Error::Format(e.to_string()))?;
            set.insert(name, grid).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Rounds every value to the nearest 32-bit float, the precision kept on disk.
    pub fn quantize_f32(&mut self) {
        for g in self.entries.values_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", Grid::new(&[2], vec![0.5, -1.25]).unwrap()).unwrap();
        p.insert("a.w", Grid::from_fn(&[3, 3, 1, 2], |i| i as f64 / 7.0))
            .unwrap();
        p
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = sample();
        let mut first = Vec::new();
        p.write_to(&mut first).unwrap();
        let back = ParamSet::read_from(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_to(&mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(&first[..4], b"PNPW");
        assert_eq!(back.get("a.w").unwrap().shape(), &[3, 3, 1, 2]);
        assert!(back.get("b").unwrap().requires_grad());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamSet::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            ParamSet::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(ParamSet::read_from(&mut &cut[..]), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("b", Grid::zeros(&[2])).is_err());
    }
}
