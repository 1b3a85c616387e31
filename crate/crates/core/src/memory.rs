//! Per-subclass feature memory.
//!
//! One store per global subclass, each keyed by scene id. A scene's slot holds
//! at most `per_scene_cap` features; pushing the same scene again replaces its
//! slot. Stored features are plain constants: nothing downstream
//! differentiates through them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_PER_SCENE_CAP: usize = 10;

pub const MEMORY_MAGIC: &[u8; 4] = b"MBNK";
pub const MEMORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    subclass_count: usize,
    dim: usize,
    per_scene_cap: usize,
    /// Indexed by global subclass id; each slot's rows stored flat.
    stores: Vec<BTreeMap<u32, Vec<f64>>>,
    rng: ChaCha8Rng,
}

impl MemoryBank {
    /// A cap of zero disables the bank entirely (every push is dropped).
    pub fn new(subclass_count: usize, dim: usize, per_scene_cap: usize, seed: u64) -> Self {
        MemoryBank {
            subclass_count,
            dim,
            per_scene_cap,
            stores: vec![BTreeMap::new(); subclass_count],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn subclass_count(&self) -> usize {
        self.subclass_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_scene_cap(&self) -> usize {
        self.per_scene_cap
    }

    /// Total stored feature rows.
    pub fn len(&self) -> usize {
        self.stores
            .iter()
            .flat_map(|s| s.values())
            .map(|v| v.len() / self.dim.max(1))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot_len(&self, subclass: usize, scene: u32) -> usize {
        self.stores
            .get(subclass)
            .and_then(|s| s.get(&scene))
            .map_or(0, |v| v.len() / self.dim.max(1))
    }

    fn check_subclass(&self, subclass: usize) -> Result<()> {
        if subclass >= self.subclass_count {
            return Err(Error::invalid(format!(
                "subclass id {subclass} out of range for {} subclasses",
                self.subclass_count
            )));
        }
        Ok(())
    }

    /// Stores up to `per_scene_cap` of `features` (a uniform seeded sample
    /// when more are offered, kept in their original order) as the slot for
    /// `(subclass, scene)`. Returns the number of rows retained.
    pub fn push(&mut self, scene: u32, subclass: usize, features: &Matrix) -> Result<usize> {
        self.check_subclass(subclass)?;
        if features.rows() > 0 && features.cols() != self.dim {
            return Err(Error::invalid(format!(
                "feature dim {} does not match bank dim {}",
                features.cols(),
                self.dim
            )));
        }
        if self.per_scene_cap == 0 {
            return Ok(0);
        }
        let n = features.rows();
        let picked: Vec<usize> = if n <= self.per_scene_cap {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut self.rng, n, self.per_scene_cap).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut flat = Vec::with_capacity(picked.len() * self.dim);
        for &i in &picked {
            flat.extend_from_slice(features.row(i));
        }
        self.stores[subclass].insert(scene, flat);
        Ok(picked.len())
    }

    /// Every stored row of one subclass, scene id ascending.
    pub fn gather(&self, subclass: usize) -> Result<Matrix> {
        self.check_subclass(subclass)?;
        let data: Vec<f64> = self.stores[subclass].values().flatten().copied().collect();
        Matrix::from_vec(data.len() / self.dim.max(1), self.dim, data)
    }

    /// All stored rows with their subclass ids, subclass-major.
    pub fn gather_all(&self) -> (Matrix, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (g, store) in self.stores.iter().enumerate() {
            for rows in store.values() {
                data.extend_from_slice(rows);
                labels.extend(std::iter::repeat_n(g, rows.len() / self.dim.max(1)));
            }
        }
        let n = labels.len();
        (Matrix::from_vec(n, self.dim, data).expect("consistent bank rows"), labels)
    }

    /// Binary snapshot: `MBNK`, version, subclass count, per-scene cap, dim,
    /// slot count (all `u32` LE); then one `(subclass, scene, count)` record
    /// per slot; then the slot rows as `f64` LE in record order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(MEMORY_MAGIC);
        let slots: Vec<(usize, u32, &Vec<f64>)> = self
            .stores
            .iter()
            .enumerate()
            .flat_map(|(g, s)| s.iter().map(move |(&scene, rows)| (g, scene, rows)))
            .collect();
        for v in [
            MEMORY_VERSION,
            self.subclass_count as u32,
            self.per_scene_cap as u32,
            self.dim as u32,
            slots.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (g, scene, rows) in &slots {
            for v in [*g as u32, *scene, (rows.len() / self.dim.max(1)) as u32] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, _, rows) in &slots {
            for v in rows.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Restores a snapshot. The sampling stream restarts from `seed`.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.display().to_string(),
            message,
        };
        if bytes.len() < 24 || &bytes[..4] != MEMORY_MAGIC {
            return Err(bad("not a memory bank snapshot (bad magic)".into()));
        }
        let u32_at = |o: usize| -> Result<u32> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated snapshot".into()))
        };
        if u32_at(4)? != MEMORY_VERSION {
            return Err(bad(format!("unsupported version {}", u32_at(4)?)));
        }
        let subclass_count = u32_at(8)? as usize;
        let cap = u32_at(12)? as usize;
        let dim = u32_at(16)? as usize;
        let slot_count = u32_at(20)? as usize;
        let mut bank = MemoryBank::new(subclass_count, dim, cap, seed);
        let mut offset = 24 + slot_count * 12;
        for s in 0..slot_count {
            let base = 24 + s * 12;
            let g = u32_at(base)? as usize;
            let scene = u32_at(base + 4)?;
            let count = u32_at(base + 8)? as usize;
            if g >= subclass_count || count > cap {
                return Err(bad(format!("slot record {s} out of range")));
            }
            let len = count * dim * 8;
            let raw = bytes
                .get(offset..offset + len)
                .ok_or_else(|| bad("truncated snapshot".into()))?;
            offset += len;
            let rows = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bank.stores[g].insert(scene, rows);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after snapshot payload".into()));
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(n: usize, d: usize, base: f64) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|i| base + i as f64).collect()).unwrap()
    }

    #[test]
    fn push_examples() {
        let mut bank = MemoryBank::new(4, 2, 10, 0);
        assert_eq!(bank.push(0, 1, &rows(3, 2, 0.0)).unwrap(), 3);
        assert_eq!(bank.slot_len(1, 0), 3);
        assert_eq!(bank.push(1, 1, &rows(25, 2, 0.0)).unwrap(), 10);
        assert_eq!(bank.slot_len(1, 1), 10);

        bank.push(0, 2, &rows(4, 2, 100.0)).unwrap();
        bank.push(0, 2, &rows(2, 2, 500.0)).unwrap();
        assert_eq!(bank.gather(2).unwrap(), rows(2, 2, 500.0));

        assert!(matches!(bank.push(0, 4, &rows(1, 2, 0.0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gather_examples() {
        let mut bank = MemoryBank::new(3, 2, 10, 0);
        assert_eq!(bank.gather(0).unwrap().rows(), 0);
        bank.push(7, 0, &rows(10, 2, 1000.0)).unwrap();
        bank.push(3, 0, &rows(10, 2, 0.0)).unwrap();
        let all = bank.gather(0).unwrap();
        assert_eq!(all.rows(), 20);
        // Scene 3 precedes scene 7.
        assert_eq!(all.row(0), &[0.0, 1.0]);
        assert_eq!(all.row(10), &[1000.0, 1001.0]);
        assert_eq!(bank.gather(1).unwrap().rows(), 0);
        assert!(bank.gather(3).is_err());
    }

    #[test]
    fn sampling_keeps_original_order() {
        let mut bank = MemoryBank::new(1, 1, 5, 3);
        bank.push(0, 0, &rows(50, 1, 0.0)).unwrap();
        let g = bank.gather(0).unwrap();
        let v = g.as_slice();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_cap_disables() {
        let mut bank = MemoryBank::new(2, 2, 0, 0);
        assert_eq!(bank.push(0, 0, &rows(5, 2, 0.0)).unwrap(), 0);
        assert!(bank.is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.mbnk");
        let mut bank = MemoryBank::new(3, 2, 4, 9);
        bank.push(1, 0, &rows(3, 2, 0.0)).unwrap();
        bank.push(2, 2, &rows(9, 2, 50.0)).unwrap();
        bank.save(&path).unwrap();
        let back = MemoryBank::load(&path, 9).unwrap();
        assert_eq!(back.gather_all(), bank.gather_all());
        assert_eq!(&fs::read(&path).unwrap()[..4], b"MBNK");
    }

    proptest! {
        #[test]
        fn capacity_and_isolation(pushes in prop::collection::vec((0u32..4, 0usize..3, 0usize..30), 1..40), cap in 0usize..8) {
            let mut bank = MemoryBank::new(3, 2, cap, 1);
            let mut twin = MemoryBank::new(3, 2, cap, 1);
            for (i, &(scene, g, n)) in pushes.iter().enumerate() {
                // Encode the subclass into the values so leakage is detectable.
                let m = Matrix::filled(n, 2, (g * 1000 + i) as f64);
                bank.push(scene, g, &m).unwrap();
                twin.push(scene, g, &m).unwrap();
                prop_assert!(bank.slot_len(g, scene) <= cap);
            }
            prop_assert!(bank.len() <= 3 * 4 * cap);
            for g in 0..3 {
                let rows = bank.gather(g).unwrap();
                for v in rows.as_slice() {
                    prop_assert_eq!((*v as usize) / 1000, g);
                }
            }
            prop_assert_eq!(bank, twin);
        }
    }
}
