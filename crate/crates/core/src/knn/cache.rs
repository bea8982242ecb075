//! On-disk cache for random-projection forests.
//!
//! One file per (bundle, space, index parameters, input transform). All
//! integers little-endian:
//!
//! ```text
//! magic      b"DLIX"
//! version    u32   (currently 1)
//! key        CacheKey fields: fingerprint u32, space u32, rows u64, cols u64,
//!            trees u64, leaf_size u64, seed u64, transform u64
//! per tree:  node_count u64, then per node
//!              tag u8 = 0 split: cols x f32 normal, f32 offset, u32 left, u32 right
//!              tag u8 = 1 leaf:  u32 len, len x u32 row
//! ```
//!
//! The bundle fingerprint is the CRC-32 of its manifest, which in turn holds
//! every file's CRC-32, so any change to the bundle invalidates the cache.
//! A file whose header does not match the requested key is ignored.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::forest::{Forest, Node, Tree};

const MAGIC: &[u8; 4] = b"DLIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheKey {
    pub fingerprint: u32,
    pub space: u32,
    pub rows: u64,
    pub cols: u64,
    pub trees: u64,
    pub leaf_size: u64,
    pub seed: u64,
    /// Hash of any transform applied to the embeddings before indexing (PCA, z-scoring).
    pub transform: u64,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        format!(
            "{:08x}-s{}-t{}-m{}-seed{}-{:016x}.dlix",
            self.fingerprint, self.space, self.trees, self.leaf_size, self.seed, self.transform
        )
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }

    fn fields(&self) -> [u64; 8] {
        [self.fingerprint as u64, self.space as u64, self.rows, self.cols, self.trees, self.leaf_size, self.seed, self.transform]
    }
}

pub fn encode(forest: &Forest, key: &CacheKey) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&key.fingerprint.to_le_bytes());
    out.extend_from_slice(&key.space.to_le_bytes());
    for v in &key.fields()[2..] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for tree in &forest.trees {
        out.extend_from_slice(&(tree.nodes.len() as u64).to_le_bytes());
        for node in &tree.nodes {
            match node {
                Node::Split { normal, offset, left, right } => {
                    out.push(0);
                    for v in normal {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.extend_from_slice(&offset.to_le_bytes());
                    out.extend_from_slice(&left.to_le_bytes());
                    out.extend_from_slice(&right.to_le_bytes());
                }
                Node::Leaf(rows) => {
                    out.push(1);
                    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
                    for r in rows {
                        out.extend_from_slice(&r.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).ok()?;
        Some(buf)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }
    fn f32(&mut self) -> Option<f32> {
        self.take().map(f32::from_le_bytes)
    }
}

/// Decodes a cache file, returning `None` if it is malformed or was written for another key.
pub fn decode(bytes: &[u8], key: &CacheKey) -> Option<Forest> {
    let mut c = Cursor(bytes);
    if &c.take::<4>()? != MAGIC || c.u32()? != VERSION {
        return None;
    }
    let mut header = [0u64; 8];
    header[0] = c.u32()? as u64;
    header[1] = c.u32()? as u64;
    for h in &mut header[2..] {
        *h = c.u64()?;
    }
    if header != key.fields() {
        return None;
    }
    let cols = key.cols as usize;
    let rows = key.rows as usize;
    let mut trees = Vec::with_capacity(key.trees as usize);
    for _ in 0..key.trees {
        let n = c.u64()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            match c.u8()? {
                0 => {
                    let normal = (0..cols).map(|_| c.f32()).collect::<Option<Vec<_>>>()?;
                    let offset = c.f32()?;
                    let (left, right) = (c.u32()?, c.u32()?);
                    if left as usize >= n || right as usize >= n {
                        return None;
                    }
                    nodes.push(Node::Split { normal, offset, left, right });
                }
                1 => {
                    let len = c.u32()? as usize;
                    let leaf = (0..len).map(|_| c.u32()).collect::<Option<Vec<_>>>()?;
                    if leaf.iter().any(|&r| r as usize >= rows) {
                        return None;
                    }
                    nodes.push(Node::Leaf(leaf));
                }
                _ => return None,
            }
        }
        trees.push(Tree { nodes });
    }
    if !c.0.is_empty() {
        return None;
    }
    Some(Forest { rows, leaf_size: key.leaf_size as usize, trees })
}

pub fn load(dir: &Path, key: &CacheKey) -> Option<Forest> {
    let bytes = fs::read(key.path_in(dir)).ok()?;
    decode(&bytes, key)
}

/// Writes atomically through a temporary file in the same directory.
pub fn store(dir: &Path, key: &CacheKey, forest: &Forest) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = key.path_in(dir);
    let tmp = dir.join(format!(".{}.tmp{}", key.file_name(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(forest, key))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(rows: usize, cols: usize) -> CacheKey {
        CacheKey { fingerprint: 0xdeadbeef, space: 2, rows: rows as u64, cols: cols as u64, trees: 3, leaf_size: 4, seed: 9, transform: 0 }
    }

    #[test]
    fn round_trip_and_key_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = Matrix::new(60, 5, (0..300).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        let forest = Forest::build(&data, 3, 4, 9);
        let k = key(60, 5);
        let dir = tempfile::tempdir().unwrap();
        store(dir.path(), &k, &forest).unwrap();
        assert_eq!(load(dir.path(), &k), Some(forest.clone()));

        let stale = CacheKey { fingerprint: 1, ..k };
        assert_eq!(load(dir.path(), &stale), None);
        let bytes = encode(&forest, &k);
        assert_eq!(decode(&bytes, &CacheKey { seed: 10, ..k }), None);
        assert_eq!(decode(&bytes[..bytes.len() - 1], &k), None);
    }
}
