//! `RCTN` tensor snapshot files.
//!
//! Layout (little-endian): magic `RCTN`, version `u32`, count `u32`, then per
//! entry: name length `u32`, UTF-8 name, rank `u32`, extents `u64 × rank`,
//! dtype tag `u8`, raw data. Tag 0 is `f32`; tag 1 is an opaque byte record
//! (rank 1), used for configuration headers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RCTN";
pub const SNAPSHOT_VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotItem {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub items: Vec<(String, SnapshotItem)>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.items.push((name.into(), SnapshotItem::F32(t)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.items.push((name.into(), SnapshotItem::Bytes(bytes)));
    }

    pub fn get(&self, name: &str) -> Option<&SnapshotItem> {
        self.items
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, item)| item)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name) {
            Some(SnapshotItem::F32(t)) => Some(t),
            _ => None,
        }
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        match self.get(name) {
            Some(SnapshotItem::Bytes(b)) => Some(b),
            _ => None,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.items.len() as u32).to_le_bytes())?;
        for (name, item) in &self.items {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match item {
                SnapshotItem::F32(t) => {
                    w.write_all(&(t.rank() as u32).to_le_bytes())?;
                    for &e in t.shape() {
                        w.write_all(&(e as u64).to_le_bytes())?;
                    }
                    w.write_all(&[TAG_F32])?;
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                SnapshotItem::Bytes(b) => {
                    w.write_all(&1u32.to_le_bytes())?;
                    w.write_all(&(b.len() as u64).to_le_bytes())?;
                    w.write_all(&[TAG_BYTES])?;
                    w.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Malformed("not an RCTN snapshot (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Unsupported(format!("RCTN version {version}")));
        }
        let count = read_u32(r)?;
        let mut items = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Malformed(format!(
                    "`{name}` has implausible rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(
                    usize::try_from(u64::from_le_bytes(b)).map_err(|_| {
                        Error::Malformed(format!("`{name}` extent overflows usize"))
                    })?,
                );
            }
            let mut tag = [0u8; 1];
            read_exact(r, &mut tag)?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Malformed(format!("`{name}` extents overflow")))?;
            let item = match tag[0] {
                TAG_F32 => {
                    let mut raw = vec![0u8; numel * 4];
                    read_exact(r, &mut raw)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    SnapshotItem::F32(Tensor::new(shape, data)?)
                }
                TAG_BYTES => {
                    let mut raw = vec![0u8; numel];
                    read_exact(r, &mut raw)?;
                    SnapshotItem::Bytes(raw)
                }
                t => return Err(Error::Unsupported(format!("dtype tag {t} for `{name}`"))),
            };
            items.push((name, item));
        }
        Ok(Snapshot { items })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Malformed("truncated RCTN snapshot".into()),
        _ => Error::Malformed(format!("reading RCTN snapshot: {e}")),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
