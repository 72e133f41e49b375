//! Snapshot persistence: one binary file per run.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MPSNAP01"
//! 8       4     M   (u32, bins per snapshot)
//! 12      4     K   (u32, time steps)
//! 16      4     J   (u32, PAs)
//! 20      4     reserved (zero)
//! 24      8     run seed (u64)
//! 32      8     delta_hz (f64)
//! 40      8     bandwidth_hz (f64)
//! 48      …     K·J·M complex values as (re f64, im f64), k-major then j, m
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64 as C64;

use super::{SignalError, Snapshot};

const MAGIC: &[u8; 8] = b"MPSNAP01";

/// Metadata block of a snapshot file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotFileMeta {
    pub m: usize,
    pub k_steps: usize,
    pub j_pas: usize,
    pub seed: u64,
    pub delta_hz: f64,
    pub bandwidth_hz: f64,
}

/// All snapshots of one run, k-major.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub meta: SnapshotFileMeta,
    data: Vec<C64>,
}

impl SnapshotSet {
    pub fn new(meta: SnapshotFileMeta) -> Self {
        let len = meta.k_steps * meta.j_pas * meta.m;
        Self {
            meta,
            data: vec![C64::new(0.0, 0.0); len],
        }
    }

    fn offset(&self, k: usize, j: usize) -> usize {
        debug_assert!(k < self.meta.k_steps && j < self.meta.j_pas);
        (k * self.meta.j_pas + j) * self.meta.m
    }

    pub fn set(&mut self, k: usize, j: usize, z: &[C64]) {
        let o = self.offset(k, j);
        self.data[o..o + self.meta.m].copy_from_slice(z);
    }

    pub fn bins(&self, k: usize, j: usize) -> &[C64] {
        let o = self.offset(k, j);
        &self.data[o..o + self.meta.m]
    }

    /// Snapshot view for step `k`, PA `j` (copies the M bins).
    pub fn snapshot(&self, k: usize, j: usize) -> Snapshot {
        Snapshot {
            z: self.bins(k, j).to_vec(),
            pa_index: j,
            step: k,
        }
    }
}

fn file_err(path: &Path, msg: impl Into<String>) -> SignalError {
    SignalError::SnapshotFile {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SignalError {
    SignalError::SnapshotIo {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a snapshot set to `path` (layout above).
pub fn write_snapshots(path: impl AsRef<Path>, set: &SnapshotSet) -> Result<(), SignalError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let meta = &set.meta;
    let put = |w: &mut BufWriter<std::fs::File>, b: &[u8]| {
        w.write_all(b).map_err(|e| io_err(path, e))
    };
    put(&mut w, MAGIC)?;
    put(&mut w, &(meta.m as u32).to_le_bytes())?;
    put(&mut w, &(meta.k_steps as u32).to_le_bytes())?;
    put(&mut w, &(meta.j_pas as u32).to_le_bytes())?;
    put(&mut w, &0u32.to_le_bytes())?;
    put(&mut w, &meta.seed.to_le_bytes())?;
    put(&mut w, &meta.delta_hz.to_le_bytes())?;
    put(&mut w, &meta.bandwidth_hz.to_le_bytes())?;
    for z in &set.data {
        put(&mut w, &z.re.to_le_bytes())?;
        put(&mut w, &z.im.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a snapshot set, validating magic, counts and payload length.
pub fn read_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet, SignalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(file_err(path, "bad magic (not a snapshot file)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32, SignalError> {
        r.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let m = read_u32(&mut r)? as usize;
    let k_steps = read_u32(&mut r)? as usize;
    let j_pas = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
    let seed = u64::from_le_bytes(u64buf);
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<std::fs::File>| -> Result<f64, SignalError> {
        r.read_exact(&mut f64buf).map_err(|e| io_err(path, e))?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let delta_hz = read_f64(&mut r)?;
    let bandwidth_hz = read_f64(&mut r)?;

    if m == 0 || k_steps == 0 || j_pas == 0 {
        return Err(file_err(path, format!("empty dimensions M={m} K={k_steps} J={j_pas}")));
    }
    let count = m
        .checked_mul(k_steps)
        .and_then(|v| v.checked_mul(j_pas))
        .ok_or_else(|| file_err(path, "dimension overflow"))?;

    let mut data = Vec::with_capacity(count);
    let mut pair = [0u8; 16];
    for _ in 0..count {
        r.read_exact(&mut pair)
            .map_err(|_| file_err(path, "truncated payload"))?;
        let re = f64::from_le_bytes(pair[0..8].try_into().unwrap());
        let im = f64::from_le_bytes(pair[8..16].try_into().unwrap());
        if !re.is_finite() || !im.is_finite() {
            return Err(file_err(path, "non-finite sample in payload"));
        }
        data.push(C64::new(re, im));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| io_err(path, e))? != 0 {
        return Err(file_err(path, "trailing bytes after payload"));
    }

    Ok(SnapshotSet {
        meta: SnapshotFileMeta {
            m,
            k_steps,
            j_pas,
            seed,
            delta_hz,
            bandwidth_hz,
        },
        data,
    })
}
