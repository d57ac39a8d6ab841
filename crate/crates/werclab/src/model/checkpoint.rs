//! Self-describing checkpoint container.
//!
//! Layout: a text manifest listing every tensor (name, shape, dtype,
//! byte offset, value count), then a `blob` marker and the raw
//! little-endian values. Round-trips are bitwise.
//!
//! ```text
//! werclab-checkpoint v1
//! dtype f32
//! tensor dec.0.cross.wq 64x64 0 4096
//! ...
//! blob 1419264
//! <raw bytes>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

const MAGIC: &str = "werclab-checkpoint v1";

pub fn save_checkpoint<F: Real>(path: &Path, params: &ModelParams<F>) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("dtype {}\n", F::DTYPE.name()));

    let width = F::DTYPE.width();
    let mut blob: Vec<u8> = Vec::with_capacity(params.value_count() * width);
    for (name, tensor) in params.iter() {
        let offset = blob.len();
        for &v in tensor.data() {
            v.write_le(&mut blob);
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {offset} {}\n",
            dims.join("x"),
            tensor.len()
        ));
    }
    manifest.push_str(&format!("blob {}\n", blob.len()));

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(manifest.as_bytes())?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn read_container(path: &Path) -> Result<(Dtype, Vec<Entry>, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;

    let bad = |msg: &str| Error::CheckpointFormat(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut next_line = |raw: &[u8]| -> Result<String> {
        let start = pos;
        while pos < raw.len() && raw[pos] != b'\n' {
            pos += 1;
        }
        if pos >= raw.len() {
            return Err(Error::CheckpointFormat(format!("{}: truncated manifest", path.display())));
        }
        let line = String::from_utf8(raw[start..pos].to_vec())
            .map_err(|_| Error::CheckpointFormat(format!("{}: manifest is not utf-8", path.display())))?;
        pos += 1;
        Ok(line)
    };

    if next_line(&raw)? != MAGIC {
        return Err(bad("missing magic header"));
    }
    let dtype_line = next_line(&raw)?;
    let dtype = dtype_line
        .strip_prefix("dtype ")
        .and_then(Dtype::parse)
        .ok_or_else(|| bad("bad dtype line"))?;

    let mut entries = Vec::new();
    let blob_len = loop {
        let line = next_line(&raw)?;
        if let Some(rest) = line.strip_prefix("blob ") {
            break rest.parse::<usize>().map_err(|_| bad("bad blob length"))?;
        }
        let rest = line.strip_prefix("tensor ").ok_or_else(|| bad("unexpected manifest line"))?;
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad("malformed tensor line"));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("malformed shape"))?;
        let offset: usize = parts[2].parse().map_err(|_| bad("malformed offset"))?;
        let count: usize = parts[3].parse().map_err(|_| bad("malformed count"))?;
        if shape.iter().product::<usize>() != count {
            return Err(bad("shape/count mismatch"));
        }
        entries.push(Entry { name: parts[0].to_string(), shape, offset, count });
    };

    let blob = raw[pos..].to_vec();
    if blob.len() != blob_len {
        return Err(bad("blob length mismatch"));
    }
    for e in &entries {
        if e.offset + e.count * dtype.width() > blob.len() {
            return Err(bad("tensor extends past blob"));
        }
    }
    Ok((dtype, entries, blob))
}

/// Loads a checkpoint whose stored dtype matches `F` exactly (bitwise
/// round-trip of [`save_checkpoint`]).
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelParams<F>> {
    let (dtype, entries, blob) = read_container(path)?;
    if dtype != F::DTYPE {
        return Err(Error::CheckpointFormat(format!(
            "{}: stored dtype {} but {} requested",
            path.display(),
            dtype.name(),
            F::DTYPE.name()
        )));
    }
    let mut named = BTreeMap::new();
    let width = dtype.width();
    for e in entries {
        let mut data = Vec::with_capacity(e.count);
        for i in 0..e.count {
            data.push(F::read_le(&blob[e.offset + i * width..]));
        }
        named.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(ModelParams::from_map(named))
}

/// Loads a checkpoint of either dtype at f64, upcasting f32 losslessly.
/// This is the entry point for verification-precision analysis of
/// training-precision checkpoints.
pub fn load_checkpoint_f64(path: &Path) -> Result<ModelParams<f64>> {
    let (dtype, entries, blob) = read_container(path)?;
    let width = dtype.width();
    let mut named = BTreeMap::new();
    for e in entries {
        let mut data = Vec::with_capacity(e.count);
        for i in 0..e.count {
            let v = match dtype {
                Dtype::F32 => f32::read_le(&blob[e.offset + i * width..]) as f64,
                Dtype::F64 => f64::read_le(&blob[e.offset + i * width..]),
            };
            data.push(v);
        }
        named.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(ModelParams::from_map(named))
}
