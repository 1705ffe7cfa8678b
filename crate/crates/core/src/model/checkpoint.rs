//! Named-tensor checkpoints.
//!
//! Layout: magic `RFMC`, `u32` version, `u64` length + model config text,
//! `u64` length + manifest (`name\toffset\tlength` lines, offsets relative to
//! the blob), then the blob of concatenated `RFMT` tensors. Files are written
//! to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::RfmNet;
use crate::nn::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFMC";
const VERSION: u32 = 1;

pub fn to_bytes(net: &RfmNet) -> Vec<u8> {
    let cfg = RunConfig {
        model: net.cfg.clone(),
        ..RunConfig::default()
    };
    let config = cfg.model_text();
    let mut manifest = String::new();
    let mut blob = Vec::new();
    net.visit(&mut |name, t, _| {
        let start = blob.len();
        t.write_to(&mut blob).expect("writing to a Vec cannot fail");
        manifest.push_str(&format!("{name}\t{start}\t{}\n", blob.len() - start));
    });
    let mut out = Vec::with_capacity(blob.len() + config.len() + manifest.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for section in [config.as_bytes(), manifest.as_bytes()] {
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(section);
    }
    out.extend_from_slice(&blob);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_section(bytes: &mut &[u8]) -> Result<String> {
    let len = u64::from_le_bytes(take(bytes, 8)?.try_into().unwrap()) as usize;
    String::from_utf8(take(bytes, len)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<RfmNet> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = RunConfig::from_text(&take_section(&mut bytes)?)?;
    let manifest = take_section(&mut bytes)?;
    let blob = bytes;
    let mut tensors = std::collections::HashMap::new();
    for line in manifest.lines() {
        let mut parts = line.split('\t');
        let (Some(name), Some(off), Some(len), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("bad manifest line {line:?}")));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad manifest line {line:?}")))
        };
        let (off, len) = (parse(off)?, parse(len)?);
        let slice = blob
            .get(off..off + len)
            .ok_or_else(|| Error::Format(format!("tensor {name} lies outside the blob")))?;
        tensors.insert(name.to_string(), Tensor::from_bytes(slice)?);
    }
    let mut net = RfmNet::new(&cfg.model, 0)?;
    let mut missing = Vec::new();
    net.visit_mut(&mut |name, t, _| match tensors.remove(name) {
        Some(src) if src.shape() == t.shape() => *t = src,
        Some(_) => missing.push(format!("{name} (shape)")),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint lacks tensors: {}",
            missing.join(", ")
        )));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(net)
}

/// Writes atomically: temporary sibling file, flush, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save(path: &Path, net: &RfmNet) -> Result<()> {
    write_atomic(path, &to_bytes(net))
}

pub fn load(path: &Path) -> Result<RfmNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
