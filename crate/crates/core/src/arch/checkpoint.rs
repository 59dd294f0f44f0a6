//! Self-describing checkpoint files.
//!
//! Layout (little-endian): magic `T3DCKPT\0`, `u32` version, `u64` length
//! and UTF-8 text of the [`ArchSpec`], `u64` entry count, then per entry a
//! `u32` name length, the name, a `u8` [`ParamKind`] code and the tensor in
//! the tensor-core format. Entries follow parameter declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchSpec, Model};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{read_tensor_from, write_tensor_to};

const MAGIC: &[u8; 8] = b"T3DCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec = model.spec.to_string();
    w.write_all(&(spec.len() as u64).to_le_bytes())?;
    w.write_all(spec.as_bytes())?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (_, p) in model.params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.kind.code()])?;
        write_tensor_to(w, &p.value)?;
    }
    Ok(())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("checkpoint {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_bytes(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let b = read_bytes(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

/// Reads a whole checkpoint. Nothing is returned unless every entry is
/// present and matches the layout its embedded spec builds.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    if read_bytes(r, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let spec_len = read_u64(r, "spec length")?;
    if spec_len > 1 << 20 {
        return Err(Error::Format(format!("implausible spec length {spec_len}")));
    }
    let text = String::from_utf8(read_bytes(r, spec_len as usize, "spec")?)
        .map_err(|_| Error::Format("spec is not UTF-8".into()))?;
    let spec = ArchSpec::parse(&text)?;
    let mut model = Model::build(&spec, 0)?;

    let count = read_u64(r, "entry count")?;
    if count != model.params.len() as u64 {
        return Err(Error::Spec(format!(
            "checkpoint has {count} entries, spec `{}` declares {}",
            spec.name,
            model.params.len()
        )));
    }
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = read_u32(r, "entry name length")? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("entry {i}: implausible name length {name_len}")));
        }
        let name = String::from_utf8(read_bytes(r, name_len, "entry name")?)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?;
        let code = read_bytes(r, 1, "entry kind")?[0];
        let kind = ParamKind::from_code(code)
            .ok_or_else(|| Error::Format(format!("entry `{name}`: unknown kind {code}")))?;
        let value = read_tensor_from(r)?;
        store.add(name, kind, value);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    model.params.load_from(store)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}

/// Loads a checkpoint that must embed exactly `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ArchSpec) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if &model.spec != expected {
        return Err(Error::Spec(format!(
            "checkpoint holds `{}`, expected `{}`",
            model.spec.name, expected.name
        )));
    }
    Ok(model)
}
