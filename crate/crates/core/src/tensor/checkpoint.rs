//! Binary tensor archives.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic[4] version(=1)
//! repeated until EOF:
//!     name_len name[name_len] (UTF-8)
//!     dims[4] (batch, height, width, channels)
//!     data[product(dims)] as little-endian f32
//! ```
//!
//! Model parameters use the magic `TGCK`, optimizer state `TGOP`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{AdamState, Dims4, ParamStore, Tensor4};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"TGCK";
pub const OPTIMIZER_MAGIC: [u8; 4] = *b"TGOP";
pub const VERSION: u32 = 1;

pub fn encode<W: Write>(mut w: W, magic: [u8; 4], entries: &[(String, Tensor4)]) -> std::io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in t.dims().as_array() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn decode<R: Read>(mut r: R, magic: [u8; 4]) -> Result<Vec<(String, Tensor4)>> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head)
        .map_err(|e| Error::Checkpoint(format!("missing header: {e}")))?;
    if head != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Checkpoint(e.to_string())),
        }
        r.read_exact(&mut len_buf[1..])
            .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let dims = Dims4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut raw = vec![0u8; dims.len() * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated data for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor4::from_vec(dims, data)
            .map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let entries: Vec<(String, Tensor4)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.detached()))
        .collect();
    write_atomic(path, |w| encode(w, MODEL_MAGIC, &entries))
}

pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(BufReader::new(file), MODEL_MAGIC)?;
    store.load_named(entries)
}

pub fn save_optimizer(path: &Path, state: &AdamState, store: &ParamStore) -> Result<()> {
    let entries = state.to_named(store);
    write_atomic(path, |w| encode(w, OPTIMIZER_MAGIC, &entries))
}

pub fn load_optimizer(path: &Path, state: &mut AdamState, store: &ParamStore) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(BufReader::new(file), OPTIMIZER_MAGIC)?;
    state.load_named(store, entries)
}
