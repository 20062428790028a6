//! Binary parameter checkpoints with a plain-text sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "IDSTCKPT"
//! version    u32      1
//! config     u32 length + UTF-8 TOML echo of the MlpConfig
//! segments   u32 count, then per segment:
//!              u32 name length + UTF-8 name, u32 rank, rank x u64 dims
//! values     u64 count + count x f64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Mlp, MlpConfig, ParameterVector, Segment};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IDSTCKPT";
const VERSION: u32 = 1;

/// `model.ckpt` -> `model.ckpt.meta.txt`
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.txt");
    PathBuf::from(name)
}

pub fn write_checkpoint(path: &Path, config: &MlpConfig, params: &ParameterVector) -> Result<()> {
    Mlp::new(config.clone())?.check_layout(params)?;
    let echo = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;

    let mut buf = Vec::with_capacity(64 + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, &echo);
    buf.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for seg in params.segments() {
        put_str(&mut buf, &seg.name);
        buf.extend_from_slice(&(seg.shape.len() as u32).to_le_bytes());
        for &d in &seg.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let mut meta = String::new();
    meta.push_str("format = IDSTCKPT\n");
    meta.push_str(&format!("version = {VERSION}\n"));
    meta.push_str(&format!("parameter_count = {}\n", params.len()));
    meta.push_str(&format!("input_dim = {}\n", config.input_dim));
    meta.push_str(&format!("hidden_dims = {:?}\n", config.hidden_dims));
    meta.push_str(&format!("output_dim = {}\n", config.output_dim));
    meta.push_str(&format!("task = {:?}\n", config.task));
    meta.push_str(&format!("dropout = {}\n", config.dropout));
    for seg in params.segments() {
        meta.push_str(&format!(
            "segment {} shape={:?} offset={}\n",
            seg.name, seg.shape, seg.offset
        ));
    }
    let meta_path = metadata_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(MlpConfig, ParameterVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let echo = r.string()?;
    let config: MlpConfig =
        toml::from_str(&echo).map_err(|e| Error::format(path, format!("config echo: {e}")))?;

    let n_segments = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((name, shape));
    }
    let count = r.u64()? as usize;
    let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }

    let mut parts = Vec::with_capacity(n_segments);
    let mut offset = 0;
    for (name, shape) in shapes {
        let seg = Segment {
            name,
            shape,
            offset,
        };
        let end = offset + seg.len();
        let slice = values
            .get(offset..end)
            .ok_or_else(|| Error::format(path, "segments exceed value count"))?;
        parts.push((seg.name.clone(), Tensor::new(seg.shape.clone(), slice.to_vec())?));
        offset = end;
    }
    if offset != count {
        return Err(Error::format(path, "segments do not cover all values"));
    }
    let params = ParameterVector::from_segments(parts);
    Mlp::new(config.clone())?
        .check_layout(&params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((config, params))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::RngStream;
    use crate::model::Task;

    fn config() -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            output_dim: 2,
            task: Task::Classification,
            dropout: 0.2,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mlp = Mlp::new(config()).unwrap();
        let params = mlp.init(&mut RngStream::new(4, 0));
        write_checkpoint(&path, &config(), &params).unwrap();
        let (cfg, back) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg, config());
        assert_eq!(back, params);
        let meta = fs::read_to_string(metadata_path(&path)).unwrap();
        assert!(meta.contains("parameter_count = 32"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = Mlp::new(config()).unwrap().init(&mut RngStream::new(4, 0));
        write_checkpoint(&path, &config(), &params).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
