//! Tensor checkpoint files: one JSON header line followed by raw
//! little-endian `f64` values.
//!
//! ```text
//! {"shape":[d1,d2,d3,d4],"dtype":"f64","order":"row-major"}\n<8·N bytes>
//! ```
//!
//! Complex tensors are stored as two such files with `.re` / `.im` suffixes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ComplexTensor4, Tensor4};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    dtype: String,
    order: String,
}

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor4) -> Result<()> {
    let header = Header {
        shape: t.shape(),
        dtype: "f64".into(),
        order: "row-major".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: R, origin: &Path) -> Result<Tensor4> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::format(origin, "missing header terminator"));
    }
    let header: Header = serde_json::from_str(line.trim_end_matches('\n'))
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(Error::format(
            origin,
            format!("unsupported layout {}/{}", header.dtype, header.order),
        ));
    }
    let n: usize = header.shape.iter().product();
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != n * 8 {
        return Err(Error::format(
            origin,
            format!("expected {} payload bytes, found {}", n * 8, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor4::new(header.shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    read_tensor_from(fs::File::open(path)?, path)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<base>.re` and `<base>.im`.
pub fn write_complex(base: impl AsRef<Path>, t: &ComplexTensor4) -> Result<()> {
    let base = base.as_ref();
    write_tensor(with_suffix(base, ".re"), &t.re)?;
    write_tensor(with_suffix(base, ".im"), &t.im)
}

pub fn read_complex(base: impl AsRef<Path>) -> Result<ComplexTensor4> {
    let base = base.as_ref();
    let re = read_tensor(with_suffix(base, ".re"))?;
    let im = read_tensor(with_suffix(base, ".im"))?;
    ComplexTensor4::new(re, im)
}
