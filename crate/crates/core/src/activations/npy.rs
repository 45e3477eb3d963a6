//! Minimal reader/writer for the numpy `.npy` format.
//!
//! Only the subset this crate exchanges is supported: format version 1.0,
//! C order, little-endian `<f4` / `<f8` element types. Reading any rank is
//! allowed here; callers restrict ranks where it matters.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

/// A dense C-order array widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn read_npy_file(path: &Path) -> Result<NpyArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_npy(&mut bytes.as_slice()).map_err(|e| e.context(format!("reading {}", path.display())))
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut preamble = [0u8; 10];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::Format("file too short for an npy preamble".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Format("missing npy magic string".into()));
    }
    if preamble[6] != 1 || preamble[7] != 0 {
        return Err(Error::Format(format!(
            "unsupported npy version {}.{} (only 1.0)",
            preamble[6], preamble[7]
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("truncated npy header".into()))?;
    let header_text =
        std::str::from_utf8(&header_bytes).map_err(|_| Error::Format("npy header is not ASCII".into()))?;
    let header = parse_header(header_text)?;
    if header.fortran_order {
        return Err(Error::Format(
            "fortran-ordered npy arrays are not supported".into(),
        ));
    }

    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("npy shape overflows".into()))?;
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::Format(format!("reading npy payload: {e}")))?;
    let expected = count * header.dtype.size();
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "npy payload has {} bytes, shape {:?} needs {expected}",
            raw.len(),
            header.shape
        )));
    }
    let data = match header.dtype {
        Dtype::F8 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F4 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    Ok(NpyArray {
        shape: header.shape,
        dtype: header.dtype,
        data,
    })
}

/// Writes `data` (C order) as a version 1.0 `<f8` array.
pub fn write_npy<W: Write>(writer: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {count} values but {} were given",
            data.len()
        )));
    }
    let shape_text = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape_text}, }}",
        Dtype::F8.descr()
    );
    // preamble + header + newline must be a multiple of ALIGN
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Shape("npy header too long for version 1.0".into()))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    writer
        .write_all(&out)
        .map_err(|e| Error::Format(format!("writing npy: {e}")))
}

pub fn write_npy_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_npy(&mut buf, shape, data)?;
    fsutil::write_atomic(path, &buf)
}

fn parse_header(text: &str) -> Result<Header> {
    let body = text.trim().trim_end_matches('\n').trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| Error::Format("npy header is not a dict literal".into()))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after_key) = take_quoted(rest)?;
        let after_colon = after_key
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| Error::Format(format!("expected ':' after key {key:?}")))?
            .trim_start();
        let after_value = match key {
            "descr" => {
                let (value, r) = take_quoted(after_colon)?;
                descr = Some(value.to_string());
                r
            }
            "fortran_order" => {
                if let Some(r) = after_colon.strip_prefix("False") {
                    fortran_order = Some(false);
                    r
                } else if let Some(r) = after_colon.strip_prefix("True") {
                    fortran_order = Some(true);
                    r
                } else {
                    return Err(Error::Format("fortran_order must be True or False".into()));
                }
            }
            "shape" => {
                let (dims, r) = take_tuple(after_colon)?;
                shape = Some(dims);
                r
            }
            other => return Err(Error::Format(format!("unexpected npy header key {other:?}"))),
        };
        rest = after_value.trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
        } else if !rest.is_empty() {
            return Err(Error::Format("expected ',' between npy header entries".into()));
        }
    }

    let descr = descr.ok_or_else(|| Error::Format("npy header lacks 'descr'".into()))?;
    let dtype = match descr.as_str() {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => {
            return Err(Error::Format(format!(
                "unsupported dtype {other:?} (only '<f4' and '<f8')"
            )))
        }
    };
    Ok(Header {
        dtype,
        fortran_order: fortran_order
            .ok_or_else(|| Error::Format("npy header lacks 'fortran_order'".into()))?,
        shape: shape.ok_or_else(|| Error::Format("npy header lacks 'shape'".into()))?,
    })
}

fn take_quoted(s: &str) -> Result<(&str, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format("expected a quoted string in npy header".into()))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated string in npy header".into()))?;
    Ok((&inner[..end], &inner[end + 1..]))
}

fn take_tuple(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::Format("shape must be a tuple".into()))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::Format("unterminated shape tuple".into()))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}
