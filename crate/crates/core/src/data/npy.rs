//! Reading and writing the subset of the NumPy `.npy` format used for all
//! tensor payloads: little-endian `<f4`/`<f8`, C order, no pickled objects.
//!
//! Files are written as format version 1.0 with the header padded to a
//! 64-byte boundary, exactly as `numpy.save` does.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }

    fn from_descr(s: &str) -> Option<Self> {
        match s {
            "<f4" => Some(Dtype::F4),
            "<f8" => Some(Dtype::F8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl NpyHeader {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded array; values are widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn cast<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(v)).collect()
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    }
}

/// Serializes `data` with the given shape.
pub fn encode<T: Scalar>(shape: &[usize], data: &[T], dtype: Dtype) -> std::result::Result<Vec<u8>, String> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(format!("shape {shape:?} holds {n} values, got {}", data.len()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err("refusing to write non-finite values".into());
    }
    let mut header = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}", dtype.descr(), shape_literal(shape));
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((ALIGN - unpadded % ALIGN) % ALIGN));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + n * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        match dtype {
            Dtype::F4 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F8 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Ok(out)
}

/// Parses the header and returns it with the payload offset.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(NpyHeader, usize), String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("bad magic bytes".into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (len, start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) | (3, 0) => {
            if bytes.len() < 12 {
                return Err("truncated header length".into());
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        _ => return Err(format!("unsupported format version {major}.{minor}")),
    };
    let end = start + len;
    if bytes.len() < end {
        return Err("truncated header".into());
    }
    let text = std::str::from_utf8(&bytes[start..end]).map_err(|_| "header is not valid text".to_string())?;
    Ok((parse_dict(text)?, end))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<NpyArray, String> {
    let (header, offset) = decode_header(bytes)?;
    let n = header.len();
    let size = header.dtype.size();
    let payload = &bytes[offset..];
    if payload.len() != n * size {
        return Err(format!("payload holds {} bytes, shape {:?} needs {}", payload.len(), header.shape, n * size));
    }
    let data = match header.dtype {
        Dtype::F4 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F8 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(NpyArray { dtype: header.dtype, shape: header.shape, data })
}

pub fn write_npy<T: Scalar>(path: impl AsRef<Path>, shape: &[usize], data: &[T], dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(shape, data, dtype).map_err(|msg| Error::Npy { path: path.into(), msg })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Npy { path: path.into(), msg })
}

/// Reads only the header; used to validate manifests without loading data.
pub fn read_npy_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 12];
    let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
    buf.truncate(n);
    let need = match buf.get(6) {
        Some(1) if n >= 10 => 10 + u16::from_le_bytes([buf[8], buf[9]]) as usize,
        Some(2) | Some(3) if n >= 12 => 12 + u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize,
        _ => buf.len(),
    };
    if need > buf.len() {
        let mut rest = vec![0u8; need - buf.len()];
        f.read_exact(&mut rest).map_err(|e| Error::io(path, e))?;
        buf.extend(rest);
    }
    decode_header(&buf).map(|(h, _)| h).map_err(|msg| Error::Npy { path: path.into(), msg })
}

/// Minimal parser for the Python dict literal in the header.
fn parse_dict(text: &str) -> std::result::Result<NpyHeader, String> {
    let body = text.trim().strip_prefix('{').and_then(|s| s.strip_suffix('}')).ok_or("header is not a dict")?;
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = take_string(rest)?;
        let after = after.trim_start().strip_prefix(':').ok_or("expected ':' after key")?.trim_start();
        rest = match key.as_str() {
            "descr" => {
                let (v, r) = take_string(after)?;
                descr = Some(v);
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("False") {
                    fortran = Some(false);
                    r
                } else if let Some(r) = after.strip_prefix("True") {
                    fortran = Some(true);
                    r
                } else {
                    return Err("fortran_order must be True or False".into());
                }
            }
            "shape" => {
                let close = after.find(')').ok_or("unterminated shape tuple")?;
                let inner = after.strip_prefix('(').ok_or("shape must be a tuple")?;
                let dims = inner[..close - 1]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| format!("bad dimension '{s}'")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                shape = Some(dims);
                &after[close + 1..]
            }
            other => return Err(format!("unexpected header key '{other}'")),
        };
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    let descr = descr.ok_or("missing descr")?;
    let dtype = Dtype::from_descr(&descr).ok_or_else(|| format!("unsupported dtype '{descr}' (need <f4 or <f8)"))?;
    if fortran.ok_or("missing fortran_order")? {
        return Err("Fortran-ordered arrays are not supported".into());
    }
    Ok(NpyHeader { dtype, shape: shape.ok_or("missing shape")? })
}

fn take_string(s: &str) -> std::result::Result<(String, &str), String> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or("expected a quoted string")?;
    let end = s[1..].find(quote).ok_or("unterminated string")? + 1;
    Ok((s[1..end].to_string(), &s[end + 1..]))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn roundtrip_2x3() {
        let data = [1.0, -2.5, 3.25, 1e-300, 7.0, f64::MAX];
        let back = decode(&encode(&[2, 3], &data, Dtype::F8).unwrap()).unwrap();
        assert_eq!(back.shape, vec![2, 3]);
        assert_eq!(back.data, data);
    }

    #[test]
    fn header_matches_numpy_layout() {
        let bytes = encode(&[2, 3], &[0.0f64; 6], Dtype::F8).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let text = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(text.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }"));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn empty_array() {
        let bytes = encode::<f64>(&[0], &[], Dtype::F4).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape, vec![0]);
        assert!(back.data.is_empty());
    }

    #[test]
    fn scalar_shape() {
        let back = decode(&encode(&[], &[4.5f64], Dtype::F8).unwrap()).unwrap();
        assert!(back.shape.is_empty());
        assert_eq!(back.data, vec![4.5]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&[2], &[1.0f64, 2.0], Dtype::F8).unwrap();
        bytes[1] = b'X';
        assert!(decode(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn unsupported_layouts_are_rejected() {
        let mk = |dict: &str| {
            let mut h = dict.to_string();
            h.push('\n');
            let mut b = MAGIC.to_vec();
            b.extend([1, 0]);
            b.extend((h.len() as u16).to_le_bytes());
            b.extend(h.as_bytes());
            b.extend([0u8; 8]);
            b
        };
        assert!(decode(&mk("{'descr': '<i8', 'fortran_order': False, 'shape': (1,), }")).unwrap_err().contains("dtype"));
        assert!(decode(&mk("{'descr': '>f8', 'fortran_order': False, 'shape': (1,), }")).is_err());
        assert!(decode(&mk("{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }")).unwrap_err().contains("Fortran"));
        assert!(decode(&mk("{'descr': '<f8', 'shape': (1,), }")).is_err());
        // Key order and quoting may vary between writers.
        let ok = decode(&mk("{\"shape\": (1,), \"fortran_order\": False, \"descr\": \"<f8\"}")).unwrap();
        assert_eq!(ok.shape, vec![1]);
    }

    #[test]
    fn wrong_payload_size() {
        let mut bytes = encode(&[3], &[1.0f64, 2.0, 3.0], Dtype::F8).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(encode(&[2, 2], &[1.0f64; 3], Dtype::F8).is_err());
        assert!(encode(&[1], &[f64::NAN], Dtype::F8).is_err());
    }

    #[test]
    fn file_roundtrip_and_header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        write_npy(&p, &[3, 1], &[1.5f32, 2.5, 3.5], Dtype::F4).unwrap();
        assert_eq!(read_npy_header(&p).unwrap(), NpyHeader { dtype: Dtype::F4, shape: vec![3, 1] });
        assert_eq!(read_npy(&p).unwrap().data, vec![1.5, 2.5, 3.5]);
        assert!(read_npy(dir.path().join("missing.npy")).is_err());
    }

    proptest! {
        #[test]
        fn lossless_at_stored_precision(vals in proptest::collection::vec(-1e6f64..1e6, 0..50)) {
            let n = vals.len();
            let back = decode(&encode(&[n], &vals, Dtype::F8).unwrap()).unwrap();
            prop_assert_eq!(&back.data, &vals);
            let as32: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
            let back = decode(&encode(&[n], &as32, Dtype::F4).unwrap()).unwrap();
            prop_assert!(back.data.iter().zip(&as32).all(|(&a, &b)| a == b as f64));
        }
    }
}
