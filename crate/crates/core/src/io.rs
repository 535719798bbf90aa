//! On-disk formats.
//!
//! ABFN tensor file layout (all integers little-endian):
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 4            | magic `b"ABFN"`                         |
//! | 4            | version, `u32` (currently 1)            |
//! | 4            | ndim, `u32`                             |
//! | 4 * ndim     | dims, `u32` each                        |
//! | 4            | dtype, `u32` (0 = 32-bit float)         |
//! | 4 * prod(d)  | row-major `f32` payload                 |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const ABFN_MAGIC: &[u8; 4] = b"ABFN";
pub const ABFN_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// A decoded ABFN file.
#[derive(Debug, Clone, PartialEq)]
pub struct AbfnTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl AbfnTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: dims.iter().map(|&d| d as usize).collect(),
                found: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(ABFN_MAGIC);
        out.extend_from_slice(&ABFN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cursor = 0usize;
        let mut take_u32 = |what: &str| -> Result<u32> {
            let chunk = bytes
                .get(cursor..cursor + 4)
                .ok_or_else(|| bad(&format!("truncated {what}")))?;
            cursor += 4;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        if bytes.len() < 4 || &bytes[..4] != ABFN_MAGIC {
            return Err(bad("bad magic"));
        }
        take_u32("magic")?;
        let version = take_u32("version")?;
        if version != ABFN_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let ndim = take_u32("ndim")? as usize;
        if ndim > 16 {
            return Err(bad("too many dimensions"));
        }
        let dims = (0..ndim).map(|_| take_u32("dims")).collect::<Result<Vec<_>>>()?;
        let dtype = take_u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let header = 16 + 4 * ndim;
        let count: usize = dims.iter().map(|&d| d as usize).product();
        if bytes.len() - header != count * 4 {
            return Err(bad(&format!(
                "payload is {} bytes, expected {}",
                bytes.len() - header,
                count * 4
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn from_image(image: &ImageTensor) -> Self {
        Self {
            dims: vec![image.height() as u32, image.width() as u32],
            data: image.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn into_image(self, path: &Path) -> Result<ImageTensor> {
        if self.dims.len() != 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected a 2-D image, found {} dims", self.dims.len()),
            });
        }
        ImageTensor::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.data.into_iter().map(f64::from).collect(),
        )
    }
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_sibling(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_tensor(path: &Path, tensor: &AbfnTensor) -> Result<()> {
    write_atomic(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<AbfnTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AbfnTensor::decode(&bytes, path)
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write_tensor(path, &AbfnTensor::from_image(image))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    read_tensor(path)?.into_image(path)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Encodes images side by side as an 8-bit binary PGM. Each panel is mapped
/// linearly from `[lo, hi]` to `[0, 255]`.
pub fn encode_pgm(panels: &[(&ImageTensor, f64, f64)]) -> Result<Vec<u8>> {
    let Some((first, _, _)) = panels.first() else {
        return Err(Error::domain("no panels to encode"));
    };
    let h = first.height();
    for (p, _, _) in panels {
        if p.height() != h {
            return Err(Error::domain("PGM panels must share a height"));
        }
    }
    let width: usize = panels.iter().map(|(p, _, _)| p.width()).sum();
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for r in 0..h {
        for (p, lo, hi) in panels {
            let span = if hi > lo { hi - lo } else { 1.0 };
            for c in 0..p.width() {
                let v = ((p.get(r, c) - lo) / span).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = AbfnTensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        let mut expected = b"ABFN".to_vec();
        for v in [1u32, 2, 1, 2, 0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn decode_rejects_corruption() {
        let p = Path::new("x.abfn");
        let good = AbfnTensor::new(vec![2, 2], vec![0.0; 4]).unwrap().encode();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(AbfnTensor::decode(&bad_magic, p).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(AbfnTensor::decode(&bad_version, p).is_err());
        assert!(AbfnTensor::decode(&good[..good.len() - 1], p).is_err());
        let mut bad_dtype = good.clone();
        bad_dtype[20] = 1;
        assert!(AbfnTensor::decode(&bad_dtype, p).is_err());
        assert!(AbfnTensor::decode(&good, p).is_ok());
    }

    #[test]
    fn pgm_header_and_size() {
        let a = ImageTensor::filled(2, 3, -1.0);
        let b = ImageTensor::filled(2, 2, 1.0);
        let bytes = encode_pgm(&[(&a, -1.0, 1.0), (&b, -1.0, 1.0)]).unwrap();
        let header = b"P5\n5 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 10);
        assert_eq!(&bytes[header.len()..header.len() + 5], &[0, 0, 0, 255, 255]);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/img.abfn");
        let img = ImageTensor::from_fn(3, 4, |r, c| r as f64 - c as f64 * 0.25);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        assert!(!tmp_sibling(&path).exists());
    }
}
