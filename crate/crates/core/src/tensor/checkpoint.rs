//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PCKP"
//! version u32 (currently 1)
//! dtype   u8  (1 = f32, 2 = f64)
//! header  u32 length + UTF-8 JSON metadata (config, seed, lineage hashes)
//! count   u32 tensors, each:
//!   name  u32 length + UTF-8
//!   ndim  u32, dims u64 x ndim
//!   data  raw IEEE-754 little-endian values
//! ```
//!
//! Round trips are bit-exact: values are stored as raw bits, never formatted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dtype, Element, ModelParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 1,
        Dtype::F64 => 2,
    }
}

pub fn save<T: Element>(path: &Path, header_json: &str, params: &ModelParams<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[dtype_tag(T::DTYPE)]).map_err(io_err)?;
    let header = header_json.as_bytes();
    w.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(header).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        match T::DTYPE {
            Dtype::F32 => {
                for &v in tensor.as_slice() {
                    w.write_all(&(v.to_f64() as f32).to_le_bytes())
                        .map_err(io_err)?;
                }
            }
            Dtype::F64 => {
                for &v in tensor.as_slice() {
                    w.write_all(&v.to_f64().to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<(String, ModelParams<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    if tag[0] != dtype_tag(T::DTYPE) {
        return Err(Error::Checkpoint(format!(
            "dtype tag {} does not match requested element type",
            tag[0]
        )));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io_err)?;
    let header =
        String::from_utf8(header).map_err(|e| Error::Checkpoint(format!("header utf8: {e}")))?;

    r.read_exact(&mut u32buf).map_err(io_err)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("name utf8: {e}")))?;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut u64buf).map_err(io_err)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match T::DTYPE {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(io_err)?;
                    data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(io_err)?;
                    data.push(T::from_f64(f64::from_le_bytes(buf)));
                }
            }
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::<f32>::new();
        params.insert("emb", Tensor::randn(&[7, 3], 1.0, &mut rng));
        params.insert("head.w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        params.insert("head.b", Tensor::zeros(&[2]));
        let dir = std::env::temp_dir().join(format!("pckp-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.pckp");
        save(&path, r#"{"stage":"test","seed":9}"#, &params).unwrap();
        let (header, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(header, r#"{"stage":"test","seed":9}"#);
        assert_eq!(loaded, params);
        // Saving the loaded params must reproduce the file byte for byte.
        let path2 = dir.join("model2.pckp");
        save(&path2, &header, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let params = {
            let mut p = ModelParams::<f64>::new();
            p.insert("w", Tensor::scalar(1.0));
            p
        };
        let dir = std::env::temp_dir().join(format!("pckp-dtype-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pckp");
        save(&path, "{}", &params).unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
