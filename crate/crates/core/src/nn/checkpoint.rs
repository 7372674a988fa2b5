//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "INVIVCK1"
//! meta_len  u32       length of the JSON architecture record
//! meta      bytes     JSON of `Architecture` (d_z, p_hat, q_hat, hidden, decoder)
//! count     u32       number of tensors
//! repeated `count` times:
//!   name_len u32, name bytes (UTF-8)
//!   rows u64, cols u64
//!   rows*cols f64 values, row-major, IEEE-754 bits
//! ```
//!
//! Values are stored as raw bits, so save/load is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::model::{Architecture, AutoencoderModel, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INVIVCK1";

pub fn write_checkpoint<W: Write>(model: &AutoencoderModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let meta = serde_json::to_vec(&model.arch)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<AutoencoderModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let arch: Architecture = serde_json::from_slice(&meta)?;
    let count = read_u32(&mut r)? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| Error::Parse(e.to_string()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        names.push(name);
        tensors.push(Matrix::new(rows, cols, data)?);
    }
    AutoencoderModel::from_params(arch, ParamSet { names, tensors })
}

pub fn save_checkpoint(model: &AutoencoderModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AutoencoderModel> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DecoderKind;

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let arch = Architecture::new(15, 2, 2, DecoderKind::Polynomial { degree: 2 });
        let mut model = AutoencoderModel::new(arch, 11).unwrap();
        model.params.tensors[1].data_mut()[0] = -0.0;
        model.params.tensors[1].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.arch, model.arch);
        for (a, b) in back.params.tensors.iter().zip(&model.params.tensors) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_checkpoint(&b"NOTACKPTxxxx"[..]), Err(Error::Parse(_))));
    }
}
