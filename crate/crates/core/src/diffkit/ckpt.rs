//! `HITGEO-CKPT` checkpoint files: a list of named nets with optional
//! optimizer state.
//!
//! ```text
//! magic       11 bytes "HITGEO-CKPT"
//! version     u32
//! n_records   u32
//! per record:
//!   name      u32 length + utf-8 bytes
//!   frozen    u8
//!   activation u8
//!   seed      u64
//!   n_dims    u32, dims u64 x n_dims
//!   n_params  u64, params f64 x n_params
//!   has_opt   u8
//!   [step u64, lr f64, beta1 f64, beta2 f64, eps f64, m f64 x n, v f64 x n]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Activation, Adam, DenseNet};
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 11] = b"HITGEO-CKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetRecord {
    pub name: String,
    pub net: DenseNet,
    pub opt: Option<Adam>,
    pub frozen: bool,
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        v.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(v)
}

pub fn write_checkpoint<W: Write>(w: &mut W, records: &[NetRecord]) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for rec in records {
        w.write_u32::<LittleEndian>(rec.name.len() as u32)?;
        w.write_all(rec.name.as_bytes())?;
        w.write_u8(rec.frozen as u8)?;
        w.write_u8(rec.net.activation().tag())?;
        w.write_u64::<LittleEndian>(rec.net.seed())?;
        w.write_u32::<LittleEndian>(rec.net.dims().len() as u32)?;
        for &d in rec.net.dims() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        w.write_u64::<LittleEndian>(rec.net.n_params() as u64)?;
        write_f64s(w, rec.net.params())?;
        match &rec.opt {
            None => w.write_u8(0)?,
            Some(opt) => {
                if opt.m.len() != rec.net.n_params() {
                    return Err(Error::ShapeMismatch(format!(
                        "optimizer state of `{}` does not match its net",
                        rec.name
                    )));
                }
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(opt.step)?;
                write_f64s(w, &[opt.lr, opt.beta1, opt.beta2, opt.eps])?;
                write_f64s(w, &opt.m)?;
                write_f64s(w, &opt.v)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<NetRecord>> {
    let mut magic = [0u8; 11];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len.min(1 << 16)];
        if len > name.len() {
            return Err(Error::Format("record name too long".into()));
        }
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let frozen = r.read_u8()? != 0;
        let tag = r.read_u8()?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown activation tag {tag}")))?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n_dims = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(n_dims.min(64));
        for _ in 0..n_dims {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n_params = r.read_u64::<LittleEndian>()? as usize;
        let params = read_f64s(r, n_params)?;
        let net = DenseNet::from_params(&dims, activation, seed, params)
            .map_err(|e| Error::Format(e.to_string()))?;
        let opt = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let h = read_f64s(r, 4)?;
                let m = read_f64s(r, n_params)?;
                let v = read_f64s(r, n_params)?;
                Some(Adam {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    step,
                    m,
                    v,
                })
            }
            t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
        };
        out.push(NetRecord {
            name,
            net,
            opt,
            frozen,
        });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, records: &[NetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NetRecord>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<NetRecord> {
        let a = DenseNet::new(&[3, 4, 2], Activation::Gelu, 1).unwrap();
        let mut opt = Adam::new(a.n_params(), 1e-3);
        let mut p = a.params().to_vec();
        let g = vec![0.1; p.len()];
        opt.update(&mut p, &g).unwrap();
        let b = DenseNet::new(&[2, 1], Activation::Relu, 2).unwrap();
        vec![
            NetRecord {
                name: "phi".into(),
                net: a,
                opt: Some(opt),
                frozen: false,
            },
            NetRecord {
                name: "task".into(),
                net: b,
                opt: None,
                frozen: true,
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let recs = records();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &recs).unwrap();
        assert!(buf.starts_with(CKPT_MAGIC));
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), recs);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &recs).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &records()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), records());
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &records()).unwrap();
        let mut bad = buf.clone();
        bad[2] = b'?';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        buf.truncate(buf.len() - 5);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
