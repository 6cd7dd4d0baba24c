//! Binary checkpoints.
//!
//! ```text
//! magic     8 bytes  "TRNCKPT1"
//! hlen      u32 LE   length of the header text
//! header    UTF-8    "spec=<ConvNetSpec::describe>\nstep=<n>\n"
//! ntensors  u32 LE
//! per tensor: ndim u32, dims u32 * ndim, values f32 LE
//! adam      u8       0 = absent, 1 = present, followed by
//!                    lr, beta1, beta2, eps as f64 LE, step u64 LE,
//!                    first then second moments, f32 LE per parameter
//! ```

use std::io::{Read, Write};

use crate::adam::AdamState;
use crate::error::{NnError, Result};
use crate::net::{ConvNetSpec, ResidualCnn};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TRNCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ResidualCnn<f32>,
    pub step: u64,
    pub adam: Option<AdamState<f32>>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn put_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = format!("spec={}\nstep={}\n", self.net.spec().describe(), self.step);
        put_u32(w, header.len() as u32)?;
        w.write_all(header.as_bytes())?;
        let params = self.net.params();
        put_u32(w, params.len() as u32)?;
        for p in params {
            put_u32(w, p.ndim() as u32)?;
            for &d in p.shape() {
                put_u32(w, d as u32)?;
            }
            put_f32s(w, p.data())?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(a) => {
                w.write_all(&[1])?;
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&a.step.to_le_bytes())?;
                for m in &a.m {
                    put_f32s(w, m)?;
                }
                for v in &a.v {
                    put_f32s(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = get_u32(r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header =
            String::from_utf8(hbuf).map_err(|_| NnError::Format("header is not UTF-8".into()))?;
        let mut spec = None;
        let mut step = None;
        for line in header.lines() {
            match line.split_once('=') {
                Some(("spec", v)) => spec = Some(ConvNetSpec::parse(v)?),
                Some(("step", v)) => {
                    step = Some(
                        v.parse::<u64>()
                            .map_err(|_| NnError::Format(format!("bad step {v:?}")))?,
                    )
                }
                _ => return Err(NnError::Format(format!("unexpected header line {line:?}"))),
            }
        }
        let spec = spec.ok_or_else(|| NnError::Format("header missing spec".into()))?;
        let step = step.ok_or_else(|| NnError::Format("header missing step".into()))?;
        let n = get_u32(r)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let nd = get_u32(r)? as usize;
            if nd == 0 || nd > crate::tensor::MAX_AXES {
                return Err(NnError::Format(format!("tensor with {nd} axes")));
            }
            let shape = (0..nd)
                .map(|_| get_u32(r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = get_f32s(r, shape.iter().product())?;
            params.push(Tensor::new(&shape, data)?);
        }
        let net = ResidualCnn::from_params(spec, params)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let (lr, beta1, beta2, eps) = (get_f64(r)?, get_f64(r)?, get_f64(r)?, get_f64(r)?);
                let astep = get_u64(r)?;
                let lens: Vec<usize> = net.params().iter().map(Tensor::len).collect();
                let m = lens
                    .iter()
                    .map(|&l| get_f32s(r, l))
                    .collect::<Result<Vec<_>>>()?;
                let v = lens
                    .iter()
                    .map(|&l| get_f32s(r, l))
                    .collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step: astep,
                    m,
                    v,
                })
            }
            other => return Err(NnError::Format(format!("bad optimizer flag {other}"))),
        };
        Ok(Self { net, step, adam })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
