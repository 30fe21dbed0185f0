//! Binary weight and activation-batch files.
//!
//! Both formats are little-endian with an 8-byte magic. Floats are stored as
//! 32-bit, so a round trip is exact for values representable in `f32`.
//!
//! ```text
//! XCODER01  u32 variant (0 = l1, 1 = batchtopk), u32 D, u32 d, u32 0
//!           f64 mu, theta                 (l1)
//!           f64 k, k_aux, alpha, theta    (batchtopk; theta NaN when unset)
//!           f32 enc_base, enc_chat, b_enc, dec_base, dec_chat, b_dec_base, b_dec_chat
//!
//! XDIFFACT  u32 n, u32 d, f32 h_base[n*d], f32 h_chat[n*d], u8 template[n]
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::crosscoder::{CrosscoderParams, Variant, Weights};
use crate::error::{Result, XdiffError};
use crate::world::PairedActivationBatch;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"XCODER01";
pub const BATCH_MAGIC: &[u8; 8] = b"XDIFFACT";

const TAG_L1: u32 = 0;
const TAG_BATCHTOPK: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| XdiffError::Format("length overflow".into()))?;
        if end > self.buf.len() {
            return Err(XdiffError::Truncated { expected: end, found: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(XdiffError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32_block(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = len.checked_mul(4).ok_or_else(|| XdiffError::Format("dimension overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(XdiffError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f32s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for &x in values {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Checked element count of an `rows × cols` block.
fn block_len(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| XdiffError::Format(format!("dimension overflow: {rows} x {cols}")))
}

pub fn encode_weights(params: &CrosscoderParams) -> Vec<u8> {
    let w = &params.weights;
    let (dict, d) = (params.dict_size(), params.dim());
    let mut out = Vec::with_capacity(48 + 4 * (4 * dict * d + dict + 2 * d));
    out.extend_from_slice(WEIGHTS_MAGIC);
    let theta = params.theta.unwrap_or(f64::NAN);
    let (tag, fields): (u32, Vec<f64>) = match params.variant {
        Variant::L1 { mu } => (TAG_L1, vec![mu, theta]),
        Variant::BatchTopK { k, k_aux, alpha } => (TAG_BATCHTOPK, vec![k as f64, k_aux as f64, alpha, theta]),
    };
    for v in [tag, dict as u32, d as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for (_, block) in w.blocks() {
        put_f32s(&mut out, block);
    }
    out
}

fn count_field(x: f64, name: &str) -> Result<usize> {
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
        Ok(x as usize)
    } else {
        Err(XdiffError::Format(format!("field {name} is not a count: {x}")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<CrosscoderParams> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let tag = r.u32()?;
    let dict = r.u32()? as usize;
    let d = r.u32()? as usize;
    let reserved = r.u32()?;
    if reserved != 0 {
        return Err(XdiffError::Format(format!("reserved header field is {reserved}, expected 0")));
    }
    let (variant, theta) = match tag {
        TAG_L1 => {
            let mu = r.f64()?;
            (Variant::L1 { mu }, r.f64()?)
        }
        TAG_BATCHTOPK => {
            let k = count_field(r.f64()?, "k")?;
            let k_aux = count_field(r.f64()?, "k_aux")?;
            let alpha = r.f64()?;
            (Variant::BatchTopK { k, k_aux, alpha }, r.f64()?)
        }
        other => return Err(XdiffError::Format(format!("unknown variant tag {other}"))),
    };
    if dict == 0 || d == 0 {
        return Err(XdiffError::Format("dictionary size and dimension must be nonzero".into()));
    }
    let mat = block_len(dict, d)?;
    let mut w = Weights::zeros(0, 0);
    let read_mat = |r: &mut Reader<'_>| -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((dict, d), r.f32_block(mat)?).expect("shape"))
    };
    w.enc_base = read_mat(&mut r)?;
    w.enc_chat = read_mat(&mut r)?;
    w.b_enc = r.f32_block(dict)?.into();
    w.dec_base = read_mat(&mut r)?;
    w.dec_chat = read_mat(&mut r)?;
    w.b_dec_base = r.f32_block(d)?.into();
    w.b_dec_chat = r.f32_block(d)?.into();
    r.finish()?;

    let mut params = CrosscoderParams::new(w, variant).map_err(|e| XdiffError::Format(e.to_string()))?;
    if !theta.is_nan() {
        params.set_theta(theta).map_err(|e| XdiffError::Format(e.to_string()))?;
    }
    Ok(params)
}

pub fn encode_batch(batch: &PairedActivationBatch) -> Vec<u8> {
    let (n, d) = batch.h_base.dim();
    let mut out = Vec::with_capacity(16 + 8 * n * d + n);
    out.extend_from_slice(BATCH_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    put_f32s(&mut out, batch.h_base.iter());
    put_f32s(&mut out, batch.h_chat.iter());
    out.extend(batch.template_mask.iter().map(|&m| m as u8));
    out
}

/// Decoded batches carry no ground truth and start at global index 0.
pub fn decode_batch(bytes: &[u8]) -> Result<PairedActivationBatch> {
    let mut r = Reader::new(bytes);
    r.magic(BATCH_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let len = block_len(n, d)?;
    let h_base = Array2::from_shape_vec((n, d), r.f32_block(len)?).expect("shape");
    let h_chat = Array2::from_shape_vec((n, d), r.f32_block(len)?).expect("shape");
    let mask = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(XdiffError::Format(format!("template mask byte {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    r.finish()?;
    PairedActivationBatch::new(h_base, h_chat, mask).map_err(|e| XdiffError::Format(e.to_string()))
}

pub fn save_params(path: &Path, params: &CrosscoderParams) -> Result<()> {
    fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<CrosscoderParams> {
    decode_weights(&fs::read(path)?)
}

pub fn save_batch(path: &Path, batch: &PairedActivationBatch) -> Result<()> {
    fs::write(path, encode_batch(batch))?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<PairedActivationBatch> {
    decode_batch(&fs::read(path)?)
}
