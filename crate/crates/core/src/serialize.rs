//! Mixture files: a compact binary container and a TOML text export.
//!
//! Binary layout, little-endian: the magic `GMCN`, then `version, k, B, F, N`
//! as `u32`, then `B·F·N` components of `(weight, position, packed
//! covariance)` as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{param_stride, MixtureBatch};

pub const MAGIC: &[u8; 4] = b"GMCN";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_mixtures<W: Write>(mut w: W, m: &MixtureBatch) -> Result<()> {
    w.write_all(MAGIC)?;
    let (b, f, n) = m.shape();
    for v in [FORMAT_VERSION, m.dims() as u32, b as u32, f as u32, n as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in m.packed_params() {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mixtures<R: Read>(mut r: R) -> Result<MixtureBatch> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a GMCN mixture file".into()));
    }
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *h = u32::from_le_bytes(b);
    }
    let [version, k, b, f, n] = header.map(|v| v as usize);
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported mixture format version {version}")));
    }
    crate::gaussian::check_dims(k)?;
    let count = b
        .checked_mul(f)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(param_stride(k)))
        .ok_or_else(|| Error::Format("mixture header overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::Format(format!("expected {} parameter bytes, found {}", count * 4, bytes.len())));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = MixtureBatch::from_packed_params(k, b, f, n, &params)?;
    m.validate()?;
    Ok(m)
}

pub fn save_mixtures(path: &Path, m: &MixtureBatch) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mixtures(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_mixtures(path: &Path) -> Result<MixtureBatch> {
    read_mixtures(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct TextComponent {
    batch: usize,
    channel: usize,
    weight: f64,
    position: Vec<f64>,
    covariance: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TextMixture {
    version: u32,
    dims: usize,
    batch: usize,
    channels: usize,
    components: usize,
    gaussian: Vec<TextComponent>,
}

/// Full-precision text rendering, one `[[gaussian]]` table per component.
pub fn to_text(m: &MixtureBatch) -> Result<String> {
    let (b_n, f_n, n_n) = m.shape();
    let k = m.dims();
    let p = k * (k + 1) / 2;
    let gaussian = m
        .gaussians()
        .iter()
        .enumerate()
        .map(|(i, g)| TextComponent {
            batch: i / (f_n * n_n),
            channel: (i / n_n) % f_n,
            weight: g.weight,
            position: g.position[..k].to_vec(),
            covariance: g.covariance[..p].to_vec(),
        })
        .collect();
    let t = TextMixture {
        version: FORMAT_VERSION,
        dims: k,
        batch: b_n,
        channels: f_n,
        components: n_n,
        gaussian,
    };
    toml::to_string(&t).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_text(s: &str) -> Result<MixtureBatch> {
    let t: TextMixture = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
    if t.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported mixture format version {}", t.version)));
    }
    let mut params = Vec::with_capacity(t.gaussian.len() * param_stride(t.dims));
    for g in &t.gaussian {
        params.push(g.weight);
        params.extend(&g.position);
        params.extend(&g.covariance);
    }
    let m = MixtureBatch::from_packed_params(t.dims, t.batch, t.channels, t.components, &params)?;
    m.validate()?;
    Ok(m)
}
