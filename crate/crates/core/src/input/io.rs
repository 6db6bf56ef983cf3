//! Readers for MNIST IDX files and point clouds.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::input::fit::Image;
use crate::input::kmeans::WeightedPointSet;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file into images with intensities scaled to `[0, 1]`.
/// At most `limit` images are returned.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    if bytes.len() < 16 + count * size {
        return Err(Error::Format(format!(
            "IDX image file holds {} bytes, header promises {}",
            bytes.len(),
            16 + count * size
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    (0..n)
        .map(|i| {
            let px = bytes[16 + i * size..16 + (i + 1) * size]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Image::new(cols, rows, px)
        })
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Format("truncated IDX label file".into()));
    }
    let n = limit.map_or(count, |l| l.min(count));
    Ok(bytes[8..8 + n].to_vec())
}

pub fn read_idx_images(path: &Path, limit: Option<usize>) -> Result<Vec<Image>> {
    parse_idx_images(&fs::read(path)?, limit)
}

pub fn read_idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<u8>> {
    parse_idx_labels(&fs::read(path)?, limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Images and labels of one split from the standard file names in `dir`.
pub fn load_mnist(dir: &Path, split: MnistSplit, limit: Option<usize>) -> Result<(Vec<Image>, Vec<u8>)> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let images = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), limit)?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), limit)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!("{} images but {} labels", images.len(), labels.len())));
    }
    Ok((images, labels))
}

/// Whitespace-separated `x y z` per line; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<WeightedPointSet> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("line {}: expected three coordinates", n + 1)));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    if pts.is_empty() {
        return Err(Error::Format("no points".into()));
    }
    WeightedPointSet::uniform(3, pts)
}

/// Vertices of an OFF mesh; faces are ignored.
pub fn parse_off(text: &str) -> Result<WeightedPointSet> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace());
    let head = tokens.next().ok_or_else(|| Error::Format("empty OFF file".into()))?;
    // some files glue the counts to the keyword, as in "OFF1000 2000 0"
    let first_count = match head.strip_prefix("OFF") {
        Some("") => None,
        Some(rest) => Some(rest.to_string()),
        None => return Err(Error::Format(format!("expected OFF header, got {head}"))),
    };
    let mut next_num = |what: &str| -> Result<f64> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("missing {what}")))?
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("{what}: {e}")))
    };
    let n_vertices = match first_count {
        Some(s) => s.parse::<f64>().map_err(|e| Error::Format(format!("vertex count: {e}")))?,
        None => next_num("vertex count")?,
    } as usize;
    next_num("face count")?;
    next_num("edge count")?;
    let mut pts = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        pts.push([next_num("x")?, next_num("y")?, next_num("z")?]);
    }
    if pts.is_empty() {
        return Err(Error::Format("OFF file has no vertices".into()));
    }
    WeightedPointSet::uniform(3, pts)
}

/// Reads `.off` files as meshes and anything else as `x y z` text.
pub fn read_point_cloud(path: &Path) -> Result<WeightedPointSet> {
    let text = fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("off") => parse_off(&text),
        _ => parse_xyz(&text),
    }
}
