//! False-colour rendering of mixtures to binary PPM images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{BoundingBox, Gaussian, PreparedGaussian};

/// An 8-bit RGB raster, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Blue for −1, white for 0, red for +1.
pub fn diverging_color(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let fade = |v: f64| (255.0 * (1.0 - v)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Which plane of a 3D mixture to render: `axis` is held at `value` and the
/// remaining two axes span the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slice {
    pub axis: usize,
    pub value: f64,
}

/// Field values on a `width × height` raster of cell centres, rows top to
/// bottom (largest second coordinate first). `bbox` covers the two image
/// axes.
pub fn raster_values(
    gs: &[Gaussian],
    dims: usize,
    bbox: &BoundingBox,
    width: usize,
    height: usize,
    slice: Option<Slice>,
) -> Result<Vec<f64>> {
    if bbox.dims() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: bbox.dims(),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image must have at least one pixel".into()));
    }
    if (0..2).any(|d| !(bbox.max[d] > bbox.min[d])) {
        return Err(Error::ZeroVolume);
    }
    let axes: [usize; 2] = match (dims, slice) {
        (2, None) => [0, 1],
        (3, Some(s)) if s.axis < 3 => {
            let mut a = (0..3).filter(|&d| d != s.axis);
            [a.next().unwrap_or(0), a.next().unwrap_or(1)]
        }
        (3, _) => return Err(Error::InvalidArgument("3D mixtures need a slice axis in 0..3".into())),
        (d, _) => return Err(Error::UnsupportedDims(d)),
    };
    let prepared = gs.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let hx = (bbox.max[0] - bbox.min[0]) / width as f64;
    let hy = (bbox.max[1] - bbox.min[1]) / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        let y = bbox.max[1] - (row as f64 + 0.5) * hy;
        for col in 0..width {
            let x = bbox.min[0] + (col as f64 + 0.5) * hx;
            let mut p = [0.0; 3];
            if let Some(s) = slice {
                p[s.axis] = s.value;
            }
            p[axes[0]] = x;
            p[axes[1]] = y;
            out.push(prepared.iter().map(|g| g.eval(&p)).sum());
        }
    }
    Ok(out)
}

/// Colours `values` symmetrically over `[−v, v]` with `v = max |value|`.
pub fn colorize(values: &[f64], width: usize, height: usize) -> RgbImage {
    let v = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let data = values
        .iter()
        .flat_map(|x| diverging_color(if v > 0.0 { x / v } else { 0.0 }))
        .collect();
    RgbImage { width, height, data }
}

pub fn render(
    gs: &[Gaussian],
    dims: usize,
    bbox: &BoundingBox,
    width: usize,
    height: usize,
    slice: Option<Slice>,
) -> Result<RgbImage> {
    let values = raster_values(gs, dims, bbox, width, height, slice)?;
    Ok(colorize(&values, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoundingBox {
        BoundingBox::new(vec![-4.0, -4.0], vec![4.0, 4.0])
    }

    #[test]
    fn zero_mixture_is_uniform_white() {
        let img = render(&[Gaussian::padding(2)], 2, &unit_box(), 8, 6, None).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [255, 255, 255]));
        let img = render(&[], 2, &unit_box(), 4, 4, None).unwrap();
        assert_eq!(img.pixel(3, 3), [255, 255, 255]);
    }

    #[test]
    fn peak_pixel_sits_on_the_mean() {
        let g = Gaussian::isotropic(2.0, &[1.3, -2.1], 0.5).unwrap();
        let (w, h) = (64, 48);
        let vals = raster_values(&[g], 2, &unit_box(), w, h, None).unwrap();
        let best = (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let (col, row) = (best % w, best / w);
        let x = -4.0 + (col as f64 + 0.5) * 8.0 / w as f64;
        let y = 4.0 - (row as f64 + 0.5) * 8.0 / h as f64;
        assert!((x - 1.3).abs() <= 8.0 / w as f64);
        assert!((y + 2.1).abs() <= 8.0 / h as f64);
        let img = colorize(&vals, w, h);
        assert_eq!(img.pixel(col, row), [255, 0, 0]);
    }

    #[test]
    fn ppm_header_matches_dimensions() {
        let g = Gaussian::isotropic(-1.0, &[0.0, 0.0], 1.0).unwrap();
        let img = render(&[g], 2, &unit_box(), 5, 3, None).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(buf.len(), b"P6\n5 3\n255\n".len() + 45);
        assert!(img.data.chunks(3).all(|p| p[2] == 255));
    }

    #[test]
    fn slices_of_3d_mixtures() {
        let g = Gaussian::isotropic(1.0, &[0.5, 0.0, 2.0], 0.3).unwrap();
        let on = raster_values(&[g], 3, &unit_box(), 16, 16, Some(Slice { axis: 1, value: 0.0 })).unwrap();
        let off = raster_values(&[g], 3, &unit_box(), 16, 16, Some(Slice { axis: 1, value: 3.0 })).unwrap();
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        assert!(max(&on) > 1e3 * max(&off));
        assert!(raster_values(&[g], 3, &unit_box(), 4, 4, None).is_err());
    }

    #[test]
    fn colour_map_endpoints() {
        assert_eq!(diverging_color(1.0), [255, 0, 0]);
        assert_eq!(diverging_color(-1.0), [0, 0, 255]);
        assert_eq!(diverging_color(0.0), [255, 255, 255]);
        assert_eq!(diverging_color(7.0), [255, 0, 0]);
    }
}
