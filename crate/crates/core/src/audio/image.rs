use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 224;
pub const IMAGE_MAGIC: &[u8; 4] = b"DFIM";

/// `height × width × channels` image, channel-last, stored in single
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image {height}×{width}×{channels} does not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature image".into()));
        }
        Ok(FeatureImage {
            height,
            width,
            channels,
            data,
        })
    }

    /// Interleaves equally sized single-channel planes.
    pub fn from_channels(planes: &[Matrix]) -> Result<Self> {
        let (h, w) = (planes[0].rows, planes[0].cols);
        if planes.iter().any(|p| p.rows != h || p.cols != w) {
            return Err(Error::invalid("channel planes differ in size"));
        }
        let c = planes.len();
        let mut data = vec![0f32; h * w * c];
        for (ci, p) in planes.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * c + ci] = v as f32;
            }
        }
        FeatureImage::new(h, w, c, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-first copy (`[C, H, W]`) in double precision, the layout the
    /// convolution kernels expect.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v as f64;
            }
        }
        out
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide
/// with input corners. A length-1 axis is replicated.
pub fn resize_bilinear(m: &Matrix, rows: usize, cols: usize) -> Matrix {
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if inp == 1 || out == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let ycs: Vec<_> = (0..rows).map(|y| coord(y, rows, m.rows)).collect();
    let xcs: Vec<_> = (0..cols).map(|x| coord(x, cols, m.cols)).collect();
    Matrix::from_fn(rows, cols, |y, x| {
        let (y0, y1, fy) = ycs[y];
        let (x0, x1, fx) = xcs[x];
        let top = lerp(m.get(y0, x0), m.get(y0, x1), fx);
        let bot = lerp(m.get(y1, x0), m.get(y1, x1), fx);
        lerp(top, bot, fy)
    })
}

// exact when a == b, so constant planes stay constant
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

pub fn write_feature_image(path: impl AsRef<Path>, img: &FeatureImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMAGE_MAGIC)?;
    for d in [img.height, img.width, img.channels] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &img.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_image(path: impl AsRef<Path>) -> Result<FeatureImage> {
    let path = path.as_ref();
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureImage::new(dims[0], dims[1], dims[2], data)
}
