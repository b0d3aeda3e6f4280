//! Plain image containers and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Values scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Rounds and clamps `[0, 1]` floats (HWC) back to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height * 3);
        let data = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { width, height, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png(path)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match (info.color_type, info.bit_depth) {
            (png::ColorType::Rgb, png::BitDepth::Eight) => buf,
            (png::ColorType::Rgba, png::BitDepth::Eight) => {
                buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            }
            (png::ColorType::Grayscale, png::BitDepth::Eight) => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            (ct, bd) => {
                return Err(Error::Image { path: path.into(), message: format!("unsupported PNG format {ct:?}/{bd:?}") })
            }
        };
        Ok(Self { width: w, height: h, data })
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

/// Axis-aligned rectangle `[x0, y0, x1, y1)`.
pub type BBox = [usize; 4];

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some([x0, y0, x1, y1])
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask sizes differ");
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask { width: self.width, height: self.height, bits }
    }

    /// Rasterises a box inclusively of its covered pixels.
    pub fn from_bbox(width: usize, height: usize, b: BBox) -> Mask {
        let mut m = Mask::new(width, height);
        for y in b[1]..b[3].min(height) {
            for x in b[0]..b[2].min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    /// Any-positive pooling onto a `side` x `side` grid.
    pub fn downsample_any(&self, side: usize) -> Result<Mask> {
        if side == 0 || self.width % side != 0 || self.height % side != 0 {
            return Err(Error::Shape(format!("cannot pool {}x{} onto {side}x{side}", self.width, self.height)));
        }
        let (fx, fy) = (self.width / side, self.height / side);
        let mut out = Mask::new(side, side);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.set(x / fx, y / fy, true);
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png(path)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let mut m = Mask::new(w, h);
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Grayscale, png::BitDepth::One) => {
                let stride = w.div_ceil(8);
                for y in 0..h {
                    for x in 0..w {
                        m.set(x, y, buf[y * stride + x / 8] & (0x80 >> (x % 8)) != 0);
                    }
                }
            }
            (png::ColorType::Grayscale, png::BitDepth::Eight) => {
                for (b, &v) in m.bits.iter_mut().zip(&buf) {
                    *b = v >= 128;
                }
            }
            (ct, bd) => {
                return Err(Error::Image { path: path.into(), message: format!("unsupported mask format {ct:?}/{bd:?}") })
            }
        }
        Ok(m)
    }
}

/// Bilinear resampling of an interleaved `h x w x c` grid with the
/// align-corners=false convention and edge clamping. Every output value is a
/// convex combination of input values, so per-pixel channel sums are kept.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w * c);
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * c + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

fn write_png(path: &Path, w: usize, h: usize, ct: png::ColorType, bd: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ct);
    enc.set_depth(bd);
    let img_err = |e: png::EncodingError| Error::Image { path: path.into(), message: e.to_string() };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |e: png::DecodingError| Error::Image { path: path.into(), message: e.to_string() };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(img_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_is_tight() {
        let mut m = Mask::new(8, 8);
        m.set(2, 3, true);
        m.set(5, 4, true);
        assert_eq!(m.bbox(), Some([2, 3, 6, 5]));
        assert_eq!(Mask::new(4, 4).bbox(), None);
    }

    #[test]
    fn any_pooling_keeps_single_pixels() {
        let mut m = Mask::new(8, 8);
        m.set(7, 0, true);
        let d = m.downsample_any(2).unwrap();
        assert_eq!(d.bits, vec![false, true, false, false]);
        assert!(m.downsample_any(3).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);

        let mut m = Mask::new(11, 3);
        m.set(0, 0, true);
        m.set(10, 2, true);
        m.set(8, 1, true);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }
}
