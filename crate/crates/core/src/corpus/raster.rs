//! Integer rasteriser for the shape classes.
//!
//! Geometry is evaluated in quarter-pixel units so that both the binary mask
//! (pixel centre test) and the 2x2 supersampled coverage are exact integer
//! computations.

use rand::Rng;

use crate::imaging::{Mask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Blob,
    Wedge,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::Blob,
        ShapeKind::Wedge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Blob => "blob",
            ShapeKind::Wedge => "wedge",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A placed shape: centre and bounding radius in quarter pixels plus the
/// per-instance random parameters.
#[derive(Clone, Debug)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
    /// Quarter-turn rotation, 0..4.
    pub orient: u8,
    /// Blob lobes as (dx, dy, radius) in quarter pixels.
    pub lobes: Vec<(i64, i64, i64)>,
}

impl Shape {
    /// `size` is the nominal extent in pixels; the centre is a pixel index.
    pub fn random<G: Rng + ?Sized>(kind: ShapeKind, cx: usize, cy: usize, size: usize, rng: &mut G) -> Self {
        let r = 2 * size as i64;
        let orient = rng.random_range(0..4u8);
        let lobes = if kind == ShapeKind::Blob {
            (0..3)
                .map(|_| {
                    let ox = rng.random_range(-r / 3..=r / 3);
                    let oy = rng.random_range(-r / 3..=r / 3);
                    let rad = rng.random_range(r / 2..=2 * r / 3);
                    (ox, oy, rad)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { kind, cx: 4 * cx as i64 + 2, cy: 4 * cy as i64 + 2, r, orient, lobes }
    }

    /// Point-in-shape test for a point in quarter-pixel coordinates.
    pub fn contains(&self, px: i64, py: i64) -> bool {
        let (dx, dy) = rotate(px - self.cx, py - self.cy, self.orient);
        let r = self.r;
        let d2 = dx * dx + dy * dy;
        match self.kind {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Square => dx.abs().max(dy.abs()) * 5 <= r * 4,
            ShapeKind::Triangle => dy >= -r && dy <= r * 3 / 4 && 2 * dx.abs() <= (dy + r) * 4 / 5,
            ShapeKind::Cross => {
                let t = r * 2 / 5;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let inner = r * 11 / 20;
                d2 <= r * r && d2 >= inner * inner
            }
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= r / 2,
            ShapeKind::Blob => {
                // lobes are stored unrotated
                let (ux, uy) = (px - self.cx, py - self.cy);
                self.lobes.iter().any(|&(ox, oy, rad)| (ux - ox).pow(2) + (uy - oy).pow(2) <= rad * rad)
            }
            ShapeKind::Wedge => {
                // quarter disc with its apex behind the centre
                let ax = dx + r / 2;
                d2_le(ax, dy, r * 3 / 2) && ax >= dy.abs()
            }
        }
    }
}

fn d2_le(x: i64, y: i64, r: i64) -> bool {
    x * x + y * y <= r * r
}

fn rotate(x: i64, y: i64, k: u8) -> (i64, i64) {
    match k % 4 {
        0 => (x, y),
        1 => (-y, x),
        2 => (-x, -y),
        _ => (y, -x),
    }
}

/// Rasterises `shape` onto `img` with 2x2 supersampling and returns its
/// binary mask (pixel-centre test, no anti-aliasing).
pub fn paint(img: &mut RgbImage, shape: &Shape, rgb: [u8; 3]) -> Mask {
    let (w, h) = (img.width, img.height);
    let mut mask = Mask::new(w, h);
    let reach = shape.r * 2 + 8;
    let x_lo = ((shape.cx - reach) / 4).max(0) as usize;
    let y_lo = ((shape.cy - reach) / 4).max(0) as usize;
    let x_hi = (((shape.cx + reach) / 4 + 1) as usize).min(w);
    let y_hi = (((shape.cy + reach) / 4 + 1) as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (qx, qy) = (4 * x as i64, 4 * y as i64);
            if shape.contains(qx + 2, qy + 2) {
                mask.set(x, y, true);
            }
            let cov = [(1, 1), (3, 1), (1, 3), (3, 3)].iter().filter(|&&(sx, sy)| shape.contains(qx + sx, qy + sy)).count()
                as u32;
            if cov > 0 {
                let bg = img.pixel(x, y);
                let mut out = [0u8; 3];
                for c in 0..3 {
                    out[c] = ((bg[c] as u32 * (4 - cov) + rgb[c] as u32 * cov + 2) / 4) as u8;
                }
                img.set_pixel(x, y, out);
            }
        }
    }
    mask
}

/// Smooth gray background: integer noise on a coarse lattice, bilinearly
/// interpolated in fixed point.
pub fn background<G: Rng + ?Sized>(size: usize, gray: u8, sigma: u8, cells: usize, rng: &mut G) -> RgbImage {
    let cells = cells.clamp(1, size);
    let n = cells + 1;
    let s = sigma as i64;
    // sum of three uniforms on [-s, s] has standard deviation s
    let lattice: Vec<i64> = (0..n * n)
        .map(|_| (0..3).map(|_| if s == 0 { 0 } else { rng.random_range(-s..=s) }).sum())
        .collect();
    let mut img = RgbImage::new(size, size);
    let span = size as i64; // lattice coordinate = pixel * cells / size
    let denom = span * span;
    for y in 0..size {
        let fy = y as i64 * cells as i64;
        let (iy, uy) = ((fy / span) as usize, fy % span);
        for x in 0..size {
            let fx = x as i64 * cells as i64;
            let (ix, ux) = ((fx / span) as usize, fx % span);
            let at = |i: usize, j: usize| lattice[j.min(n - 1) * n + i.min(n - 1)];
            let acc = at(ix, iy) * (span - ux) * (span - uy)
                + at(ix + 1, iy) * ux * (span - uy)
                + at(ix, iy + 1) * (span - ux) * uy
                + at(ix + 1, iy + 1) * ux * uy;
            let v = (gray as i64 + (acc + denom / 2).div_euclid(denom)).clamp(0, 255) as u8;
            img.set_pixel(x, y, [v, v, v]);
        }
    }
    img
}
