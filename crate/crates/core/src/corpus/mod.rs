//! Procedural shapes corpus with exact masks and captions.

pub mod caption;
pub mod raster;
mod store;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use caption::{render_caption, ObjectTraits, Position, SizeClass, Templates, Variability, EMPTY_CAPTION};
pub use store::{
    build_corpus, caption_grounds, filter_eval_set, generate_sample, sample_rng, Corpus, CorpusManifest, CorpusOptions, ObjectRecord,
    SampleRecord, Split, SplitSizes,
};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Mask, RgbImage};
use raster::{Shape, ShapeKind};

/// Rejection-sampling budget per object.
pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub gray: u8,
    /// Standard deviation of the texture, in 8-bit levels.
    pub texture_sigma: u8,
    /// Lattice cells per side of the smooth texture.
    pub texture_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub object_classes: Vec<String>,
    pub objects_per_image: [usize; 2],
    /// Nominal object extent in pixels, inclusive range.
    pub size_range: [usize; 2],
    pub color_palette: Vec<NamedColor>,
    pub background: Background,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let color = |name: &str, rgb| NamedColor { name: name.into(), rgb };
        Self {
            image_size: 64,
            object_classes: ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            objects_per_image: [1, 3],
            size_range: [12, 22],
            color_palette: vec![
                color("red", [181, 87, 87]),
                color("green", [87, 164, 96]),
                color("blue", [87, 104, 181]),
                color("yellow", [181, 172, 87]),
                color("purple", [155, 96, 164]),
                color("cyan", [87, 164, 172]),
            ],
            background: Background { gray: 128, texture_sigma: 6, texture_cells: 4 },
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::parse("scene spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} must be a power of two >= 32", self.image_size));
        }
        let [lo, hi] = self.objects_per_image;
        if lo < 1 || hi < lo {
            return bad(format!("objects_per_image [{lo}, {hi}] must satisfy 1 <= min <= max"));
        }
        if self.object_classes.is_empty() {
            return bad("object_classes is empty".into());
        }
        for c in &self.object_classes {
            if ShapeKind::from_name(c).is_none() {
                return bad(format!("unknown object class {c:?}"));
            }
        }
        if self.color_palette.is_empty() {
            return bad("color_palette is empty".into());
        }
        let [smin, smax] = self.size_range;
        if smin < 12 || smax < smin || smax > self.image_size / 2 {
            return bad(format!("size_range [{smin}, {smax}] must lie in [12, image_size/2]"));
        }
        Ok(())
    }
}

/// One placed object with its exact mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub class: String,
    pub color: String,
    pub size_px: usize,
    pub mask: Mask,
    pub bbox: BBox,
}

impl SceneObject {
    pub fn traits(&self, image_size: usize) -> ObjectTraits {
        let [x0, y0, x1, y1] = self.bbox;
        ObjectTraits {
            class: self.class.clone(),
            color: self.color.clone(),
            size: SizeClass::of(self.size_px),
            position: Position::of((x0 + x1) / 2, (y0 + y1) / 2, image_size),
        }
    }
}

/// A generated image before captioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

/// A captioned, split-assigned corpus sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
    pub caption: String,
    pub variability: Variability,
    pub split: Split,
}

impl Sample {
    pub fn is_empty_scene(&self) -> bool {
        self.objects.is_empty()
    }

    /// Distinct classes in first-appearance order.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.class) {
                out.push(o.class.clone());
            }
        }
        out
    }
}

/// Draws the background only.
pub fn generate_background<G: Rng + ?Sized>(spec: &SceneSpec, rng: &mut G) -> RgbImage {
    let bg = &spec.background;
    raster::background(spec.image_size, bg.gray, bg.texture_sigma, bg.texture_cells, rng)
}

/// Generates a scene with `objects_per_image` objects that do not touch
/// (masks are disjoint with a one-pixel gap).
pub fn generate_scene<G: Rng + ?Sized>(spec: &SceneSpec, rng: &mut G) -> Result<Scene> {
    spec.validate()?;
    let n = rng.random_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
    generate_scene_with(spec, n, rng)
}

/// Like [`generate_scene`] with an explicit object count (0 gives an empty
/// scene).
pub fn generate_scene_with<G: Rng + ?Sized>(spec: &SceneSpec, n_objects: usize, rng: &mut G) -> Result<Scene> {
    let size = spec.image_size;
    let mut image = generate_background(spec, rng);
    let mut occupied = Mask::new(size, size);
    let mut objects = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let class = spec.object_classes.choose(rng).unwrap().clone();
        let kind = ShapeKind::from_name(&class).expect("validated class");
        let color = spec.color_palette.choose(rng).unwrap().clone();
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = rng.random_range(spec.size_range[0]..=spec.size_range[1]);
            let margin = s / 2 + 1;
            let cx = rng.random_range(margin..size - margin);
            let cy = rng.random_range(margin..size - margin);
            let shape = Shape::random(kind, cx, cy, s, rng);
            let mask = raster_mask(&shape, size);
            if mask.is_empty() || mask.intersection(&occupied) > 0 {
                continue;
            }
            placed = Some((shape, s, mask));
            break;
        }
        let Some((shape, s, _)) = placed else {
            return Err(Error::Generation(format!(
                "could not place object {} of {n_objects} ({class}) after {PLACEMENT_ATTEMPTS} attempts",
                k + 1
            )));
        };
        let mask = raster::paint(&mut image, &shape, color.rgb);
        occupied = occupied.union(&dilate(&mask));
        let bbox = mask.bbox().expect("placed mask is non-empty");
        objects.push(SceneObject { class, color: color.name, size_px: s, mask, bbox });
    }
    Ok(Scene { image, objects })
}

fn raster_mask(shape: &Shape, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            if shape.contains(4 * x as i64 + 2, 4 * y as i64 + 2) {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn dilate(m: &Mask) -> Mask {
    let mut out = m.clone();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < m.width && (ny as usize) < m.height {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
    }
    out
}
