//! Procedural "objects made of parts" scenes with exact landmark ground truth.
//!
//! Each category is a fixed constellation of distinct glyphs. A scene places
//! the constellation under one global translation and scale, jitters every
//! part independently, and paints it over a cluttered noisy background.
//! Landmarks are the glyph centroids in continuous pixel coordinates, where
//! pixel `(r, c)` covers `[r, r+1) x [c, c+1)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Glyph {
    Cross,
    Disc,
    LCorner,
    Bar,
    Ring,
    Wedge,
}

// Arm thickness of the L glyph, in glyph-radius units.
const L_ARM: f64 = 0.6;

impl Glyph {
    /// Centroid of the unshifted L shape, so the drawn L is centred on its landmark.
    fn l_centroid() -> (f64, f64) {
        // vertical arm: x in [-1, -1+arm], y in [-1, 1]
        let a1 = L_ARM * 2.0;
        let (y1, x1) = (0.0, -1.0 + L_ARM / 2.0);
        // horizontal arm without the overlap: x in [-1+arm, 1], y in [1-arm, 1]
        let a2 = (2.0 - L_ARM) * L_ARM;
        let (y2, x2) = (1.0 - L_ARM / 2.0, (-1.0 + L_ARM + 1.0) / 2.0);
        let a = a1 + a2;
        ((a1 * y1 + a2 * y2) / a, (a1 * x1 + a2 * x2) / a)
    }

    /// Whether the point `(dy, dx)`, in glyph-radius units relative to the
    /// landmark, is covered by the glyph.
    pub fn covers(self, dy: f64, dx: f64) -> bool {
        match self {
            Glyph::Disc => dy * dy + dx * dx <= 1.0,
            Glyph::Ring => {
                let d = libm::sqrt(dy * dy + dx * dx);
                (0.55..=1.0).contains(&d)
            }
            Glyph::Cross => {
                (dy.abs() <= 0.28 && dx.abs() <= 1.0) || (dx.abs() <= 0.28 && dy.abs() <= 1.0)
            }
            Glyph::Bar => dy.abs() <= 0.35 && dx.abs() <= 1.1,
            Glyph::LCorner => {
                let (cy, cx) = Self::l_centroid();
                let (uy, ux) = (dy + cy, dx + cx);
                let vertical = (-1.0..=-1.0 + L_ARM).contains(&ux) && (-1.0..=1.0).contains(&uy);
                let horizontal = (1.0 - L_ARM..=1.0).contains(&uy) && (-1.0..=1.0).contains(&ux);
                vertical || horizontal
            }
            Glyph::Wedge => {
                // apex (-1.2, 0), base corners (0.6, +-1): centroid at the origin
                dy <= 0.6 && dy >= -1.2 && dx.abs() <= (dy + 1.2) / 1.8
            }
        }
    }

    /// Half-extent along either axis, in glyph-radius units.
    pub fn extent(self) -> f64 {
        match self {
            Glyph::Disc | Glyph::Ring | Glyph::Cross => 1.0,
            Glyph::Bar => 1.1,
            Glyph::Wedge => 1.2,
            Glyph::LCorner => {
                let (cy, cx) = Self::l_centroid();
                1.0 + cy.abs().max(cx.abs())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub glyph: Glyph,
    /// Nominal `(row, col)` offset from the object centre, as a fraction of the image size.
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDescriptor {
    pub name: String,
    pub parts: Vec<PartSpec>,
}

/// Scene-wide rendering constants. Lengths are fractions of `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGeometry {
    pub size: usize,
    pub glyph_radius: f64,
    /// Per-part jitter half-width; at most 0.1.
    pub jitter: f64,
    /// Global translation half-width.
    pub max_shift: f64,
    pub scale_range: (f64, f64),
    /// Number of clutter strokes in the background.
    pub clutter: usize,
    /// Amplitude of uniform background noise.
    pub noise: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            size: 64,
            glyph_radius: 0.07,
            jitter: 0.04,
            max_shift: 0.18,
            scale_range: (0.9, 1.1),
            clutter: 4,
            noise: 0.12,
        }
    }
}

impl SceneGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.size < 32 {
            return bad(format!("image size {} is below the minimum of 32", self.size));
        }
        if !(0.0..=0.1).contains(&self.jitter) {
            return bad(format!("jitter {} must lie in [0, 0.1]", self.jitter));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale range ({lo}, {hi}) is not a positive interval"));
        }
        if !(self.glyph_radius > 0.0 && self.max_shift >= 0.0 && self.noise >= 0.0) {
            return bad(String::from("glyph_radius must be positive, max_shift and noise nonnegative"));
        }
        Ok(())
    }

    /// Rejects a descriptor whose parts could leave the canvas under the
    /// largest admissible shift, scale and jitter.
    pub fn check_descriptor(&self, desc: &CategoryDescriptor) -> Result<()> {
        self.validate()?;
        if desc.parts.len() < 2 {
            return Err(Error::Config(format!(
                "category '{}' has {} parts; at least 2 are required",
                desc.name,
                desc.parts.len()
            )));
        }
        for (i, a) in desc.parts.iter().enumerate() {
            if desc.parts[..i].iter().any(|b| b.glyph == a.glyph) {
                return Err(Error::Config(format!(
                    "category '{}' repeats glyph {:?}",
                    desc.name, a.glyph
                )));
            }
        }
        let smax = self.scale_range.1;
        for part in &desc.parts {
            for off in [part.offset.0, part.offset.1] {
                let reach = off.abs() * smax + self.max_shift + self.jitter + part.glyph.extent() * self.glyph_radius * smax;
                if reach > 0.5 {
                    return Err(Error::Config(format!(
                        "category '{}': {:?} at offset {:?} can leave the canvas (reach {:.3} > 0.5)",
                        desc.name, part.glyph, part.offset, reach
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl BoundingBox {
    pub fn contains(&self, (r, c): (f64, f64)) -> bool {
        r >= self.top && r <= self.top + self.height && c >= self.left && c <= self.left + self.width
    }
}

/// Global placement of the object in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub center: (f64, f64),
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Single-channel `size x size` image with values in `[0, 1]`, quantised to 8-bit levels.
    pub image: FeatureMap,
    pub label: usize,
    pub landmarks: Vec<(f64, f64)>,
    pub object_bbox: BoundingBox,
    pub pose: ObjectPose,
}

impl SyntheticScene {
    /// Landmark displacement from the pose-transformed nominal layout.
    pub fn jitter_of(&self, desc: &CategoryDescriptor, size: usize) -> Vec<(f64, f64)> {
        let s = size as f64;
        self.landmarks
            .iter()
            .zip(&desc.parts)
            .map(|(&(r, c), part)| {
                (
                    r - (self.pose.center.0 + self.pose.scale * part.offset.0 * s),
                    c - (self.pose.center.1 + self.pose.scale * part.offset.1 * s),
                )
            })
            .collect()
    }
}

fn quantize(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    libm::round(v * 255.0) / 255.0
}

const GLYPH_INTENSITY: f64 = 0.9;
const BACKGROUND_LEVEL: f64 = 0.05;
const CLUTTER_INTENSITY: f64 = 0.4;

fn paint_background(geometry: &SceneGeometry, rng: &mut impl RngCore) -> Vec<f64> {
    let n = geometry.size;
    let s = n as f64;
    let mut img = vec![0.0; n * n];
    for v in &mut img {
        *v = BACKGROUND_LEVEL + geometry.noise * rng::unit(rng);
    }
    for _ in 0..geometry.clutter {
        let (r0, c0) = (rng::uniform(rng, 0.0, s), rng::uniform(rng, 0.0, s));
        let angle = rng::uniform(rng, 0.0, core::f64::consts::PI);
        let len = rng::uniform(rng, 0.05, 0.12) * s;
        let (dr, dc) = (libm::sin(angle), libm::cos(angle));
        let steps = (len * 2.0) as usize + 1;
        for k in 0..steps {
            let t = k as f64 / 2.0;
            let (r, c) = (r0 + dr * t, c0 + dc * t);
            if r >= 0.0 && c >= 0.0 && r < s && c < s {
                let idx = r as usize * n + c as usize;
                img[idx] = img[idx].max(CLUTTER_INTENSITY);
            }
        }
    }
    img
}

/// Renders one scene. Pure in `(desc, geometry, seed)`.
pub fn render_scene(desc: &CategoryDescriptor, label: usize, geometry: &SceneGeometry, seed: u64) -> SyntheticScene {
    let mut rng = rng::rng_for(seed, stream::SCENE, 0);
    let n = geometry.size;
    let s = n as f64;
    let scale = rng::uniform(&mut rng, geometry.scale_range.0, geometry.scale_range.1);
    let shift = geometry.max_shift * s;
    let center = (
        s / 2.0 + rng::uniform(&mut rng, -shift, shift),
        s / 2.0 + rng::uniform(&mut rng, -shift, shift),
    );
    let jit = geometry.jitter * s;
    let landmarks: Vec<(f64, f64)> = desc
        .parts
        .iter()
        .map(|p| {
            (
                center.0 + scale * p.offset.0 * s + rng::uniform(&mut rng, -jit, jit),
                center.1 + scale * p.offset.1 * s + rng::uniform(&mut rng, -jit, jit),
            )
        })
        .collect();

    let mut img = paint_background(geometry, &mut rng);
    let radius = geometry.glyph_radius * s * scale;
    let (mut top, mut left, mut bottom, mut right) = (s, s, 0.0f64, 0.0f64);
    for (part, &(lr, lc)) in desc.parts.iter().zip(&landmarks) {
        let reach = part.glyph.extent() * radius;
        top = top.min(lr - reach);
        bottom = bottom.max(lr + reach);
        left = left.min(lc - reach);
        right = right.max(lc + reach);
        let r0 = libm::floor(lr - reach).max(0.0) as usize;
        let r1 = (libm::ceil(lr + reach) as usize).min(n);
        let c0 = libm::floor(lc - reach).max(0.0) as usize;
        let c1 = (libm::ceil(lc + reach) as usize).min(n);
        for r in r0..r1 {
            for c in c0..c1 {
                let dy = (r as f64 + 0.5 - lr) / radius;
                let dx = (c as f64 + 0.5 - lc) / radius;
                if part.glyph.covers(dy, dx) {
                    img[r * n + c] = GLYPH_INTENSITY;
                }
            }
        }
    }
    let (top, left) = (top.max(0.0), left.max(0.0));
    let (bottom, right) = (bottom.min(s), right.min(s));
    for v in &mut img {
        *v = quantize(*v);
    }
    SyntheticScene {
        image: FeatureMap {
            channels: 1,
            height: n,
            width: n,
            data: img,
        },
        label,
        landmarks,
        object_bbox: BoundingBox {
            top,
            left,
            height: bottom - top,
            width: right - left,
        },
        pose: ObjectPose { center, scale },
    }
}

/// Validates the descriptor, then renders.
pub fn generate_scene(desc: &CategoryDescriptor, geometry: &SceneGeometry, seed: u64) -> Result<SyntheticScene> {
    geometry.check_descriptor(desc)?;
    Ok(render_scene(desc, 0, geometry, seed))
}

/// Background-only image used as the negative class when a performer is
/// trained on a single category.
pub fn background_image(geometry: &SceneGeometry, seed: u64) -> FeatureMap {
    let mut rng = rng::rng_for(seed, stream::NEGATIVE, 0);
    let n = geometry.size;
    let mut data = paint_background(geometry, &mut rng);
    for v in &mut data {
        *v = quantize(*v);
    }
    FeatureMap {
        channels: 1,
        height: n,
        width: n,
        data,
    }
}

/// A validated set of categories sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenerator {
    geometry: SceneGeometry,
    categories: Vec<CategoryDescriptor>,
}

impl SceneGenerator {
    pub fn new(geometry: SceneGeometry, categories: Vec<CategoryDescriptor>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Config(String::from("at least one category is required")));
        }
        for c in &categories {
            geometry.check_descriptor(c)?;
        }
        Ok(Self { geometry, categories })
    }

    pub fn geometry(&self) -> &SceneGeometry {
        &self.geometry
    }

    pub fn categories(&self) -> &[CategoryDescriptor] {
        &self.categories
    }

    /// Scene `index` of a dataset with master seed `seed`; categories cycle
    /// with the index.
    pub fn scene(&self, seed: u64, index: usize) -> SyntheticScene {
        let label = index % self.categories.len();
        let scene_seed = rng::derive_seed(seed, stream::SCENE, index as u64);
        render_scene(&self.categories[label], label, &self.geometry, scene_seed)
    }
}

/// The default two-category constellation set (four parts each).
pub fn default_categories() -> Vec<CategoryDescriptor> {
    let part = |glyph, r, c| PartSpec { glyph, offset: (r, c) };
    vec![
        CategoryDescriptor {
            name: String::from("square"),
            parts: vec![
                part(Glyph::Cross, -0.145, -0.145),
                part(Glyph::Disc, -0.145, 0.145),
                part(Glyph::Bar, 0.145, -0.145),
                part(Glyph::Ring, 0.145, 0.145),
            ],
        },
        CategoryDescriptor {
            name: String::from("diamond"),
            parts: vec![
                part(Glyph::Wedge, -0.16, 0.0),
                part(Glyph::LCorner, 0.0, -0.16),
                part(Glyph::Disc, 0.0, 0.16),
                part(Glyph::Cross, 0.16, 0.0),
            ],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..num` and cuts it by `fractions = (train, val)`; the test
/// split takes the remainder.
pub fn plan_splits(num: usize, fractions: (f64, f64), seed: u64) -> Result<SplitPlan> {
    let (ft, fv) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && ft + fv <= 1.0 + 1e-12) {
        return Err(Error::Config(format!("split fractions ({ft}, {fv}) do not fit in [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..num).collect();
    rng::shuffle(&mut rng::rng_for(seed, stream::SPLIT, 0), &mut idx);
    let n_train = libm::round(ft * num as f64) as usize;
    let n_val = (libm::round(fv * num as f64) as usize).min(num - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitPlan { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_descriptors_validate() {
        assert!(SceneGenerator::new(SceneGeometry::default(), default_categories()).is_ok());
    }

    #[test]
    fn three_part_scene_has_landmarks_in_bbox() {
        let mut desc = default_categories().remove(0);
        desc.parts.truncate(3);
        let scene = generate_scene(&desc, &SceneGeometry::default(), 0).unwrap();
        assert_eq!(scene.landmarks.len(), 3);
        for &lm in &scene.landmarks {
            assert!(scene.object_bbox.contains(lm));
        }
        assert!(scene.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_scene() {
        let desc = default_categories().remove(1);
        let g = SceneGeometry::default();
        assert_eq!(generate_scene(&desc, &g, 42).unwrap(), generate_scene(&desc, &g, 42).unwrap());
        assert_ne!(generate_scene(&desc, &g, 42).unwrap(), generate_scene(&desc, &g, 43).unwrap());
    }

    #[test]
    fn offending_descriptor_is_rejected() {
        let desc = CategoryDescriptor {
            name: "wide".into(),
            parts: vec![
                PartSpec { glyph: Glyph::Disc, offset: (0.0, 0.45) },
                PartSpec { glyph: Glyph::Ring, offset: (0.0, -0.1) },
            ],
        };
        assert!(matches!(
            generate_scene(&desc, &SceneGeometry::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_part_and_duplicate_glyphs_are_rejected() {
        let g = SceneGeometry::default();
        let one = CategoryDescriptor {
            name: "one".into(),
            parts: vec![PartSpec { glyph: Glyph::Disc, offset: (0.0, 0.0) }],
        };
        assert!(g.check_descriptor(&one).is_err());
        let dup = CategoryDescriptor {
            name: "dup".into(),
            parts: vec![
                PartSpec { glyph: Glyph::Disc, offset: (0.1, 0.0) },
                PartSpec { glyph: Glyph::Disc, offset: (-0.1, 0.0) },
            ],
        };
        assert!(g.check_descriptor(&dup).is_err());
    }

    #[test]
    fn small_canvas_is_rejected() {
        let g = SceneGeometry { size: 16, ..SceneGeometry::default() };
        assert!(g.validate().is_err());
    }

    #[test]
    fn split_arithmetic() {
        let plan = plan_splits(600, (0.8, 0.1), 5).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (480, 60, 60));
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.val).chain(&plan.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
    }

    #[test]
    fn l_centroid_lands_on_landmark() {
        // numeric centroid of the covered region should be ~0
        let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0.0);
        let steps = 400;
        for i in 0..steps {
            for j in 0..steps {
                let y = -2.0 + 4.0 * (i as f64 + 0.5) / steps as f64;
                let x = -2.0 + 4.0 * (j as f64 + 0.5) / steps as f64;
                if Glyph::LCorner.covers(y, x) {
                    sy += y;
                    sx += x;
                    cnt += 1.0;
                }
            }
        }
        assert!((sy / cnt).abs() < 0.01 && (sx / cnt).abs() < 0.01);
    }
}
