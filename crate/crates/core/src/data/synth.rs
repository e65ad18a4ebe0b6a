//! Synthetic shapes: banded stuff backgrounds with sprite things on top.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, AnnotatedSample, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::{Kind, Taxonomy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffSpec {
    pub name: String,
    pub color: [u8; 3],
    /// Vertical gradient end color; solid when absent.
    #[serde(default)]
    pub gradient_to: Option<[u8; 3]>,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub resolution: usize,
    pub stuff: Vec<StuffSpec>,
    pub things: Vec<ThingSpec>,
    /// Background bands per image are drawn from `1..=max_regions`.
    pub max_regions: usize,
    pub min_things: usize,
    pub max_things: usize,
    /// Sprite side range as a fraction of the canvas.
    pub min_side: f64,
    pub max_side: f64,
}

impl SynthConfig {
    /// Two stuff and three thing categories at 64x64.
    pub fn toy() -> Self {
        Self {
            resolution: 64,
            stuff: vec![
                StuffSpec { name: "sky".into(), color: [90, 150, 230], gradient_to: Some([200, 225, 255]), weight: 1.0 },
                StuffSpec { name: "grass".into(), color: [60, 140, 50], gradient_to: None, weight: 1.0 },
            ],
            things: vec![
                ThingSpec { name: "ball".into(), shape: ShapeKind::Circle, color: [230, 60, 40], weight: 1.0 },
                ThingSpec { name: "box".into(), shape: ShapeKind::Square, color: [245, 200, 40], weight: 1.0 },
                ThingSpec { name: "tent".into(), shape: ShapeKind::Triangle, color: [120, 40, 160], weight: 1.0 },
            ],
            max_regions: 2,
            min_things: 1,
            max_things: 3,
            min_side: 0.2,
            max_side: 0.45,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.stuff.is_empty() {
            return bad("at least one stuff category is required");
        }
        if self.resolution < 8 {
            return bad("resolution must be at least 8");
        }
        if self.max_regions == 0 {
            return bad("max_regions must be positive");
        }
        if self.min_things > self.max_things || (self.max_things > 0 && self.things.is_empty()) {
            return bad("thing count range is empty or no thing categories are configured");
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return bad("sprite sides must satisfy 0 < min_side <= max_side <= 1");
        }
        let weights = self.stuff.iter().map(|s| s.weight).chain(self.things.iter().map(|t| t.weight));
        if weights.into_iter().any(|w| !(w > 0.0 && w.is_finite())) {
            return bad("sampling weights must be positive");
        }
        Ok(())
    }

    /// Stuff categories first, then things, in configuration order.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let entries: Vec<(&str, Kind)> = self
            .stuff
            .iter()
            .map(|s| (s.name.as_str(), Kind::Stuff))
            .chain(self.things.iter().map(|t| (t.name.as_str(), Kind::Thing)))
            .collect();
        Taxonomy::from_names(&entries)
    }
}

/// Deterministic, random-access generator. Sample `i` depends only on the
/// seed and `i`.
#[derive(Clone, Debug)]
pub struct SynthShapes {
    config: SynthConfig,
    seed: u64,
    stuff_dist: WeightedIndex<f64>,
    thing_dist: Option<WeightedIndex<f64>>,
    next: u64,
}

pub fn synth_shapes_dataset(config: &SynthConfig, seed: u64) -> Result<SynthShapes> {
    config.validate()?;
    let weights = |w: Vec<f64>| WeightedIndex::new(w).map_err(|e| Error::BadConfig(e.to_string()));
    let stuff_dist = weights(config.stuff.iter().map(|s| s.weight).collect())?;
    let thing_dist =
        if config.things.is_empty() { None } else { Some(weights(config.things.iter().map(|t| t.weight).collect())?) };
    Ok(SynthShapes { config: config.clone(), seed, stuff_dist, thing_dist, next: 0 })
}

impl SynthShapes {
    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn sample(&self, index: u64) -> AnnotatedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let n = self.config.resolution;
        let mut image = vec![0f32; 3 * n * n];
        let mut objects = Vec::new();

        let regions = rng.random_range(1..=self.config.max_regions);
        let horizontal = rng.random_bool(0.5);
        let mut cuts: Vec<usize> = (1..regions).map(|_| rng.random_range(n / 4..=3 * n / 4)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(n)).collect();
        for pair in bounds.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let local = self.stuff_dist.sample(&mut rng);
            let spec = &self.config.stuff[local];
            let mut mask = vec![0u8; n * n];
            for y in 0..n {
                let t = y as f32 / (n - 1) as f32;
                let color = match spec.gradient_to {
                    Some(end) => std::array::from_fn::<f32, 3, _>(|c| lerp(spec.color[c], end[c], t)),
                    None => spec.color.map(|v| v as f32),
                };
                for x in 0..n {
                    let along = if horizontal { y } else { x };
                    if (a..b).contains(&along) {
                        mask[y * n + x] = 1;
                        for (c, v) in color.iter().enumerate() {
                            image[(c * n + y) * n + x] = v / 127.5 - 1.0;
                        }
                    }
                }
            }
            let (mid, ext) = ((a + b) as f64 / 2.0 / n as f64, (b - a) as f64 / n as f64);
            let bbox = if horizontal { BBox::new(0.5, mid, ext, 1.0) } else { BBox::new(mid, 0.5, 1.0, ext) };
            objects.push(AnnotatedObject { category: local, bbox, mask });
        }

        if let Some(dist) = &self.thing_dist {
            let count = rng.random_range(self.config.min_things..=self.config.max_things);
            let offset = self.config.stuff.len();
            for _ in 0..count {
                let local = dist.sample(&mut rng);
                let spec = &self.config.things[local];
                let side = rng.random_range(self.config.min_side..=self.config.max_side);
                let cx = rng.random_range(side / 2.0..=1.0 - side / 2.0);
                let cy = rng.random_range(side / 2.0..=1.0 - side / 2.0);
                let bbox = BBox::new(cx, cy, side, side);
                let mask = rasterize(spec.shape, &bbox, n);
                for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m != 0) {
                    for c in 0..3 {
                        image[c * n * n + i] = spec.color[c] as f32 / 127.5 - 1.0;
                    }
                }
                objects.push(AnnotatedObject { category: offset + local, bbox, mask });
            }
        }
        AnnotatedSample { id: format!("synth_{index:06}"), height: n, width: n, image, objects, split: Split::Train }
    }
}

impl Iterator for SynthShapes {
    type Item = AnnotatedSample;

    fn next(&mut self) -> Option<AnnotatedSample> {
        let s = self.sample(self.next);
        self.next += 1;
        Some(s)
    }
}

fn lerp(a: u8, b: u8, t: f32) -> f32 {
    a as f32 + (b as f32 - a as f32) * t
}

/// Pixel-center rasterization of a sprite filling `bbox`.
fn rasterize(shape: ShapeKind, bbox: &BBox, n: usize) -> Vec<u8> {
    let mut mask = vec![0u8; n * n];
    let (hh, hw) = (bbox.h / 2.0, bbox.w / 2.0);
    for y in 0..n {
        let py = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64;
            let (dx, dy) = (px - bbox.cx, py - bbox.cy);
            let inside = match shape {
                ShapeKind::Square => dx.abs() <= hw && dy.abs() <= hh,
                ShapeKind::Circle => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
                ShapeKind::Triangle => {
                    // apex at the top edge, base along the bottom edge
                    let depth = (dy + hh) / bbox.h;
                    (0.0..=1.0).contains(&depth) && dx.abs() <= depth * hw
                }
            };
            mask[y * n + x] = u8::from(inside);
        }
    }
    mask
}
