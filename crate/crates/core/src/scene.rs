//! Scene description language: taxonomy, objects, validation, latents and
//! center perturbation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default largest size index.
pub const DEFAULT_MAX_SIZE: u32 = 25;
/// Default upper bound on objects per scene.
pub const DEFAULT_MAX_OBJECTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Stuff,
    Thing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub kind: Kind,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    categories: Vec<Category>,
}

/// Ordered category list split into stuff and things.
///
/// Stuff categories get a dense stuff-local index (their channel in the
/// stuff layout), in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    categories: Vec<Category>,
    stuff: Vec<usize>,
    things: Vec<usize>,
    local: Vec<usize>,
}

impl Taxonomy {
    pub fn new(mut categories: Vec<Category>) -> Result<Self> {
        categories.sort_by_key(|c| c.id);
        for (i, c) in categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidTaxonomy(format!(
                    "ids must be dense and unique, found {} at position {i}",
                    c.id
                )));
            }
        }
        let mut stuff = Vec::new();
        let mut things = Vec::new();
        let mut local = Vec::with_capacity(categories.len());
        for c in &categories {
            match c.kind {
                Kind::Stuff => {
                    local.push(stuff.len());
                    stuff.push(c.id);
                }
                Kind::Thing => {
                    local.push(things.len());
                    things.push(c.id);
                }
            }
        }
        if stuff.is_empty() {
            return Err(Error::InvalidTaxonomy("at least one stuff category is required".into()));
        }
        Ok(Self { categories, stuff, things, local })
    }

    /// Build from `(name, kind)` pairs, assigning ids in order.
    pub fn from_names<S: AsRef<str>>(entries: &[(S, Kind)]) -> Result<Self> {
        Self::new(
            entries
                .iter()
                .enumerate()
                .map(|(id, (name, kind))| Category { id, name: name.as_ref().to_string(), kind: *kind })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        Self::new(file.categories)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TaxonomyFile { categories: self.categories.clone() })
            .expect("taxonomy serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, id: usize) -> Option<&Category> {
        self.categories.get(id)
    }

    pub fn kind(&self, id: usize) -> Option<Kind> {
        self.categories.get(id).map(|c| c.kind)
    }

    pub fn num_stuff(&self) -> usize {
        self.stuff.len()
    }

    pub fn num_things(&self) -> usize {
        self.things.len()
    }

    /// Global ids of the stuff categories, in channel order.
    pub fn stuff_ids(&self) -> &[usize] {
        &self.stuff
    }

    pub fn thing_ids(&self) -> &[usize] {
        &self.things
    }

    /// Position of `id` among the categories of its own kind.
    pub fn local_index(&self, id: usize) -> Option<usize> {
        self.local.get(id).copied()
    }

    pub fn id_by_name(&self, name: &str) -> Option<usize> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: usize,
    /// Center x as a fraction of the canvas width.
    pub cx: f64,
    /// Center y as a fraction of the canvas height.
    pub cy: f64,
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: Canvas,
    pub objects: Vec<ObjectSpec>,
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }
}

/// Limits a scene has to satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRules {
    pub max_size: u32,
    pub max_objects: usize,
    /// Canvas sides must be positive multiples of this.
    pub canvas_factor: usize,
}

impl Default for SceneRules {
    fn default() -> Self {
        Self { max_size: DEFAULT_MAX_SIZE, max_objects: DEFAULT_MAX_OBJECTS, canvas_factor: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedScene {
    scene: Scene,
    kinds: Vec<Kind>,
}

impl ValidatedScene {
    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn kinds(&self) -> &[Kind] {
        &self.kinds
    }

    pub fn num_stuff(&self) -> usize {
        self.kinds.iter().filter(|k| **k == Kind::Stuff).count()
    }

    pub fn num_things(&self) -> usize {
        self.kinds.len() - self.num_stuff()
    }
}

pub fn validate_scene(scene: &Scene, taxonomy: &Taxonomy, rules: &SceneRules) -> Result<ValidatedScene> {
    let Canvas { h, w } = scene.canvas;
    let factor = rules.canvas_factor.max(1);
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::CanvasNotDivisible { h, w, factor });
    }
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    if scene.objects.len() > rules.max_objects {
        return Err(Error::TooManyObjects { count: scene.objects.len(), max: rules.max_objects });
    }
    let mut kinds = Vec::with_capacity(scene.objects.len());
    for (index, o) in scene.objects.iter().enumerate() {
        let kind = taxonomy.kind(o.category).ok_or(Error::UnknownCategory(o.category as i64))?;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(o.cx) || !in_unit(o.cy) {
            return Err(Error::CenterOutOfRange { index, cx: o.cx, cy: o.cy });
        }
        if o.size == 0 || o.size > rules.max_size {
            return Err(Error::SizeOutOfSet { index, size: o.size as i64, max: rules.max_size });
        }
        kinds.push(kind);
    }
    Ok(ValidatedScene { scene: scene.clone(), kinds })
}

/// Partition into (stuff, things), keeping input order within each group.
pub fn split_objects(vscene: &ValidatedScene) -> (Vec<ObjectSpec>, Vec<ObjectSpec>) {
    let mut stuff = Vec::new();
    let mut things = Vec::new();
    for (o, k) in vscene.scene.objects.iter().zip(&vscene.kinds) {
        match k {
            Kind::Stuff => stuff.push(*o),
            Kind::Thing => things.push(*o),
        }
    }
    (stuff, things)
}

/// Fraction of the shorter canvas side covered by an object of size `s`.
/// Area grows linearly in `s`.
pub fn side_fraction(size: u32, max_size: u32) -> f64 {
    (size as f64 / max_size as f64).sqrt()
}

/// Size index whose `side_fraction` best matches a box of the given
/// normalized area.
pub fn size_from_area(area: f64, max_size: u32) -> u32 {
    let s = (max_size as f64 * area).round();
    s.clamp(1.0, max_size as f64) as u32
}

/// Shift every center by an i.i.d. uniform offset in `[-range, range]` per
/// axis, then clamp to `[0, 1]`.
pub fn perturb_scene(scene: &Scene, range: f64, seed: u64) -> Result<Scene> {
    if !(range >= 0.0) {
        return Err(Error::NegativeRange(range));
    }
    if range == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for o in &mut out.objects {
        let dx = rng.random_range(-range..=range);
        let dy = rng.random_range(-range..=range);
        o.cx = (o.cx + dx).clamp(0.0, 1.0);
        o.cy = (o.cy + dy).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPurpose {
    Stuff,
    Thing,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub purpose: LatentPurpose,
}

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dim: usize, purpose: LatentPurpose) -> Self {
        let values = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { values, purpose }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// All latents needed to synthesize one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLatents {
    pub stuff: LatentCode,
    pub things: Vec<LatentCode>,
    pub image: LatentCode,
}

impl SceneLatents {
    /// Deterministic latents for a scene with `n_things` things.
    ///
    /// Thing latents are drawn after the shared ones so that adding an
    /// object does not reshuffle the stuff and image codes.
    pub fn from_seed(seed: u64, dim: usize, n_things: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stuff = LatentCode::sample(&mut rng, dim, LatentPurpose::Stuff);
        let image = LatentCode::sample(&mut rng, dim, LatentPurpose::Image);
        let things = (0..n_things).map(|_| LatentCode::sample(&mut rng, dim, LatentPurpose::Thing)).collect();
        Self { stuff, things, image }
    }
}

/// Distinct stuff categories present among `objects`, ascending.
pub fn active_categories(objects: &[ObjectSpec]) -> BTreeSet<usize> {
    objects.iter().map(|o| o.category).collect()
}
