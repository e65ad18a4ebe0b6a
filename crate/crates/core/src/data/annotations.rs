//! Simplified annotation format.
//!
//! ```json
//! {"images": [{"id": "0001", "file": "images/0001.png", "split": "train",
//!   "objects": [{"category": 3, "bbox": {"cx": 0.5, "cy": 0.4, "h": 0.3, "w": 0.2},
//!                "mask": "masks/0001_0.png"}]}]}
//! ```
//!
//! Paths are relative to the annotation file. Masks are grayscale PNGs,
//! nonzero meaning inside. Images and masks are resized to the working
//! resolution on load.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, AnnotatedSample, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::Taxonomy;

/// Minimum fraction of a mask that must fall inside its (1px padded) box.
const MASK_IN_BOX: f64 = 0.95;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    #[serde(default)]
    images: Vec<ImageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    id: String,
    file: String,
    #[serde(default)]
    split: Split,
    #[serde(default)]
    objects: Vec<ObjectEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectEntry {
    category: i64,
    bbox: BBox,
    mask: String,
}

/// Samples decoded one image at a time.
pub struct AnnotationStream {
    root: PathBuf,
    entries: std::vec::IntoIter<ImageEntry>,
    height: usize,
    width: usize,
}

impl AnnotationStream {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == 0
    }

    fn decode(&self, entry: ImageEntry) -> Result<AnnotatedSample> {
        let (h, w) = (self.height, self.width);
        let rgb: RgbImage = open(&self.root.join(&entry.file))?.to_rgb8();
        let rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        let mut pixels = vec![0f32; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
            }
        }
        let mut objects = Vec::with_capacity(entry.objects.len());
        for (i, o) in entry.objects.into_iter().enumerate() {
            let gray: GrayImage = open(&self.root.join(&o.mask))?.to_luma8();
            let gray = image::imageops::resize(&gray, w as u32, h as u32, FilterType::Nearest);
            let mask: Vec<u8> = gray.pixels().map(|p| u8::from(p[0] != 0)).collect();
            check_mask_in_box(&entry.id, i, &o.bbox, &mask, h, w)?;
            objects.push(AnnotatedObject { category: o.category as usize, bbox: o.bbox, mask });
        }
        Ok(AnnotatedSample { id: entry.id, height: h, width: w, image: pixels, objects, split: entry.split })
    }
}

impl Iterator for AnnotationStream {
    type Item = Result<AnnotatedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.next()?;
        Some(self.decode(entry))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

fn check_mask_in_box(id: &str, index: usize, bbox: &BBox, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let total = mask.iter().filter(|v| **v != 0).count();
    if total == 0 {
        return Ok(());
    }
    let (sy, sx) = bbox.pixel_rect(h, w);
    let (y0, y1) = sy.clipped();
    let (x0, x1) = sx.clipped();
    let (y0, y1, x0, x1) = (y0.saturating_sub(1), (y1 + 1).min(h), x0.saturating_sub(1), (x1 + 1).min(w));
    let inside: usize = (y0..y1).map(|y| mask[y * w + x0..y * w + x1].iter().filter(|v| **v != 0).count()).sum();
    if (inside as f64) < MASK_IN_BOX * total as f64 {
        return Err(Error::SchemaViolation(format!(
            "image {id} object {index}: only {inside} of {total} mask pixels lie inside the box"
        )));
    }
    Ok(())
}

/// Parse an annotation file and check it against `taxonomy`. Images are
/// decoded lazily by the returned stream. An empty file yields no samples.
pub fn load_annotations(path: &Path, taxonomy: &Taxonomy, height: usize, width: usize) -> Result<AnnotationStream> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = if text.trim().is_empty() {
        AnnotationFile::default()
    } else {
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))?
    };
    for img in &file.images {
        for o in &img.objects {
            if o.category < 0 || taxonomy.get(o.category as usize).is_none() {
                return Err(Error::CategoryMismatch(o.category));
            }
            let b = &o.bbox;
            if [b.cx, b.cy, b.h, b.w].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::SchemaViolation(format!("image {}: bbox {b:?} outside [0,1]", img.id)));
            }
        }
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(AnnotationStream { root, entries: file.images.into_iter(), height, width })
}

/// Write samples in the annotation format under `dir`; returns the path of
/// the annotation file.
pub fn write_annotations<'a, I>(dir: &Path, samples: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = &'a AnnotatedSample>,
{
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut images = Vec::new();
    for s in samples {
        let (h, w) = (s.height, s.width);
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| to_byte(s.pixel(c, y as usize, x as usize))))
        });
        let file = format!("images/{}.png", s.id);
        rgb.save(dir.join(&file))?;
        let mut objects = Vec::with_capacity(s.objects.len());
        for (i, o) in s.objects.iter().enumerate() {
            let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([o.mask[y as usize * w + x as usize] * 255]));
            let mask = format!("masks/{}_{i}.png", s.id);
            gray.save(dir.join(&mask))?;
            objects.push(ObjectEntry { category: o.category as i64, bbox: o.bbox, mask });
        }
        images.push(ImageEntry { id: s.id.clone(), file, split: s.split, objects });
    }
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&AnnotationFile { images })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// [-1, 1] to [0, 255].
pub(crate) fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
