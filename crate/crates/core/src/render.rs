//! PNG export of images and color-coded layout previews.
//!
//! Category colors are fixed by id: hue advances by the golden angle
//! (137.508 degrees) per id; stuff uses saturation 0.45 and value 0.80,
//! things saturation 0.85 and value 0.95. Empty pixels are dark gray.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Tensor};
pub use image::RgbImage;
use image::{ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::plg::LayoutBatch;
use crate::scene::{Kind, Taxonomy};

pub const EMPTY_COLOR: [u8; 3] = [32, 32, 32];
const GOLDEN_ANGLE: f64 = 137.507_764_050_037_85;

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Stable preview color of a category.
pub fn category_color(id: usize, kind: Kind) -> [u8; 3] {
    let hue = id as f64 * GOLDEN_ANGLE;
    match kind {
        Kind::Stuff => hsv(hue, 0.45, 0.80),
        Kind::Thing => hsv(hue, 0.85, 0.95),
    }
}

/// `(3, H, W)` tensor in [-1, 1] to an RGB image.
pub fn tensor_to_image(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let v = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|ch| ((v[ch * h * w + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8))
    }))
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, png_bytes(img)?).map_err(|e| Error::io(path, e))
}

/// Color-coded layout of sample `b`: the strongest active stuff channel per
/// pixel, overlaid by the strongest instance wherever the summed instance
/// mass exceeds `tau`.
pub fn layout_preview(layouts: &LayoutBatch, b: usize, taxonomy: &Taxonomy, tau: f64) -> Result<RgbImage> {
    let (h, w) = (layouts.height, layouts.width);
    let mut px = vec![EMPTY_COLOR; h * w];
    if let Some(stuff) = layouts.stuff_layout(b)? {
        let m = stuff.masks.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for (i, p) in px.iter_mut().enumerate() {
            let best = stuff.active.iter().map(|&c| (c, m[c * h * w + i])).max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((c, _)) = best.filter(|(_, v)| *v > 0.0) {
                *p = category_color(taxonomy.stuff_ids()[c], Kind::Stuff);
            }
        }
    }
    if let (Some(inst), Some(all)) = (layouts.instance_layout(b)?, &layouts.instances) {
        let n = inst.object_ids.len();
        let m = inst.masks.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let cats: Vec<usize> = (0..all.owner.len()).filter(|&i| all.owner[i] == b).map(|i| all.category[i]).collect();
        for (i, p) in px.iter_mut().enumerate() {
            let mass: f32 = (0..n).map(|k| m[k * h * w + i]).sum();
            if (mass as f64) > tau {
                let k = (0..n).max_by(|&a, &c| m[a * h * w + i].total_cmp(&m[c * h * w + i])).expect("n > 0");
                *p = category_color(cats[k], Kind::Thing);
            }
        }
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(px[y as usize * w + x as usize])))
}
