//! Annotated samples: loading, filtering, the synthetic shapes generator,
//! and conversion to scenes and training tensors.

mod annotations;
mod synth;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use annotations::{load_annotations, write_annotations, AnnotationStream};
pub use synth::{synth_shapes_dataset, ShapeKind, StuffSpec, SynthConfig, SynthShapes, ThingSpec};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::{size_from_area, Canvas, ObjectSpec, Scene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub category: usize,
    pub bbox: BBox,
    /// Row-major `H * W` binary mask.
    pub mask: Vec<u8>,
}

impl AnnotatedObject {
    /// Fraction of the canvas covered by the mask.
    pub fn coverage(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|v| **v != 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Channel-major `3 * H * W` pixels in [-1, 1].
    pub image: Vec<f32>,
    pub objects: Vec<AnnotatedObject>,
    pub split: Split,
}

impl AnnotatedSample {
    /// Pixel `(channel, row, col)`.
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.image[(c * self.height + y) * self.width + x]
    }
}

/// Sample-level object-count bounds and per-object coverage floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFilter {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_coverage: f64,
}

impl Default for DatasetFilter {
    /// Three to eight objects, each covering at least 2% of the image.
    fn default() -> Self {
        Self { min_objects: 3, max_objects: 8, min_coverage: 0.02 }
    }
}

impl DatasetFilter {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_coverage) || self.min_objects > self.max_objects {
            return Err(Error::BadConfig(format!("invalid filter {self:?}")));
        }
        Ok(())
    }

    /// Whether a sample already satisfies every bound.
    pub fn accepts(&self, sample: &AnnotatedSample) -> bool {
        (self.min_objects..=self.max_objects).contains(&sample.objects.len())
            && sample.objects.iter().all(|o| o.coverage() >= self.min_coverage)
    }

    /// Drop small objects, then check the remaining count.
    pub fn apply(&self, mut sample: AnnotatedSample) -> Option<AnnotatedSample> {
        sample.objects.retain(|o| o.coverage() >= self.min_coverage);
        (self.min_objects..=self.max_objects).contains(&sample.objects.len()).then_some(sample)
    }
}

/// Lazily filter a stream of samples. Errors pass through untouched.
pub fn filter_samples<I>(samples: I, filter: DatasetFilter) -> impl Iterator<Item = Result<AnnotatedSample>>
where
    I: IntoIterator<Item = Result<AnnotatedSample>>,
{
    samples.into_iter().filter_map(move |s| match s {
        Ok(s) => filter.apply(s).map(Ok),
        Err(e) => Some(Err(e)),
    })
}

/// Scene whose centers are the box centers and whose sizes quantize the
/// box areas.
pub fn sample_to_scene(sample: &AnnotatedSample, max_size: u32) -> Scene {
    let objects = sample
        .objects
        .iter()
        .map(|o| ObjectSpec {
            category: o.category,
            cx: o.bbox.cx,
            cy: o.bbox.cy,
            size: size_from_area(o.bbox.area(), max_size),
        })
        .collect();
    Scene { canvas: Canvas { h: sample.height, w: sample.width }, objects }
}

/// `(B, 3, H, W)` image batch.
pub fn image_batch(samples: &[AnnotatedSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!("sample {} is {}x{}, batch is {h}x{w}", s.id, s.height, s.width)));
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_coverages(cov: &[f64]) -> AnnotatedSample {
        let n = 100;
        let objects = cov
            .iter()
            .map(|&c| {
                let on = (c * n as f64).round() as usize;
                let mut mask = vec![0u8; n];
                mask[..on].fill(1);
                AnnotatedObject { category: 0, bbox: BBox::new(0.5, 0.5, 1.0, 1.0), mask }
            })
            .collect();
        AnnotatedSample { id: "s".into(), height: 10, width: 10, image: vec![0.0; 300], objects, split: Split::Train }
    }

    #[test]
    fn filter_rules() {
        let f = DatasetFilter::default();
        assert!(f.apply(sample_with_coverages(&[0.5, 0.5])).is_none());
        let kept = f.apply(sample_with_coverages(&[0.5, 0.01, 0.3, 0.2])).unwrap();
        assert_eq!(kept.objects.len(), 3);
        let full = sample_with_coverages(&[0.1, 0.1, 0.2, 0.3, 0.05]);
        assert_eq!(f.apply(full.clone()), Some(full));
        // dropping a small object can push a sample below the minimum
        assert!(f.apply(sample_with_coverages(&[0.5, 0.5, 0.01])).is_none());
    }

    #[test]
    fn scene_from_boxes() {
        let mut s = sample_with_coverages(&[1.0, 0.04]);
        s.objects[0].bbox = BBox::new(0.5, 0.5, 1.0, 1.0);
        s.objects[1].bbox = BBox::new(0.25, 0.25, 0.2, 0.2);
        let scene = sample_to_scene(&s, 25);
        assert_eq!(scene.objects[0], ObjectSpec { category: 0, cx: 0.5, cy: 0.5, size: 25 });
        assert_eq!(scene.objects[1].size, 1);
        assert_eq!((scene.objects[1].cx, scene.objects[1].cy), (0.25, 0.25));
    }
}
