//! Coverage, perturbation sweeps and result export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::check_taxonomy;
use crate::error::{Error, Result};
use crate::fusion::{instance_mass, DEFAULT_TAU};
use crate::pipeline::Model;
use crate::plg::{InstanceLayout, LayoutBatch, LayoutMode, StuffLayout};
use crate::scene::{perturb_scene, Scene, ValidatedScene};

/// Stuff pixels count as covered above this simplex sum.
pub const STUFF_COVERAGE_THRESHOLD: f64 = 0.5;

fn percent(covered: usize, total: usize) -> f64 {
    (100.0 * covered as f64 / total as f64).clamp(0.0, 100.0)
}

/// Percent of pixels covered by the layout. A pixel is covered when the
/// summed instance mass exceeds `tau` or the stuff layout sums above 0.5.
pub fn coverage(stuff: Option<&StuffLayout>, instances: &InstanceLayout, tau: f64) -> Result<f64> {
    let (_, h, w) = instances.masks.dims3()?;
    let inst = instances.masks.to_dtype(DType::F64)?.sum(0)?.flatten_all()?.to_vec1::<f64>()?;
    let stuff = match stuff {
        Some(s) => s.masks.to_dtype(DType::F64)?.sum(0)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; h * w],
    };
    if stuff.len() != inst.len() {
        return Err(Error::ShapeMismatch(format!("stuff has {} pixels, instances {}", stuff.len(), inst.len())));
    }
    let covered = inst.iter().zip(&stuff).filter(|(i, s)| **i > tau || **s > STUFF_COVERAGE_THRESHOLD).count();
    Ok(percent(covered, h * w))
}

/// Per-sample coverage of a layout batch.
pub fn coverage_batch(layouts: &LayoutBatch, tau: f64) -> Result<Vec<f64>> {
    let (b, h, w) = (layouts.batch, layouts.height, layouts.width);
    let hw = h * w;
    let stuff = match &layouts.stuff {
        Some(s) => s.masks.to_dtype(DType::F64)?.sum(1)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; b * hw],
    };
    let inst = match &layouts.instances {
        Some(i) => {
            let n = i.owner.len();
            let raw = i.masks.to_dtype(DType::F64)?.reshape((n, 1, h, w))?;
            instance_mass(&raw, &i.owner, b)?.flatten_all()?.to_vec1::<f64>()?
        }
        None => vec![0.0; b * hw],
    };
    Ok((0..b)
        .map(|s| {
            let r = s * hw..(s + 1) * hw;
            let covered =
                inst[r.clone()].iter().zip(&stuff[r]).filter(|(i, st)| **i > tau || **st > STUFF_COVERAGE_THRESHOLD).count();
            percent(covered, hw)
        })
        .collect())
}

/// SHA-256 over the stuff and instance masks of sample `b`.
pub fn layout_checksum(layouts: &LayoutBatch, b: usize) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut feed = |t: &Tensor| -> Result<()> {
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
        Ok(())
    };
    if let Some(s) = layouts.stuff_layout(b)? {
        feed(&s.masks)?;
    }
    if let Some(i) = layouts.instance_layout(b)? {
        feed(&i.masks)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

/// External image-quality scorer (IS, FID and the like).
pub trait ImageScorer {
    fn name(&self) -> &str;
    /// Side length the scorer expects, if it resamples internally.
    fn input_resolution(&self) -> Option<usize> {
        None
    }
    /// Score a `(B, 3, H, W)` batch in [-1, 1].
    fn score(&self, images: &Tensor) -> Result<f64>;
}

/// Mean pixel value; stands in for a real scorer in contract tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanIntensityScorer;

impl ImageScorer for MeanIntensityScorer {
    fn name(&self) -> &str {
        "mean_intensity"
    }

    fn score(&self, images: &Tensor) -> Result<f64> {
        Ok(images.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Ascending perturbation ranges.
    pub ranges: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mode: LayoutMode,
    pub tau: f64,
    /// Scene `i` always uses latents from `latent_seed + i`.
    pub latent_seed: u64,
    /// Run the image generator too (needed by scorers).
    pub synthesize: bool,
    pub use_gf: bool,
    pub batch_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ranges: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![0, 1, 2],
            mode: LayoutMode::Panoptic,
            tau: DEFAULT_TAU,
            latent_seed: 0,
            synthesize: false,
            use_gf: true,
            batch_size: 32,
        }
    }
}

/// One (range, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub range: f64,
    pub seed: u64,
    pub coverage: Vec<f64>,
    pub checksums: Vec<String>,
    pub scores: BTreeMap<String, f64>,
}

impl CellResult {
    pub fn mean_coverage(&self) -> f64 {
        mean(&self.coverage)
    }

    /// Metric name to cell value, coverage first.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        std::iter::once(("coverage".to_string(), self.mean_coverage()))
            .chain(self.scores.iter().map(|(k, v)| (k.clone(), *v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub range: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Mean and standard error of one metric over seeds at one range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeAggregate {
    pub range: f64,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ranges: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl SweepResult {
    pub fn records(&self) -> Vec<SweepRecord> {
        self.cells
            .iter()
            .flat_map(|c| {
                c.metrics().into_iter().map(move |(metric, value)| SweepRecord { range: c.range, seed: c.seed, metric, value })
            })
            .collect()
    }

    pub fn aggregates(&self) -> Vec<RangeAggregate> {
        let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for r in self.records() {
            let ri = self.ranges.iter().position(|x| *x == r.range).unwrap_or(usize::MAX);
            groups.entry((r.metric, ri)).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((metric, ri), vals)| {
                let n = vals.len();
                let m = mean(&vals);
                let stderr = if n > 1 {
                    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (var / n as f64).sqrt()
                } else {
                    0.0
                };
                RangeAggregate { range: self.ranges.get(ri).copied().unwrap_or(f64::NAN), metric, mean: m, stderr, n }
            })
            .collect()
    }

    /// Aggregate mean of `metric` per range, in range order.
    pub fn curve(&self, metric: &str) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> =
            self.aggregates().into_iter().filter(|a| a.metric == metric).map(|a| (a.range, a.mean)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Deterministic per-scene perturbation seed.
fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

fn run_scenes(
    model: &Model,
    scenes: &[ValidatedScene],
    config: &SweepConfig,
    scorers: &[&dyn ImageScorer],
) -> Result<(Vec<f64>, Vec<String>, BTreeMap<String, f64>)> {
    let mut cov = Vec::with_capacity(scenes.len());
    let mut sums = Vec::with_capacity(scenes.len());
    let mut score_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let bs = config.batch_size.max(1);
    for (chunk_i, chunk) in scenes.chunks(bs).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len()).map(|j| config.latent_seed + (chunk_i * bs + j) as u64).collect();
        let layouts = if config.synthesize {
            let syn = model.synthesize(chunk, &seeds, config.mode, config.use_gf)?;
            for s in scorers {
                let e = score_acc.entry(s.name().to_string()).or_default();
                e.0 += s.score(&syn.image)? * chunk.len() as f64;
                e.1 += chunk.len();
            }
            syn.layouts
        } else {
            model.layouts(chunk, &seeds, config.mode)?
        };
        cov.extend(coverage_batch(&layouts, config.tau)?);
        for b in 0..chunk.len() {
            sums.push(layout_checksum(&layouts, b)?);
        }
    }
    let scores = score_acc.into_iter().map(|(k, (s, n))| (k, s / n.max(1) as f64)).collect();
    Ok((cov, sums, scores))
}

/// Per-scene layout checksums without perturbation.
pub fn baseline_checksums(model: &Model, scenes: &[Scene], config: &SweepConfig) -> Result<Vec<String>> {
    let valid = scenes.iter().map(|s| model.validate(s)).collect::<Result<Vec<_>>>()?;
    Ok(run_scenes(model, &valid, &SweepConfig { synthesize: false, ..config.clone() }, &[])?.1)
}

/// Perturb, lay out (and optionally synthesize) every scene for each
/// (range, seed) cell.
pub fn perturbation_sweep(
    model: &Model,
    expected_taxonomy_hash: Option<&str>,
    scenes: &[Scene],
    config: &SweepConfig,
    scorers: &[&dyn ImageScorer],
) -> Result<SweepResult> {
    if let Some(h) = expected_taxonomy_hash {
        check_taxonomy(model, h)?;
    }
    if config.ranges.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::BadConfig("perturbation ranges must be ascending".into()));
    }
    if let Some(&r) = config.ranges.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::NegativeRange(r));
    }
    if config.synthesize && scorers.is_empty() {
        log::debug!("synthesizing without scorers; images are discarded");
    }
    let mut cells = Vec::with_capacity(config.ranges.len() * config.seeds.len());
    for &range in &config.ranges {
        for &seed in &config.seeds {
            let perturbed = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| model.validate(&perturb_scene(s, range, scene_seed(seed, i))?))
                .collect::<Result<Vec<_>>>()?;
            let (coverage, checksums, scores) = run_scenes(model, &perturbed, config, scorers)?;
            cells.push(CellResult { range, seed, coverage, checksums, scores });
        }
    }
    Ok(SweepResult { ranges: config.ranges.clone(), seeds: config.seeds.clone(), cells })
}

/// CSV text with header `range,seed,metric,value`.
pub fn results_csv(result: &SweepResult) -> String {
    let mut out = String::from("range,seed,metric,value\n");
    for r in result.records() {
        let _ = writeln!(out, "{},{},{},{}", r.range, r.seed, r.metric, r.value);
    }
    out
}

/// Line plot of the per-range mean with standard-error bars.
pub fn plot_svg(result: &SweepResult, metric: &str) -> String {
    let aggs: Vec<RangeAggregate> = {
        let mut a: Vec<_> = result.aggregates().into_iter().filter(|a| a.metric == metric).collect();
        a.sort_by(|x, y| x.range.total_cmp(&y.range));
        a
    };
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let xmax = aggs.iter().map(|a| a.range).fold(0.0f64, f64::max).max(1e-9);
    let lo = aggs.iter().map(|a| a.mean - a.stderr).fold(f64::INFINITY, f64::min);
    let hi = aggs.iter().map(|a| a.mean + a.stderr).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0) };
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">perturbation range</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="24" font-size="14">{metric} ({lo:.3} to {hi:.3})</text>"#);
    let points: Vec<String> = aggs.iter().map(|a| format!("{:.2},{:.2}", sx(a.range), sy(a.mean))).collect();
    if !points.is_empty() {
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
    }
    for a in &aggs {
        let x = sx(a.range);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="gray"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="steelblue"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            sy(a.mean - a.stderr),
            sy(a.mean + a.stderr),
            sy(a.mean),
            h - pad + 16.0,
            a.range
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `<stem>.csv` and one `<stem>_<metric>.svg` per metric into `dir`.
pub fn export_results(result: &SweepResult, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, results_csv(result)).map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    let metrics: std::collections::BTreeSet<String> = result.records().into_iter().map(|r| r.metric).collect();
    for m in metrics {
        let p = dir.join(format!("{stem}_{m}.svg"));
        std::fs::write(&p, plot_svg(result, &m)).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
