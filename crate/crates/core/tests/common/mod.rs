#![allow(dead_code)]

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use plgan_core::data::{sample_to_scene, synth_shapes_dataset, AnnotatedSample, SynthConfig};
use plgan_core::fusion::{AffineMaps, LayoutEmbeddings, NormConfig};
use plgan_core::generator::GeneratorConfig;
use plgan_core::plg::{masked_softmax, route, InstanceNetConfig, LayoutMode, PlgConfig, StuffNetConfig};
use plgan_core::scene::{Canvas, ObjectSpec, Scene, Taxonomy};
use plgan_core::training::{total_generator_loss_tensor, CriticConfig, StepLatents, TrainConfig, Trainer};
use plgan_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CPU: Device = Device::Cpu;

pub fn toy_taxonomy() -> Taxonomy {
    SynthConfig::toy().taxonomy().unwrap()
}

/// A few-channel model with `4 * 2^stages` output, small enough for
/// finite differences.
pub fn tiny_config(stages: usize) -> ModelConfig {
    let mut c = ModelConfig::for_resolution(64).unwrap();
    c.resolution = 4 << stages;
    c.generator = GeneratorConfig {
        latent_dim: 4,
        stem_width: 4,
        widths: vec![3; stages],
        norm: NormConfig { gf_hidden: 3, embed_std: 0.5, ..NormConfig::default() },
    };
    c.plg = PlgConfig {
        instance: InstanceNetConfig { embed_dim: 3, bbox_hidden: 4, mask_size: 4, mask_channels: 2 },
        stuff: StuffNetConfig { widths: vec![3, 3, 3, 3] },
    };
    c
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        critics: CriticConfig {
            image_widths: vec![3, 3],
            object_widths: vec![3, 3],
            appearance_widths: vec![3],
            appearance_hidden: 4,
            crop_size: 4,
        },
        ..TrainConfig::default()
    }
}

/// Synthetic shapes at `resolution`, at most two sprites each.
pub fn shapes(resolution: usize, count: usize, seed: u64) -> Vec<AnnotatedSample> {
    let mut config = SynthConfig::toy();
    config.resolution = resolution;
    config.max_things = 2;
    let data = synth_shapes_dataset(&config, seed).unwrap();
    (0..count as u64).map(|i| data.sample(i)).collect()
}

pub fn scene(side: usize, objects: &[(usize, f64, f64, u32)]) -> Scene {
    Scene {
        canvas: Canvas { h: side, w: side },
        objects: objects.iter().map(|&(category, cx, cy, size)| ObjectSpec { category, cx, cy, size }).collect(),
    }
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    f64s(a).iter().zip(f64s(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &CPU).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to the given flat coordinates
/// of `var`. The variable is restored afterwards.
pub fn central_differences(var: &Var, coords: &[usize], step: f64, f: &mut dyn FnMut() -> f64) -> Vec<f64> {
    let shape = var.as_tensor().shape().clone();
    let base = f64s(var.as_tensor());
    let set = |v: &[f64]| {
        let t = Tensor::from_vec(v.to_vec(), shape.clone(), &CPU).unwrap();
        var.set(&t).unwrap();
    };
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut v = base.clone();
        v[i] = base[i] + step;
        set(&v);
        let up = f();
        v[i] = base[i] - step;
        set(&v);
        let down = f();
        out.push((up - down) / (2.0 * step));
    }
    set(&base);
    out
}

/// Analytic gradient entries of `var` at `coords`; zero when the variable
/// received no gradient.
pub fn analytic(grads: &GradStore, var: &Var, coords: &[usize]) -> Vec<f64> {
    match grads.get(var.as_tensor()) {
        Some(g) => {
            let g = f64s(g);
            coords.iter().map(|&i| g[i]).collect()
        }
        None => vec![0.0; coords.len()],
    }
}

/// Gradient check of a scalar function over every coordinate of `x`.
pub fn check_input_gradient(x: &Tensor, step: f64, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let coords: Vec<usize> = (0..x.elem_count()).collect();
    let a = analytic(&grads, &var, &coords);
    let n = central_differences(&var, &coords, step, &mut || scalar(&f(var.as_tensor())));
    rel_err(&a, &n)
}

pub const FD_STEP: f64 = 1e-6;

pub fn tiny_model(stages: usize, seed: u64) -> Model {
    Model::new(&toy_taxonomy(), &tiny_config(stages), seed, DType::F64, &CPU).unwrap()
}

/// One random coordinate per parameter tensor under `prefix`: analytic vs central
/// differences, reported per tensor on failure.
pub fn check_params(model: &Model, prefix: &str, seed: u64, loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut r = rng(seed);
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut report = Vec::new();
    for (name, var) in model.store().params().iter().filter(|(n, _)| n.starts_with(prefix)) {
        let coords = [r.random_range(0..var.as_tensor().elem_count())];
        let a = analytic(&grads, var, &coords);
        let n = central_differences(var, &coords, FD_STEP, &mut || scalar(&loss()));
        report.push(format!("{name}: analytic {:.6e} numeric {:.6e}", a[0], n[0]));
        all_a.extend(a);
        all_n.extend(n);
    }
    let err = rel_err(&all_a, &all_n);
    if err >= 1e-3 {
        eprintln!("{}", report.join("\n"));
    }
    assert!(all_a.iter().any(|v| v.abs() > 1e-8), "all sampled gradients vanish");
    err
}

/// Relative error of the total generator loss gradient over all parameters
/// on a `4 * 2^stages` model.
pub fn end_to_end_rel_err(stages: usize) -> f64 {
    let side = 4 << stages;
    let trainer = Trainer::new(tiny_model(stages, 6), tiny_train_config()).unwrap();
    let batch = shapes(side, 2, 7);
    let model = trainer.model();
    let things: usize = batch
        .iter()
        .map(|s| route(&model.validate(&sample_to_scene(s, model.config().max_size)).unwrap(), LayoutMode::Panoptic).1.len())
        .sum();
    assert!(things > 0, "batch needs things to exercise the instance branch");
    let mut r = rng(8);
    let latents = StepLatents {
        stuff: normal(&mut r, &[2, 4]),
        things: normal(&mut r, &[things, 4]),
        image: normal(&mut r, &[2, 4]),
    };
    let loss = || {
        let fwd = trainer.forward_with(&batch, &latents, false).unwrap();
        total_generator_loss_tensor(&trainer.generator_losses(&fwd).unwrap(), &trainer.config().weights).unwrap()
    };
    check_params(model, "", 9, &loss)
}


pub fn grid(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap()
}

pub fn random_embeddings(seed: u64, c: usize, h: usize, w: usize) -> LayoutEmbeddings {
    let mut r = rng(seed);
    LayoutEmbeddings {
        thing_gamma: normal(&mut r, &[c, h, w]),
        thing_beta: normal(&mut r, &[c, h, w]),
        stuff_gamma: normal(&mut r, &[c, h, w]),
        stuff_beta: normal(&mut r, &[c, h, w]),
    }
}

/// Every (gamma, beta) entry must be the bitwise thing value where the mask
/// is 1 and the stuff value elsewhere.
pub fn assert_selection(mask: &[Vec<f64>], emb: &LayoutEmbeddings, maps: &AffineMaps) {
    let (g, b) = (grid(&maps.gamma), grid(&maps.beta));
    let (tg, tb, sg, sb) = (grid(&emb.thing_gamma), grid(&emb.thing_beta), grid(&emb.stuff_gamma), grid(&emb.stuff_beta));
    for c in 0..g.len() {
        for y in 0..mask.len() {
            for x in 0..mask[0].len() {
                let (eg, eb) = if mask[y][x] == 1.0 { (tg[c][y][x], tb[c][y][x]) } else { (sg[c][y][x], sb[c][y][x]) };
                assert_eq!(g[c][y][x].to_bits(), eg.to_bits(), "gamma c{c} ({y},{x})");
                assert_eq!(b[c][y][x].to_bits(), eb.to_bits(), "beta c{c} ({y},{x})");
            }
        }
    }
}

/// Plain per-channel batch normalization over (B, H, W).
pub fn bn_oracle(x: &[f64], b: usize, c: usize, hw: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..b).flat_map(|n| (0..hw).map(move |p| (n * c + ch) * hw + p)).collect();
        let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
        let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = (x[i] - mean) / (var + eps).sqrt();
        }
    }
    out
}

/// Draws an active set and logits of spread up to 50 for a `(K, H, W)` stack.
pub fn random_stack(r: &mut impl Rng, k: usize, hw: usize) -> (Tensor, Vec<usize>) {
    let mut active: Vec<usize> = (0..k).filter(|_| r.random_bool(0.5)).collect();
    if active.is_empty() {
        active.push(r.random_range(0..k));
    }
    let scale = r.random_range(0.1..50.0);
    let v: Vec<f64> = (0..k * hw * hw).map(|_| r.random_range(-scale..scale)).collect();
    (Tensor::from_vec(v, (k, hw, hw), &CPU).unwrap(), active)
}

/// Sums, exact zeros and shift invariance over `count` random stacks.
pub fn check_masked_softmax_stacks(count: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..count {
        let (k, hw) = (r.random_range(1..8), r.random_range(1..9));
        let (logits, active) = random_stack(&mut r, k, hw);
        let out = masked_softmax(&logits, &active).unwrap().masks.to_vec3::<f64>().unwrap();
        for y in 0..hw {
            for x in 0..hw {
                let sum: f64 = active.iter().map(|&c| out[c][y][x]).sum();
                assert!((sum - 1.0).abs() <= 1e-5);
            }
        }
        for c in (0..k).filter(|c| !active.contains(c)) {
            assert!(out[c].concat().iter().all(|&p| p == 0.0));
        }
        let shift = Tensor::from_vec((0..hw * hw).map(|_| r.random_range(-100.0..100.0)).collect::<Vec<f64>>(), (1, hw, hw), &CPU).unwrap();
        let shifted = masked_softmax(&logits.broadcast_add(&shift).unwrap(), &active).unwrap().masks;
        assert!(max_abs_diff(&shifted, &Tensor::new(out, &CPU).unwrap()) < 1e-6);
    }
}

