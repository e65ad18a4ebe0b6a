mod common;

use std::time::Instant;

use candle_core::{DType, Tensor};
use common::*;
use plgan_core::fusion::{
    batch_stats, embed_layouts, foreground_mask, fuse_affine, isa_norm, AffineMaps, EmbeddingTables, GuidedFilter,
};
use plgan_core::nn::ParamStore;
use plgan_core::plg::InstanceLayout;
use plgan_core::Error;
use proptest::prelude::*;

fn tables(num_stuff: usize, thing_rows: usize, channels: usize, seed: u64) -> EmbeddingTables {
    let mut store = ParamStore::new(DType::F64, &CPU);
    let mut r = rng(seed);
    EmbeddingTables::new(&mut store.builder("t", &mut r), num_stuff, thing_rows, channels, 0.7).unwrap()
}

fn guided_filter(channels: usize, seed: u64) -> GuidedFilter {
    let mut store = ParamStore::new(DType::F64, &CPU);
    let mut r = rng(seed);
    GuidedFilter::new(&mut store.builder("gf", &mut r), channels, 4).unwrap()
}

#[test]
fn fusion_matches_per_pixel_loop() {
    let start = Instant::now();
    let checker: Vec<Vec<f64>> = (0..4).map(|y| (0..4).map(|x| ((x + y) % 2) as f64).collect()).collect();
    let patterns = [vec![vec![0.0; 4]; 4], vec![vec![1.0; 4]; 4], checker];
    for (i, m) in patterns.iter().enumerate() {
        let emb = random_embeddings(i as u64, 2, 4, 4);
        let mask = Tensor::from_vec(m.concat(), (1, 4, 4), &CPU).unwrap();
        assert_selection(m, &emb, &fuse_affine(&mask, &emb).unwrap());
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn stuff_pixels_keep_stuff_embeddings_through_the_pipeline() {
    let t = tables(3, 4, 2, 1);
    let mut r = rng(2);
    // two instances with partial support and a three-channel soft stuff layout
    let raw = (normal(&mut r, &[2, 4, 4]).abs().unwrap() * 0.3).unwrap();
    let support = Tensor::from_vec(
        vec![1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.],
        (2, 4, 4),
        &CPU,
    )
    .unwrap();
    let raw = (raw * support).unwrap();
    let layout = InstanceLayout { masks: raw.clone(), object_ids: vec![0, 1] };
    let refined = (&raw + normal(&mut r, &[2, 4, 4]).affine(0.01, 0.0).unwrap()).unwrap();
    let logits = normal(&mut r, &[3, 4, 4]);
    let stuff = plgan_core::plg::masked_softmax(&logits, &[0, 1, 2]).unwrap().masks;
    let emb = embed_layouts(&refined, &layout, Some(&stuff), &t, &[1, 3]).unwrap();
    let m = foreground_mask(&layout, 0.1).unwrap().mask;
    let maps = fuse_affine(&m.unsqueeze(0).unwrap(), &emb).unwrap();
    let mask = m.to_vec2::<f64>().unwrap();
    assert!(mask.concat().iter().any(|&v| v == 0.0) && mask.concat().iter().any(|&v| v == 1.0));
    assert_selection(&mask, &emb, &maps);
}

#[test]
fn identity_affine_reduces_to_batch_norm() {
    let mut r = rng(3);
    let (b, c, h, w) = (3, 4, 5, 6);
    let x = (normal(&mut r, &[b, c, h, w]) * 3.0).unwrap().affine(1.0, 0.5).unwrap();
    let maps = AffineMaps { gamma: Tensor::ones((b, c, h, w), DType::F64, &CPU).unwrap(), beta: Tensor::zeros((b, c, h, w), DType::F64, &CPU).unwrap() };
    let out = f64s(&isa_norm(&x, &maps, 1e-5).unwrap());
    let oracle = bn_oracle(&f64s(&x), b, c, h * w, 1e-5);
    let diff = out.iter().zip(&oracle).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "max diff {diff}");
}

#[test]
fn constant_channels_collapse_to_beta() {
    let mut r = rng(4);
    let per_channel = Tensor::from_vec(vec![2.0, -1.0], (1, 2, 1, 1), &CPU).unwrap();
    let x = per_channel.broadcast_as((2, 2, 3, 3)).unwrap().contiguous().unwrap();
    let maps = AffineMaps { gamma: normal(&mut r, &[2, 2, 3, 3]), beta: normal(&mut r, &[2, 2, 3, 3]) };
    let out = isa_norm(&x, &maps, 1e-5).unwrap();
    assert!(max_abs_diff(&out, &maps.beta) < 1e-12);
}

#[test]
fn isa_norm_gradient_wrt_features() {
    let mut r = rng(5);
    let x = normal(&mut r, &[2, 2, 4, 4]);
    let maps = AffineMaps { gamma: normal(&mut r, &[2, 2, 4, 4]), beta: normal(&mut r, &[2, 2, 4, 4]) };
    let weights = normal(&mut r, &[2, 2, 4, 4]);
    let err = check_input_gradient(&x, 1e-6, &|x| (isa_norm(x, &maps, 1e-5).unwrap() * &weights).unwrap().sum_all().unwrap());
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn guided_filter_reconstruction_identity() {
    let gf = guided_filter(3, 6);
    let mut r = rng(7);
    let mask = normal(&mut r, &[8, 8]).abs().unwrap();
    let out = gf.forward(&mask, &normal(&mut r, &[3, 8, 8])).unwrap();
    let rebuilt = ((&out.a * mask.reshape((1, 1, 8, 8)).unwrap()).unwrap() + &out.b).unwrap();
    assert!(max_abs_diff(&out.refined, &rebuilt) < 1e-6);
    let b = (&out.mask_mean - (&out.a * &out.guide_mean).unwrap()).unwrap();
    assert!(max_abs_diff(&out.b, &b) < 1e-12);
}

#[test]
fn constant_mask_has_zero_covariance_inside() {
    let gf = guided_filter(2, 8);
    let mut r = rng(9);
    let out = gf.forward(&Tensor::full(0.4f64, (8, 8), &CPU).unwrap(), &normal(&mut r, &[2, 8, 8])).unwrap();
    let mean = grid(&out.mask_mean.squeeze(0).unwrap());
    let cov = grid(&out.cov_guide_mask.squeeze(0).unwrap());
    for y in 1..7 {
        for x in 1..7 {
            assert!((mean[0][y][x] - 0.4).abs() < 1e-12);
            assert!(cov[0][y][x].abs() < 1e-12, "cov {} at ({y},{x})", cov[0][y][x]);
        }
    }
}

#[test]
fn guided_filter_gradients_match_finite_differences() {
    let gf = guided_filter(3, 10);
    let mut r = rng(11);
    let mask = normal(&mut r, &[8, 8]).abs().unwrap();
    let features = normal(&mut r, &[3, 8, 8]);
    let weights = normal(&mut r, &[1, 1, 8, 8]);
    let loss = |m: &Tensor, f: &Tensor| (gf.forward(m, f).unwrap().refined * &weights).unwrap().sum_all().unwrap();
    let err = check_input_gradient(&mask, 1e-6, &|m| loss(m, &features));
    assert!(err < 1e-3, "mask rel err {err}");
    let err = check_input_gradient(&features, 1e-6, &|f| loss(&mask, f));
    assert!(err < 1e-3, "feature rel err {err}");
}

#[test]
fn single_full_instance_gives_its_row_everywhere() {
    let t = tables(2, 3, 4, 12);
    let ones = Tensor::ones((1, 4, 4), DType::F64, &CPU).unwrap();
    let layout = InstanceLayout { masks: ones.clone(), object_ids: vec![0] };
    let emb = embed_layouts(&ones, &layout, None, &t, &[2]).unwrap();
    let row = t.thing_gamma.as_tensor().get(2).unwrap().to_vec1::<f64>().unwrap();
    let g = grid(&emb.thing_gamma);
    for (c, plane) in g.iter().enumerate() {
        for v in plane.concat() {
            assert!((v - row[c]).abs() < 1e-5, "{v} vs {}", row[c]);
        }
    }
}

#[test]
fn one_hot_stuff_layout_selects_rows() {
    let t = tables(3, 1, 2, 13);
    let labels: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % 3).collect();
    let mut onehot = vec![0.0; 3 * 16];
    for (p, &c) in labels.iter().enumerate() {
        onehot[c * 16 + p] = 1.0;
    }
    let stuff = Tensor::from_vec(onehot, (3, 4, 4), &CPU).unwrap();
    let layout = InstanceLayout { masks: Tensor::zeros((0, 4, 4), DType::F64, &CPU).unwrap(), object_ids: vec![] };
    let empty = layout.masks.clone();
    let emb = embed_layouts(&empty, &layout, Some(&stuff), &t, &[]).unwrap();
    let table = t.stuff_beta.as_tensor().to_vec2::<f64>().unwrap();
    let beta = grid(&emb.stuff_beta);
    for (p, &c) in labels.iter().enumerate() {
        for (ch, plane) in beta.iter().enumerate() {
            assert_eq!(plane[p / 4][p % 4], table[c][ch]);
        }
    }
}

#[test]
fn empty_pixels_stay_finite_and_bad_rows_are_rejected() {
    let t = tables(2, 2, 3, 14);
    let mut m = vec![0.0; 16];
    m[5] = 1.0;
    let masks = Tensor::from_vec(m, (1, 4, 4), &CPU).unwrap();
    let layout = InstanceLayout { masks: masks.clone(), object_ids: vec![0] };
    let emb = embed_layouts(&masks, &layout, None, &t, &[1]).unwrap();
    assert!(f64s(&emb.thing_gamma).iter().all(|v| v.is_finite()));
    assert!(matches!(embed_layouts(&masks, &layout, None, &t, &[7]), Err(Error::CategoryOutOfRange { index: 7, .. })));
}

#[test]
fn foreground_threshold_examples() {
    let empty = InstanceLayout { masks: Tensor::zeros((0, 3, 3), DType::F64, &CPU).unwrap(), object_ids: vec![] };
    assert!(f64s(&foreground_mask(&empty, 0.1).unwrap().mask).iter().all(|&v| v == 0.0));
    let masks = Tensor::from_vec(vec![0.05, 0.15, 0.0, 0.0], (1, 1, 4), &CPU).unwrap();
    let layout = InstanceLayout { masks, object_ids: vec![0] };
    let m = foreground_mask(&layout, 0.1).unwrap().mask;
    assert_eq!(f64s(&m), vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(f64s(&m), f64s(&foreground_mask(&layout, 0.1).unwrap().mask));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_tau_never_adds_foreground(seed in 0u64..1000, lo in 0.0f64..1.0, gap in 0.0f64..1.0) {
        let mut r = rng(seed);
        let masks = normal(&mut r, &[3, 5, 5]).abs().unwrap();
        let layout = InstanceLayout { masks, object_ids: vec![0, 1, 2] };
        let low = f64s(&foreground_mask(&layout, lo).unwrap().mask);
        let high = f64s(&foreground_mask(&layout, lo + gap).unwrap().mask);
        prop_assert!(low.iter().zip(&high).all(|(l, h)| h <= l));
    }

    #[test]
    fn normalized_features_are_standardized(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let x = normal(&mut r, &[2, 3, 4, 4]).affine(scale, shift).unwrap();
        let ones = Tensor::ones((2, 3, 4, 4), DType::F64, &CPU).unwrap();
        let maps = AffineMaps { gamma: ones.clone(), beta: ones.zeros_like().unwrap() };
        let (mean, var) = batch_stats(&isa_norm(&x, &maps, 1e-5).unwrap()).unwrap();
        prop_assert!(f64s(&mean).iter().all(|m| m.abs() < 1e-5));
        prop_assert!(f64s(&var).iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn guided_filter_identity_holds(seed in 0u64..1000) {
        let gf = guided_filter(2, seed);
        let mut r = rng(seed + 1);
        let mask = normal(&mut r, &[6, 6]).abs().unwrap();
        let out = gf.forward(&mask, &normal(&mut r, &[2, 6, 6])).unwrap();
        let rebuilt = ((&out.a * mask.reshape((1, 1, 6, 6)).unwrap()).unwrap() + &out.b).unwrap();
        prop_assert!(max_abs_diff(&out.refined, &rebuilt) < 1e-6);
    }
}
