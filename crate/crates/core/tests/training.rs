mod common;

use candle_core::{DType, Tensor};
use common::*;
use plgan_core::checkpoint::{check_taxonomy, load_checkpoint, save_checkpoint, Extras};
use plgan_core::geometry::{crop_boxes, BBox};
use plgan_core::training::{
    appearance_losses, bbox_loss, gram_matrix, hinge_disc_loss, hinge_gen_loss, object_losses, perceptual_loss,
    reconstruction_loss, total_generator_loss, AppearanceCritic, FeatureExtractor, LossParts, LossWeights,
    ObjectBoxes, StepLatents, StepLog, Trainer,
};
use plgan_core::{Error, Model};
use proptest::prelude::*;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &CPU).unwrap()
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn hinge_table() {
    close(scalar(&hinge_disc_loss(&t(&[2.0]), &t(&[-2.0])).unwrap()), 0.0);
    close(scalar(&hinge_disc_loss(&t(&[0.0]), &t(&[0.0])).unwrap()), 2.0);
    close(scalar(&hinge_disc_loss(&t(&[0.5]), &t(&[-0.25])).unwrap()), 1.25);
    close(scalar(&hinge_gen_loss(&t(&[0.0])).unwrap()), 0.0);
    close(scalar(&hinge_gen_loss(&t(&[3.0])).unwrap()), -3.0);
    close(scalar(&hinge_gen_loss(&t(&[1.0, -1.0, 2.0])).unwrap()), -2.0 / 3.0);
}

#[test]
fn reconstruction_table() {
    let mut r = rng(1);
    let a = normal(&mut r, &[1, 3, 4, 4]);
    let b = normal(&mut r, &[1, 3, 4, 4]);
    close(scalar(&reconstruction_loss(&a, &a).unwrap()), 0.0);
    let ones = Tensor::ones((1, 3, 4, 4), DType::F64, &CPU).unwrap();
    close(scalar(&reconstruction_loss(&ones, &ones.zeros_like().unwrap()).unwrap()), 1.0);
    let oracle = f64s(&a).iter().zip(f64s(&b)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 48.0;
    close(scalar(&reconstruction_loss(&a, &b).unwrap()), oracle);
}

/// Five layers: zeros for the all-zero image, ones otherwise.
struct GapExtractor;

impl FeatureExtractor for GapExtractor {
    fn features(&self, images: &Tensor) -> plgan_core::Result<Vec<Tensor>> {
        let v = if f64s(images).iter().all(|&x| x == 0.0) { 0.0 } else { 1.0 };
        Ok((0..5).map(|i| Tensor::full(v, (1, i + 1, 2, 2), &CPU).unwrap()).collect())
    }
}

#[test]
fn perceptual_table() {
    let zero = Tensor::zeros((1, 3, 4, 4), DType::F64, &CPU).unwrap();
    let one = Tensor::ones((1, 3, 4, 4), DType::F64, &CPU).unwrap();
    close(scalar(&perceptual_loss(&zero, &one, &GapExtractor).unwrap()), 1.0 / 32.0 + 1.0 / 16.0 + 1.0 / 8.0 + 1.0 / 4.0 + 1.0);
    close(scalar(&perceptual_loss(&one, &one, &GapExtractor).unwrap()), 0.0);
}

#[test]
fn gram_table() {
    let g = gram_matrix(&Tensor::ones((1, 1, 3, 3), DType::F64, &CPU).unwrap()).unwrap();
    assert_eq!(f64s(&g), vec![1.0]);
    let ortho = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], (1, 2, 2, 2), &CPU).unwrap();
    let g = f64s(&gram_matrix(&ortho).unwrap());
    assert_eq!((g[1], g[2]), (0.0, 0.0));
}

#[test]
fn weighted_sum_table() {
    let w = LossWeights::default();
    close(total_generator_loss(&LossParts::from_array([1.0; 6]), &w), 5.1);
    close(total_generator_loss(&LossParts::from_array([0.0; 6]), &w), 0.0);
    close(total_generator_loss(&LossParts::from_array([0.2, 1.0, 0.5, 0.0, 0.0, 0.0]), &w), 0.8);
}

#[test]
fn bbox_loss_is_mean_squared_error() {
    let p = Tensor::from_vec(vec![0.5, 0.2, 0.1, 0.9], (2, 2), &CPU).unwrap();
    let g = Tensor::from_vec(vec![0.4, 0.2, 0.3, 0.6], (2, 2), &CPU).unwrap();
    close(scalar(&bbox_loss(&p, &g).unwrap()), (0.01 + 0.0 + 0.04 + 0.09) / 4.0);
}

/// Scores crops by their mean intensity.
struct MeanCritic;

impl plgan_core::training::ObjectCritic for MeanCritic {
    fn score(&self, crops: &Tensor, _labels: &[usize]) -> plgan_core::Result<Tensor> {
        Ok(crops.flatten_from(1)?.mean(1)?)
    }
}

impl AppearanceCritic for MeanCritic {
    fn features(&self, crops: &Tensor) -> plgan_core::Result<Tensor> {
        Ok(crops.clone())
    }
    fn score(&self, gram: &Tensor, _cond: &Tensor, _labels: &[usize]) -> plgan_core::Result<Tensor> {
        Ok(gram.flatten_from(1)?.mean(1)?)
    }
}

#[test]
fn object_and_appearance_terms() {
    let mut r = rng(2);
    let real = normal(&mut r, &[1, 3, 8, 8]);
    let fake = normal(&mut r, &[1, 3, 8, 8]);
    let none = ObjectBoxes { real_boxes: &[], fake_boxes: &[], owners: &[], labels: &[], crop_size: 4 };
    for terms in [object_losses(&real, &fake, &none, &MeanCritic).unwrap(), appearance_losses(&real, &fake, &none, &MeanCritic).unwrap()] {
        assert_eq!((scalar(&terms.generator), scalar(&terms.discriminator)), (0.0, 0.0));
    }

    let b = [BBox::new(0.5, 0.5, 0.5, 0.5)];
    let boxes = ObjectBoxes { real_boxes: &b, fake_boxes: &b, owners: &[0], labels: &[2], crop_size: 4 };
    let same = appearance_losses(&real, &real, &boxes, &MeanCritic).unwrap();
    let crop = crop_boxes(&real, &b, &[0], 4).unwrap();
    let s = scalar(&gram_matrix(&crop).unwrap().mean_all().unwrap());
    close(scalar(&same.discriminator), (1.0 - s).max(0.0) + (1.0 + s).max(0.0));
    close(scalar(&same.generator), -s);

    let obj = object_losses(&real, &fake, &boxes, &MeanCritic).unwrap();
    let fs = scalar(&crop_boxes(&fake, &b, &[0], 4).unwrap().mean_all().unwrap());
    close(scalar(&obj.generator), -fs);
}

#[test]
fn crops_follow_the_box() {
    let v: Vec<f64> = (0..3 * 8 * 8).map(|i| (((i % 8) + (i / 8) % 8) % 2) as f64).collect();
    let board = Tensor::from_vec(v, (1, 3, 8, 8), &CPU).unwrap();
    let full = crop_boxes(&board, &[BBox::new(0.5, 0.5, 1.0, 1.0)], &[0], 8).unwrap();
    assert!(max_abs_diff(&full, &board) < 1e-12);
    let centre = crop_boxes(&board, &[BBox::new(0.5, 0.5, 0.5, 0.5)], &[0], 4).unwrap();
    let quadrant = board.narrow(2, 2, 4).unwrap().narrow(3, 2, 4).unwrap();
    assert!(max_abs_diff(&centre, &quadrant) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_psd(seed in 0u64..10_000) {
        let g = f64s(&gram_matrix(&normal(&mut rng(seed), &[1, 2, 3, 3])).unwrap());
        prop_assert!((g[1] - g[2]).abs() < 1e-12);
        // eigenvalues of [[a, b], [b, d]]
        let (a, b, d) = (g[0], g[1], g[3]);
        let disc = ((a - d).powi(2) + 4.0 * b * b).sqrt();
        prop_assert!((a + d - disc) / 2.0 >= -1e-8);
    }

    #[test]
    fn hinge_losses_are_nonnegative_for_critics(real in prop::collection::vec(-5.0f64..5.0, 1..8), fake in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        prop_assert!(scalar(&hinge_disc_loss(&t(&real), &t(&fake)).unwrap()) >= 0.0);
        let perceptual = perceptual_loss(&t(&real).reshape((1, 1, 1, real.len())).unwrap(), &t(&real).reshape((1, 1, 1, real.len())).unwrap(), &GapExtractor).unwrap();
        prop_assert!(scalar(&perceptual) >= 0.0);
    }
}

fn tiny_trainer(seed: u64) -> Trainer {
    let model = Model::new(&toy_taxonomy(), &tiny_config(2), seed, DType::F32, &CPU).unwrap();
    Trainer::new(model, tiny_train_config()).unwrap()
}

fn run(trainer: &mut Trainer, steps: u64) -> Vec<StepLog> {
    (0..steps).map(|s| trainer.train_step(&shapes(16, 2, 100 + s)).unwrap()).collect()
}

#[test]
fn identical_seeds_give_identical_checksums() {
    let (mut a, mut b) = (tiny_trainer(1), tiny_trainer(1));
    run(&mut a, 3);
    run(&mut b, 3);
    assert_eq!(a.model().store().checksum().unwrap(), b.model().store().checksum().unwrap());
    assert_eq!(a.critic_store().checksum().unwrap(), b.critic_store().checksum().unwrap());
    assert_ne!(a.model().store().checksum().unwrap(), tiny_trainer(1).model().store().checksum().unwrap());
}

#[test]
fn step_logs_are_finite_and_complete() {
    let mut tr = tiny_trainer(2);
    let log = run(&mut tr, 2).pop().unwrap();
    assert_eq!(log.step, 2);
    let row = log.csv_row();
    assert_eq!(row.split(',').count(), StepLog::CSV_HEADER.split(',').count());
    assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
}

#[test]
fn updates_touch_only_their_own_parameters() {
    let mut tr = tiny_trainer(3);
    let batch = shapes(16, 2, 9);
    let things: usize = batch.iter().map(|s| s.objects.iter().filter(|o| o.category >= 2).count()).sum();
    let mut r = rng(4);
    let latents = StepLatents { stuff: normal(&mut r, &[2, 4]), things: normal(&mut r, &[things, 4]), image: normal(&mut r, &[2, 4]) };
    let to_f32 = |x: Tensor| x.to_dtype(DType::F32).unwrap();
    let latents = StepLatents { stuff: to_f32(latents.stuff), things: to_f32(latents.things), image: to_f32(latents.image) };
    let sums = |tr: &Trainer| (tr.model().store().checksum().unwrap(), tr.critic_store().checksum().unwrap());

    let before = sums(&tr);
    let fwd = tr.forward_with(&batch, &latents, false).unwrap();
    assert_eq!(sums(&tr), before);
    tr.discriminator_step(&fwd).unwrap();
    let after_d = sums(&tr);
    assert_eq!(after_d.0, before.0);
    assert_ne!(after_d.1, before.1);
    let fwd = tr.forward_with(&batch, &latents, false).unwrap();
    tr.generator_step(&fwd).unwrap();
    let after_g = sums(&tr);
    assert_ne!(after_g.0, after_d.0);
    assert_eq!(after_g.1, after_d.1);
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = Model::new(&toy_taxonomy(), &tiny_config(2), 5, DType::F32, &CPU).unwrap();
    save_checkpoint(&path, &model, &Extras::default()).unwrap();
    let loaded = load_checkpoint(&path, &CPU).unwrap().model;
    assert_eq!(loaded.store().checksum().unwrap(), model.store().checksum().unwrap());
    let s = model.validate(&scene(16, &[(0, 0.5, 0.5, 20), (2, 0.3, 0.6, 4)])).unwrap();
    let a = model.synthesize(std::slice::from_ref(&s), &[7], plgan_core::plg::LayoutMode::Panoptic, true).unwrap();
    let b = loaded.synthesize(&[s], &[7], plgan_core::plg::LayoutMode::Panoptic, true).unwrap();
    assert_eq!(f64s(&a.image), f64s(&b.image));
    check_taxonomy(&loaded, &toy_taxonomy().hash()).unwrap();
    assert!(matches!(check_taxonomy(&loaded, "deadbeef"), Err(Error::CheckpointMismatch { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("absent"), &CPU), Err(Error::MissingFile(_))));
}

#[test]
fn resumed_training_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.safetensors");
    let mut straight = tiny_trainer(6);
    run(&mut straight, 4);

    let mut first = tiny_trainer(6);
    run(&mut first, 2);
    first.save(&path).unwrap();
    let mut resumed = Trainer::resume(&path, &CPU).unwrap();
    assert_eq!(resumed.step(), 2);
    for s in 2..4 {
        resumed.train_step(&shapes(16, 2, 100 + s)).unwrap();
    }
    assert_eq!(resumed.model().store().checksum().unwrap(), straight.model().store().checksum().unwrap());
    assert_eq!(resumed.critic_store().checksum().unwrap(), straight.critic_store().checksum().unwrap());
    assert_eq!(resumed.state(), straight.state());
}

#[test]
fn model_checkpoint_is_not_a_training_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = Model::new(&toy_taxonomy(), &tiny_config(1), 0, DType::F32, &CPU).unwrap();
    save_checkpoint(&path, &model, &Extras::default()).unwrap();
    assert!(matches!(Trainer::resume(&path, &CPU), Err(Error::BadCheckpoint(_))));
}
