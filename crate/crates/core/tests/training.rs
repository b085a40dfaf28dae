use latentseg::checkpoint::Checkpoint;
use latentseg::codec::{pretrain_codec, CodecConfig, CodecParams, PretrainConfig};
use latentseg::data::render_toy_sample;
use latentseg::denoiser::DenoiserConfig;
use latentseg::pipeline::{InferenceConfig, InferenceMode, Trainer, TrainingConfig};
use latentseg::raster::{BinaryMask, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    codec: CodecParams,
    images: Vec<RgbImage>,
    masks: Vec<BinaryMask>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (images, masks): (Vec<_>, Vec<_>) = (0..40).map(|_| render_toy_sample(&mut rng, 32)).unzip();
    let config = CodecConfig {
        base_channels: 4,
        image_height: 32,
        image_width: 32,
        ..CodecConfig::default()
    };
    let pretrain = PretrainConfig {
        steps: 3,
        batch_size: 4,
        target_mae: 1.0,
        ..PretrainConfig::default()
    };
    let (codec, _) = pretrain_codec(&masks, &config, &pretrain).unwrap();
    Fixture { codec, images, masks }
}

fn tiny(steps: usize) -> TrainingConfig {
    TrainingConfig {
        total_steps: steps,
        batch_size: 2,
        learning_rate: 1e-3,
        denoiser: DenoiserConfig {
            base_channels: 4,
            depth: 1,
            ..DenoiserConfig::default()
        },
        ..TrainingConfig::default()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let f = fixture();
    let mut straight = Trainer::new(&f.codec, tiny(6), &f.images, &f.masks).unwrap();
    straight.run(|_, _| {}).unwrap();

    let mut first = Trainer::new(&f.codec, tiny(3), &f.images, &f.masks).unwrap();
    first.run(|_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.safetensors");
    Checkpoint::from_trainer(&first).unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 3);
    let mut model = ck.model;
    model.training.total_steps = 6;
    let mut resumed = Trainer::resume(&model, &ck.optimizer, ck.step, &f.images, &f.masks).unwrap();
    resumed.run(|_, _| {}).unwrap();

    let a = straight.model().unwrap();
    let b = resumed.model().unwrap();
    assert_eq!(a.denoiser.digest().unwrap(), b.denoiser.digest().unwrap());
    assert_eq!(a.codec.condition.digest().unwrap(), b.codec.condition.digest().unwrap());
    assert_eq!(straight.log()[3..], resumed.log()[..]);
}

#[test]
fn frozen_encoder_keeps_condition_weights() {
    let f = fixture();
    let before = f.codec.condition.digest().unwrap();
    let frozen = TrainingConfig {
        vision_encoder_trainable: false,
        ..tiny(3)
    };
    let mut t = Trainer::new(&f.codec, frozen, &f.images, &f.masks).unwrap();
    t.run(|_, _| {}).unwrap();
    assert_eq!(t.model().unwrap().codec.condition.digest().unwrap(), before);

    let mut t = Trainer::new(&f.codec, tiny(3), &f.images, &f.masks).unwrap();
    t.run(|_, _| {}).unwrap();
    assert_ne!(t.model().unwrap().codec.condition.digest().unwrap(), before);
    assert_eq!(f.codec.condition.digest().unwrap(), before);
}

#[test]
fn noise_only_objective_ignores_latent_term() {
    let f = fixture();
    let config = TrainingConfig { lambda: 0.0, ..tiny(3) };
    let mut t = Trainer::new(&f.codec, config, &f.images, &f.masks).unwrap();
    t.run(|_, _| {}).unwrap();
    for b in t.log() {
        assert_eq!(b.total, b.noise_loss);
        assert!(b.latent_loss > 0.0);
    }
}

#[test]
fn inference_counts_denoiser_calls() {
    let f = fixture();
    let mut t = Trainer::new(&f.codec, tiny(1), &f.images, &f.masks).unwrap();
    t.run(|_, _| {}).unwrap();
    let seg = t.model().unwrap().segmenter().unwrap();
    let (_, single) = seg.segment(&f.images[0], &InferenceConfig::default()).unwrap();
    assert_eq!(single.denoiser_calls, 1);
    assert_eq!(single.timesteps, vec![InferenceConfig::default().t_fix]);
    let multi = InferenceConfig {
        mode: InferenceMode::MultiStep,
        multi_step_count: 7,
        ..InferenceConfig::default()
    };
    let (_, d) = seg.segment(&f.images[0], &multi).unwrap();
    assert_eq!(d.denoiser_calls, 7);
    assert_eq!(seg.denoiser_calls(), 8);

    let (batch, _) = seg.segment_batch(&f.images[..3], &InferenceConfig::default()).unwrap();
    for (img, m) in f.images[..3].iter().zip(&batch) {
        assert_eq!(&seg.segment(img, &InferenceConfig::default()).unwrap().0, m);
    }
}
