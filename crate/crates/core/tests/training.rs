use latseg_core::alignment::{ProjectionHead, COSINE_EPS};
use latseg_core::codec::{Codec, CodecConfig};
use latseg_core::data::synth_dataset;
use latseg_core::denoiser::{DenoiserConfig, DenoiserNet};
use latseg_core::inference::InferenceBundle;
use latseg_core::schedule::{build_schedule, training_target, BetaScheduleConfig, Parameterization};
use latseg_core::trainer::{build_teacher, PreparedSet, TrainConfig, Trainer};
use latseg_core::Error;
use latseg_nn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        denoiser: DenoiserConfig { base_channels: 8, norm_groups: 4, ..DenoiserConfig::default() },
        batch_size: 2,
        warmup_steps: 3,
        max_steps: 6,
        ..TrainConfig::default()
    };
    cfg.alignment.enabled = true;
    cfg
}

fn tiny_data(cfg: &TrainConfig) -> (Codec, PreparedSet) {
    let codec = Codec::pixel_space(CodecConfig::default(), 32).unwrap();
    let teacher = build_teacher(cfg, 32).unwrap();
    let set = PreparedSet::new(&codec, synth_dataset(6, 3, 32).unwrap(), Some(teacher.as_ref())).unwrap();
    (codec, set)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn denoiser_f64_gradients_match_finite_differences() {
    let cfg = DenoiserConfig {
        latent_channels: 2,
        base_channels: 4,
        channel_mults: vec![1, 2],
        norm_groups: 2,
        tap_block: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let mut net = DenoiserNet::new(&mut store, &cfg, &mut rng).unwrap();
    net.duplicate_input_layer(&mut store).unwrap();
    // The output convolution starts at zero, which would hide every upstream gradient.
    let out_w = store.find("out.conv.weight").unwrap();
    let shape = store.get(out_w).shape().to_vec();
    store.set(out_w, randn(&shape, &mut rng).map(|v| 0.3 * v));
    let mut head_store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut head_store, cfg.tap_channels(), 6, 5, &mut rng);

    let x = randn(&[2, 4, 4, 4], &mut rng);
    let target = randn(&[2, 2, 4, 4], &mut rng);
    let tokens = randn(&[2 * 4, 5], &mut rng);
    let ts = [3usize, 700];
    let loss = |store: &ParamStore<f64>, head_store: &ParamStore<f64>, want_grads: bool| {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = net.forward(&mut g, store, input, &ts, true).unwrap();
        let mse = g.mean_squared_diff(out.pred, target.clone()).unwrap();
        let p = head.project(&mut g, head_store, out.tap, 4, true).unwrap();
        let d = g.cosine_distill(p, tokens.clone(), COSINE_EPS).unwrap();
        let total = g.add(mse, d).unwrap();
        let value = g.value(total).item();
        let grads = want_grads.then(|| {
            let gr = g.backward(total).unwrap();
            (gr.for_store(store), gr.for_store(head_store))
        });
        (value, grads)
    };
    let (_, grads) = loss(&store, &head_store, true);
    let (g_unet, g_head) = grads.unwrap();

    let h = 1e-6;
    let mut checked = 0;
    let mut check = |which: usize, id: usize, name: &str, analytic: &Option<Tensor<f64>>| {
        let numel = if which == 0 {
            store.get(latseg_nn::ParamId(id)).numel()
        } else {
            head_store.get(latseg_nn::ParamId(id)).numel()
        };
        for k in [0, numel / 2, numel - 1] {
            let perturbed = |delta: f64| {
                let (mut s, mut hs) = (store.clone(), head_store.clone());
                let target = if which == 0 { &mut s } else { &mut hs };
                target.get_mut(latseg_nn::ParamId(id)).data_mut()[k] += delta;
                loss(&s, &hs, false).0
            };
            let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[k]);
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            assert!((a - numeric).abs() / denom < 1e-4, "{name}[{k}]: analytic {a:e} vs numeric {numeric:e}");
            checked += 1;
        }
    };
    for (id, p) in store.iter() {
        check(0, id.0, &p.name, &g_unet[id.0]);
    }
    for (id, p) in head_store.iter() {
        check(1, id.0, &p.name, &g_head[id.0]);
    }
    assert!(checked > 100);
}

#[test]
fn distillation_reaches_only_the_encoder_path_up_to_the_tap() {
    let cfg = DenoiserConfig {
        latent_channels: 3,
        base_channels: 8,
        channel_mults: vec![1, 2, 2],
        norm_groups: 4,
        tap_block: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let mut net = DenoiserNet::new(&mut store, &cfg, &mut rng).unwrap();
    net.duplicate_input_layer(&mut store).unwrap();
    let mut head_store = ParamStore::<f32>::new();
    let head = ProjectionHead::new(&mut head_store, cfg.tap_channels(), 16, 8, &mut rng);
    let mut g = Graph::new();
    let input = g.constant(Tensor::from_fn(&[2, 6, 8, 8], |_| rng.random_range(-1.0f32..1.0)));
    let out = net.forward(&mut g, &store, input, &[10, 900], true).unwrap();
    let tap = cfg.tap_size(8);
    let p = head.project(&mut g, &head_store, out.tap, tap * tap, true).unwrap();
    let h = Tensor::from_fn(&[2 * tap * tap, 8], |_| rng.random_range(-1.0f32..1.0));
    let loss = g.cosine_distill(p, h, COSINE_EPS as f32).unwrap();
    let grads = g.backward(loss).unwrap().for_store(&store);

    let reaches = |name: &str| {
        name.starts_with("input.")
            || name.starts_with("time.")
            || name.starts_with("down0")
            || (name.starts_with("down1.") && !name.starts_with("down1.pool"))
    };
    let mut some_reached = false;
    for (id, p) in store.iter() {
        let nonzero = grads[id.0].as_ref().is_some_and(|g| g.max_abs() > 0.0);
        if reaches(&p.name) {
            some_reached |= nonzero;
        } else {
            assert!(!nonzero, "distillation gradient leaked into {}", p.name);
        }
    }
    assert!(some_reached);
}

#[test]
fn targets_per_parameterization() {
    let s = build_schedule(BetaScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_fn(&[4, 8, 8], |_| rng.random_range(-2.0f32..2.0));
    let eps = Tensor::from_fn(&[4, 8, 8], |_| rng.random_range(-2.0f32..2.0));
    for t in [1, 500, 1000] {
        assert_eq!(training_target(&z, &eps, t, Parameterization::X0, &s).unwrap(), z);
        assert_eq!(training_target(&z, &eps, t, Parameterization::Epsilon, &s).unwrap(), eps);
        assert_ne!(training_target(&z, &eps, t, Parameterization::V, &s).unwrap(), z);
    }
}

#[test]
fn warmup_lr_loss_bounds_and_frozen_components() {
    let cfg = tiny_train_config();
    let (codec, set) = tiny_data(&cfg);
    let codec_digest = codec.digest();
    let tokens_before = set.teacher_tokens.clone();
    let mut tr = Trainer::new(&cfg, &codec, &set).unwrap();
    let log = tr.train(None).unwrap();
    assert_eq!(log.len(), cfg.max_steps);
    for (k, rec) in log.iter().enumerate() {
        let want = cfg.lr * ((k + 1) as f64 / cfg.warmup_steps as f64).min(1.0);
        assert_eq!(rec.lr, want, "step {k}");
        assert!(rec.pred >= 0.0);
        let d = rec.distill.unwrap();
        assert!((-1.0..=1.0).contains(&d));
        assert!(rec.total >= rec.pred - cfg.alignment.lambda - 1e-9);
    }
    assert_eq!(codec.digest(), codec_digest);
    assert_eq!(set.teacher_tokens, tokens_before);
}

#[test]
fn training_checkpoints_carry_alignment_and_are_not_bundles() {
    let mut cfg = tiny_train_config();
    cfg.checkpoint_every = 3;
    let (codec, set) = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(&cfg, &codec, &set).unwrap();
    tr.train(Some(dir.path())).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 2);
    match InferenceBundle::load(&files[0]) {
        Err(Error::Contract(_)) | Err(Error::Format { .. }) => {}
        other => panic!("training checkpoint loaded as a bundle: {:?}", other.err()),
    }
}

#[test]
fn mismatched_tap_and_token_grid_is_alignment_shape_error() {
    let mut cfg = tiny_train_config();
    let (codec, set) = tiny_data(&cfg);
    cfg.denoiser.tap_block = 1;
    match Trainer::new(&cfg, &codec, &set) {
        Err(Error::AlignmentShape { hw: 16, tokens: 4 }) => {}
        other => panic!("expected alignment shape error, got {:?}", other.err()),
    }
}

#[test]
fn identical_config_and_seed_reproduce_bitwise() {
    let cfg = tiny_train_config();
    let (codec, set) = tiny_data(&cfg);
    let run = || {
        let mut tr = Trainer::new(&cfg, &codec, &set).unwrap();
        let log = tr.train(None).unwrap();
        (log, tr.unet().digest(), tr.head().unwrap().1.digest())
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.seed = 1;
    let mut tr = Trainer::new(&other, &codec, &set).unwrap();
    tr.train(None).unwrap();
    assert_ne!(tr.unet().digest(), run().1);
}
