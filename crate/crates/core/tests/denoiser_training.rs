use anobfn_core::denoiser::{
    load_checkpoint, loss_and_gradients, save_checkpoint, train_step, CheckpointManifest, DenoiserConfig, Prediction,
    TrainConfig, TrainState, UNet,
};
use anobfn_core::nn::ParamStore;
use anobfn_core::noise::{NoiseConfig, NoiseKind};
use anobfn_core::schedule::{build_schedule, ScheduleConfig};
use anobfn_core::{Error, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 4,
        n_stages: 2,
        time_embed_dim: 4,
        use_attention: false,
        prediction: Prediction::Residual,
    }
}

fn smooth_image(rng: &mut ChaCha8Rng, side: usize) -> ImageTensor {
    let (a, b, c) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(-0.5..0.5),
    );
    ImageTensor::from_fn(side, side, |r, col| {
        (0.7 * (a * r as f64 / side as f64 * 3.0).sin() * (b * col as f64 / side as f64 * 3.0).cos() + c)
            .clamp(-1.0, 1.0)
    })
}

#[test]
fn network_gradients_match_central_differences() {
    let (net, mut params) = UNet::new::<f64>(&toy_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // perturb everything so the zero-initialized head passes gradient through
    for t in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x0s: Vec<ImageTensor> = (0..2).map(|_| smooth_image(&mut rng, 8)).collect();
    let mus: Vec<ImageTensor> = x0s
        .iter()
        .map(|x| {
            let jitter: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-0.3..0.3)).collect();
            ImageTensor::new(
                8,
                8,
                x.as_slice().iter().zip(&jitter).map(|(v, j)| 0.5 * v + j).collect(),
            )
            .unwrap()
        })
        .collect();
    let x_refs: Vec<&ImageTensor> = x0s.iter().collect();
    let mu_refs: Vec<&ImageTensor> = mus.iter().collect();
    let ts = [0.3, 0.8];
    let alphas = [0.7, 2.5];

    let loss = |p: &ParamStore<f64>| {
        loss_and_gradients(&net, p, &x_refs, &mu_refs, &ts, &alphas, &ScheduleConfig::default(), 10)
            .unwrap()
            .0
    };
    let (_, grads) = loss_and_gradients(
        &net,
        &params,
        &x_refs,
        &mu_refs,
        &ts,
        &alphas,
        &ScheduleConfig::default(),
        10,
    )
    .unwrap();

    let h = 1e-3;
    let mut checked = 0;
    while checked < 12 {
        let id = rng.random_range(0..params.len());
        let i = rng.random_range(0..params.get(id).len());
        let analytic = grads[id].data()[i];
        let mut plus = params.clone();
        plus.get_mut(id).data_mut()[i] += h;
        let mut minus = params.clone();
        minus.get_mut(id).data_mut()[i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel <= 1e-2,
            "{}[{i}]: analytic {analytic}, numeric {numeric}",
            params.name(id)
        );
        checked += 1;
    }
}

fn quick_setup() -> (UNet, TrainState, Vec<ImageTensor>, TrainConfig) {
    let (net, params) = UNet::new::<f32>(&toy_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = (0..4).map(|_| smooth_image(&mut rng, 8)).collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    (net, TrainState::new(params), images, cfg)
}

#[test]
fn fixed_seed_gives_identical_loss_trajectory() {
    let schedule = build_schedule(&ScheduleConfig::default()).unwrap();
    let noise = NoiseConfig::default();
    let run = || {
        let (net, mut state, images, cfg) = quick_setup();
        let batch: Vec<&ImageTensor> = images.iter().collect();
        (0..5)
            .map(|_| {
                train_step(&net, &mut state, &batch, &schedule, &noise, &cfg)
                    .unwrap()
                    .loss
                    .to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_checkpoint_continues_exactly() {
    let schedule_cfg = ScheduleConfig::default();
    let schedule = build_schedule(&schedule_cfg).unwrap();
    let noise = NoiseConfig {
        seed: 21,
        ..NoiseConfig::default()
    };
    let (net, mut straight, images, cfg) = quick_setup();
    let batch: Vec<&ImageTensor> = images.iter().collect();
    let mut resumed = straight.clone();
    for _ in 0..4 {
        train_step(&net, &mut straight, &batch, &schedule, &noise, &cfg).unwrap();
    }

    for _ in 0..2 {
        train_step(&net, &mut resumed, &batch, &schedule, &noise, &cfg).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = CheckpointManifest::describe(&resumed, [8, 8], &toy_config(), &cfg, &schedule_cfg, &noise);
    let path = save_checkpoint(dir.path(), &manifest, &resumed).unwrap();
    assert!(path.ends_with("ckpt_00000002"));

    let ckpt = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ckpt.state, resumed);
    assert!(ckpt.state.params.same_layout(&ckpt.state.ema));
    let (cfg2, noise2) = (ckpt.train_config(), ckpt.noise_config());
    assert_eq!(cfg2, cfg);
    assert_eq!(noise2, noise);
    let mut state = ckpt.state;
    for _ in 0..2 {
        train_step(&ckpt.net, &mut state, &batch, &schedule, &noise2, &cfg2).unwrap();
    }
    assert_eq!(state.step, 4);
    assert_eq!(state, straight);
}

#[test]
fn divergent_training_reports_step() {
    let schedule = build_schedule(&ScheduleConfig::default()).unwrap();
    let noise = NoiseConfig {
        kind: NoiseKind::Gaussian,
        ..NoiseConfig::default()
    };
    let (net, mut state, images, _) = quick_setup();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        grad_clip_norm: 1e30,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let batch: Vec<&ImageTensor> = images.iter().collect();
    let mut failure = None;
    for _ in 0..20 {
        if let Err(e) = train_step(&net, &mut state, &batch, &schedule, &noise, &cfg) {
            failure = Some(e);
            break;
        }
    }
    match failure {
        Some(Error::NonFinite { step, .. }) => assert!(step >= 1),
        other => panic!("expected a non-finite failure, got {other:?}"),
    }
}

#[test]
fn checkpoint_rejects_mismatched_layout() {
    let (_, state, _, cfg) = quick_setup();
    let dir = tempfile::tempdir().unwrap();
    let wrong = DenoiserConfig {
        base_width: 8,
        ..toy_config()
    };
    let manifest = CheckpointManifest::describe(
        &state,
        [8, 8],
        &wrong,
        &cfg,
        &ScheduleConfig::default(),
        &NoiseConfig::default(),
    );
    save_checkpoint(dir.path(), &manifest, &state).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

/// Mean loss over the first and last 25 of 200 steps on 64 phantom slices.
fn smoothed_loss_endpoints(prediction: Prediction) -> (f64, f64) {
    use anobfn_core::phantom::{build_dataset, PhantomConfig};
    let phantom = PhantomConfig {
        size: 32,
        n_subjects: 16,
        slices_per_subject: 4,
        seed: 1,
        ..PhantomConfig::default()
    };
    let images: Vec<ImageTensor> = build_dataset(&phantom)
        .unwrap()
        .samples
        .into_iter()
        .map(|s| s.healthy)
        .collect();
    assert_eq!(images.len(), 64);
    let schedule = build_schedule(&ScheduleConfig::default()).unwrap();
    let noise = NoiseConfig::default();
    let denoiser = DenoiserConfig {
        base_width: 8,
        n_stages: 3,
        time_embed_dim: 16,
        use_attention: false,
        prediction,
    };
    let (net, params) = UNet::new::<f32>(&denoiser, 0).unwrap();
    let mut state = TrainState::new(params);
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    for step in 0..200 {
        let start = (step * 8) % images.len();
        let batch: Vec<&ImageTensor> = images[start..start + 8].iter().collect();
        losses.push(
            train_step(&net, &mut state, &batch, &schedule, &noise, &cfg)
                .unwrap()
                .loss,
        );
    }
    let window = 25;
    let initial = losses[..window].iter().sum::<f64>() / window as f64;
    let last = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    (initial, last)
}

#[test]
fn short_run_halves_smoothed_loss() {
    let (initial, last) = smoothed_loss_endpoints(Prediction::Direct);
    assert!(last < 0.5 * initial, "smoothed loss {initial} -> {last}");
}

#[test]
fn residual_short_run_improves_on_identity() {
    // the residual head starts at the identity, whose loss is already close
    // to the floor set by per-pixel acquisition noise
    let (initial, last) = smoothed_loss_endpoints(Prediction::Residual);
    assert!(last < 0.95 * initial, "smoothed loss {initial} -> {last}");
}
