use candle_core::DType;
use introvac::data::{generate_synthetic, load_celeba_format, write_celeba_layout, Dataset, SyntheticSpec};
use introvac::eval::{classifier_accuracy, evaluate_reconstruction_fid, PixelEmbedder};
use introvac::latent_ops::{generate_from_prior, manipulate, ManipulationRequest};
use introvac::model::{Checkpoint, IntroVac, ModelConfig};
use introvac::trainer::{checkpoint_path, fit, FitOptions, Mode, TrainConfig, TrainState};

fn model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(2);
    cfg.image_size = 16;
    cfg.latent_dim = 4;
    cfg.channel_plan = vec![4, 8];
    cfg
}

fn train_config(mode: Mode, epochs: u64) -> TrainConfig {
    let mut tc = TrainConfig::full_scale(mode);
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.learning_rate = 1e-3;
    tc.lr_decay_epochs = if epochs > 1 { vec![1] } else { vec![] };
    tc.seed = 17;
    tc.checkpoint_every = 1;
    tc.validation_fraction = 0.2;
    tc
}

fn faces(count: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        count,
        image_size: 16,
        num_attributes: 2,
        seed: 8,
        correlation: 0.0,
    })
    .unwrap()
}

#[test]
fn disk_layout_feeds_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let original = faces(30);
    let spec = write_celeba_layout(&original, &dir.path().join("celeba"), 16).unwrap();
    let loaded = load_celeba_format(&spec).unwrap();
    assert_eq!(loaded.missing_images, 0);
    assert_eq!(loaded.train.len() + loaded.val.len() + loaded.test.len(), 30);
    for part in [&loaded.train, &loaded.val, &loaded.test] {
        for (id, labels) in part.ids.iter().zip(&part.labels) {
            let i = original.ids.iter().position(|o| o == id).unwrap();
            assert_eq!(labels, &original.labels[i], "{id}");
        }
    }

    let model = IntroVac::new(model_config(), 1, DType::F32).unwrap();
    let tc = train_config(Mode::Introvac, 1);
    let out = dir.path().join("run");
    let res = fit(
        &model,
        &loaded.train,
        &tc,
        TrainState::new(&model, &tc).unwrap(),
        FitOptions {
            output_dir: Some(out.clone()),
            validation: Some(&loaded.val),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(res.checkpoints, vec![checkpoint_path(&out, 1)]);
    assert!(res.epochs[0].val_fid_pixels.is_some());

    let back = IntroVac::from_checkpoint(&Checkpoint::load(&res.checkpoints[0]).unwrap()).unwrap();
    assert_eq!(classifier_accuracy(&back, &loaded.test).unwrap(), classifier_accuracy(&model, &loaded.test).unwrap());
    let m = evaluate_reconstruction_fid(&back, &loaded.test, &PixelEmbedder::new([3, 16, 16], 8).unwrap()).unwrap();
    assert!(m.fid_reconstruction.is_finite() && m.fid_reconstruction >= 0.0);
    assert_eq!(m.num_images, loaded.test.len());
}

#[test]
fn interrupted_fit_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = faces(24);
    for mode in [Mode::Vac, Mode::Introvac] {
        let tc = train_config(mode, 3);
        let straight = IntroVac::new(model_config(), 2, DType::F32).unwrap();
        let full = fit(&straight, &data, &tc, TrainState::new(&straight, &tc).unwrap(), FitOptions::default()).unwrap();

        let out = dir.path().join(mode.to_string());
        let first = IntroVac::new(model_config(), 2, DType::F32).unwrap();
        let head = fit(
            &first,
            &data,
            &tc,
            TrainState::new(&first, &tc).unwrap(),
            FitOptions {
                output_dir: Some(out.clone()),
                stop_after_epoch: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(head.state.epoch, 1);

        let ckpt = Checkpoint::load(&checkpoint_path(&out, 1)).unwrap();
        let (resumed, state, cfg) = TrainState::from_checkpoint(&ckpt).unwrap();
        assert_eq!(cfg, tc);
        let tail = fit(&resumed, &data, &cfg, state, FitOptions::default()).unwrap();

        assert_eq!([head.steps, tail.steps].concat(), full.steps, "{mode}");
        assert_eq!(tail.state.global_step, full.state.global_step);
        let (a, b) = (straight.named_tensors(), resumed.named_tensors());
        for (name, t) in &a {
            let (x, y) = (t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b[name].flatten_all().unwrap().to_vec1::<f32>().unwrap());
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{mode}: {name}");
        }
    }
}

#[test]
fn reloaded_checkpoint_reproduces_latent_operations() {
    let dir = tempfile::tempdir().unwrap();
    let data = faces(16);
    let model = IntroVac::new(model_config(), 3, DType::F32).unwrap();
    let tc = train_config(Mode::Introvac, 1);
    fit(
        &model,
        &data,
        &tc,
        TrainState::new(&model, &tc).unwrap(),
        FitOptions {
            output_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let back = IntroVac::from_checkpoint(&Checkpoint::load(&checkpoint_path(dir.path(), 1)).unwrap()).unwrap();

    assert_eq!(generate_from_prior(&model, 3, 5).unwrap(), generate_from_prior(&back, 3, 5).unwrap());
    let request = ManipulationRequest {
        attribute_deltas: vec![(0, 2.0), (1, -1.0)],
        source: data.images[0].clone(),
    };
    let (a, b) = (manipulate(&model, &request).unwrap(), manipulate(&back, &request).unwrap());
    assert_eq!(a, b);
    assert_ne!(a.x_aug, a.reconstruction);
}
