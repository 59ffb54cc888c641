use super::*;
use crate::autodiff::{finite_difference_gradient, relative_error};
use crate::data::{synth_corpus, ClipRecord, ClipSource, CorpusSpec};
use crate::losses::LossVariant;
use crate::model::BackboneConfig;

fn tiny_mel() -> MelConfig {
    MelConfig {
        n_fft: 128,
        hop: 64,
        n_mels: 16,
        ..MelConfig::default()
    }
}

fn tiny_dims(n_classes: usize) -> ModelDims {
    let mut dims = ModelDims::new(tiny_mel(), n_classes);
    dims.backbone = BackboneConfig {
        channels: vec![6, 8, 8],
        embedding_dim: 12,
        ..BackboneConfig::default()
    };
    dims
}

fn corpus(train_per_machine: usize, duration_secs: f64) -> Manifest {
    let spec = CorpusSpec {
        machine_types: 2,
        ids_per_type: 2,
        train_per_machine,
        test_normal_per_machine: 1,
        test_anomaly_per_machine: 1,
        duration_secs,
        seed: 21,
        ..CorpusSpec::default()
    };
    Manifest::from_records(synth_corpus(&spec).unwrap()).unwrap()
}

fn config(variant: LossVariant, epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate: lr,
        seed: 5,
        loss: LossConfig {
            variant,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// The three-phase step against central differences of the batch-mean loss.
#[test]
fn batch_gradient_matches_finite_differences() {
    let manifest = corpus(2, 0.05);
    let dims = tiny_dims(4);
    let fx = FeatureExtractor::new(dims.mel.clone()).unwrap();
    let set = prepare(&manifest, &fx).unwrap();
    let model = init_params(3, &dims).unwrap();
    let members: Vec<usize> = (0..4).collect();
    let draw = MixupDraw {
        lambda: 0.3,
        partner: vec![2, 0, 2, 1],
    };
    for variant in LossVariant::ALL {
        let cfg = LossConfig {
            variant,
            ..LossConfig::default()
        };
        let tgram = tgram_graph(&model.tgram, set.samples, true).unwrap();
        let (f, t) = (set.clips[0].mel.shape()[0], set.clips[0].mel.shape()[1]);
        let cg = ClassifierGraph::build(&model, f, t, &cfg).unwrap();
        let (_, grads) = batch_gradients(&model, &set, &tgram, &cg, &members, Some(&draw)).unwrap();
        for name in ["tgram.front.weight", "tgram.block2.bias", "backbone.conv0.weight", "backbone.proj.bias", HEAD_WEIGHT] {
            let base = model
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .clone();
            let f = |probe: &Tensor| {
                let mut m = model.clone();
                *m.named_tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1 = probe.clone();
                let (sum, _) = batch_gradients(&m, &set, &tgram, &cg, &members, Some(&draw))?;
                Ok(sum / members.len() as f64)
            };
            let fd = finite_difference_gradient(f, &base, 1e-5).unwrap();
            let err = relative_error(&grads[name], &fd);
            assert!(err < 1e-4, "{variant} {name}: {err:e}");
        }
    }
}

fn mean_train_loss(model: &Model, manifest: &Manifest, cfg: &LossConfig) -> f64 {
    let fx = FeatureExtractor::new(model.dims.mel.clone()).unwrap();
    let set = prepare(manifest, &fx).unwrap();
    let tgram = tgram_graph(&model.tgram, set.samples, true).unwrap();
    let (f, t) = (set.clips[0].mel.shape()[0], set.clips[0].mel.shape()[1]);
    let cg = ClassifierGraph::build(model, f, t, cfg).unwrap();
    let members: Vec<usize> = (0..set.clips.len()).collect();
    let (sum, _) = batch_gradients(model, &set, &tgram, &cg, &members, None).unwrap();
    sum / members.len() as f64
}

#[test]
fn one_epoch_of_cross_entropy_beats_chance() {
    let manifest = corpus(64, 0.25);
    let cfg = config(LossVariant::Ce, 1, 8, 1e-2);
    let (_, report) = train_with_dims(&manifest, &tiny_dims(4), &cfg).unwrap();
    let after = mean_train_loss(&report.model, &manifest, &cfg.loss);
    assert!(after < 4f64.ln(), "loss after one epoch {after}");
    assert!(report.lambdas.is_empty());
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let manifest = corpus(4, 0.1);
    let cfg = config(LossVariant::NoisyArcmix, 2, 4, 1e-3);
    let (a, _) = train_with_dims(&manifest, &tiny_dims(4), &cfg).unwrap();
    let (b, _) = train_with_dims(&manifest, &tiny_dims(4), &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let other = TrainConfig { seed: 6, ..cfg };
    let (c, _) = train_with_dims(&manifest, &tiny_dims(4), &other).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn mixup_coefficients_follow_the_golden_sequence() {
    let manifest = corpus(4, 0.1);
    let cfg = config(LossVariant::NoisyArcmix, 3, 4, 1e-3);
    let (_, report) = train_with_dims(&manifest, &tiny_dims(4), &cfg).unwrap();
    let golden: Vec<f64> = serde_json::from_str(include_str!("../../tests/data/lambda_golden.json")).unwrap();
    assert_eq!(report.lambdas.len(), 3 * 4);
    assert_eq!(report.lambdas, golden);
    // the first coefficient is the first Beta draw of the mixup stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MIXUP_STREAM);
    assert_eq!(crate::losses::sample_lambda(0.5, &mut rng).unwrap(), golden[0]);
}

#[test]
fn every_variant_lowers_its_loss() {
    let manifest = corpus(8, 0.25);
    for variant in LossVariant::ALL {
        let cfg = config(variant, 4, 8, 3e-3);
        let (_, report) = train_with_dims(&manifest, &tiny_dims(4), &cfg).unwrap();
        let l = &report.epoch_losses;
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(l[l.len() - 1] < l[0], "{variant}: {l:?}");
    }
}

#[test]
fn mixed_clip_lengths_are_rejected() {
    let mut records = synth_corpus(&CorpusSpec {
        machine_types: 1,
        ids_per_type: 2,
        train_per_machine: 1,
        test_normal_per_machine: 0,
        test_anomaly_per_machine: 0,
        duration_secs: 0.1,
        ..CorpusSpec::default()
    })
    .unwrap();
    if let ClipSource::Synth(s) = &mut records[1].source {
        s.duration_secs = 0.2;
    }
    let manifest = Manifest::from_records(records.clone()).unwrap();
    let cfg = config(LossVariant::Ce, 1, 2, 1e-3);
    let err = train_with_dims(&manifest, &tiny_dims(2), &cfg).unwrap_err();
    assert!(err.to_string().contains("share one length"), "{err}");
    let _: &ClipRecord = &records[0];
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.batch_size, d.learning_rate), (300, 64, 1e-4));
}

#[test]
fn loss_log_is_epoch_indexed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    write_loss_log(&p, &[1.5, 0.25]).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,mean_loss\n1,1.5\n2,0.25\n");
}
