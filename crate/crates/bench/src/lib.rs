//! Fixtures shared by the benchmarks.

use asd_core::data::{synth_corpus, CorpusSpec, Manifest};
use asd_core::dsp::{MelConfig, Waveform};
use asd_core::model::{BackboneConfig, ModelDims};

/// A 2-s clip from the default synthetic corpus.
pub fn clip() -> Waveform {
    let spec = CorpusSpec {
        machine_types: 1,
        ids_per_type: 1,
        train_per_machine: 1,
        test_normal_per_machine: 0,
        test_anomaly_per_machine: 0,
        ..CorpusSpec::default()
    };
    let records = synth_corpus(&spec).expect("valid spec");
    records[0].load(std::path::Path::new(".")).expect("synth clip")
}

pub fn small_corpus() -> Manifest {
    let spec = CorpusSpec {
        machine_types: 2,
        ids_per_type: 2,
        train_per_machine: 8,
        test_normal_per_machine: 2,
        test_anomaly_per_machine: 2,
        duration_secs: 0.5,
        ..CorpusSpec::default()
    };
    Manifest::from_records(synth_corpus(&spec).expect("valid spec")).expect("valid manifest")
}

pub fn small_dims(n_classes: usize) -> ModelDims {
    let mut dims = ModelDims::new(
        MelConfig {
            n_fft: 256,
            hop: 128,
            n_mels: 32,
            ..MelConfig::default()
        },
        n_classes,
    );
    dims.backbone = BackboneConfig {
        channels: vec![8, 16, 16],
        embedding_dim: 16,
        ..BackboneConfig::default()
    };
    dims
}
