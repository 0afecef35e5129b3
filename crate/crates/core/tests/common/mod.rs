#![allow(dead_code)]

use m2a::data::{CorruptionKind, DatasetSpec, StreamSpec};
use m2a::harness::{ExperimentConfig, SourceConfig};
use m2a::model::ClassifierConfig;
use m2a::train::PretrainConfig;

/// An 8x8, two-block setup that trains in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        batch: 10,
        stream: StreamSpec {
            order: vec![
                CorruptionKind::GaussianNoise,
                CorruptionKind::Contrast,
                CorruptionKind::Pixelate,
            ],
            severity: 4,
            samples_per_domain: 40,
        },
        source: SourceConfig {
            seed: 11,
            dataset: DatasetSpec {
                height: 8,
                width: 8,
                train_size: 300,
                stream_size: 60,
                ..DatasetSpec::default()
            },
            model: ClassifierConfig {
                height: 8,
                width: 8,
                hidden: 16,
                blocks: 2,
                ..ClassifierConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 3,
                threshold: 0.0,
                ..PretrainConfig::default()
            },
        },
        ..ExperimentConfig::default()
    }
}

/// The tiny config as TOML, for the command-line tests.
pub fn tiny_toml() -> String {
    tiny_config().to_toml()
}
