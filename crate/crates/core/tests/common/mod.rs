#![allow(dead_code)]

use tavat::data::{DataSource, DatasetSpec, TaggingTask};
use tavat::model::ModelConfig;
use tavat::train::TrainConfig;
use tavat::vat::AdvConfig;

/// A run small enough for unit-speed tests.
pub fn tiny_config() -> TrainConfig {
    let model = ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        max_len: 16,
        ..Default::default()
    };
    TrainConfig {
        adv: AdvConfig::for_dim(model.dim),
        model,
        epochs: 1,
        batch_size: 16,
        data: DatasetSpec {
            train_size: 64,
            dev_size: 32,
            max_len: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn tiny_tagging_config() -> TrainConfig {
    let mut c = tiny_config();
    c.data.source = DataSource::SyntheticTagging {
        task: TaggingTask::default(),
    };
    c
}
