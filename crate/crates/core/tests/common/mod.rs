#![allow(dead_code)]

use countgd::data::{CountingSample, DatasetSpec, Shape};
use countgd::decoder::DecoderConfig;
use countgd::encoders::{EncoderConfig, Vocabulary};
use countgd::fusion::EnhancerConfig;
use countgd::model::{CountingModel, ModelConfig};

/// A few thousand parameters: fast enough for many forward passes per test.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stride: 4,
            channels: [8, 8, 8],
            d_model: 8,
        },
        text_layers: 1,
        enhancer: EnhancerConfig { blocks: 1, heads: 2 },
        decoder: DecoderConfig { layers: 2, heads: 2 },
        heads: 2,
        k: 8,
        image_side: 32,
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn shape_vocab() -> Vocabulary {
    Vocabulary::new(Shape::ALL.iter().map(|s| s.name()))
}

pub fn tiny_model() -> CountingModel {
    CountingModel::new(tiny_config(), shape_vocab()).unwrap()
}

/// A 32x32 two-class scene with two exemplars of the primary class.
pub fn tiny_sample(seed: u64) -> CountingSample {
    let spec = DatasetSpec {
        width: 32,
        height: 32,
        count_range: (3, 4),
        size_range: (3.0, 4.0),
        classes_per_scene: 2,
        distractor_count_range: (1, 2),
        exemplars: 2,
        ..DatasetSpec::default()
    };
    spec.generate(seed, 1).unwrap().remove(0)
}
