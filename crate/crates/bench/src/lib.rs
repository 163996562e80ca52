//! Fixtures shared by the benchmarks in `benches/`.

use binet_core::data::{generate_example, AvsExample, CorpusSpec, Split};
use binet_core::tensor::Tensor;
use binet_core::{BinModel, ModelConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// A freshly initialised model and one synthetic example sized for it.
pub fn model_and_example(cfg: ModelConfig, seed: u64) -> Result<(BinModel, AvsExample)> {
    let spec = CorpusSpec {
        n_train: 1,
        n_val: 0,
        n_test: 0,
        samples: cfg.samples,
        speakers: cfg.speakers,
        cue_dims: cfg.cue_dims,
        video_frames: cfg.video_frames,
        seed,
        ..CorpusSpec::default()
    };
    let ex = generate_example(&spec, Split::Train, 0)?;
    Ok((BinModel::build(cfg, seed)?, ex))
}
