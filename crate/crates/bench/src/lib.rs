//! Fixed inputs shared by the benchmarks.

use damm_core::data::{make_dataset, DatasetSpec, SamplePair};
use damm_core::trainer::{batch_tensors, BatchTensors};
use damm_core::{NetConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// `batch` clean 32×32 pairs.
pub fn corpus(batch: usize) -> Vec<SamplePair> {
    let spec = DatasetSpec { count: batch, image_size: 32, ..Default::default() };
    make_dataset(&spec).expect("valid spec").samples
}

/// Model-space network inputs for the default configuration.
pub fn net_inputs(batch: usize) -> (NetConfig, BatchTensors, Vec<usize>) {
    let data = corpus(batch);
    let refs: Vec<&SamplePair> = data.iter().collect();
    let ts = (0..batch).map(|i| 1 + (i * 997) % 1000).collect();
    (NetConfig::default(), batch_tensors(&refs).expect("uniform batch"), ts)
}
