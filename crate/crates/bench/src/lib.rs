//! Fixtures shared by the criterion benches.

use hrseg::autograd::uniform;
use hrseg::train::{Model, ModelKind, ModelSpec};
use hrseg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1]`, fixed by `seed`.
pub fn tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Toy model of `kind` for the eight component classes.
pub fn toy_model(kind: ModelKind) -> Model {
    Model::new(&ModelSpec::toy(kind, 8), 0).expect("toy spec is valid")
}

/// An RGB image in `[0, 1]`.
pub fn image(width: usize, height: usize) -> Tensor<f32> {
    let t = tensor([1, 3, height, width], 7);
    Tensor::from_fn([1, 3, height, width], |[n, c, y, x]| (t.at(n, c, y, x) + 1.0) / 2.0)
}
