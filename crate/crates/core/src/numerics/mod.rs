//! Dense tensor arithmetic with hand-derived gradients, Adam, and a small
//! symmetric eigensolver.

mod adam;
pub mod gradcheck;
pub mod linalg;
pub mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::GradRecord;
pub use ops::softmax_rows;
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic random stream for a 64-bit seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tensor of i.i.d. standard normal draws times `scale`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> crate::Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| { let v: f64 = StandardNormal.sample(rng); scale * v })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data)
}
