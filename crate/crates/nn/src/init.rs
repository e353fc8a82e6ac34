use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Fan-in and fan-out of a weight shape `[out, in, k...]`; a 1-D shape uses its length for both.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let rf: usize = rest.iter().product();
            (inp * rf, out * rf)
        }
    }
}

/// Xavier/Glorot uniform initialization: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`,
/// i.e. variance `2 / (fan_in + fan_out)`.
pub fn xavier_init(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_init_with(shape, &mut rng)
}

pub fn xavier_init_with<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fi, fo) = fans(shape);
    let bound = (6.0 / (fi + fo) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
