use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded random stream with hierarchical derivation.
///
/// A derived stream depends only on the root seed and the derivation path,
/// never on how many values have been drawn from the parent, so per-epoch
/// and per-batch streams are independent of iteration order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_for(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &tag in path {
        state ^= acc.rotate_left(17) ^ tag;
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<u64>) -> Self {
        let rng = ChaCha8Rng::from_seed(key_for(seed, &path));
        Self { seed, path, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream identified by `tags` below this stream's path.
    pub fn derive(&self, tags: &[u64]) -> RngStream {
        let mut path = self.path.clone();
        path.extend_from_slice(tags);
        Self::at(self.seed, path)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Matrix of i.i.d. standard normal draws, filled row-major.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.sample(StandardNormal))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
