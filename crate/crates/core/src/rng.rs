//! Gaussian draws with a fixed number of uniforms per normal, so every
//! `(path, step)` block of a simulation can be addressed directly in the
//! ChaCha keystream.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

fn uniform(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Box-Muller normals from any generator, two uniforms per pair.
pub struct NormalStream<'a, R: RngCore> {
    rng: &'a mut R,
    spare: Option<f64>,
}

impl<'a, R: RngCore> NormalStream<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        NormalStream { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (a, b) = box_muller(self.rng.next_u64(), self.rng.next_u64());
        self.spare = Some(b);
        a
    }
}

fn box_muller(x: u64, y: u64) -> (f64, f64) {
    let r = (-2.0 * uniform(x).ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * uniform(y);
    (r * th.cos(), r * th.sin())
}

/// Counter-addressed standard normals: stream `stream` of generator `seed`,
/// block `block` of width `width`.
pub fn normal_block(seed: u64, stream: u64, block: u64, out: &mut [f64]) {
    let pairs = out.len().div_ceil(2) as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // Each pair consumes two u64, i.e. four 32-bit words.
    rng.set_word_pos(block as u128 * pairs * 4);
    let mut k = 0;
    while k < out.len() {
        let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
        out[k] = a;
        if k + 1 < out.len() {
            out[k + 1] = b;
        }
        k += 2;
    }
}
