use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream identifiers so that, for one run seed, parameter
/// initialization, data noise, batch order and mask draws never share state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    Noise,
    Shuffle,
    Masks,
    Eval,
    Synthetic,
    Custom(u64),
}

impl StreamId {
    fn id(self) -> u64 {
        match self {
            StreamId::Init => 1,
            StreamId::Noise => 2,
            StreamId::Shuffle => 3,
            StreamId::Masks => 4,
            StreamId::Eval => 5,
            StreamId::Synthetic => 6,
            StreamId::Custom(n) => 1 << 32 | n,
        }
    }
}

/// Deterministic random source keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, whose output is fully specified and platform
/// independent. Gaussian draws use Box-Muller on this stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    draws: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        Self::from_raw(seed, stream.id())
    }

    fn from_raw(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream {
            seed,
            stream,
            rng,
            draws: 0,
            spare_normal: None,
        }
    }

    /// Child stream for a sub-task (an ensemble member, a datum, an epoch).
    pub fn derive(&self, sub: u64) -> RngStream {
        let mixed = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ sub.wrapping_add(0xD1B5_4A32_D192_ED03);
        Self::from_raw(self.seed, mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken so far.
    pub fn position(&self) -> u64 {
        self.draws
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.rng.gen::<f64>()
    }

    /// Uniform on `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Integer uniform on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.rng.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        self.draws += items.len() as u64;
        items.shuffle(&mut self.rng);
    }
}
