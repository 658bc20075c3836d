//! Seeded desk-scale instances shared by the integration tests.

#![allow(dead_code)]

use optinject::decorrelate::{decorrelate, DecorrelatedSystem};
use optinject::ensemble::SampleEnsemble;
use optinject::estimator::RankProfile;
use optinject::family::{InjectionFamily, InjectionKind};
use optinject::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub seed: u64,
    pub x: SampleEnsemble,
    pub y: SampleEnsemble,
    pub family: InjectionFamily,
    pub injections: Vec<SampleEnsemble>,
    pub sys: DecorrelatedSystem,
    pub ranks: RankProfile,
}

impl Instance {
    pub fn m(&self) -> usize {
        self.x.dim()
    }

    pub fn n(&self) -> usize {
        self.y.dim()
    }

    pub fn trace(&self) -> f64 {
        optinject::ensemble::omega_norm_sq(&self.x)
    }
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `x = tanh(W y) + 0.3 (V y)^2 + 0.05 noise`.
pub fn signal(y: &SampleEnsemble, m: usize, rng: &mut ChaCha8Rng) -> SampleEnsemble {
    let n = y.dim();
    let scale = 1.0 / (n as f64).sqrt();
    let w = gaussian(m, n, rng) * scale;
    let v = gaussian(m, n, rng) * scale;
    let a = &w * y.samples();
    let b = &v * y.samples();
    let noise = gaussian(m, y.n_samples(), rng);
    let x = Matrix::from_fn(m, y.n_samples(), |i, k| {
        a[(i, k)].tanh() + 0.3 * b[(i, k)] * b[(i, k)] + 0.05 * noise[(i, k)]
    });
    SampleEnsemble::new(x).unwrap()
}

fn random_kind(rng: &mut ChaCha8Rng) -> InjectionKind {
    match rng.random_range(0..3) {
        0 => InjectionKind::Power {
            degree: rng.random_range(2..=4),
        },
        1 => InjectionKind::Lift {
            q: rng.random_range(1..=8),
            seed: rng.random(),
        },
        _ => InjectionKind::Fourier {
            count: rng.random_range(1..=8),
            seed: rng.random(),
        },
    }
}

/// Random split of at most `budget` into `parts` positive integers.
pub fn random_ranks(parts: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = rng.random_range(parts..=budget);
    let mut ranks = vec![1; parts];
    for _ in parts..total {
        let j = rng.random_range(0..parts);
        ranks[j] += 1;
    }
    ranks
}

pub fn build(seed: u64, x: SampleEnsemble, y: SampleEnsemble, family: InjectionFamily, ranks: Vec<usize>) -> Instance {
    let injections = family.generate(&y).unwrap();
    let mut stack = vec![y.clone()];
    stack.extend(injections.iter().cloned());
    let sys = decorrelate(&stack).unwrap();
    let ranks = RankProfile::new(ranks, x.dim(), y.dim()).unwrap();
    Instance {
        seed,
        x,
        y,
        family,
        injections,
        sys,
        ranks,
    }
}

/// `m, n <= 8`, `p <= 3`, `N >= 4 (q_0 + .. + q_p)`.
pub fn battery_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
    let m = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let p = rng.random_range(0..=3).min(m.min(n) - 1);
    let kinds: Vec<InjectionKind> = (0..p).map(|_| random_kind(&mut rng)).collect();
    let family = InjectionFamily::new(kinds);
    let q_total: usize = n + family.dims(n).iter().sum::<usize>();
    let samples = 4 * q_total + rng.random_range(0..=40);
    let y = SampleEnsemble::new(gaussian(n, samples, &mut rng)).unwrap();
    let x = signal(&y, m, &mut rng);
    let ranks = random_ranks(p + 1, m.min(n), &mut rng);
    build(seed, x, y, family, ranks)
}

/// `m = n = 6`, `p = 2` instance for the iteration.
pub fn iteration_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(0x17e2_0000 + seed);
    let (m, n) = (6, 6);
    let samples = 120;
    let y = SampleEnsemble::new(gaussian(n, samples, &mut rng)).unwrap();
    let x = signal(&y, m, &mut rng);
    let family = InjectionFamily::new(vec![
        InjectionKind::Power { degree: 2 },
        InjectionKind::Lift {
            q: rng.random_range(2..=6),
            seed: rng.random(),
        },
    ]);
    let ranks = random_ranks(3, 5, &mut rng);
    build(seed, x, y, family, ranks)
}
