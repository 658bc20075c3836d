//! Seeded nonlinear generators `v_j = phi_j(y)` used to build the initial
//! injections.
//!
//! Grammar, comma separated, one entry per injection:
//! `poly:<degree>`, `fourier:<count>:<seed>`, `lift:<q>:<seed>`.
//! Fourier and lift generators draw their parameters row by row from one
//! seeded stream, so the first `q` rows of a `q' > q` generator coincide with
//! the `q`-row generator (nested families).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ensemble::SampleEnsemble;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionKind {
    /// Componentwise power `y_i^degree`; `q = n`.
    Power { degree: u32 },
    /// `sqrt(2) cos(w_k . y + b_k)`, `w_k ~ N(0, I)`, `b_k ~ U[0, 2pi)`.
    Fourier { count: usize, seed: u64 },
    /// `tanh(w_k . y + b_k)`, `w_k ~ N(0, I/n)`, `b_k ~ N(0, 1/4)`.
    Lift { q: usize, seed: u64 },
}

impl InjectionKind {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match *self {
            InjectionKind::Power { .. } => input_dim,
            InjectionKind::Fourier { count, .. } => count,
            InjectionKind::Lift { q, .. } => q,
        }
    }

    /// Same generator with a different output dimension. `None` for powers,
    /// whose dimension is fixed by the input.
    pub fn with_dim(&self, q: usize) -> Option<InjectionKind> {
        match *self {
            InjectionKind::Power { .. } => None,
            InjectionKind::Fourier { seed, .. } => Some(InjectionKind::Fourier { count: q, seed }),
            InjectionKind::Lift { seed, .. } => Some(InjectionKind::Lift { q, seed }),
        }
    }

    pub fn apply(&self, y: &SampleEnsemble) -> Result<SampleEnsemble> {
        let n = y.dim();
        let ys = y.samples();
        let samples = match *self {
            InjectionKind::Power { degree } => ys.map(|v| v.powi(degree as i32)),
            InjectionKind::Fourier { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut w = Matrix::zeros(count, n);
                let mut b = vec![0.0; count];
                for k in 0..count {
                    for i in 0..n {
                        w[(k, i)] = rng.sample(StandardNormal);
                    }
                    b[k] = rng.random_range(0.0..std::f64::consts::TAU);
                }
                let proj = &w * ys;
                Matrix::from_fn(count, y.n_samples(), |k, s| {
                    std::f64::consts::SQRT_2 * (proj[(k, s)] + b[k]).cos()
                })
            }
            InjectionKind::Lift { q, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scale = 1.0 / (n.max(1) as f64).sqrt();
                let mut w = Matrix::zeros(q, n);
                let mut b = vec![0.0; q];
                for k in 0..q {
                    for i in 0..n {
                        let g: f64 = rng.sample(StandardNormal);
                        w[(k, i)] = g * scale;
                    }
                    let g: f64 = rng.sample(StandardNormal);
                    b[k] = 0.5 * g;
                }
                let proj = &w * ys;
                Matrix::from_fn(q, y.n_samples(), |k, s| (proj[(k, s)] + b[k]).tanh())
            }
        };
        SampleEnsemble::new(samples)
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectionKind::Power { degree } => write!(f, "poly:{degree}"),
            InjectionKind::Fourier { count, seed } => write!(f, "fourier:{count}:{seed}"),
            InjectionKind::Lift { q, seed } => write!(f, "lift:{q}:{seed}"),
        }
    }
}

impl FromStr for InjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("injection {s:?}: {why}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let int = |idx: usize, what: &str| -> Result<u64> {
            parts
                .get(idx)
                .ok_or_else(|| bad(&format!("missing {what}")))?
                .trim()
                .parse::<u64>()
                .map_err(|_| bad(&format!("{what} must be a non-negative integer")))
        };
        let kind = match parts[0].trim() {
            "poly" => {
                if parts.len() != 2 {
                    return Err(bad("expected poly:<degree>"));
                }
                let degree = int(1, "degree")?;
                if degree == 0 || degree > i32::MAX as u64 {
                    return Err(bad("degree must be at least 1"));
                }
                InjectionKind::Power {
                    degree: degree as u32,
                }
            }
            "fourier" | "lift" => {
                if parts.len() != 3 {
                    return Err(bad("expected <kind>:<q>:<seed>"));
                }
                let q = int(1, "dimension")? as usize;
                if q == 0 {
                    return Err(bad("dimension must be at least 1"));
                }
                let seed = int(2, "seed")?;
                if parts[0].trim() == "fourier" {
                    InjectionKind::Fourier { count: q, seed }
                } else {
                    InjectionKind::Lift { q, seed }
                }
            }
            other => return Err(bad(&format!("unknown generator {other:?}"))),
        };
        Ok(kind)
    }
}

/// Ordered generators `phi_1 .. phi_p`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InjectionFamily {
    pub kinds: Vec<InjectionKind>,
}

impl InjectionFamily {
    pub fn new(kinds: Vec<InjectionKind>) -> Self {
        Self { kinds }
    }

    pub fn degree(&self) -> usize {
        self.kinds.len()
    }

    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        self.kinds.iter().map(|k| k.output_dim(input_dim)).collect()
    }

    /// The first `p` generators.
    pub fn truncated(&self, p: usize) -> InjectionFamily {
        Self::new(self.kinds.iter().take(p).copied().collect())
    }

    /// `v_1 .. v_p` for the given observations.
    pub fn generate(&self, y: &SampleEnsemble) -> Result<Vec<SampleEnsemble>> {
        self.kinds.iter().map(|k| k.apply(y)).collect()
    }
}

impl fmt::Display for InjectionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.kinds.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for InjectionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() || s.trim() == "none" {
            return Ok(Self::default());
        }
        s.split(',').map(str::parse).collect::<Result<Vec<_>>>().map(Self::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs() -> SampleEnsemble {
        SampleEnsemble::from_rows(&[vec![0.5, -1.0, 2.0, 0.0], vec![1.5, 0.25, -0.5, 1.0]]).unwrap()
    }

    #[test]
    fn grammar_round_trip() {
        let f: InjectionFamily = "poly:2,fourier:8:3,lift:4:7".parse().unwrap();
        assert_eq!(f.degree(), 3);
        assert_eq!(f.to_string(), "poly:2,fourier:8:3,lift:4:7");
        assert_eq!(f.dims(5), vec![5, 8, 4]);
        assert_eq!("".parse::<InjectionFamily>().unwrap().degree(), 0);
    }

    #[test]
    fn grammar_rejects_garbage() {
        for bad in ["poly", "poly:0", "lift:0:1", "lift:3", "fourier:a:1", "spline:3", "poly:2,"] {
            assert!(bad.parse::<InjectionFamily>().is_err(), "{bad}");
        }
    }

    #[test]
    fn power_is_componentwise() {
        let v = InjectionKind::Power { degree: 2 }.apply(&obs()).unwrap();
        assert_eq!(v.samples()[(0, 1)], 1.0);
        assert_eq!(v.samples()[(1, 2)], 0.25);
    }

    #[test]
    fn seeded_generators_are_deterministic_and_nested() {
        for small in [InjectionKind::Lift { q: 3, seed: 9 }, InjectionKind::Fourier { count: 3, seed: 9 }] {
            let a = small.apply(&obs()).unwrap();
            let b = small.apply(&obs()).unwrap();
            assert_eq!(a, b);
            let big = small.with_dim(6).unwrap().apply(&obs()).unwrap();
            assert_eq!(big.leading_rows(3), a);
        }
    }
}
