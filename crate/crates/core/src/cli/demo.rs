//! Synthetic data for trying the tool out. This generator is not taken from
//! any reference experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::config::DemoSpec;
use crate::ensemble::SampleEnsemble;
use crate::error::Result;
use crate::estimator::matrix_serde;
use crate::linalg::Matrix;

pub const DEMO_LABEL: &str = "synthetic demo data: x = f(W y) + noise, generated by optinject";

#[derive(Debug, Clone, Serialize)]
pub struct DemoManifest {
    pub label: &'static str,
    pub spec: DemoSpec,
    /// `m x n` mixing matrix.
    #[serde(with = "matrix_serde")]
    pub w: Matrix,
}

pub struct DemoData {
    pub x: SampleEnsemble,
    pub y: SampleEnsemble,
    pub manifest: DemoManifest,
}

/// `y ~ N(0, I)`, `W ~ N(0, 1.5^2 / n)`, `x = f(W y) + noise * N(0, I)`.
pub fn generate(spec: &DemoSpec) -> Result<DemoData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let scale = 1.5 / (spec.n as f64).sqrt();
    let w = Matrix::from_fn(spec.m, spec.n, |_, _| normal() * scale);
    let y = Matrix::from_fn(spec.n, spec.samples, |_, _| normal());
    let mixed = &w * &y;
    let x = Matrix::from_fn(spec.m, spec.samples, |i, k| {
        spec.nonlinearity.apply(mixed[(i, k)]) + spec.noise * normal()
    });
    Ok(DemoData {
        x: SampleEnsemble::new(x)?,
        y: SampleEnsemble::new(y)?,
        manifest: DemoManifest {
            label: DEMO_LABEL,
            spec: *spec,
            w,
        },
    })
}
