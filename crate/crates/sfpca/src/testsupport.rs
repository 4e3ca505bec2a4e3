//! Seeded random problem instances for tests and the acceptance suite.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::likelihood::{prepare, Dataset};
use crate::model::{FunctionalSample, ModelBases, ModelParams};

/// Shape of a random likelihood test instance.
pub struct InstanceSpec {
    pub seed: u64,
    pub n_samples: usize,
    /// Inclusive range of observations per curve.
    pub obs_range: (usize, usize),
    /// Size of the covariance-time basis (m).
    pub cov_t_size: usize,
    pub rank: usize,
    pub noise_var: f64,
    /// Attach per-observation measurement errors to every sample.
    pub weighted: bool,
}

pub struct Instance {
    pub bases: ModelBases,
    pub params: ModelParams,
    pub samples: Vec<FunctionalSample>,
    pub data: Dataset,
}

/// Random bases, parameters, and data. The observed values are arbitrary
/// Gaussians rather than model draws: the fast/dense identities hold for
/// any data, and arbitrary values exercise them away from optima.
pub fn random_instance(spec: &InstanceSpec) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bases = ModelBases::build(5, 4, spec.cov_t_size.max(4), 5, 3, (0.0, 1.0), (0.0, 1.0))
        .expect("test bases");
    let mut params = ModelParams::zeros(&bases, spec.rank, spec.noise_var).expect("params");
    params.mean_coefs = DVector::from_fn(bases.mean_dim(), |_, _| rng.sample(StandardNormal));
    params.factor_coefs = DMatrix::from_fn(bases.factor_rows(), spec.rank, |_, _| {
        let v: f64 = rng.sample(StandardNormal);
        0.6 * v
    });
    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let m_n = rng.gen_range(spec.obs_range.0..=spec.obs_range.1);
        let mut times: Vec<f64> = (0..m_n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let values: Vec<f64> = (0..m_n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                2.0 * v
            })
            .collect();
        let noise_sd = if spec.weighted {
            Some(
                (0..m_n)
                    .map(|_| rng.gen_range(0.1..0.8))
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        samples.push(FunctionalSample {
            id: format!("s{idx}"),
            times,
            values,
            covariate: rng.gen_range(0.0..=1.0),
            noise_sd,
        });
    }
    let data = prepare(&samples, &bases).expect("prepare");
    Instance {
        bases,
        params,
        samples,
        data,
    }
}
