//! (mu/mu_w, lambda)-CMA-ES over the unit box.
//!
//! Cumulative step-size adaptation plus rank-one and rank-mu covariance
//! updates, with the default strategy constants from Hansen's tutorial.
//! Samples are clipped to `[0, 1]^d`; fitness is taken on the clipped
//! point and the update uses the clipped point too. The strategy
//! maximizes fitness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAX_CONDITION: f64 = 1e14;

/// One sampled point of the search distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// The raw sample `m + sigma * N(0, C)`.
    pub genome: Vec<f64>,
    /// `genome` clamped to the unit box.
    pub clipped: Vec<f64>,
    pub fitness: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CmaesState {
    dimension: usize,
    mean: DVector<f64>,
    sigma: f64,
    covariance: DMatrix<f64>,
    // Eigenbasis of `covariance` and the square roots of its eigenvalues.
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    generation: usize,
    population_size: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    resets: usize,
    rng: ChaCha8Rng,
}

impl CmaesState {
    pub fn initialize(
        dimension: usize,
        initial_mean: &[f64],
        sigma: f64,
        population_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("CMA-ES dimension must be at least 1"));
        }
        if initial_mean.len() != dimension {
            return Err(Error::invalid(format!(
                "initial mean has {} components, dimension is {dimension}",
                initial_mean.len()
            )));
        }
        if initial_mean.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("initial mean must lie in [0, 1]"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if population_size < 2 {
            return Err(Error::invalid("population_size must be at least 2"));
        }

        let n = dimension as f64;
        let lambda = population_size as f64;
        let mu = population_size / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Ok(CmaesState {
            dimension,
            mean: DVector::from_column_slice(initial_mean),
            sigma,
            covariance: DMatrix::identity(dimension, dimension),
            basis: DMatrix::identity(dimension, dimension),
            scales: DVector::from_element(dimension, 1.0),
            path_sigma: DVector::zeros(dimension),
            path_c: DVector::zeros(dimension),
            generation: 0,
            population_size,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            resets: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn step_size(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    /// Positive recombination weights, best parent first.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mu_eff(&self) -> f64 {
        self.mu_eff
    }

    /// Number of times the covariance was reset for bad conditioning.
    pub fn covariance_resets(&self) -> usize {
        self.resets
    }

    /// Samples a full population from the current distribution.
    pub fn ask(&mut self) -> Vec<Candidate> {
        (0..self.population_size)
            .map(|_| {
                let z = DVector::from_fn(self.dimension, |_, _| self.rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.scales);
                let genome: Vec<f64> = (&self.mean + y * self.sigma).iter().copied().collect();
                let clipped = genome.iter().map(|x| x.clamp(0.0, 1.0)).collect();
                Candidate {
                    genome,
                    clipped,
                    fitness: None,
                }
            })
            .collect()
    }

    /// Updates the distribution from a fully evaluated population.
    pub fn tell(&mut self, evaluated: &[Candidate]) -> Result<()> {
        if evaluated.len() != self.population_size {
            return Err(Error::invalid(format!(
                "tell expects {} candidates, got {}",
                self.population_size,
                evaluated.len()
            )));
        }
        let mut ranked = Vec::with_capacity(evaluated.len());
        for (i, cand) in evaluated.iter().enumerate() {
            match cand.fitness {
                Some(f) if f.is_finite() => ranked.push((f, i)),
                other => {
                    return Err(Error::invalid(format!(
                        "candidate {i} has no finite fitness ({other:?})"
                    )))
                }
            }
            if cand.clipped.len() != self.dimension {
                return Err(Error::invalid(format!("candidate {i} has the wrong dimension")));
            }
        }
        // Best first; the stable sort keeps sampling order among ties.
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = ranked
            .iter()
            .take(self.weights.len())
            .map(|&(_, i)| (DVector::from_column_slice(&evaluated[i].clipped) - &old_mean) / self.sigma)
            .collect();
        let y_w = steps
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dimension), |acc, (y, &w)| acc + y * w);

        self.mean = &old_mean + &y_w * self.sigma;

        let inv_sqrt = &self.basis * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s)) * self.basis.transpose();
        self.path_sigma = &self.path_sigma * (1.0 - self.c_sigma)
            + inv_sqrt * &y_w * (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();

        let n = self.dimension as f64;
        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - self.c_sigma).powi(2 * (self.generation as i32 + 1));
        let h_sigma = if ps_norm / decay.sqrt() < (1.4 + 2.0 / (n + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };
        self.path_c =
            &self.path_c * (1.0 - self.c_c) + &y_w * (h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt());

        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        let rank_one = &self.path_c * self.path_c.transpose();
        let rank_mu = steps
            .iter()
            .zip(&self.weights)
            .fold(DMatrix::zeros(self.dimension, self.dimension), |acc, (y, &w)| {
                acc + y * y.transpose() * w
            });
        let covariance = &self.covariance * (1.0 - self.c_1 - self.c_mu + delta_h * self.c_1)
            + rank_one * self.c_1
            + rank_mu * self.c_mu;
        self.covariance = (&covariance + covariance.transpose()) * 0.5;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigensystem();
        Ok(())
    }

    fn refresh_eigensystem(&mut self) {
        let eig = SymmetricEigen::new(self.covariance.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0 && max.is_finite() && max / min <= MAX_CONDITION) {
            self.covariance = DMatrix::identity(self.dimension, self.dimension);
            self.basis = DMatrix::identity(self.dimension, self.dimension);
            self.scales = DVector::from_element(self.dimension, 1.0);
            self.path_c.fill(0.0);
            self.resets += 1;
            return;
        }
        self.basis = eig.eigenvectors;
        self.scales = eig.eigenvalues.map(f64::sqrt);
    }
}
