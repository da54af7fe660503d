//! Planar Gaussians and Gaussian-mixture scene predictions.
//!
//! A scene prediction is a small set of weighted joint futures: each scenario
//! carries one Gaussian trajectory per entity, and the scenario weights form
//! a probability distribution over futures.

use nalgebra::{Matrix2, Point2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::world::AgentId;

/// A 2-D Gaussian over position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    /// Row-major 2x2 covariance.
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Self {
        Gaussian2 {
            mean: [mean.x, mean.y],
            cov: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        }
    }

    pub fn point(p: Point2<f64>) -> Self {
        Self::new(p.coords, Matrix2::zeros())
    }

    pub fn isotropic(mean: Vector2<f64>, var: f64) -> Self {
        Self::new(mean, Matrix2::identity() * var)
    }

    pub fn mean_vec(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    pub fn mean_point(&self) -> Point2<f64> {
        Point2::new(self.mean[0], self.mean[1])
    }

    pub fn cov_mat(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    /// Covariance inflated by an isotropic term, e.g. a squared footprint
    /// radius.
    pub fn inflate(&self, var: f64) -> Self {
        Self::new(self.mean_vec(), self.cov_mat() + Matrix2::identity() * var)
    }

    /// Mahalanobis distance from the mean to `p` (the square root of the
    /// quadratic form). Degenerate covariances are regularized with a small
    /// isotropic floor so point predictions still yield a usable metric.
    pub fn mahalanobis(&self, p: Point2<f64>) -> f64 {
        let d = p.coords - self.mean_vec();
        let cov = regularize(self.cov_mat());
        let inv = cov.try_inverse().expect("regularized covariance is invertible");
        (d.transpose() * inv * d)[(0, 0)].max(0.0).sqrt()
    }

    /// Negative log density at `p`.
    pub fn nll(&self, p: Point2<f64>) -> f64 {
        let cov = regularize(self.cov_mat());
        let det = cov.determinant();
        let d2 = self.mahalanobis(p).powi(2);
        0.5 * d2 + 0.5 * det.ln() + std::f64::consts::LN_2 + std::f64::consts::PI.ln()
    }

    /// One-step linear-Gaussian propagation under an uncertain displacement
    /// rate: the mean advances by `dt * action.mean` and the covariance grows
    /// by `dt^2 * action.cov`.
    pub fn propagate(&self, action: &Gaussian2, dt: f64) -> Self {
        Self::new(
            self.mean_vec() + action.mean_vec() * dt,
            self.cov_mat() + action.cov_mat() * dt * dt,
        )
    }

    /// Draws a sample, using the Cholesky factor of the covariance. A zero
    /// covariance yields the mean exactly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2<f64> {
        let cov = self.cov_mat();
        if cov.trace() <= 1e-18 {
            return self.mean_point();
        }
        let chol = regularize(cov)
            .cholesky()
            .expect("regularized covariance is positive definite");
        let z = Vector2::new(
            rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
        );
        Point2::from(self.mean_vec() + chol.l() * z)
    }
}

const COV_FLOOR: f64 = 1e-9;

/// Adds a small isotropic floor when the matrix is near-singular, so
/// zero-noise point predictions never produce singular inversions.
fn regularize(cov: Matrix2<f64>) -> Matrix2<f64> {
    let tr = cov.trace();
    let det = cov.determinant();
    let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
    if min_eig < 1e-12 {
        cov + Matrix2::identity() * COV_FLOOR
    } else {
        cov
    }
}

/// Mahalanobis bound below which a position constraint with violation
/// probability `p` may be crossed: `sqrt(-2 ln p)`.
pub fn chance_bound(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "violation probability must be in (0, 1)");
    (-2.0 * p.ln()).sqrt()
}

/// A predicted Gaussian trajectory for one entity, one Gaussian per future
/// step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTrajectory {
    pub id: AgentId,
    pub steps: Vec<Gaussian2>,
}

impl EntityTrajectory {
    /// Mean positions per step.
    pub fn means(&self) -> Vec<Point2<f64>> {
        self.steps.iter().map(|g| g.mean_point()).collect()
    }
}

/// One weighted joint future over all entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Mixture weight, in [0, 1] after normalization.
    pub weight: f64,
    /// One trajectory per entity; the entity order is shared across all
    /// scenarios of a prediction (ego first, then agents by id).
    pub entities: Vec<EntityTrajectory>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.entities.first().map_or(0, |e| e.steps.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entity(&self, id: &AgentId) -> Option<&EntityTrajectory> {
        self.entities.iter().find(|e| &e.id == id)
    }
}

/// A Gaussian-mixture scene prediction: K weighted scenarios over a shared
/// step period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub dt: f64,
    pub scenarios: Vec<Scenario>,
}

impl ScenePrediction {
    /// Rescales weights to sum to one. A degenerate all-zero mixture becomes
    /// uniform.
    pub fn normalize(&mut self) {
        let total: f64 = self.scenarios.iter().map(|s| s.weight).sum();
        if total > 0.0 {
            for s in &mut self.scenarios {
                s.weight /= total;
            }
        } else if !self.scenarios.is_empty() {
            let w = 1.0 / self.scenarios.len() as f64;
            for s in &mut self.scenarios {
                s.weight = w;
            }
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.scenarios.iter().map(|s| s.weight).sum()
    }

    /// Negative log likelihood of an observed joint position under the
    /// mixture at one step, summing per-entity log densities within each
    /// scenario.
    pub fn nll_at(&self, step: usize, observed: &[(AgentId, Point2<f64>)]) -> f64 {
        let mut total = f64::NEG_INFINITY;
        for s in &self.scenarios {
            if s.weight <= 0.0 {
                continue;
            }
            let mut log_density = s.weight.ln();
            for (id, p) in observed {
                if let Some(e) = s.entity(id) {
                    if let Some(g) = e.steps.get(step) {
                        log_density -= g.nll(*p);
                    }
                }
            }
            total = log_sum_exp(total, log_density);
        }
        -total
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
