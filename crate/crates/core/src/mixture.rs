//! Gaussian mixture proposals fitted to weighted particle clouds.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::weights::log_sum_exp;

/// A distribution that can be sampled and whose log-density is known.
pub trait Proposal: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn log_density(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Option<Self> {
        let d = mean.len();
        let chol = Cholesky::<f64, Dyn>::new(cov)?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Some(Self {
            log_weight: weight.ln(),
            mean,
            chol: l,
            log_norm,
        })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

/// Finite mixture of multivariate Normal distributions.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Single Normal component with the given mean and covariance (row-major).
    pub fn gaussian(mean: &[f64], cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(invalid("covariance must be dim × dim"));
        }
        let comp = Component::new(1.0, DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov))
            .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
        Ok(Self {
            dim: d,
            components: vec![comp],
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn component_means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.as_slice().to_vec()).collect()
    }

    pub fn component_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.log_weight.exp()).collect()
    }
}

impl Proposal for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let comp = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let w: Vec<f64> = self.components.iter().map(|c| c.log_weight.exp()).collect();
            let idx = WeightedIndex::new(&w).expect("mixture weights are positive");
            &self.components[idx.sample(rng)]
        };
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| StandardNormal.sample(rng)));
        let x = &comp.mean + &comp.chol * z;
        x.as_slice().to_vec()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }
}

const EM_ITERATIONS: usize = 20;
const RIDGE: f64 = 1e-6;
const MIN_COMPONENT_ESS_PER_DIM: usize = 10;

fn weighted_moments(x: &[DVector<f64>], w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (xi, &wi) in x.iter().zip(w) {
        mean += xi * (wi / total);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (xi, &wi) in x.iter().zip(w) {
        let c = xi - &mean;
        cov += (&c * c.transpose()) * (wi / total);
    }
    for i in 0..d {
        cov[(i, i)] += RIDGE;
    }
    (mean, cov)
}

/// Fits a `k`-component Gaussian mixture to weighted particles by weighted EM
/// (k-means++ start, fixed number of iterations, ridge `1e-6` on every
/// covariance). EM is degenerate when a component's weighted ESS drops below
/// `10 (dim + 1)`; the fit then retries with one component fewer, down to the
/// single moment-matched Normal.
///
/// `particles` is row-major `N × dim`; `weights` are normalized.
pub fn fit_mixture_proposal<R: Rng + ?Sized>(
    particles: &[f64],
    weights: &[f64],
    dim: usize,
    k: usize,
    rng: &mut R,
) -> Result<GaussianMixture> {
    let n = weights.len();
    if dim == 0 || particles.len() != n * dim || n == 0 {
        return Err(invalid("particle matrix does not match weights × dim"));
    }
    if k == 0 {
        return Err(invalid("at least one mixture component required"));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        if weights[i] > 0.0 {
            xs.push(DVector::from_column_slice(&particles[i * dim..(i + 1) * dim]));
            ws.push(weights[i]);
        }
    }
    if xs.is_empty() {
        return Err(Error::Degenerate("no particle carries positive weight".into()));
    }
    let (mean, cov) = weighted_moments(&xs, &ws);
    let single = || {
        Component::new(1.0, mean.clone(), cov.clone())
            .map(|c| GaussianMixture {
                dim,
                components: vec![c],
            })
            .ok_or_else(|| Error::Degenerate("weighted covariance is singular".into()))
    };
    if k == 1 || xs.len() <= k * (dim + 1) {
        return single();
    }
    // fewer components when EM collapses a component onto a handful of particles
    for kk in (2..=k).rev() {
        if xs.len() <= kk * (dim + 1) {
            continue;
        }
        if let Some(comps) = weighted_em(&xs, &ws, kk, rng) {
            return Ok(GaussianMixture { dim, components: comps });
        }
    }
    single()
}

fn kmeans_pp<R: Rng + ?Sized>(xs: &[DVector<f64>], ws: &[f64], k: usize, rng: &mut R) -> Option<Vec<DVector<f64>>> {
    let first = WeightedIndex::new(ws).ok()?.sample(rng);
    let mut centers = vec![xs[first].clone()];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let score: Vec<f64> = d2.iter().zip(ws).map(|(d, w)| d * w).collect();
        let idx = WeightedIndex::new(&score).ok()?.sample(rng);
        let c = xs[idx].clone();
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - &c).norm_squared());
        }
        centers.push(c);
    }
    Some(centers)
}

fn weighted_em<R: Rng + ?Sized>(xs: &[DVector<f64>], ws: &[f64], k: usize, rng: &mut R) -> Option<Vec<Component>> {
    let n = xs.len();
    let min_ess = (MIN_COMPONENT_ESS_PER_DIM * (xs[0].len() + 1)) as f64;
    let centers = kmeans_pp(xs, ws, k, rng)?;
    // hard assignment to the nearest centre as the initial responsibilities
    let mut resp = vec![0.0; n * k];
    for (i, x) in xs.iter().enumerate() {
        let j = (0..k)
            .min_by(|&a, &b| (x - &centers[a]).norm_squared().total_cmp(&(x - &centers[b]).norm_squared()))?;
        resp[i * k + j] = 1.0;
    }
    let mut comps = Vec::new();
    for _ in 0..EM_ITERATIONS {
        comps.clear();
        for j in 0..k {
            let rw: Vec<f64> = (0..n).map(|i| ws[i] * resp[i * k + j]).collect();
            let mass: f64 = rw.iter().sum();
            let sq: f64 = rw.iter().map(|v| v * v).sum();
            if !(mass > 1e-10) || mass * mass < min_ess * sq {
                return None;
            }
            let (m, c) = weighted_moments(xs, &rw);
            comps.push(Component::new(mass, m, c)?);
        }
        let mut terms = vec![0.0; k];
        for (i, x) in xs.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                terms[j] = c.log_weight + c.log_density(x.as_slice());
            }
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return None;
            }
            for j in 0..k {
                resp[i * k + j] = (terms[j] - lse).exp();
            }
        }
    }
    Some(comps)
}
