//! Probability measures on R^d: Gaussians with full SPD (or diagonal)
//! covariance, Gaussian mixtures, weighted discrete measures, and discrete
//! plans (couplings) on product spaces.
//!
//! Conventions used throughout:
//! - covariances are validated by Cholesky at construction; failure is a
//!   construction error, so downstream code never sees a non-SPD matrix;
//! - mixture densities and scores are evaluated in log space with
//!   log-sum-exp; responsibilities below the `exp(-745)` underflow boundary
//!   are dropped;
//! - discrete atom identity is exact floating-point equality. Callers that
//!   need tolerant matching must quantize first; plans here are constructed,
//!   not measured.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, logsumexp, softmax_from_log};
use crate::rng::Stream;
use crate::{Error, Result};

/// Tolerance for "weights sum to one" checks.
pub const WEIGHT_TOL: f64 = 1e-12;

const LOG_2PI: f64 = 1.8378770664093453;

/// Covariance storage with a diagonal fast path.
#[derive(Debug, Clone)]
enum Cov {
    Diagonal(Vec<f64>),
    /// Dense SPD matrix together with its lower Cholesky factor.
    Full {
        mat: DMatrix<f64>,
        chol_l: DMatrix<f64>,
    },
}

/// Gaussian measure `N(mean, cov)` on R^d.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: Vec<f64>,
    cov: Cov,
}

impl GaussianMeasure {
    /// Standard normal on R^d.
    pub fn standard(d: usize) -> Self {
        GaussianMeasure {
            mean: vec![0.0; d],
            cov: Cov::Diagonal(vec![1.0; d]),
        }
    }

    /// Isotropic Gaussian `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, vec![var; d])
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if variances.len() != mean.len() {
            return Err(Error::InvalidMeasure("mean/variance length mismatch".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NotSpd("nonpositive diagonal variance".into()));
        }
        Ok(GaussianMeasure {
            mean,
            cov: Cov::Diagonal(variances),
        })
    }

    /// Full-covariance Gaussian; `cov` must be symmetric positive definite,
    /// which is checked by attempting a Cholesky factorization.
    pub fn full(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidMeasure("covariance shape mismatch".into()));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + cov.abs().max()) {
            return Err(Error::NotSpd(format!("asymmetry {asym:.3e}")));
        }
        // symmetrize exactly before factoring
        let sym = (&cov + cov.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Cholesky failed".into()))?;
        Ok(GaussianMeasure {
            mean,
            cov: Cov::Full {
                mat: sym,
                chol_l: chol.l(),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Dense covariance matrix (materializes the diagonal fast path).
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match &self.cov {
            Cov::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Cov::Full { mat, .. } => mat.clone(),
        }
    }

    fn log_det_cov(&self) -> f64 {
        match &self.cov {
            Cov::Diagonal(v) => v.iter().map(|x| x.ln()).sum(),
            Cov::Full { chol_l, .. } => 2.0 * (0..chol_l.nrows()).map(|i| chol_l[(i, i)].ln()).sum::<f64>(),
        }
    }

    /// Solves `cov * z = r`.
    fn cov_solve(&self, r: &[f64]) -> Vec<f64> {
        match &self.cov {
            Cov::Diagonal(v) => r.iter().zip(v).map(|(x, s)| x / s).collect(),
            Cov::Full { chol_l, .. } => {
                // forward/backward substitution with the stored factor
                let mut y = DVector::from_column_slice(r);
                chol_l.solve_lower_triangular_mut(&mut y);
                chol_l.transpose().solve_upper_triangular_mut(&mut y);
                y.as_slice().to_vec()
            }
        }
    }

    /// Trace of the precision matrix (used by mixture Laplacians).
    fn precision_trace(&self) -> f64 {
        match &self.cov {
            Cov::Diagonal(v) => v.iter().map(|s| 1.0 / s).sum(),
            Cov::Full { chol_l, .. } => {
                let inv_l = chol_l
                    .clone()
                    .try_inverse()
                    .expect("Cholesky factor is invertible");
                inv_l.iter().map(|x| x * x).sum()
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let r = linalg::sub(x, &self.mean);
        let z = self.cov_solve(&r);
        -0.5 * (self.dim() as f64 * LOG_2PI + self.log_det_cov() + linalg::dot(&r, &z))
    }

    /// Score `grad_x log p(x) = -cov^{-1} (x - mean)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = linalg::sub(x, &self.mean);
        linalg::scale(&self.cov_solve(&r), -1.0)
    }

    /// One sample: `mean + L z` with `z ~ N(0, I)`.
    pub fn sample_one(&self, stream: &mut Stream) -> Vec<f64> {
        let z = stream.standard_normal_vec(self.dim());
        match &self.cov {
            Cov::Diagonal(v) => self
                .mean
                .iter()
                .zip(v)
                .zip(&z)
                .map(|((m, s), zi)| m + s.sqrt() * zi)
                .collect(),
            Cov::Full { chol_l, .. } => {
                let lz = chol_l * DVector::from_column_slice(&z);
                self.mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect()
            }
        }
    }

    /// Push-forward by `x -> A x + b`; `A` must be invertible.
    pub fn pushforward(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<GaussianMeasure> {
        if a.nrows() != self.dim() || a.ncols() != self.dim() {
            return Err(Error::InvalidArgument("affine map shape mismatch".into()));
        }
        if a.clone().lu().determinant().abs() < 1e-300 {
            return Err(Error::SingularPushforward);
        }
        let m = a * DVector::from_column_slice(&self.mean) + DVector::from_column_slice(b);
        let cov = a * self.cov_matrix() * a.transpose();
        GaussianMeasure::full(m.as_slice().to_vec(), cov)
    }
}

/// Gaussian mixture measure.
#[derive(Debug, Clone)]
pub struct GmmMeasure {
    weights: Vec<f64>,
    components: Vec<GaussianMeasure>,
}

impl GmmMeasure {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianMeasure>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidMeasure("mixture needs K >= 1 matching weights".into()));
        }
        check_simplex(&weights)?;
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidMeasure("mixture components of mixed dimension".into()));
        }
        Ok(GmmMeasure { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianMeasure] {
        &self.components
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        logsumexp(&self.component_log_densities(x))
    }

    /// Responsibility-weighted component scores.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let resp = softmax_from_log(&self.component_log_densities(x));
        let mut s = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(&self.components) {
            if *r > 0.0 {
                linalg::axpy(&mut s, *r, &c.score(x));
            }
        }
        s
    }

    /// `(log p, score, Laplacian of log p)` in one pass.
    ///
    /// With responsibilities `r_k`, component scores `s_k = -C_k^{-1}(x-m_k)`:
    /// `lap log p = sum_k r_k (||s_k||^2 - tr C_k^{-1}) - ||score||^2`.
    pub fn log_density_score_laplacian(&self, x: &[f64]) -> (f64, Vec<f64>, f64) {
        let lds = self.component_log_densities(x);
        let logp = logsumexp(&lds);
        let resp = softmax_from_log(&lds);
        let mut score = vec![0.0; self.dim()];
        let mut quad = 0.0;
        for (r, c) in resp.iter().zip(&self.components) {
            if *r > 0.0 {
                let sk = c.score(x);
                quad += r * (linalg::dot(&sk, &sk) - c.precision_trace());
                linalg::axpy(&mut score, *r, &sk);
            }
        }
        let lap = quad - linalg::dot(&score, &score);
        (logp, score, lap)
    }

    pub fn sample_one(&self, stream: &mut Stream) -> Vec<f64> {
        let k = stream.categorical(&self.weights);
        self.components[k].sample_one(stream)
    }

    pub fn pushforward(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<GmmMeasure> {
        let comps = self
            .components
            .iter()
            .map(|c| c.pushforward(a, b))
            .collect::<Result<Vec<_>>>()?;
        GmmMeasure::new(self.weights.clone(), comps)
    }
}

/// Weighted discrete measure `sum_i w_i delta_{x_i}`.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidMeasure("empty support or weight length mismatch".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::InvalidMeasure("points of mixed dimension".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite point coordinate".into()));
        }
        check_simplex(&weights)?;
        Ok(DiscreteMeasure { points, weights })
    }

    /// Uniform empirical measure on the given points.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    /// Dirac measure at `x`.
    pub fn dirac(x: Vec<f64>) -> Self {
        DiscreteMeasure {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_one(&self, stream: &mut Stream) -> Vec<f64> {
        self.points[stream.categorical(&self.weights)].clone()
    }

    /// Merges atoms with exactly equal coordinates, keeping first-occurrence
    /// order.
    pub fn merged(&self) -> DiscreteMeasure {
        let (points, weights) = merge_weighted(&self.points, &self.weights);
        DiscreteMeasure { points, weights }
    }

    pub fn pushforward(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<DiscreteMeasure> {
        if a.ncols() != self.dim() || a.nrows() != b.len() {
            return Err(Error::InvalidArgument("affine map shape mismatch".into()));
        }
        let points = self
            .points
            .iter()
            .map(|p| {
                let y = a * DVector::from_column_slice(p) + DVector::from_column_slice(b);
                y.as_slice().to_vec()
            })
            .collect();
        Ok(DiscreteMeasure {
            points,
            weights: self.weights.clone(),
        })
    }

    /// Splits each point `(w, x)` on a product space into blocks `(w, x)`.
    pub fn split_blocks(&self, m: usize) -> Result<Vec<(Vec<f64>, Vec<f64>, f64)>> {
        if m >= self.dim() {
            return Err(Error::InvalidArgument("block split exceeds dimension".into()));
        }
        Ok(self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, &w)| (p[..m].to_vec(), p[m..].to_vec(), w))
            .collect())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, &w) in self.points.iter().zip(&self.weights) {
            linalg::axpy(&mut m, w, p);
        }
        m
    }
}

/// One atom `(x, y, w)` of a discrete coupling.
#[derive(Debug, Clone)]
pub struct PlanAtom {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: f64,
}

/// Discrete coupling `sum_i w_i delta_{(x_i, y_i)}`.
#[derive(Debug, Clone)]
pub struct DiscretePlan {
    atoms: Vec<PlanAtom>,
}

impl DiscretePlan {
    pub fn new(atoms: Vec<PlanAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("plan needs at least one atom".into()));
        }
        let dx = atoms[0].x.len();
        let dy = atoms[0].y.len();
        if atoms.iter().any(|a| a.x.len() != dx || a.y.len() != dy) {
            return Err(Error::InvalidMeasure("plan atoms of mixed dimension".into()));
        }
        if atoms.iter().any(|a| a.w < 0.0 || !a.w.is_finite()) {
            return Err(Error::InvalidMeasure("negative or non-finite plan weight".into()));
        }
        let ws: Vec<f64> = atoms.iter().map(|a| a.w).collect();
        check_simplex(&ws)?;
        Ok(DiscretePlan { atoms })
    }

    pub fn from_triples(triples: Vec<(Vec<f64>, Vec<f64>, f64)>) -> Result<Self> {
        Self::new(
            triples
                .into_iter()
                .map(|(x, y, w)| PlanAtom { x, y, w })
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[PlanAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim_x(&self) -> usize {
        self.atoms[0].x.len()
    }

    pub fn dim_y(&self) -> usize {
        self.atoms[0].y.len()
    }

    /// First marginal, duplicate atoms merged.
    pub fn first_marginal(&self) -> DiscreteMeasure {
        let pts: Vec<Vec<f64>> = self.atoms.iter().map(|a| a.x.clone()).collect();
        let ws: Vec<f64> = self.atoms.iter().map(|a| a.w).collect();
        let (points, weights) = merge_weighted(&pts, &ws);
        DiscreteMeasure { points, weights }
    }

    /// Second marginal, duplicate atoms merged.
    pub fn second_marginal(&self) -> DiscreteMeasure {
        let pts: Vec<Vec<f64>> = self.atoms.iter().map(|a| a.y.clone()).collect();
        let ws: Vec<f64> = self.atoms.iter().map(|a| a.w).collect();
        let (points, weights) = merge_weighted(&pts, &ws);
        DiscreteMeasure { points, weights }
    }

    /// Transport cost `sum_i w_i ||x_i - y_i||^2` of this plan.
    pub fn quadratic_cost(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.w * linalg::dist2(&a.x, &a.y))
            .sum()
    }

    pub fn sample_one(&self, stream: &mut Stream) -> (Vec<f64>, Vec<f64>) {
        let ws: Vec<f64> = self.atoms.iter().map(|a| a.w).collect();
        let k = stream.categorical(&ws);
        (self.atoms[k].x.clone(), self.atoms[k].y.clone())
    }
}

/// The universal distribution object.
#[derive(Debug, Clone)]
pub enum Measure {
    Gaussian(GaussianMeasure),
    Gmm(GmmMeasure),
    Discrete(DiscreteMeasure),
}

impl Measure {
    pub fn dim(&self) -> usize {
        match self {
            Measure::Gaussian(g) => g.dim(),
            Measure::Gmm(g) => g.dim(),
            Measure::Discrete(d) => d.dim(),
        }
    }

    pub fn sample_one(&self, stream: &mut Stream) -> Vec<f64> {
        match self {
            Measure::Gaussian(g) => g.sample_one(stream),
            Measure::Gmm(g) => g.sample_one(stream),
            Measure::Discrete(d) => d.sample_one(stream),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Measure::Gaussian(g) => Ok(g.log_density(x)),
            Measure::Gmm(g) => Ok(g.log_density(x)),
            Measure::Discrete(_) => Err(Error::InvalidArgument(
                "discrete measure has no density".into(),
            )),
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Measure::Gaussian(g) => Ok(g.score(x)),
            Measure::Gmm(g) => Ok(g.score(x)),
            Measure::Discrete(_) => Err(Error::InvalidArgument(
                "discrete measure has no score".into(),
            )),
        }
    }

    /// Affine push-forward `x -> A x + b`.
    pub fn pushforward_affine(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<Measure> {
        Ok(match self {
            Measure::Gaussian(g) => Measure::Gaussian(g.pushforward(a, b)?),
            Measure::Gmm(g) => Measure::Gmm(g.pushforward(a, b)?),
            Measure::Discrete(d) => Measure::Discrete(d.pushforward(a, b)?),
        })
    }
}

/// I.i.d. samples from any measure.
pub fn sample(measure: &Measure, n: usize, stream: &mut Stream) -> Vec<Vec<f64>> {
    (0..n).map(|_| measure.sample_one(stream)).collect()
}

/// Disintegration of a discrete plan with respect to its first marginal:
/// the marginal `mu` plus one kernel row per marginal atom, row `i` giving
/// `K(x_i, .) = sum_j (alpha_ij / mu_i) delta_{y_j}`.
///
/// Duplicate `x` atoms are merged (exact coordinate equality) before
/// disintegration.
pub fn disintegrate_discrete(plan: &DiscretePlan) -> (DiscreteMeasure, Vec<DiscreteMeasure>) {
    let mut order: Vec<Vec<f64>> = Vec::new();
    let mut idx: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
    let mut mass: Vec<f64> = Vec::new();
    for a in &plan.atoms {
        let key = bits_key(&a.x);
        let gi = *idx.entry(key).or_insert_with(|| {
            order.push(a.x.clone());
            groups.push(Vec::new());
            mass.push(0.0);
            order.len() - 1
        });
        groups[gi].push((a.y.clone(), a.w));
        mass[gi] += a.w;
    }
    let total: f64 = mass.iter().sum();
    let marginal = DiscreteMeasure {
        points: order,
        weights: mass.iter().map(|m| m / total).collect(),
    };
    let rows = groups
        .iter()
        .zip(&mass)
        .map(|(g, &mi)| {
            let pts: Vec<Vec<f64>> = g.iter().map(|(y, _)| y.clone()).collect();
            let ws: Vec<f64> = g.iter().map(|(_, w)| w / mi).collect();
            let (points, weights) = merge_weighted(&pts, &ws);
            DiscreteMeasure { points, weights }
        })
        .collect();
    (marginal, rows)
}

/// Product coupling `mu0 x mu1` with atoms `(x_i, y_j, mu_i nu_j)` in
/// row-major order.
pub fn product_plan(mu0: &DiscreteMeasure, mu1: &DiscreteMeasure) -> DiscretePlan {
    let mut atoms = Vec::with_capacity(mu0.len() * mu1.len());
    for (x, &wx) in mu0.points.iter().zip(&mu0.weights) {
        for (y, &wy) in mu1.points.iter().zip(&mu1.weights) {
            atoms.push(PlanAtom {
                x: x.clone(),
                y: y.clone(),
                w: wx * wy,
            });
        }
    }
    DiscretePlan { atoms }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidMeasure("negative or non-finite weight".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidMeasure(format!(
            "weights sum to {s}, expected 1 within {WEIGHT_TOL}"
        )));
    }
    Ok(())
}

/// Bit-exact key for a coordinate vector.
pub(crate) fn bits_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

fn merge_weighted(points: &[Vec<f64>], weights: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<Vec<f64>> = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    let mut idx: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    for (p, &w) in points.iter().zip(weights) {
        let key = bits_key(p);
        match idx.get(&key) {
            Some(&i) => acc[i] += w,
            None => {
                idx.insert(key, order.len());
                order.push(p.clone());
                acc.push(w);
            }
        }
    }
    (order, acc)
}

/// Empirical mean of a point cloud.
pub fn empirical_mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let mut m = vec![0.0; d];
    for x in xs {
        linalg::axpy(&mut m, 1.0, x);
    }
    linalg::scale(&m, 1.0 / xs.len() as f64)
}

/// Empirical covariance (denominator `n`).
pub fn empirical_cov(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let d = xs[0].len();
    let m = empirical_mean(xs);
    let mut c = DMatrix::zeros(d, d);
    for x in xs {
        let r = DVector::from_iterator(d, x.iter().zip(&m).map(|(a, b)| a - b));
        c += &r * r.transpose();
    }
    c / xs.len() as f64
}
