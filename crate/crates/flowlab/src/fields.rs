//! Closed-form curve-velocity pairs: the analytic oracles every learned
//! field is checked against.
//!
//! All fields use the flow-matching time convention (latent at `t = 0`,
//! target at `t = 1`) unless wrapped in [`VelocityField::Reversed`], which
//! applies the involution `(t, v) -> (1 - t, -v)` and bridges to the
//! normalizing-flow convention.
//!
//! Coupling-induced fields are genuinely singular as `t -> 1` (a target
//! atom pulls mass at rate `1/(1-t)`), so evaluation guards the endpoint
//! with errors instead of clamping; integrators clip to `[eps, 1-eps]`.

use std::sync::Arc;

use crate::diffusion::{ScoreSource, VpSchedule};
use crate::linalg::{self, dist2, logsumexp, softmax_from_log};
use crate::measures::{DiscreteMeasure, DiscretePlan, GaussianMeasure, GmmMeasure};
use crate::nn::Mlp;
use crate::rng::{Seed, Stream};
use crate::transport::AffineMap;
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// Orientation of the time axis.
///
/// `Fm`: `mu_0` is the latent measure, `mu_1` the data. `Cnf`: `p_0` is
/// (approximately) the data and `p_1` the latent. The conversion between
/// the two is the involution `(t, v) -> (1 - t, -v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeConvention {
    Fm,
    Cnf,
}

impl TimeConvention {
    pub fn convert(t: f64, v: &[f64]) -> (f64, Vec<f64>) {
        (1.0 - t, linalg::scale(v, -1.0))
    }
}

/// Target of the Gaussian-latent (independent-coupling) curve.
#[derive(Debug, Clone)]
pub enum LatentTarget {
    Discrete(DiscreteMeasure),
    Gmm(GmmMeasure),
}

impl LatentTarget {
    pub fn dim(&self) -> usize {
        match self {
            LatentTarget::Discrete(m) => m.dim(),
            LatentTarget::Gmm(m) => m.dim(),
        }
    }
}

/// Custom field from a closure (tests, adapters, time-changed fields).
#[derive(Clone)]
pub struct CustomField {
    pub dim: usize,
    pub eval: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    pub divergence: Option<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for CustomField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomField(dim={})", self.dim)
    }
}

/// Tagged union of velocity fields with one evaluation interface.
#[derive(Debug, Clone)]
pub enum VelocityField {
    /// Field induced by a discrete plan; defined only on the support of
    /// the pushed-forward curve, queried by exact atom equality.
    Plan(DiscretePlan),
    /// Independent coupling `N(0, I) x target`.
    GaussianLatent(LatentTarget),
    /// Kernel path `K_t(y, .) = N(ty, (1 - rt)^2 I)` mixed over a discrete target.
    Lipman { r: f64, target: DiscreteMeasure },
    /// Field of the curve `T_t = (1 - t) Id + t T` for an affine map `T`.
    Map(AffineMap),
    /// Probability-flow velocity of a VP diffusion, reparametrized onto
    /// solver time `[0, 1]` in sampling orientation (latent at 0).
    Score {
        schedule: VpSchedule,
        source: ScoreSource,
        t_min: f64,
    },
    /// Learned field, optionally conditioned.
    Neural { net: Mlp, cond: Option<Vec<f64>> },
    /// Time-reversed wrapper: evaluates the inner field at `(1 - t, x)`
    /// and negates.
    Reversed(Box<VelocityField>),
    Custom(CustomField),
}

impl VelocityField {
    pub fn neural(net: Mlp) -> Self {
        VelocityField::Neural { net, cond: None }
    }

    pub fn custom<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        VelocityField::Custom(CustomField {
            dim,
            eval: Arc::new(f),
            divergence: None,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            VelocityField::Plan(p) => p.dim_x(),
            VelocityField::GaussianLatent(t) => t.dim(),
            VelocityField::Lipman { target, .. } => target.dim(),
            VelocityField::Map(m) => m.dim(),
            VelocityField::Score { source, .. } => source.dim(),
            VelocityField::Neural { net, .. } => net.data_dim(),
            VelocityField::Reversed(f) => f.dim(),
            VelocityField::Custom(c) => c.dim,
        }
    }

    /// Evaluate `v(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            VelocityField::Plan(plan) => plan_velocity(plan, t, x),
            VelocityField::GaussianLatent(target) => match target {
                LatentTarget::Discrete(m) => gaussian_latent_velocity(m, t, x),
                LatentTarget::Gmm(m) => {
                    check_open_unit(t)?;
                    let marginal = gaussian_latent_marginal_gmm(m, t)?;
                    let score = marginal.score(x);
                    score_velocity_convert(t, x, &score)
                }
            },
            VelocityField::Lipman { r, target } => lipman_marginal_velocity(target, *r, t, x),
            VelocityField::Map(map) => map_velocity(map, t, x),
            VelocityField::Score {
                schedule,
                source,
                t_min,
            } => {
                // solver time tau in [0, 1] -> diffusion time T - tau (T - t_min)
                let span = schedule.t_max() - t_min;
                let u = schedule.t_max() - t * span;
                let v = crate::diffusion::prob_flow_velocity(source, schedule, u, x)?;
                Ok(linalg::scale(&v, -span))
            }
            VelocityField::Neural { net, cond } => Ok(net.forward(t, x, cond.as_deref())),
            VelocityField::Reversed(inner) => {
                let v = inner.eval(1.0 - t, x)?;
                Ok(linalg::scale(&v, -1.0))
            }
            VelocityField::Custom(c) => Ok((c.eval)(t, x)),
        }
    }

    /// Exact spatial divergence where a closed form (or exact reverse-mode
    /// computation) exists.
    pub fn divergence(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            VelocityField::GaussianLatent(target) => {
                check_open_unit(t)?;
                let marginal = match target {
                    LatentTarget::Discrete(m) => gaussian_latent_marginal(m, t)?,
                    LatentTarget::Gmm(m) => gaussian_latent_marginal_gmm(m, t)?,
                };
                // v = (1-t)/t grad log p_t + x/t, so
                // div v = (1-t)/t lap log p_t + d/t
                let (_, _, lap) = marginal.log_density_score_laplacian(x);
                Ok((1.0 - t) / t * lap + x.len() as f64 / t)
            }
            VelocityField::Map(map) => {
                let d = map.dim();
                let m_t = interpolated_map_matrix(map, t);
                let inv = m_t
                    .clone()
                    .try_inverse()
                    .ok_or(Error::TrajectoryCrossing(t))?;
                let a_minus_i = &map.a - nalgebra::DMatrix::<f64>::identity(d, d);
                Ok((a_minus_i * inv).trace())
            }
            VelocityField::Neural { net, cond } => net.divergence(t, x, cond.as_deref()),
            VelocityField::Reversed(inner) => Ok(-inner.divergence(1.0 - t, x)?),
            VelocityField::Custom(c) => match &c.divergence {
                Some(div) => Ok((div)(t, x)),
                None => Err(Error::DivergenceUnavailable),
            },
            _ => Err(Error::DivergenceUnavailable),
        }
    }
}

/// Linear interpolation `e_t(x, y) = (1 - t) x + t y`.
pub fn interpolate(x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    linalg::lerp(x, y, t)
}

fn check_open_unit(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("t={t} outside (0,1)")));
    }
    Ok(())
}

/// Velocity of the curve induced by a discrete plan, evaluated on an atom
/// of `e_t # alpha`:
/// `v_t(x) = sum_y alpha_t^x(y) (y - x) / (1 - t)`, where `alpha_t^x`
/// aggregates all plan atoms whose `e_t`-image equals `x` exactly.
pub fn plan_velocity(plan: &DiscretePlan, t: f64, query: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0,1)")));
    }
    let key = crate::measures::bits_key(query);
    let mut mass = 0.0;
    let mut v = vec![0.0; plan.dim_y()];
    for a in plan.atoms() {
        let img = interpolate(&a.x, &a.y, t);
        if crate::measures::bits_key(&img) == key {
            mass += a.w;
            for (vi, (yi, xi)) in v.iter_mut().zip(a.y.iter().zip(query)) {
                *vi += a.w * (yi - xi) / (1.0 - t);
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::NotOnSupport);
    }
    Ok(linalg::scale(&v, 1.0 / mass))
}

/// Marginal of the Gaussian-latent curve at time `t` for a discrete
/// target: a mixture with components `N(t y_j, (1 - t)^2 I)`.
pub fn gaussian_latent_marginal(target: &DiscreteMeasure, t: f64) -> Result<GmmMeasure> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::DegenerateDensity);
    }
    let var = (1.0 - t) * (1.0 - t);
    let comps = target
        .points()
        .iter()
        .map(|y| GaussianMeasure::isotropic(linalg::scale(y, t), var))
        .collect::<Result<Vec<_>>>()?;
    GmmMeasure::new(target.weights().to_vec(), comps)
}

/// Marginal of the Gaussian-latent curve for a GMM target: components
/// `N(t m_k, t^2 S_k + (1 - t)^2 I)`.
pub fn gaussian_latent_marginal_gmm(target: &GmmMeasure, t: f64) -> Result<GmmMeasure> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::DegenerateDensity);
    }
    let d = target.dim();
    let comps = target
        .components()
        .iter()
        .map(|c| {
            let cov = c.cov_matrix() * (t * t)
                + nalgebra::DMatrix::<f64>::identity(d, d) * (1.0 - t) * (1.0 - t);
            GaussianMeasure::full(linalg::scale(c.mean(), t), cov)
        })
        .collect::<Result<Vec<_>>>()?;
    GmmMeasure::new(target.weights().to_vec(), comps)
}

/// Density (and log-density) of the Gaussian-latent curve at `(t, x)`:
/// `p_t(x) = (1-t)^{-d} (2 pi)^{-d/2} sum_j nu_j exp(-||x - t y_j||^2 / (2 (1-t)^2))`,
/// strictly positive for `t < 1` and degenerate at `t = 1`.
pub fn gaussian_latent_density(target: &DiscreteMeasure, t: f64, x: &[f64]) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::DegenerateDensity);
    }
    let d = x.len() as f64;
    let s = 1.0 - t;
    let log_terms: Vec<f64> = target
        .points()
        .iter()
        .zip(target.weights())
        .map(|(y, &w)| w.ln() - dist2(x, &linalg::scale(y, t)) / (2.0 * s * s))
        .collect();
    let logp = -d * s.ln() - 0.5 * d * LOG_2PI + logsumexp(&log_terms);
    Ok((logp.exp(), logp))
}

/// Velocity of the Gaussian-latent curve (mixture form):
/// `v_t(x) = sum_j w_j(x) (y_j - x) / (1 - t)` with softmax weights
/// `w_j propto nu_j exp(-||x - t y_j||^2 / (2 (1-t)^2))`.
pub fn gaussian_latent_velocity(target: &DiscreteMeasure, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_open_unit(t)?;
    let s = 1.0 - t;
    let log_w: Vec<f64> = target
        .points()
        .iter()
        .zip(target.weights())
        .map(|(y, &w)| w.ln() - dist2(x, &linalg::scale(y, t)) / (2.0 * s * s))
        .collect();
    let w = softmax_from_log(&log_w);
    let mut v = vec![0.0; x.len()];
    for (wj, y) in w.iter().zip(target.points()) {
        if *wj > 0.0 {
            for (vi, (yi, xi)) in v.iter_mut().zip(y.iter().zip(x)) {
                *vi += wj * (yi - xi) / s;
            }
        }
    }
    Ok(v)
}

/// Same velocity through the gradient form
/// `v_t = (1-t)/t grad log p_t + x/t`; used as the dual route in tests.
pub fn gaussian_latent_velocity_grad_form(
    target: &DiscreteMeasure,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_open_unit(t)?;
    let marginal = gaussian_latent_marginal(target, t)?;
    score_velocity_convert(t, x, &marginal.score(x))
}

/// Velocity of a single Lipman kernel `K_t(y, .) = N(ty, (1 - rt)^2 I)`:
/// `v_t^y(x) = (y - r x) / (1 - t r)`.
pub fn lipman_kernel_velocity(y: &[f64], r: f64, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_lipman(r, t)?;
    let denom = 1.0 - t * r;
    Ok(y.iter().zip(x).map(|(yi, xi)| (yi - r * xi) / denom).collect())
}

/// Mean and isotropic standard deviation of `K_t(y, .)`.
pub fn lipman_kernel_params(y: &[f64], r: f64, t: f64) -> Result<(Vec<f64>, f64)> {
    check_lipman(r, t)?;
    Ok((linalg::scale(y, t), 1.0 - r * t))
}

fn check_lipman(r: f64, t: f64) -> Result<()> {
    if !(0.0 < r && r < 1.0) {
        return Err(Error::InvalidArgument(format!("r={r} outside (0,1)")));
    }
    if !(0.0..=1.0).contains(&t) || t * r >= 1.0 {
        return Err(Error::InvalidArgument(format!("t={t} with tr >= 1")));
    }
    Ok(())
}

/// Marginal `nu_t` of the Lipman construction: mixture of
/// `N(t y_j, (1 - rt)^2 I)` with the target weights.
pub fn lipman_marginal(target: &DiscreteMeasure, r: f64, t: f64) -> Result<GmmMeasure> {
    check_lipman(r, t)?;
    let var = (1.0 - r * t) * (1.0 - r * t);
    let comps = target
        .points()
        .iter()
        .map(|y| GaussianMeasure::isotropic(linalg::scale(y, t), var))
        .collect::<Result<Vec<_>>>()?;
    GmmMeasure::new(target.weights().to_vec(), comps)
}

/// Marginal velocity of the Lipman construction with Bayesian weights:
/// `v_t(x) = sum_j w_j(x) (y_j - r x) / (1 - t r)`,
/// `w_j propto nu_j exp(-||x - t y_j||^2 / (2 (1 - r t)^2))`.
pub fn lipman_marginal_velocity(
    target: &DiscreteMeasure,
    r: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_lipman(r, t)?;
    let s = 1.0 - r * t;
    let log_w: Vec<f64> = target
        .points()
        .iter()
        .zip(target.weights())
        .map(|(y, &w)| w.ln() - dist2(x, &linalg::scale(y, t)) / (2.0 * s * s))
        .collect();
    let w = softmax_from_log(&log_w);
    let mut v = vec![0.0; x.len()];
    for (wj, y) in w.iter().zip(target.points()) {
        if *wj > 0.0 {
            for (vi, (yi, xi)) in v.iter_mut().zip(y.iter().zip(x)) {
                *vi += wj * (yi - r * xi) / s;
            }
        }
    }
    Ok(v)
}

fn interpolated_map_matrix(map: &AffineMap, t: f64) -> nalgebra::DMatrix<f64> {
    let d = map.dim();
    nalgebra::DMatrix::<f64>::identity(d, d) * (1.0 - t) + &map.a * t
}

/// Velocity of the curve `T_t = (1 - t) Id + t T` induced by an affine map:
/// `v_t(x) = T(T_t^{-1}(x)) - T_t^{-1}(x)`; along trajectories
/// `v_t(T_t(x)) = T(x) - x` exactly.
pub fn map_velocity(map: &AffineMap, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
    }
    let m_t = interpolated_map_matrix(map, t);
    let lu = m_t.lu();
    if lu.determinant().abs() < 1e-300 {
        return Err(Error::TrajectoryCrossing(t));
    }
    // T_t(x) = M_t x + t b, so T_t^{-1}(x) = M_t^{-1} (x - t b)
    let shifted: Vec<f64> = x.iter().zip(&map.b).map(|(xi, bi)| xi - t * bi).collect();
    let z = lu
        .solve(&nalgebra::DVector::from_column_slice(&shifted))
        .ok_or(Error::TrajectoryCrossing(t))?;
    let tz = map.apply(z.as_slice());
    Ok(tz.iter().zip(z.iter()).map(|(a, b)| a - b).collect())
}

/// Nadaraya-Watson estimate of the conditional velocity
/// `E[X_1 - X_0 | X_t ~ x]` from coupling samples, with a Gaussian kernel
/// of width `h` on `X_t`. A stochastic oracle with error
/// `O(h^2 + (n h^d)^{-1/2})`.
pub fn mc_conditional_velocity<F>(
    mut sampler: F,
    t: f64,
    x: &[f64],
    h: f64,
    n: usize,
    seed: Seed,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Stream) -> (Vec<f64>, Vec<f64>),
{
    if n < 1000 {
        return Err(Error::InvalidArgument("need n >= 1000 samples".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    let mut stream = Stream::new(seed, "mc-conditional-velocity");
    let mut log_w = Vec::with_capacity(n);
    let mut disp = Vec::with_capacity(n);
    for _ in 0..n {
        let (x0, x1) = sampler(&mut stream);
        let xt = interpolate(&x0, &x1, t);
        log_w.push(-dist2(&xt, x) / (2.0 * h * h));
        disp.push(linalg::sub(&x1, &x0));
    }
    let lse = logsumexp(&log_w);
    if !lse.is_finite() || lse < -700.0 {
        return Err(Error::EmptyWindow);
    }
    let mut v = vec![0.0; x.len()];
    let mut mass = 0.0;
    for (lw, d) in log_w.iter().zip(&disp) {
        let w = (lw - lse).exp();
        if w > 0.0 {
            mass += w;
            linalg::axpy(&mut v, w, d);
        }
    }
    if mass <= 0.0 {
        return Err(Error::EmptyWindow);
    }
    Ok(linalg::scale(&v, 1.0 / mass))
}

/// Tweedie bridge, score to velocity: `v = (1-t)/t s + x/t`.
pub fn score_velocity_convert(t: f64, x: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    check_open_unit(t)?;
    Ok(score
        .iter()
        .zip(x)
        .map(|(s, xi)| (1.0 - t) / t * s + xi / t)
        .collect())
}

/// Inverse bridge, velocity to score: `s = (t v - x) / (1 - t)`.
pub fn velocity_score_convert(t: f64, x: &[f64], velocity: &[f64]) -> Result<Vec<f64>> {
    check_open_unit(t)?;
    Ok(velocity
        .iter()
        .zip(x)
        .map(|(v, xi)| (t * v - xi) / (1.0 - t))
        .collect())
}

/// Central finite-difference residual of the continuity equation
/// `d_t p + div(p v)` at `(t, x)` with step `h`; all derivatives second
/// order.
pub fn continuity_residual<P>(
    field: &VelocityField,
    density: P,
    t: f64,
    x: &[f64],
    h: f64,
) -> Result<f64>
where
    P: Fn(f64, &[f64]) -> Result<f64>,
{
    let dt = (density(t + h, x)? - density(t - h, x)?) / (2.0 * h);
    let mut div = 0.0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = density(t, &xp)? * field.eval(t, &xp)?[i];
        let fm = density(t, &xm)? * field.eval(t, &xm)?[i];
        div += (fp - fm) / (2.0 * h);
    }
    Ok(dt + div)
}

/// Time reversal `(t, v) -> (1 - t, -v)`; an involution.
pub fn reverse_field(field: VelocityField) -> VelocityField {
    VelocityField::Reversed(Box::new(field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::product_plan;
    use crate::transport::solve_discrete_ot;

    fn two_atom_target() -> DiscreteMeasure {
        DiscreteMeasure::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        assert_eq!(interpolate(&[0.0], &[2.0], 0.0), vec![0.0]);
        assert_eq!(interpolate(&[0.0], &[2.0], 0.5), vec![1.0]);
        assert_eq!(interpolate(&[0.0], &[2.0], 1.0), vec![2.0]);
    }

    #[test]
    fn plan_velocity_symmetric_pair() {
        let plan = DiscretePlan::from_triples(vec![
            (vec![0.0], vec![1.0], 0.5),
            (vec![0.0], vec![-1.0], 0.5),
        ])
        .unwrap();
        let v = plan_velocity(&plan, 0.0, &[0.0]).unwrap();
        assert_eq!(v, vec![0.0]);
        let v = plan_velocity(&plan, 0.5, &[0.5]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15); // (1 - 0.5) / (1 - 0.5)
        assert!(matches!(
            plan_velocity(&plan, 0.5, &[0.4]),
            Err(Error::NotOnSupport)
        ));
    }

    #[test]
    fn plan_velocity_splits_mass_at_crossing() {
        // product coupling of 1/2(d_0 + d_1) and 1/3 d_{y0} + 2/3 d_{y1}
        // with y0 = 0, y1 = 1: paths cross at s = 1/2 in x_hat = 1/2
        let mu0 = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let mu1 =
            DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let plan = product_plan(&mu0, &mu1);
        let s = 0.5;
        let x_hat = 0.5;
        let v = plan_velocity(&plan, s, &[x_hat]).unwrap();
        // brute force over the two atoms landing on x_hat
        let expect =
            (1.0 / 3.0) * (0.0 - x_hat) / (1.0 - s) + (2.0 / 3.0) * (1.0 - x_hat) / (1.0 - s);
        assert!((v[0] - expect).abs() < 1e-15, "{} vs {}", v[0], expect);
    }

    #[test]
    fn latent_density_point_target_is_shrinking_gaussian() {
        let target = DiscreteMeasure::dirac(vec![0.0]);
        for t in [0.0, 0.3, 0.9] {
            let s = 1.0 - t;
            let g = GaussianMeasure::isotropic(vec![0.0], s * s).unwrap();
            for x in [-1.0, 0.2, 2.5] {
                let (_, logp) = gaussian_latent_density(&target, t, &[x]).unwrap();
                assert!((logp - g.log_density(&[x])).abs() < 1e-12);
            }
        }
        assert!(matches!(
            gaussian_latent_density(&target, 1.0, &[0.0]),
            Err(Error::DegenerateDensity)
        ));
    }

    #[test]
    fn latent_density_at_t0_is_standard_normal() {
        let target = two_atom_target();
        let g = GaussianMeasure::standard(1);
        for x in [-2.0, 0.0, 1.5] {
            let (_, logp) = gaussian_latent_density(&target, 0.0, &[x]).unwrap();
            assert!((logp - g.log_density(&[x])).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_density_matches_kernel_density_estimate() {
        // sampling oracle: kernel estimate from draws of e_t # (mu_0 x mu_1)
        // against the closed form, 3 sigma + smoothing bias at n = 1e6
        let target = two_atom_target();
        let t = 0.6;
        let mut s = Stream::new(Seed(5), "kde");
        let n = 1_000_000usize;
        let h = 0.02;
        let x = [0.55f64];
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = s.standard_normal();
            let y = target.sample_one(&mut s)[0];
            let xt = (1.0 - t) * z + t * y;
            let k = (-((xt - x[0]) * (xt - x[0])) / (2.0 * h * h)).exp()
                / ((2.0 * std::f64::consts::PI).sqrt() * h);
            acc += k;
            acc2 += k * k;
        }
        let est = acc / n as f64;
        let var = (acc2 / n as f64 - est * est) / n as f64;
        let (p, _) = gaussian_latent_density(&target, t, &x).unwrap();
        assert!(
            (est - p).abs() < 3.0 * var.sqrt() + 2e-3,
            "KDE {est} vs closed form {p}"
        );
    }

    #[test]
    fn latent_velocity_point_target_explodes() {
        let target = DiscreteMeasure::dirac(vec![0.0]);
        for t in [0.1, 0.5, 0.99] {
            for x in [-2.0, 1.0, 3.0] {
                let v = gaussian_latent_velocity(&target, t, &[x]).unwrap();
                assert!((v[0] - x / (t - 1.0)).abs() < 1e-12);
            }
        }
        let v = gaussian_latent_velocity(&target, 0.5, &[1.0]).unwrap();
        assert!((v[0] + 2.0).abs() < 1e-12);
        assert!(gaussian_latent_velocity(&target, 1.0, &[1.0]).is_err());
        assert!(gaussian_latent_velocity(&target, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn latent_velocity_symmetric_target_vanishes_at_origin() {
        let v = gaussian_latent_velocity(&two_atom_target(), 0.37, &[0.0]).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn latent_velocity_dual_formulas_agree() {
        let mut s = Stream::new(Seed(17), "dual");
        let target = DiscreteMeasure::from_points(
            (0..4)
                .map(|_| vec![2.0 * s.standard_normal(), s.standard_normal()])
                .collect(),
        )
        .unwrap();
        for _ in 0..25 {
            let t = s.uniform_in(0.05, 0.95);
            let x = vec![s.standard_normal() * 1.5, s.standard_normal() * 1.5];
            let a = gaussian_latent_velocity(&target, t, &x).unwrap();
            let b = gaussian_latent_velocity_grad_form(&target, t, &x).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-9, "{} vs {}", a[k], b[k]);
            }
        }
    }

    #[test]
    fn latent_velocity_matches_mc_conditional() {
        let target = two_atom_target();
        let t = 0.5;
        let x = [0.3];
        let analytic = gaussian_latent_velocity(&target, t, &x).unwrap();
        let tgt = target.clone();
        let est = mc_conditional_velocity(
            move |s: &mut Stream| {
                let z = vec![s.standard_normal()];
                let y = tgt.sample_one(s);
                (z, y)
            },
            t,
            &x,
            0.02,
            400_000,
            Seed(23),
        )
        .unwrap();
        assert!(
            (est[0] - analytic[0]).abs() < 0.05,
            "{} vs {}",
            est[0],
            analytic[0]
        );
    }

    #[test]
    fn mc_conditional_deterministic_coupling() {
        let v = mc_conditional_velocity(
            |_s: &mut Stream| (vec![0.0], vec![1.0]),
            0.5,
            &[0.5],
            0.5,
            2_000,
            Seed(1),
        )
        .unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_conditional_point_target_matches_exploding_field() {
        // mu_0 = N(0,1), mu_1 = d_0, x = 1, t = 0.5 -> v = -2 within 0.05
        let est = mc_conditional_velocity(
            |s: &mut Stream| (vec![s.standard_normal()], vec![0.0]),
            0.5,
            &[1.0],
            0.02,
            1_000_000,
            Seed(9),
        )
        .unwrap();
        assert!((est[0] + 2.0).abs() < 0.05, "{}", est[0]);
    }

    #[test]
    fn mc_conditional_empty_window() {
        let res = mc_conditional_velocity(
            |_s: &mut Stream| (vec![0.0], vec![0.0]),
            0.5,
            &[1e6],
            1e-3,
            2_000,
            Seed(2),
        );
        assert!(matches!(res, Err(Error::EmptyWindow)));
    }

    #[test]
    fn lipman_kernel_examples() {
        let r = 0.7;
        assert_eq!(
            lipman_kernel_velocity(&[0.0], r, 0.3, &[0.0]).unwrap(),
            vec![0.0]
        );
        let v = lipman_kernel_velocity(&[2.0], r, 0.0, &[1.0]).unwrap();
        assert!((v[0] - (2.0 - r)).abs() < 1e-15);
        let v = lipman_kernel_velocity(&[2.0], r, 1.0, &[1.0]).unwrap();
        assert!((v[0] - (2.0 - r) / (1.0 - r)).abs() < 1e-15);
    }

    #[test]
    fn lipman_single_atom_equals_kernel() {
        let target = DiscreteMeasure::dirac(vec![1.5]);
        for t in [0.0, 0.4, 0.9] {
            let a = lipman_marginal_velocity(&target, 0.6, t, &[0.3]).unwrap();
            let b = lipman_kernel_velocity(&[1.5], 0.6, t, &[0.3]).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn lipman_r_to_one_recovers_latent_velocity() {
        // the gap is (1-r) e_t(x,y) / (1-t)^2 to first order, so the grid
        // stays on t <= 0.6 where 1e-2 is reachable at r = 0.999
        let target = two_atom_target();
        let r = 0.999;
        let mut max_dev: f64 = 0.0;
        for it in 0..20 {
            let t = 0.03 + 0.03 * it as f64;
            for x in [-1.5, -0.5, 0.3, 1.2] {
                let a = lipman_marginal_velocity(&target, r, t, &[x]).unwrap();
                let b = gaussian_latent_velocity(&target, t, &[x]).unwrap();
                max_dev = max_dev.max((a[0] - b[0]).abs());
            }
        }
        assert!(max_dev < 1e-2, "max deviation {max_dev}");
    }

    #[test]
    fn lipman_continuity_residual_small() {
        let target = two_atom_target();
        let r = 0.8;
        let field = VelocityField::Lipman {
            r,
            target: target.clone(),
        };
        let density = |t: f64, x: &[f64]| -> Result<f64> {
            Ok(lipman_marginal(&target, r, t)?.log_density(x).exp())
        };
        for (t, x) in [(0.3, 0.2), (0.5, -0.7), (0.7, 1.1)] {
            let res = continuity_residual(&field, density, t, &[x], 1e-4).unwrap();
            assert!(res.abs() < 1e-4, "residual {res} at ({t},{x})");
        }
    }

    #[test]
    fn map_velocity_translation_is_constant() {
        let map = AffineMap::translation(vec![1.0]);
        for t in [0.0, 0.5, 1.0] {
            let v = map_velocity(&map, t, &[0.3]).unwrap();
            assert!((v[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn map_velocity_scaling_hand_inverted() {
        // T(x) = 2x, t = 0.5: T_t^{-1}(1.5) = 1, v = T(1) - 1 = 1
        let map = AffineMap::new(linalg::mat_from_rows(&[vec![2.0]]), vec![0.0]);
        let v = map_velocity(&map, 0.5, &[1.5]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn map_velocity_rotation_at_t0() {
        // rotation-plus-identity map: v_0(x) = w(x) = (-x2, x1)
        let map = AffineMap::new(
            linalg::mat_from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]),
            vec![0.0, 0.0],
        );
        let v = map_velocity(&map, 0.0, &[0.7, -0.2]).unwrap();
        assert!((v[0] - 0.2).abs() < 1e-14 && (v[1] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn map_velocity_detects_crossing() {
        // T(x) = -x: T_t = (1-t) - t = 1 - 2t singular at t = 1/2
        let map = AffineMap::new(linalg::mat_from_rows(&[vec![-1.0]]), vec![0.0]);
        assert!(matches!(
            map_velocity(&map, 0.5, &[0.3]),
            Err(Error::TrajectoryCrossing(_))
        ));
    }

    #[test]
    fn non_tangential_witness_is_positive() {
        // radial mu_0 with the rotation map: MC estimate of <w, v_0> over
        // mu_0 equals E||w(X)||^2 = 2 > 0 with 5 sigma margin at n = 1e5
        let map = AffineMap::new(
            linalg::mat_from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]),
            vec![0.0, 0.0],
        );
        let mut s = Stream::new(Seed(7), "witness");
        let n = 100_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let x = [s.standard_normal(), s.standard_normal()];
            let w = [-x[1], x[0]];
            let v = map_velocity(&map, 0.0, &x).unwrap();
            let ip = w[0] * v[0] + w[1] * v[1];
            acc += ip;
            acc2 += ip * ip;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean - 5.0 * se > 0.0, "mean {mean}, se {se}");
        assert!((mean - 2.0).abs() < 5.0 * se);
    }

    #[test]
    fn score_velocity_round_trip() {
        let mut s = Stream::new(Seed(3), "tweedie");
        for _ in 0..50 {
            let t = s.uniform_in(0.01, 0.99);
            let x = vec![s.standard_normal(), s.standard_normal()];
            let sc = vec![s.standard_normal(), s.standard_normal()];
            let v = score_velocity_convert(t, &x, &sc).unwrap();
            let back = velocity_score_convert(t, &x, &v).unwrap();
            for k in 0..2 {
                assert!((back[k] - sc[k]).abs() < 1e-12);
            }
        }
        // at x = 0: v = (1-t)/t s
        let v = score_velocity_convert(0.25, &[0.0], &[2.0]).unwrap();
        assert!((v[0] - 0.75 / 0.25 * 2.0).abs() < 1e-15);
        // point-target substitution at t = 1/2: score -4x gives v = -2x
        let x = 0.7;
        let v = score_velocity_convert(0.5, &[x], &[-4.0 * x]).unwrap();
        assert!((v[0] + 2.0 * x).abs() < 1e-14);
    }

    #[test]
    fn tweedie_consistency_on_grid() {
        let target = two_atom_target();
        for it in 1..20 {
            let t = it as f64 / 20.0;
            for x in [-1.3, 0.1, 0.8] {
                let marginal = gaussian_latent_marginal(&target, t).unwrap();
                let via_score = score_velocity_convert(t, &[x], &marginal.score(&[x])).unwrap();
                let direct = gaussian_latent_velocity(&target, t, &[x]).unwrap();
                assert!((via_score[0] - direct[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn continuity_residual_trivial_field() {
        let field = VelocityField::custom(1, |_, _| vec![0.0]);
        let density = |_: f64, _: &[f64]| -> Result<f64> { Ok(0.4) };
        let res = continuity_residual(&field, density, 0.5, &[0.1], 1e-3).unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn continuity_residual_second_order_shrink() {
        let target = two_atom_target();
        let field = VelocityField::GaussianLatent(LatentTarget::Discrete(target.clone()));
        let density =
            |t: f64, x: &[f64]| -> Result<f64> { Ok(gaussian_latent_density(&target, t, x)?.0) };
        // |residual| <= C h^2 with C stable across h = 1e-2, 1e-3
        for (t, x) in [(0.4, 0.3), (0.6, -0.9)] {
            let r2 = continuity_residual(&field, density, t, &[x], 1e-2).unwrap();
            let r3 = continuity_residual(&field, density, t, &[x], 1e-3).unwrap();
            let c2 = r2.abs() / 1e-4;
            let c3 = r3.abs() / 1e-6;
            assert!(c2 < 10.0 && c3 < 10.0, "C estimates {c2} {c3}");
            // second order: the constant moves by < 25% when h shrinks 10x
            assert!(
                (c3 - c2).abs() < 0.25 * c2.max(1e-6),
                "order mismatch: C2 {c2}, C3 {c3}"
            );
        }
    }

    #[test]
    fn continuity_residual_map_field() {
        // T(x) = 2x transporting N(0,1): density of mu_t = N(0, (1+t)^2)
        let map = AffineMap::new(linalg::mat_from_rows(&[vec![2.0]]), vec![0.0]);
        let field = VelocityField::Map(map);
        let density = |t: f64, x: &[f64]| -> Result<f64> {
            let g = GaussianMeasure::isotropic(vec![0.0], (1.0 + t) * (1.0 + t)).unwrap();
            Ok(g.log_density(x).exp())
        };
        let res = continuity_residual(&field, density, 0.5, &[0.7], 1e-4).unwrap();
        assert!(res.abs() < 1e-4, "residual {res}");
    }

    #[test]
    fn reversed_field_involution() {
        let target = two_atom_target();
        let f = VelocityField::GaussianLatent(LatentTarget::Discrete(target));
        let ff = reverse_field(reverse_field(f.clone()));
        for (t, x) in [(0.2, 0.5), (0.7, -0.3)] {
            let a = f.eval(t, &[x]).unwrap();
            let b = ff.eval(t, &[x]).unwrap();
            assert_eq!(a, b);
        }
        let c = VelocityField::custom(1, |_, _| vec![1.0]);
        let rc = reverse_field(c);
        assert_eq!(rc.eval(0.3, &[0.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn plan_field_energy_bound_and_geodesic_speed() {
        let mut s = Stream::new(Seed(13), "energy");
        let pts = |s: &mut Stream| -> Vec<Vec<f64>> {
            (0..6)
                .map(|_| vec![s.standard_normal(), s.standard_normal()])
                .collect()
        };
        let mu = DiscreteMeasure::from_points(pts(&mut s)).unwrap();
        let nu = DiscreteMeasure::from_points(pts(&mut s)).unwrap();

        // arbitrary coupling: product plan; optimal: solver plan
        let product = product_plan(&mu, &nu);
        let optimal = solve_discrete_ot(&mu, &nu).unwrap();
        let w2 = optimal.cost.sqrt();

        for (which, plan) in [(0, &product), (1, &optimal.plan)] {
            let transport_energy = plan.quadratic_cost();
            for k in 0..101 {
                let t = k as f64 / 101.0;
                let mu_t = crate::transport::geodesic_point(plan, t).unwrap();
                let mut field_energy = 0.0;
                for (p, &w) in mu_t.points().iter().zip(mu_t.weights()) {
                    let v = plan_velocity(plan, t, p).unwrap();
                    field_energy += w * linalg::dot(&v, &v);
                }
                assert!(
                    field_energy <= transport_energy + 1e-10,
                    "energy bound violated at t={t}: {field_energy} > {transport_energy}"
                );
                if which == 1 {
                    assert!(
                        (field_energy.sqrt() - w2).abs() < 1e-9,
                        "geodesic speed at t={t}: {} vs {w2}",
                        field_energy.sqrt()
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_latent_divergence_matches_fd() {
        let target = two_atom_target();
        let field = VelocityField::GaussianLatent(LatentTarget::Discrete(target));
        let (t, x) = (0.55, [0.4]);
        let h = 1e-6;
        let vp = field.eval(t, &[x[0] + h]).unwrap()[0];
        let vm = field.eval(t, &[x[0] - h]).unwrap()[0];
        let fd = (vp - vm) / (2.0 * h);
        let div = field.divergence(t, &x).unwrap();
        assert!((div - fd).abs() < 1e-6, "{div} vs {fd}");
    }

    #[test]
    fn map_divergence_matches_fd() {
        let map = AffineMap::new(
            linalg::mat_from_rows(&[vec![1.2, -0.4], vec![0.3, 0.9]]),
            vec![0.1, -0.2],
        );
        let field = VelocityField::Map(map);
        let (t, x) = (0.35, [0.4, -0.6]);
        let h = 1e-6;
        let mut fd = 0.0;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            fd += (field.eval(t, &xp).unwrap()[k] - field.eval(t, &xm).unwrap()[k]) / (2.0 * h);
        }
        let div = field.divergence(t, &x).unwrap();
        assert!((div - fd).abs() < 1e-6, "{div} vs {fd}");
    }
}
