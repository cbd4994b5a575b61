//! Flow-matching objectives and training loops: product-coupling training,
//! minibatch-OT training, the tractable kernel-path loss, and Bayesian
//! conditional flow matching.
//!
//! The two loop shapes:
//! - product coupling: per step, draw fresh latents and times, pair them
//!   with the next data block, regress the net onto `x1 - x0` at the
//!   interpolation point;
//! - minibatch OT: per outer batch, draw latents, solve the exact
//!   assignment against a data block, then run inner steps over the matched
//!   pairs.
//!
//! Data is reshuffled every epoch from the seeded stream `train/shuffle`;
//! all randomness is keyed by the config seed, so a config + seed pair
//! fully determines the trained parameters. Times are drawn uniformly from
//! `[eps, 1-eps]` because coupling-induced fields genuinely blow up at
//! `t = 1`.

use rayon::prelude::*;

use crate::bayes::LinearInverseProblem;
use crate::linalg;
use crate::measures::{GaussianMeasure, GmmMeasure};
use crate::nn::{AdamState, Mlp};
use crate::rng::{Seed, Stream};
use crate::transport::solve_assignment;
use crate::{Error, Result};

/// Grain size for deterministic chunk-parallel gradient accumulation.
const GRAD_CHUNK: usize = 32;

/// Built-in training targets.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    /// 8-mode ring mixture, the documented default toy target: means on a
    /// circle of radius 0.5, isotropic mode std 0.05 (the classic radius-10
    /// circle with unit variances, scaled by 1/20 so that desk-scale sample
    /// sizes resolve it).
    Gmm8,
    /// Two moons, unit scale, noise std 0.05.
    Moons,
    /// Two interleaved spirals, unit scale, noise std 0.02.
    Spirals,
    /// Any explicit mixture.
    Gmm(GmmMeasure),
    /// The 5-D linear-Gaussian inverse problem (conditional training).
    BayesLinear(LinearInverseProblem),
}

impl TargetSpec {
    pub fn data_dim(&self) -> usize {
        match self {
            TargetSpec::Gmm8 | TargetSpec::Moons | TargetSpec::Spirals => 2,
            TargetSpec::Gmm(g) => g.dim(),
            TargetSpec::BayesLinear(p) => p.data_dim(),
        }
    }

    /// Condition dimension (0 for unconditional targets).
    pub fn cond_dim(&self) -> usize {
        match self {
            TargetSpec::BayesLinear(p) => p.obs_dim(),
            _ => 0,
        }
    }

    /// The mixture behind the target, where one exists in closed form.
    pub fn gmm(&self) -> Option<GmmMeasure> {
        match self {
            TargetSpec::Gmm8 => Some(gmm8()),
            TargetSpec::Gmm(g) => Some(g.clone()),
            _ => None,
        }
    }
}

/// The documented 8-mode ring mixture.
pub fn gmm8() -> GmmMeasure {
    let radius = 0.5;
    let sigma2 = 0.05 * 0.05;
    let comps = (0..8)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            GaussianMeasure::isotropic(vec![radius * a.cos(), radius * a.sin()], sigma2)
                .expect("positive variance")
        })
        .collect();
    GmmMeasure::new(vec![0.125; 8], comps).expect("simplex weights")
}

/// Unconditional sample generation for the named 2-D targets.
pub fn generate_target(spec: &TargetSpec, n: usize, stream: &mut Stream) -> Result<Vec<Vec<f64>>> {
    match spec {
        TargetSpec::Gmm8 => {
            let g = gmm8();
            Ok((0..n).map(|_| g.sample_one(stream)).collect())
        }
        TargetSpec::Gmm(g) => Ok((0..n).map(|_| g.sample_one(stream)).collect()),
        TargetSpec::Moons => Ok((0..n)
            .map(|_| {
                let theta = stream.uniform_in(0.0, std::f64::consts::PI);
                let lower = stream.uniform() < 0.5;
                let (mut x, mut y) = if lower {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                } else {
                    (theta.cos(), theta.sin())
                };
                x += 0.05 * stream.standard_normal() - 0.5;
                y += 0.05 * stream.standard_normal() - 0.25;
                vec![x, y]
            })
            .collect()),
        TargetSpec::Spirals => Ok((0..n)
            .map(|_| {
                let u = stream.uniform().sqrt();
                let arm = if stream.uniform() < 0.5 { 0.0 } else { 1.0 };
                let theta = 3.0 * std::f64::consts::PI * u + std::f64::consts::PI * arm;
                let r = u;
                vec![
                    r * theta.cos() + 0.02 * stream.standard_normal(),
                    r * theta.sin() + 0.02 * stream.standard_normal(),
                ]
            })
            .collect()),
        TargetSpec::BayesLinear(_) => Err(Error::InvalidArgument(
            "conditional target needs train_bayes".into(),
        )),
    }
}

/// How latent and data samples get coupled during training.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingMode {
    Independent,
    MinibatchOt,
    Lipman { r: f64 },
    BayesProduct,
    BayesWbeta { beta: f64 },
}

/// Full training configuration. `Default` carries the documented defaults;
/// the config file and CLI flags override fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub target: TargetSpec,
    pub coupling: CouplingMode,
    /// SGD batch size `N_b`.
    pub batch_size: usize,
    /// OT batch size `N_bOT`; must be a multiple of `N_b` in minibatch mode.
    pub ot_batch_size: usize,
    /// Epochs `N_e`.
    pub epochs: usize,
    /// Target sample budget `N_t`.
    pub n_train: usize,
    pub hidden: Vec<usize>,
    pub k_time: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: Seed,
    /// Time clip `eps`: training times are uniform on `[eps, 1-eps]`.
    pub time_clip: f64,
}

impl TrainConfig {
    pub fn defaults(target: TargetSpec, coupling: CouplingMode, seed: Seed) -> TrainConfig {
        TrainConfig {
            target,
            coupling,
            batch_size: 256,
            ot_batch_size: 256,
            epochs: 8,
            n_train: 16384,
            hidden: vec![128, 128, 128],
            k_time: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            time_clip: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.n_train == 0 {
            return Err(Error::InvalidArgument("counts must be >= 1".into()));
        }
        if self.n_train % self.batch_size != 0 {
            return Err(Error::InvalidArgument(
                "n_train must be a multiple of batch_size".into(),
            ));
        }
        if self.coupling == CouplingMode::MinibatchOt
            || matches!(self.coupling, CouplingMode::BayesWbeta { .. })
        {
            if self.ot_batch_size % self.batch_size != 0 {
                return Err(Error::InvalidArgument(
                    "ot_batch_size must be a multiple of batch_size".into(),
                ));
            }
            if self.n_train % self.ot_batch_size != 0 {
                return Err(Error::InvalidArgument(
                    "n_train must be a multiple of ot_batch_size".into(),
                ));
            }
            if self.ot_batch_size > crate::transport::MAX_EXACT_ATOMS {
                return Err(Error::SupportTooLarge(
                    self.ot_batch_size,
                    crate::transport::MAX_EXACT_ATOMS,
                ));
            }
        }
        if let CouplingMode::Lipman { r } = self.coupling {
            if !(0.0 < r && r < 1.0) {
                return Err(Error::InvalidArgument("lipman r outside (0,1)".into()));
            }
        }
        if let CouplingMode::BayesWbeta { beta } = self.coupling {
            if !(beta > 0.0) {
                return Err(Error::InvalidArgument("beta must be positive".into()));
            }
        }
        if !(self.time_clip > 0.0 && self.time_clip < 0.5) {
            return Err(Error::InvalidArgument("time_clip outside (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Per-step loss values of a training run.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub losses: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl LossReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn running_mean(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }

    /// `step,loss` rows; wall clock intentionally excluded so that reruns
    /// are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i, crate::csvio::format_f64(*l)));
        }
        out
    }
}

/// Deterministic chunk-parallel mean-loss / mean-gradient evaluation:
/// chunks are processed independently and combined in index order.
fn batch_loss_grad<F>(n: usize, p: usize, per_item: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync,
{
    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<(f64, Vec<f64>)> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; p];
            let mut loss = 0.0;
            for &i in chunk {
                loss += per_item(i, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![0.0; p];
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        linalg::axpy(&mut grad, 1.0, g);
    }
    loss /= n as f64;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged);
    }
    Ok((loss, grad))
}

/// Product-coupling flow-matching loss and gradient:
/// `mean_i || u(t_i, e_{t_i}(x0_i, x1_i)) - (x1_i - x0_i) ||^2`.
pub fn fm_loss_product(
    net: &Mlp,
    x0s: &[Vec<f64>],
    x1s: &[Vec<f64>],
    ts: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if x0s.len() != x1s.len() || x0s.len() != ts.len() || x0s.is_empty() {
        return Err(Error::InvalidArgument("batch size mismatch".into()));
    }
    let n = x0s.len() as f64;
    batch_loss_grad(x0s.len(), net.param_count(), |i, grad| {
        let xt = linalg::lerp(&x0s[i], &x1s[i], ts[i]);
        let target = linalg::sub(&x1s[i], &x0s[i]);
        let out = net.forward(ts[i], &xt, None);
        let resid = linalg::sub(&out, &target);
        let cot = linalg::scale(&resid, 2.0 / n);
        net.vjp_accumulate(ts[i], &xt, None, &cot, grad);
        linalg::dot(&resid, &resid)
    })
}

/// Loss value of [`fm_loss_product`] for an arbitrary field (oracle tests).
pub fn fm_product_residual<F>(field: F, x0s: &[Vec<f64>], x1s: &[Vec<f64>], ts: &[f64]) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut loss = 0.0;
    for ((x0, x1), &t) in x0s.iter().zip(x1s).zip(ts) {
        let xt = linalg::lerp(x0, x1, t);
        let v = field(t, &xt)?;
        let target = linalg::sub(x1, x0);
        loss += linalg::dist2(&v, &target);
    }
    Ok(loss / x0s.len() as f64)
}

/// Tractable kernel-path loss:
/// `mean_i || u(t_i, (1 - t_i r) z_i + t_i y_i) - (y_i - r z_i) ||^2`
/// with `z ~ N(0, I)` and `y` from the target.
pub fn fm_loss_lipman(
    net: &Mlp,
    r: f64,
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
    ts: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !(0.0 < r && r < 1.0) {
        return Err(Error::InvalidArgument("r outside (0,1)".into()));
    }
    if ys.len() != zs.len() || ys.len() != ts.len() || ys.is_empty() {
        return Err(Error::InvalidArgument("batch size mismatch".into()));
    }
    let n = ys.len() as f64;
    batch_loss_grad(ys.len(), net.param_count(), |i, grad| {
        let t = ts[i];
        let xt: Vec<f64> = zs[i]
            .iter()
            .zip(&ys[i])
            .map(|(z, y)| (1.0 - t * r) * z + t * y)
            .collect();
        let target: Vec<f64> = ys[i].iter().zip(&zs[i]).map(|(y, z)| y - r * z).collect();
        let out = net.forward(t, &xt, None);
        let resid = linalg::sub(&out, &target);
        let cot = linalg::scale(&resid, 2.0 / n);
        net.vjp_accumulate(t, &xt, None, &cot, grad);
        linalg::dot(&resid, &resid)
    })
}

/// Loss value of [`fm_loss_lipman`] for an arbitrary field.
pub fn fm_lipman_residual<F>(
    field: F,
    r: f64,
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
    ts: &[f64],
) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut loss = 0.0;
    for ((y, z), &t) in ys.iter().zip(zs).zip(ts) {
        let xt: Vec<f64> = z
            .iter()
            .zip(y)
            .map(|(zi, yi)| (1.0 - t * r) * zi + t * yi)
            .collect();
        let target: Vec<f64> = y.iter().zip(z).map(|(yi, zi)| yi - r * zi).collect();
        let v = field(t, &xt)?;
        loss += linalg::dist2(&v, &target);
    }
    Ok(loss / ys.len() as f64)
}

/// One coupled quadruple `(w0, x0, w1, x1)` on the product space.
#[derive(Debug, Clone)]
pub struct CondQuad {
    pub w0: Vec<f64>,
    pub x0: Vec<f64>,
    pub w1: Vec<f64>,
    pub x1: Vec<f64>,
}

/// Bayesian conditional flow-matching loss: the network sees
/// `(t, e_t(x0, x1))` conditioned on `e_t(w0, w1)` and regresses the
/// x-block residual `x1 - x0` (the condition-block velocity is identically
/// zero by construction and not parametrized).
pub fn cfm_loss_bayes(net: &Mlp, quads: &[CondQuad], ts: &[f64]) -> Result<(f64, Vec<f64>)> {
    if quads.len() != ts.len() || quads.is_empty() {
        return Err(Error::InvalidArgument("batch size mismatch".into()));
    }
    let n = quads.len() as f64;
    batch_loss_grad(quads.len(), net.param_count(), |i, grad| {
        let q = &quads[i];
        let t = ts[i];
        let xt = linalg::lerp(&q.x0, &q.x1, t);
        let wt = linalg::lerp(&q.w0, &q.w1, t);
        let target = linalg::sub(&q.x1, &q.x0);
        let out = net.forward(t, &xt, Some(&wt));
        let resid = linalg::sub(&out, &target);
        let cot = linalg::scale(&resid, 2.0 / n);
        net.vjp_accumulate(t, &xt, Some(&wt), &cot, grad);
        linalg::dot(&resid, &resid)
    })
}

/// Loss value of [`cfm_loss_bayes`] for an arbitrary conditional field.
pub fn cfm_residual<F>(field: F, quads: &[CondQuad], ts: &[f64]) -> Result<f64>
where
    F: Fn(f64, &[f64], &[f64]) -> Result<Vec<f64>>,
{
    let mut loss = 0.0;
    for (q, &t) in quads.iter().zip(ts) {
        let xt = linalg::lerp(&q.x0, &q.x1, t);
        let wt = linalg::lerp(&q.w0, &q.w1, t);
        let v = field(t, &xt, &wt)?;
        let target = linalg::sub(&q.x1, &q.x0);
        loss += linalg::dist2(&v, &target);
    }
    Ok(loss / quads.len() as f64)
}

fn draw_times(stream: &mut Stream, n: usize, eps: f64) -> Vec<f64> {
    (0..n).map(|_| stream.uniform_in(eps, 1.0 - eps)).collect()
}

fn draw_latents(stream: &mut Stream, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| stream.standard_normal_vec(d)).collect()
}

fn epoch_order(stream: &mut Stream, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut idx);
    idx
}

/// Product-coupling training loop: per epoch, per data block of `N_b`, draw
/// fresh latents and times and take one optimizer step.
pub fn train_product(config: &TrainConfig) -> Result<(Mlp, LossReport)> {
    config.validate()?;
    let started = std::time::Instant::now();
    let d = config.target.data_dim();
    let mut data_stream = Stream::new(config.seed, "train/data");
    let data = generate_target(&config.target, config.n_train, &mut data_stream)?;

    let mut net = Mlp::new(d, 0, &config.hidden, config.k_time, config.seed)?;
    let mut adam = adam_for(config, net.param_count());
    let mut latent = Stream::new(config.seed, "train/latent");
    let mut tstream = Stream::new(config.seed, "train/t");
    let mut shuffle = Stream::new(config.seed, "train/shuffle");
    let mut losses = Vec::new();

    let lipman_r = match config.coupling {
        CouplingMode::Independent => None,
        CouplingMode::Lipman { r } => Some(r),
        _ => {
            return Err(Error::InvalidArgument(
                "train_product handles independent / lipman couplings".into(),
            ))
        }
    };

    for _epoch in 0..config.epochs {
        let order = epoch_order(&mut shuffle, config.n_train);
        for block in order.chunks(config.batch_size) {
            let x1s: Vec<Vec<f64>> = block.iter().map(|&i| data[i].clone()).collect();
            let zs = draw_latents(&mut latent, block.len(), d);
            let ts = draw_times(&mut tstream, block.len(), config.time_clip);
            let (loss, grad) = match lipman_r {
                None => fm_loss_product(&net, &zs, &x1s, &ts)?,
                Some(r) => fm_loss_lipman(&net, r, &x1s, &zs, &ts)?,
            };
            adam.step(net.params_mut(), &grad)?;
            losses.push(loss);
        }
    }
    Ok((
        net,
        LossReport {
            losses,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// The exact assignment behind one minibatch-OT outer step: pairs latent
/// `i` with data index `perm[i]` inside the block.
pub fn minibatch_pairing(zs: &[Vec<f64>], xs: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(solve_assignment(zs, xs)?.0)
}

/// Minibatch-OT training loop: per outer block of `N_bOT`, draw latents,
/// solve the exact assignment against the next data block, then run
/// `N_bOT / N_b` inner optimizer steps over the matched pairs.
pub fn train_minibatch_ot(config: &TrainConfig) -> Result<(Mlp, LossReport)> {
    config.validate()?;
    if config.coupling != CouplingMode::MinibatchOt {
        return Err(Error::InvalidArgument("coupling must be minibatch_ot".into()));
    }
    let started = std::time::Instant::now();
    let d = config.target.data_dim();
    let mut data_stream = Stream::new(config.seed, "train/data");
    let data = generate_target(&config.target, config.n_train, &mut data_stream)?;

    let mut net = Mlp::new(d, 0, &config.hidden, config.k_time, config.seed)?;
    let mut adam = adam_for(config, net.param_count());
    let mut latent = Stream::new(config.seed, "train/latent");
    let mut tstream = Stream::new(config.seed, "train/t");
    let mut shuffle = Stream::new(config.seed, "train/shuffle");
    let mut losses = Vec::new();

    for _epoch in 0..config.epochs {
        let order = epoch_order(&mut shuffle, config.n_train);
        for ot_block in order.chunks(config.ot_batch_size) {
            let xs: Vec<Vec<f64>> = ot_block.iter().map(|&i| data[i].clone()).collect();
            let zs = draw_latents(&mut latent, ot_block.len(), d);
            let perm = minibatch_pairing(&zs, &xs)?;
            let matched: Vec<Vec<f64>> = perm.iter().map(|&j| xs[j].clone()).collect();
            for s in 0..ot_block.len() / config.batch_size {
                let lo = s * config.batch_size;
                let hi = lo + config.batch_size;
                let ts = draw_times(&mut tstream, config.batch_size, config.time_clip);
                let (loss, grad) =
                    fm_loss_product(&net, &zs[lo..hi], &matched[lo..hi], &ts)?;
                adam.step(net.params_mut(), &grad)?;
                losses.push(loss);
            }
        }
    }
    Ok((
        net,
        LossReport {
            losses,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Conditional training on explicit `(w, x)` pairs. The two supported
/// couplings:
/// - `BayesProduct`: quadruples `(w_i, z_i, w_i, x_i)` with fresh
///   `z ~ N(0, I)` (the condition never moves);
/// - `BayesWbeta`: per outer block, exact assignment between
///   `{(w_i, z_i)}` and `{(w_j, x_j)}` under
///   `d_beta = beta ||w - w'||^2 + ||. - .||^2`, then inner steps over the
///   matched quadruples.
pub fn train_bayes_pairs(
    pairs: &[(Vec<f64>, Vec<f64>)],
    config: &TrainConfig,
) -> Result<(Mlp, LossReport)> {
    config.validate()?;
    if pairs.len() != config.n_train {
        return Err(Error::InvalidArgument("pairs must have n_train entries".into()));
    }
    let started = std::time::Instant::now();
    let m = pairs[0].0.len();
    let d = pairs[0].1.len();
    let mut net = Mlp::new(d, m, &config.hidden, config.k_time, config.seed)?;
    let mut adam = adam_for(config, net.param_count());
    let mut latent = Stream::new(config.seed, "train/latent");
    let mut tstream = Stream::new(config.seed, "train/t");
    let mut shuffle = Stream::new(config.seed, "train/shuffle");
    let mut losses = Vec::new();

    match config.coupling {
        CouplingMode::BayesProduct => {
            for _epoch in 0..config.epochs {
                let order = epoch_order(&mut shuffle, config.n_train);
                for block in order.chunks(config.batch_size) {
                    let zs = draw_latents(&mut latent, block.len(), d);
                    let quads: Vec<CondQuad> = block
                        .iter()
                        .zip(&zs)
                        .map(|(&i, z)| CondQuad {
                            w0: pairs[i].0.clone(),
                            x0: z.clone(),
                            w1: pairs[i].0.clone(),
                            x1: pairs[i].1.clone(),
                        })
                        .collect();
                    let ts = draw_times(&mut tstream, block.len(), config.time_clip);
                    let (loss, grad) = cfm_loss_bayes(&net, &quads, &ts)?;
                    adam.step(net.params_mut(), &grad)?;
                    losses.push(loss);
                }
            }
        }
        CouplingMode::BayesWbeta { beta } => {
            for _epoch in 0..config.epochs {
                let order = epoch_order(&mut shuffle, config.n_train);
                for ot_block in order.chunks(config.ot_batch_size) {
                    let zs = draw_latents(&mut latent, ot_block.len(), d);
                    // assignment in the sqrt(beta)-scaled product space
                    let scaled_src: Vec<Vec<f64>> = ot_block
                        .iter()
                        .zip(&zs)
                        .map(|(&i, z)| scaled_point(&pairs[i].0, z, beta))
                        .collect();
                    let scaled_dst: Vec<Vec<f64>> = ot_block
                        .iter()
                        .map(|&i| scaled_point(&pairs[i].0, &pairs[i].1, beta))
                        .collect();
                    let perm = solve_assignment(&scaled_src, &scaled_dst)?.0;
                    let quads: Vec<CondQuad> = ot_block
                        .iter()
                        .zip(&zs)
                        .zip(&perm)
                        .map(|((&i, z), &j)| CondQuad {
                            w0: pairs[i].0.clone(),
                            x0: z.clone(),
                            w1: pairs[ot_block[j]].0.clone(),
                            x1: pairs[ot_block[j]].1.clone(),
                        })
                        .collect();
                    for s in 0..ot_block.len() / config.batch_size {
                        let lo = s * config.batch_size;
                        let hi = lo + config.batch_size;
                        let ts = draw_times(&mut tstream, config.batch_size, config.time_clip);
                        let (loss, grad) = cfm_loss_bayes(&net, &quads[lo..hi], &ts)?;
                        adam.step(net.params_mut(), &grad)?;
                        losses.push(loss);
                    }
                }
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "train_bayes handles bayes_product / bayes_wbeta couplings".into(),
            ))
        }
    }
    Ok((
        net,
        LossReport {
            losses,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Conditional training against the configured inverse problem: simulates
/// `(y, x)` pairs and delegates to [`train_bayes_pairs`].
pub fn train_bayes(config: &TrainConfig) -> Result<(Mlp, LossReport)> {
    let problem = match &config.target {
        TargetSpec::BayesLinear(p) => p.clone(),
        _ => {
            return Err(Error::InvalidArgument(
                "train_bayes needs the inverse-problem target".into(),
            ))
        }
    };
    let sims = crate::bayes::simulate(&problem, config.n_train, config.seed)?;
    train_bayes_pairs(&sims, config)
}

fn scaled_point(w: &[f64], x: &[f64], beta: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(w.len() + x.len());
    p.extend(w.iter().map(|v| beta.sqrt() * v));
    p.extend_from_slice(x);
    p
}

fn adam_for(config: &TrainConfig, param_count: usize) -> AdamState {
    let mut adam = AdamState::new(param_count, config.learning_rate);
    adam.beta1 = config.adam_beta1;
    adam.beta2 = config.adam_beta2;
    adam.eps = config.adam_eps;
    adam
}
