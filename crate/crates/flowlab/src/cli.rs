//! Command-line orchestration: train / sample / likelihood / eval / bayes /
//! diffusion / selftest over config files, with CSV and checkpoint
//! emission.
//!
//! Exit codes: 0 success, 1 validation error (arguments, config, files),
//! 2 numerical failure (divergence or blow-up). All randomness is
//! controlled by `--seed` (or the config seed); re-running a command with
//! identical inputs produces byte-identical outputs. See `docs/cli.md` for
//! the full flag and format reference.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_kv, resolved_config, train_config_from_raw};
use crate::csvio;
use crate::diffusion::{self, ScoreSource, VpSchedule};
use crate::fields::{self, LatentTarget, VelocityField};
use crate::measures::DiscreteMeasure;
use crate::nn::Mlp;
use crate::odeint::{self, Method, SolverSpec};
use crate::rng::{derive, Seed, Stream};
use crate::training::{self, CouplingMode, TargetSpec, TrainConfig};
use crate::transport;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowlab",
    version,
    about = "Generative-flow laboratory: flow matching, optimal transport couplings, CNFs and score-based diffusion on low-dimensional targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a velocity field from a config file; flags override config keys.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// independent | minibatch_ot | lipman | bayes_product | bayes_wbeta
        #[arg(long)]
        coupling: Option<String>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Run directory root.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Run name; outputs land in <out>/<name>/.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Transport latent samples through a trained field.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// euler | rk4
        #[arg(long, default_value = "rk4")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Integration clip: solve over [eps, 1-eps].
        #[arg(long, default_value_t = odeint::DEFAULT_TIME_CLIP)]
        eps: f64,
        /// Condition vector "v1,v2,..." for conditional checkpoints.
        #[arg(long)]
        cond: Option<String>,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Negative log-likelihood of a data CSV under the time-reversed field.
    Likelihood {
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV of points, one row per sample.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Exact-OT cost tables over a beta sweep (CSV: instance,beta,cost,w_mass).
    EvalOt {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic field grids (CSV: t,x,v,p,residual) for plotting.
    EvalField {
        /// gaussian-latent | lipman | map
        #[arg(long, default_value = "gaussian-latent")]
        kind: String,
        #[arg(long, default_value_t = 0.9)]
        r: f64,
        #[arg(long, default_value_t = 19)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inverse-problem commands.
    Bayes {
        #[command(subcommand)]
        cmd: BayesCmd,
    },
    /// VP-diffusion commands.
    Diffusion {
        #[command(subcommand)]
        cmd: DiffusionCmd,
    },
    /// Run the quick invariant suite.
    Selftest {
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Subcommand)]
enum BayesCmd {
    /// Draw (y, x) pairs from the benchmark problem (CSV rows y..,x..).
    Simulate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic posterior mixture for one observation
    /// (CSV: component,weight,m_1..m_d,var_1..var_d).
    Posterior {
        /// Observation "y1,y2,...".
        #[arg(long)]
        y: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained conditional checkpoint against the analytic
    /// posterior (CSV: y_id,coord,metric,value).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out observations to test.
        #[arg(long, default_value_t = 16)]
        n_obs: usize,
        /// Samples per observation.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DiffusionCmd {
    /// Train a score network on the built-in 1-D two-mode mixture.
    Train {
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value = "diffusion")]
        name: String,
    },
    /// Sample by reverse SDE (default) or probability-flow ODE (--ode).
    Sample {
        /// Trained score checkpoint; omit for the analytic score.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        ode: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses and executes one invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged | Error::BlowUp(_) | Error::AdjointBlowUp => 2,
                _ => 1,
            }
        }
    }
}

fn write_or_print(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, content)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number {p:?}")))
        })
        .collect()
}

fn solver_from(method: &str, steps: usize) -> Result<SolverSpec> {
    let method = match method {
        "euler" => Method::Euler,
        "rk4" => Method::Rk4,
        other => {
            return Err(Error::InvalidArgument(format!(
                "method {other:?} is not euler or rk4"
            )))
        }
    };
    Ok(SolverSpec { method, steps })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            coupling,
            r,
            beta,
            epochs,
            samples,
            out,
            name,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut raw = parse_kv(&text)?;
            if let Some(s) = seed {
                raw.set("seed", s.to_string());
            }
            if let Some(c) = coupling {
                raw.set("coupling", c);
            }
            if let Some(v) = r {
                raw.set("r", v.to_string());
            }
            if let Some(v) = beta {
                raw.set("beta", v.to_string());
            }
            if let Some(v) = epochs {
                raw.set("epochs", v.to_string());
            }
            if let Some(v) = samples {
                raw.set("samples", v.to_string());
            }
            let config = train_config_from_raw(raw)?;
            run_training(&config, &out.join(name))
        }
        Command::Sample {
            ckpt,
            n,
            steps,
            method,
            seed,
            eps,
            cond,
            out,
        } => {
            let net = Mlp::load(&ckpt)?;
            let cond = cond.map(|c| parse_vector(&c)).transpose()?;
            if net.cond_dim() != cond.as_ref().map_or(0, |c| c.len()) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint expects a condition of dimension {}",
                    net.cond_dim()
                )));
            }
            let field = VelocityField::Neural { net, cond };
            let spec = solver_from(&method, steps)?;
            let samples = odeint::sample_flow(&field, n, &spec, Seed(seed), eps)?;
            write_or_print(&out, &csvio::write_points(&samples))
        }
        Command::Likelihood { ckpt, data, steps } => {
            let net = Mlp::load(&ckpt)?;
            if net.cond_dim() != 0 {
                return Err(Error::InvalidArgument(
                    "likelihood needs an unconditional checkpoint".into(),
                ));
            }
            let points = csvio::parse_points(&std::fs::read_to_string(&data)?)?;
            if points[0].len() != net.data_dim() {
                return Err(Error::InvalidArgument(format!(
                    "data dimension {} does not match checkpoint {}",
                    points[0].len(),
                    net.data_dim()
                )));
            }
            // trained fields transport latent -> data; the likelihood runs
            // the reversed field data -> latent
            let field = fields::reverse_field(VelocityField::neural(net));
            let nll = odeint::cnf_nll(&field, &points, &solver_from("rk4", steps)?)?;
            println!("nll = {nll}");
            Ok(())
        }
        Command::EvalOt { out } => eval_ot(&out),
        Command::EvalField { kind, r, grid, out } => eval_field(&kind, r, grid, &out),
        Command::Bayes { cmd } => bayes_cmd(cmd),
        Command::Diffusion { cmd } => diffusion_cmd(cmd),
        Command::Selftest { quick: _ } => selftest(),
    }
}

/// Runs the configured training loop and writes the run directory:
/// `config.resolved`, `model.bin`, `loss.csv`, `samples.csv`.
fn run_training(config: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let conditional = matches!(config.target, TargetSpec::BayesLinear(_));
    let (net, report) = match &config.coupling {
        CouplingMode::Independent | CouplingMode::Lipman { .. } => training::train_product(config)?,
        CouplingMode::MinibatchOt => training::train_minibatch_ot(config)?,
        CouplingMode::BayesProduct | CouplingMode::BayesWbeta { .. } => {
            if !conditional {
                return Err(Error::InvalidArgument(
                    "bayes couplings need target = bayes_linear".into(),
                ));
            }
            training::train_bayes(config)?
        }
    };
    std::fs::write(dir.join("config.resolved"), resolved_config(config))?;
    net.save(&dir.join("model.bin"))?;
    std::fs::write(dir.join("loss.csv"), report.to_csv())?;

    let spec = SolverSpec::rk4(100);
    let sample_seed = derive(config.seed, 0x5a);
    let samples = if conditional {
        let problem = match &config.target {
            TargetSpec::BayesLinear(p) => p.clone(),
            _ => unreachable!(),
        };
        let y = crate::bayes::simulate(&problem, 1, derive(config.seed, 0x7e))?[0].0.clone();
        let field = VelocityField::Neural {
            net,
            cond: Some(y),
        };
        odeint::sample_flow(&field, 512, &spec, sample_seed, config.time_clip)?
    } else {
        let field = VelocityField::neural(net);
        odeint::sample_flow(&field, 512, &spec, sample_seed, config.time_clip)?
    };
    std::fs::write(dir.join("samples.csv"), csvio::write_points(&samples))?;
    eprintln!(
        "trained {} steps, final loss {:.6}, outputs in {}",
        report.steps(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

/// The conditional-transport showcase instance: matched condition marginals
/// where plain W2 and the conditional distance disagree.
fn eval_ot(out: &Option<PathBuf>) -> Result<()> {
    let mu = DiscreteMeasure::new(vec![vec![0.0, 3.0], vec![1.0, 0.0]], vec![0.5, 0.5])?;
    let nu = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 3.0]], vec![0.5, 0.5])?;
    let mut csv = String::from("instance,beta,cost,w_mass\n");
    for beta in [1.0, 10.0, 1e2, 1e3, 1e6] {
        let r = transport::w_beta(&mu, &nu, 1, beta)?;
        let wm = transport::condition_displacement(&r.plan, 1);
        csv.push_str(&format!(
            "crossing,{},{},{}\n",
            csvio::format_f64(beta),
            csvio::format_f64(r.cost),
            csvio::format_f64(wm)
        ));
    }
    // a seeded matched-marginal instance for contrast
    let mut s = Stream::new(Seed(1), "eval-ot");
    let mk = |s: &mut Stream| -> Result<DiscreteMeasure> {
        let mut pts = Vec::new();
        for w in [0.0, 1.0] {
            for _ in 0..3 {
                pts.push(vec![w, s.standard_normal()]);
            }
        }
        DiscreteMeasure::from_points(pts)
    };
    let mu = mk(&mut s)?;
    let nu = mk(&mut s)?;
    for beta in [1.0, 10.0, 1e2, 1e3, 1e6] {
        let r = transport::w_beta(&mu, &nu, 1, beta)?;
        let wm = transport::condition_displacement(&r.plan, 1);
        csv.push_str(&format!(
            "random,{},{},{}\n",
            csvio::format_f64(beta),
            csvio::format_f64(r.cost),
            csvio::format_f64(wm)
        ));
    }
    write_or_print(out, &csv)
}

/// Grid dump of an analytic field: `t, x, v, p, residual`.
fn eval_field(kind: &str, r: f64, grid: usize, out: &Option<PathBuf>) -> Result<()> {
    if grid < 2 {
        return Err(Error::InvalidArgument("grid must be >= 2".into()));
    }
    let target = DiscreteMeasure::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5])?;
    type DensityFn = Box<dyn Fn(f64, &[f64]) -> Result<f64>>;
    let (field, density): (VelocityField, DensityFn) = match kind {
        "gaussian-latent" => {
            let t2 = target.clone();
            (
                VelocityField::GaussianLatent(LatentTarget::Discrete(target.clone())),
                Box::new(move |t, x| Ok(fields::gaussian_latent_density(&t2, t, x)?.0)),
            )
        }
        "lipman" => {
            let t2 = target.clone();
            (
                VelocityField::Lipman {
                    r,
                    target: target.clone(),
                },
                Box::new(move |t, x| Ok(fields::lipman_marginal(&t2, r, t)?.log_density(x).exp())),
            )
        }
        "map" => {
            let map = transport::AffineMap::new(
                crate::linalg::mat_from_rows(&[vec![2.0]]),
                vec![1.0],
            );
            (
                VelocityField::Map(map),
                Box::new(move |t, x| {
                    // T_t # N(0,1) for T(x) = 2x + 1: N(t, (1+t)^2)
                    let g = crate::measures::GaussianMeasure::isotropic(
                        vec![t],
                        (1.0 + t) * (1.0 + t),
                    )?;
                    Ok(g.log_density(x).exp())
                }),
            )
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "kind {other:?} is not gaussian-latent, lipman or map"
            )))
        }
    };
    let mut csv = String::from("t,x,v,p,residual\n");
    for it in 0..grid {
        let t = 0.05 + 0.9 * it as f64 / (grid - 1) as f64;
        for ix in 0..grid {
            let x = -2.5 + 5.0 * ix as f64 / (grid - 1) as f64;
            let v = field.eval(t, &[x])?;
            let p = density(t, &[x])?;
            let resid = fields::continuity_residual(&field, &density, t, &[x], 1e-4)?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                csvio::format_f64(t),
                csvio::format_f64(x),
                csvio::format_f64(v[0]),
                csvio::format_f64(p),
                csvio::format_f64(resid)
            ));
        }
    }
    write_or_print(out, &csv)
}

fn bayes_cmd(cmd: BayesCmd) -> Result<()> {
    let problem = crate::bayes::LinearInverseProblem::benchmark(Seed(
        crate::config::DEFAULT_PRIOR_SEED,
    ));
    match cmd {
        BayesCmd::Simulate { n, seed, out } => {
            let sims = crate::bayes::simulate(&problem, n, Seed(seed))?;
            let rows: Vec<Vec<f64>> = sims
                .into_iter()
                .map(|(y, x)| {
                    let mut row = y;
                    row.extend(x);
                    row
                })
                .collect();
            write_or_print(&out, &csvio::write_points(&rows))
        }
        BayesCmd::Posterior { y, out } => {
            let y = parse_vector(&y)?;
            if y.len() != problem.obs_dim() {
                return Err(Error::InvalidArgument(format!(
                    "observation must have dimension {}",
                    problem.obs_dim()
                )));
            }
            let post = crate::bayes::analytic_posterior(&problem, &y)?;
            let mut csv = String::from("component,weight,mean...,var...\n");
            for (k, (w, c)) in post.weights().iter().zip(post.components()).enumerate() {
                let mut row = format!("{k},{}", csvio::format_f64(*w));
                for m in c.mean() {
                    row.push(',');
                    row.push_str(&csvio::format_f64(*m));
                }
                let cov = c.cov_matrix();
                for i in 0..c.dim() {
                    row.push(',');
                    row.push_str(&csvio::format_f64(cov[(i, i)]));
                }
                csv.push_str(&row);
                csv.push('\n');
            }
            write_or_print(&out, &csv)
        }
        BayesCmd::Eval {
            ckpt,
            n_obs,
            n,
            seed,
            out,
        } => {
            let net = Mlp::load(&ckpt)?;
            if net.cond_dim() != problem.obs_dim() || net.data_dim() != problem.data_dim() {
                return Err(Error::InvalidArgument(
                    "checkpoint does not match the benchmark problem dimensions".into(),
                ));
            }
            let ys: Vec<Vec<f64>> = crate::bayes::simulate(&problem, n_obs, derive(Seed(seed), 0xe))?
                .into_iter()
                .map(|(y, _)| y)
                .collect();
            let report = crate::bayes::eval_posterior_fit(
                &net,
                &problem,
                &ys,
                n,
                &SolverSpec::rk4(100),
                Seed(seed),
            )?;
            write_or_print(&out, &report.to_csv())
        }
    }
}

fn diffusion_cmd(cmd: DiffusionCmd) -> Result<()> {
    let schedule = VpSchedule::default_schedule();
    let prior = diffusion::toy_two_mode();
    match cmd {
        DiffusionCmd::Train {
            steps,
            batch,
            lr,
            seed,
            out,
            name,
        } => {
            let dir = out.join(name);
            std::fs::create_dir_all(&dir)?;
            let (net, losses) =
                diffusion_train(&prior, &schedule, steps, batch, lr, Seed(seed))?;
            net.save(&dir.join("model.bin"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", csvio::format_f64(*l)));
            }
            std::fs::write(dir.join("loss.csv"), csv)?;
            eprintln!(
                "trained {steps} steps, final loss {:.6}, outputs in {}",
                losses.last().copied().unwrap_or(f64::NAN),
                dir.display()
            );
            Ok(())
        }
        DiffusionCmd::Sample {
            ckpt,
            n,
            steps,
            ode,
            seed,
            out,
        } => {
            let source = match ckpt {
                Some(path) => ScoreSource::Neural(Mlp::load(&path)?),
                None => ScoreSource::AnalyticGmm(prior),
            };
            let t_min = 1e-3 * schedule.t_max();
            let samples = if ode {
                let field = diffusion::prob_flow_field(source, schedule, t_min);
                odeint::sample_flow(&field, n, &SolverSpec::rk4(steps), Seed(seed), 0.0)?
            } else {
                diffusion::reverse_sde_sample(&source, &schedule, n, steps, Seed(seed), t_min)?
            };
            write_or_print(&out, &csvio::write_points(&samples))
        }
    }
}

/// Plain DSM training loop on a mixture prior (documented defaults:
/// 3x64 net, K = 8 time features, t_min = 1e-3 T).
pub fn diffusion_train(
    prior: &crate::measures::GmmMeasure,
    schedule: &VpSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: Seed,
) -> Result<(Mlp, Vec<f64>)> {
    let d = prior.dim();
    let mut net = Mlp::new(d, 0, &[64, 64, 64], 8, seed)?;
    let mut adam = crate::nn::AdamState::new(net.param_count(), lr);
    let mut data = Stream::new(seed, "dsm/data");
    let mut tstream = Stream::new(seed, "dsm/t");
    let t_min = 1e-3 * schedule.t_max();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let x0s: Vec<Vec<f64>> = (0..batch).map(|_| prior.sample_one(&mut data)).collect();
        let ts: Vec<f64> = (0..batch)
            .map(|_| tstream.uniform_in(t_min, schedule.t_max()))
            .collect();
        let (loss, grad) = diffusion::dsm_loss(&net, schedule, &x0s, &ts, derive(seed, step as u64))?;
        adam.step(net.params_mut(), &grad)?;
        losses.push(loss);
    }
    Ok((net, losses))
}

/// Quick invariant suite: cheap closed-form checks across every module.
fn selftest() -> Result<()> {
    let checks: Vec<(&str, Box<dyn Fn() -> Result<()>>)> = vec![
        ("point mass sampling", Box::new(|| {
            let m = crate::measures::Measure::Discrete(DiscreteMeasure::dirac(vec![0.0]));
            let xs = crate::measures::sample(&m, 3, &mut Stream::new(Seed(1), "st"));
            ensure(xs.iter().all(|x| x[0] == 0.0), "nonzero sample")
        })),
        ("standard normal density at the mode", Box::new(|| {
            let g = crate::measures::GaussianMeasure::standard(1);
            ensure(
                (g.log_density(&[0.0]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14,
                "log density",
            )
        })),
        ("gaussian score", Box::new(|| {
            let g = crate::measures::GaussianMeasure::standard(1);
            ensure((g.score(&[2.0])[0] + 2.0).abs() < 1e-14, "score")
        })),
        ("interpolation endpoints", Box::new(|| {
            ensure(
                fields::interpolate(&[0.0], &[2.0], 0.5) == vec![1.0],
                "midpoint",
            )
        })),
        ("product plan marginals", Box::new(|| {
            let a = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5])?;
            let p = crate::measures::product_plan(&a, &a);
            ensure(p.first_marginal().points() == a.points(), "marginal")
        })),
        ("assignment on identical sets", Box::new(|| {
            let xs = vec![vec![0.0], vec![1.0]];
            let ys = vec![vec![1.0], vec![0.0]];
            ensure(transport::solve_assignment(&xs, &ys)?.1 == 0.0, "cost")
        })),
        ("w_beta at beta = 1 is plain transport", Box::new(|| {
            let mu = DiscreteMeasure::new(vec![vec![0.0, 3.0], vec![1.0, 0.0]], vec![0.5, 0.5])?;
            let nu = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 3.0]], vec![0.5, 0.5])?;
            let a = transport::w_beta(&mu, &nu, 1, 1.0)?.cost;
            let b = transport::solve_discrete_ot(&mu, &nu)?.cost;
            ensure((a - b).abs() < 1e-14, "w_beta")
        })),
        ("tweedie round trip", Box::new(|| {
            let v = fields::score_velocity_convert(0.3, &[0.7], &[-1.1])?;
            let s = fields::velocity_score_convert(0.3, &[0.7], &v)?;
            ensure((s[0] + 1.1).abs() < 1e-12, "round trip")
        })),
        ("lipman kernel vs single-atom marginal", Box::new(|| {
            let t = DiscreteMeasure::dirac(vec![1.5]);
            let a = fields::lipman_marginal_velocity(&t, 0.6, 0.4, &[0.3])?;
            let b = fields::lipman_kernel_velocity(&[1.5], 0.6, 0.4, &[0.3])?;
            ensure((a[0] - b[0]).abs() < 1e-14, "kernel")
        })),
        ("translation map field", Box::new(|| {
            let map = transport::AffineMap::translation(vec![1.0]);
            ensure(
                (fields::map_velocity(&map, 0.5, &[0.3])?[0] - 1.0).abs() < 1e-14,
                "translation",
            )
        })),
        ("adam keeps parameters on zero gradient", Box::new(|| {
            let mut theta = vec![0.25];
            crate::nn::AdamState::new(1, 1e-2).step(&mut theta, &[0.0])?;
            ensure(theta[0] == 0.25, "moved")
        })),
        ("checkpoint round trip", Box::new(|| {
            let net = Mlp::new(2, 0, &[8], 2, Seed(5))?;
            let back = Mlp::from_bytes(&net.to_bytes())?;
            ensure(net.params() == back.params(), "params")
        })),
        ("rk4 constant field", Box::new(|| {
            let f = VelocityField::custom(1, |_, _| vec![2.0]);
            let traj = odeint::integrate(&f, &[0.0], 0.0, 1.0, &SolverSpec::rk4(4))?;
            ensure((traj.endpoint()[0] - 2.0).abs() < 1e-14, "endpoint")
        })),
        ("straightness of a right angle", Box::new(|| {
            let traj = odeint::Trajectory {
                times: vec![0.0, 0.5, 1.0],
                states: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]],
                logdet: None,
            };
            ensure((odeint::straightness(&traj) - 0.5).abs() < 1e-14, "value")
        })),
        ("vp schedule starts at b = 1", Box::new(|| {
            ensure(VpSchedule::default_schedule().b(0.0) == 1.0, "b(0)")
        })),
        ("conditional score vanishes at the kernel mode", Box::new(|| {
            let sch = VpSchedule::default_schedule();
            let b = sch.b(0.4);
            let s = diffusion::conditional_score(&sch, &[b * 0.7], &[0.7], 0.4)?;
            ensure(s[0].abs() < 1e-12, "score")
        })),
        ("field reversal is an involution", Box::new(|| {
            let f = VelocityField::custom(1, |_, _| vec![1.0]);
            let ff = fields::reverse_field(fields::reverse_field(f));
            ensure(ff.eval(0.3, &[0.0])?[0] == 1.0, "involution")
        })),
    ];
    let total = checks.len();
    for (name, check) in checks {
        check().map_err(|e| Error::InvalidArgument(format!("selftest {name:?} failed: {e}")))?;
        println!("ok - {name}");
    }
    println!("selftest: {total} checks passed");
    Ok(())
}

fn ensure(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(what.into()))
    }
}
