//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are `[A-Za-z0-9_]+`; duplicates and unknown keys are rejected so
//! typos fail loudly instead of silently training with defaults. Every run
//! writes back its fully-resolved configuration; re-running from that echo
//! reproduces the run bit for bit.

use std::collections::BTreeMap;

use crate::bayes::LinearInverseProblem;
use crate::rng::Seed;
use crate::training::{CouplingMode, TargetSpec, TrainConfig};
use crate::{Error, Result};

/// Documented seed for the benchmark inverse-problem prior modes.
pub const DEFAULT_PRIOR_SEED: u64 = 17;

/// Parsed but untyped configuration.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

pub fn parse_kv(text: &str) -> Result<RawConfig> {
    let mut entries = BTreeMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Parse(format!("line {}: bad key {key:?}", lineno + 1)));
        }
        if value.is_empty() {
            return Err(Error::Parse(format!("line {}: empty value", lineno + 1)));
        }
        if entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Parse(format!("duplicate key {key:?}")));
        }
    }
    Ok(RawConfig { entries })
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{key}: bad float {v:?}")))
            })
            .transpose()
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("{key}: bad integer {v:?}")))
            })
            .transpose()
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Parse(format!("{key}: bad integer {v:?}")))
            })
            .transpose()
    }
}

/// Builds a full training configuration from parsed keys, applying the
/// documented defaults for everything absent. Rejects unknown keys and
/// coupling-parameter combinations that do not belong together.
pub fn train_config_from_raw(mut raw: RawConfig) -> Result<TrainConfig> {
    let prior_seed = raw.take_u64("prior_seed")?.unwrap_or(DEFAULT_PRIOR_SEED);
    let target = match raw.take("target").as_deref() {
        None | Some("gmm8") => TargetSpec::Gmm8,
        Some("moons") => TargetSpec::Moons,
        Some("spirals") => TargetSpec::Spirals,
        Some("bayes_linear") => {
            TargetSpec::BayesLinear(LinearInverseProblem::benchmark(Seed(prior_seed)))
        }
        Some(other) => {
            return Err(Error::Parse(format!(
                "target {other:?} is not one of gmm8, moons, spirals, bayes_linear"
            )))
        }
    };

    let r = raw.take_f64("r")?;
    let beta = raw.take_f64("beta")?;
    let coupling = match raw.take("coupling").as_deref() {
        None | Some("independent") => CouplingMode::Independent,
        Some("minibatch_ot") => CouplingMode::MinibatchOt,
        Some("lipman") => CouplingMode::Lipman { r: r.unwrap_or(0.9) },
        Some("bayes_product") => CouplingMode::BayesProduct,
        Some("bayes_wbeta") => CouplingMode::BayesWbeta {
            beta: beta.unwrap_or(100.0),
        },
        Some(other) => {
            return Err(Error::Parse(format!(
                "coupling {other:?} is not one of independent, minibatch_ot, lipman, bayes_product, bayes_wbeta"
            )))
        }
    };
    if r.is_some() && !matches!(coupling, CouplingMode::Lipman { .. }) {
        return Err(Error::Parse("key r only applies to coupling = lipman".into()));
    }
    if beta.is_some() && !matches!(coupling, CouplingMode::BayesWbeta { .. }) {
        return Err(Error::Parse(
            "key beta only applies to coupling = bayes_wbeta".into(),
        ));
    }

    let seed = Seed(raw.take_u64("seed")?.unwrap_or(0));
    let mut config = TrainConfig::defaults(target, coupling, seed);
    if let Some(v) = raw.take_usize("batch_size")? {
        config.batch_size = v;
    }
    if let Some(v) = raw.take_usize("ot_batch_size")? {
        config.ot_batch_size = v;
    }
    if let Some(v) = raw.take_usize("epochs")? {
        config.epochs = v;
    }
    if let Some(v) = raw.take_usize("samples")? {
        config.n_train = v;
    }
    if let Some(v) = raw.take("hidden") {
        config.hidden = v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("hidden: bad width {p:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
    }
    if let Some(v) = raw.take_usize("k_time")? {
        config.k_time = v;
    }
    if let Some(v) = raw.take_f64("lr")? {
        config.learning_rate = v;
    }
    if let Some(v) = raw.take_f64("adam_beta1")? {
        config.adam_beta1 = v;
    }
    if let Some(v) = raw.take_f64("adam_beta2")? {
        config.adam_beta2 = v;
    }
    if let Some(v) = raw.take_f64("adam_eps")? {
        config.adam_eps = v;
    }
    if let Some(v) = raw.take_f64("time_clip")? {
        config.time_clip = v;
    }
    if let Some(key) = raw.entries.keys().next() {
        return Err(Error::Parse(format!("unknown key {key:?}")));
    }
    config.validate()?;
    Ok(config)
}

/// Canonical echo of a configuration; parsing it back yields the same
/// configuration.
pub fn resolved_config(config: &TrainConfig) -> String {
    let mut out = String::new();
    let target = match &config.target {
        TargetSpec::Gmm8 => "gmm8",
        TargetSpec::Moons => "moons",
        TargetSpec::Spirals => "spirals",
        TargetSpec::BayesLinear(_) => "bayes_linear",
        TargetSpec::Gmm(_) => "gmm8", // programmatic targets echo the default name
    };
    out.push_str(&format!("target = {target}\n"));
    match config.coupling {
        CouplingMode::Independent => out.push_str("coupling = independent\n"),
        CouplingMode::MinibatchOt => out.push_str("coupling = minibatch_ot\n"),
        CouplingMode::Lipman { r } => {
            out.push_str("coupling = lipman\n");
            out.push_str(&format!("r = {r}\n"));
        }
        CouplingMode::BayesProduct => out.push_str("coupling = bayes_product\n"),
        CouplingMode::BayesWbeta { beta } => {
            out.push_str("coupling = bayes_wbeta\n");
            out.push_str(&format!("beta = {beta}\n"));
        }
    }
    out.push_str(&format!("batch_size = {}\n", config.batch_size));
    out.push_str(&format!("ot_batch_size = {}\n", config.ot_batch_size));
    out.push_str(&format!("epochs = {}\n", config.epochs));
    out.push_str(&format!("samples = {}\n", config.n_train));
    let hidden: Vec<String> = config.hidden.iter().map(|w| w.to_string()).collect();
    out.push_str(&format!("hidden = {}\n", hidden.join(",")));
    out.push_str(&format!("k_time = {}\n", config.k_time));
    out.push_str(&format!("lr = {}\n", config.learning_rate));
    out.push_str(&format!("adam_beta1 = {}\n", config.adam_beta1));
    out.push_str(&format!("adam_beta2 = {}\n", config.adam_beta2));
    out.push_str(&format!("adam_eps = {}\n", config.adam_eps));
    out.push_str(&format!("seed = {}\n", config.seed.0));
    out.push_str(&format!("time_clip = {}\n", config.time_clip));
    out
}
