//! Flat `key = value` run configuration with dotted sections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use dcl_core::latentspaces::{ConditionalSpec, LatentSpaceSpec, QSpec, Scenario};
use dcl_core::losses::LossKind;
use dcl_core::mixer::MixerConfig;
use dcl_core::netmodels::{AlphaMode, Dhat, OutputHead};
use dcl_core::trainer::{Experiment, NegativeSource, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{}`{key}`: {msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Value { line: Option<usize>, key: String, msg: String },
}

impl ConfigError {
    fn value(line: Option<usize>, key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Value { line, key: key.to_string(), msg: msg.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSetting {
    /// A tenth of the support diameter on every axis.
    Default,
    PerAxis(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DhatSetting {
    /// `Σ (|Δ|/σ)^β` with the conditional's β and σ.
    MatchData,
    Lp { beta: f64, sigma: Vec<f64> },
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub scenario: Scenario,
    pub beta: f64,
    pub sigma: SigmaSetting,
    pub q: QSpec,
    pub mixer_layers: usize,
    pub mixer_slope: f64,
    pub mixer_perturbation: f64,
    pub mixer_bias_scale: f64,
    pub mixer_seed: u64,
    pub head: OutputHead,
    pub dhat: DhatSetting,
    pub alpha_mode: AlphaMode,
    pub loss: LossKind,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_alpha: f64,
    pub negatives: NegativeSource,
    pub eval_every: usize,
    pub clamp: f64,
    pub grad_clip: Option<f64>,
    pub eval_size: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = MixerConfig::new(4);
        Self {
            n: 4,
            scenario: Scenario::BoxSimple,
            beta: 1.0,
            sigma: SigmaSetting::Default,
            q: QSpec::Constant,
            mixer_layers: m.layers,
            mixer_slope: m.slope,
            mixer_perturbation: m.perturbation,
            mixer_bias_scale: m.bias_scale,
            mixer_seed: 0,
            head: OutputHead::Unbounded,
            dhat: DhatSetting::MatchData,
            alpha_mode: t.alpha_mode,
            loss: t.loss,
            batch: t.batch,
            iterations: t.iterations,
            seed: t.seed,
            lr_encoder: t.lr_encoder,
            lr_alpha: t.lr_alpha,
            negatives: t.negative_source,
            eval_every: t.eval_every,
            clamp: t.clamp_hi,
            grad_clip: t.grad_clip,
            eval_size: t.eval_size,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const KEYS: &[&str] = &[
    "space.n",
    "space.scenario",
    "space.rho",
    "space.mean",
    "space.std",
    "space.r_inner",
    "space.r_outer",
    "space.b",
    "conditional.beta",
    "conditional.sigma",
    "conditional.q",
    "conditional.q_low",
    "mixer.layers",
    "mixer.slope",
    "mixer.perturbation",
    "mixer.bias_scale",
    "mixer.seed",
    "model.head",
    "model.dhat",
    "model.dhat_beta",
    "model.dhat_sigma",
    "model.alpha_mode",
    "train.loss",
    "train.batch",
    "train.iterations",
    "train.seed",
    "train.lr_encoder",
    "train.lr_alpha",
    "train.negatives",
    "train.eval_every",
    "train.clamp",
    "train.grad_clip",
    "eval.size",
    "output.dir",
];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn scenario_names() -> [&'static str; 4] {
    ["box-simple", "box-complex", "hollow-ball", "cube-grid"]
}

fn choice<T: Copy>(line: Option<usize>, key: &str, raw: &str, options: &[(&str, T)]) -> Result<T, ConfigError> {
    options.iter().find(|(n, _)| *n == raw).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        ConfigError::value(line, key, format!("unknown value `{raw}` (expected one of: {})", names.join(", ")))
    })
}

const HEADS: [(&str, OutputHead); 2] = [("unbounded", OutputHead::Unbounded), ("bounded-box", OutputHead::BoundedBox)];
const ALPHA_MODES: [(&str, AlphaMode); 3] =
    [("learned", AlphaMode::Learned), ("constant-only", AlphaMode::ConstantOnly), ("zero", AlphaMode::Zero)];
const NEGATIVES: [(&str, NegativeSource); 3] = [
    ("first", NegativeSource::FirstMarginal),
    ("second", NegativeSource::SecondMarginal),
    ("mixture", NegativeSource::Mixture),
];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every variant is listed")
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(Option<usize>, &str)> {
        self.map.get(key).map(|(l, v)| (Some(*l), v.as_str()))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| ConfigError::value(line, key, format!("cannot parse `{v}`"))),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some((line, v)) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| ConfigError::value(line, key, format!("cannot parse `{p}`"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|(l, _)| *l)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{content}`") });
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey { line, key: k.to_string() });
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(ConfigError::Duplicate { line, key: k.to_string() });
            }
        }
        let e = Entries { map };
        let d = RunConfig::default();

        let scen_key = "space.scenario";
        let scenario = match e.raw(scen_key).map(|(_, v)| v).unwrap_or("box-simple") {
            "box-simple" => Scenario::BoxSimple,
            "box-complex" => {
                let Scenario::BoxComplex { rho, mean, std } = Scenario::box_complex() else { unreachable!() };
                Scenario::BoxComplex {
                    rho: e.get("space.rho", rho)?,
                    mean: e.get("space.mean", mean)?,
                    std: e.get("space.std", std)?,
                }
            }
            "hollow-ball" => {
                let Scenario::HollowBall { r_inner, r_outer } = Scenario::hollow_ball() else { unreachable!() };
                Scenario::HollowBall { r_inner: e.get("space.r_inner", r_inner)?, r_outer: e.get("space.r_outer", r_outer)? }
            }
            "cube-grid" => {
                let Scenario::CubeGrid { b } = Scenario::cube_grid() else { unreachable!() };
                Scenario::CubeGrid { b: e.get("space.b", b)? }
            }
            other => {
                return Err(ConfigError::value(
                    e.line(scen_key),
                    scen_key,
                    format!("unknown scenario `{other}` (expected one of: {})", scenario_names().join(", ")),
                ))
            }
        };
        let irrelevant: &[&str] = match scenario {
            Scenario::BoxSimple => &["space.rho", "space.mean", "space.std", "space.r_inner", "space.r_outer", "space.b"],
            Scenario::BoxComplex { .. } => &["space.r_inner", "space.r_outer", "space.b"],
            Scenario::HollowBall { .. } => &["space.rho", "space.mean", "space.std", "space.b"],
            Scenario::CubeGrid { .. } => &["space.rho", "space.mean", "space.std", "space.r_inner", "space.r_outer"],
        };
        for k in irrelevant {
            if let Some(line) = e.line(k) {
                return Err(ConfigError::value(Some(line), k, format!("not used by scenario `{}`", scenario.name())));
            }
        }

        let sigma = match e.raw("conditional.sigma") {
            None | Some((_, "default")) => SigmaSetting::Default,
            Some(_) => SigmaSetting::PerAxis(e.list("conditional.sigma")?.expect("present")),
        };
        let q = match e.raw("conditional.q").map(|(_, v)| v).unwrap_or("constant") {
            "constant" => {
                if let Some(line) = e.line("conditional.q_low") {
                    return Err(ConfigError::value(Some(line), "conditional.q_low", "only used with `checkerboard`"));
                }
                QSpec::Constant
            }
            "checkerboard" => QSpec::Checkerboard { low: e.get("conditional.q_low", 0.1)? },
            other => {
                return Err(ConfigError::value(
                    e.line("conditional.q"),
                    "conditional.q",
                    format!("unknown value `{other}` (expected one of: constant, checkerboard)"),
                ))
            }
        };
        let dhat = match e.raw("model.dhat").map(|(_, v)| v).unwrap_or("match-data") {
            "match-data" => {
                for k in ["model.dhat_beta", "model.dhat_sigma"] {
                    if let Some(line) = e.line(k) {
                        return Err(ConfigError::value(Some(line), k, "only used with `model.dhat = lp`"));
                    }
                }
                DhatSetting::MatchData
            }
            "lp" => {
                let beta = e.get("model.dhat_beta", f64::NAN)?;
                let sigma = e.list("model.dhat_sigma")?;
                match (beta.is_nan(), sigma) {
                    (false, Some(sigma)) => DhatSetting::Lp { beta, sigma },
                    _ => {
                        return Err(ConfigError::value(
                            e.line("model.dhat"),
                            "model.dhat",
                            "`lp` needs model.dhat_beta and model.dhat_sigma",
                        ))
                    }
                }
            }
            "squared-euclidean" => DhatSetting::SquaredEuclidean,
            other => {
                return Err(ConfigError::value(
                    e.line("model.dhat"),
                    "model.dhat",
                    format!("unknown value `{other}` (expected one of: match-data, lp, squared-euclidean)"),
                ))
            }
        };
        let pick = |key: &str, default: &str| e.raw(key).map(|(l, v)| (l, v.to_string())).unwrap_or((None, default.into()));
        let (l, v) = pick("model.head", name_of(&HEADS, d.head));
        let head = choice(l, "model.head", &v, &HEADS)?;
        let (l, v) = pick("model.alpha_mode", name_of(&ALPHA_MODES, d.alpha_mode));
        let alpha_mode = choice(l, "model.alpha_mode", &v, &ALPHA_MODES)?;
        let (l, v) = pick("train.negatives", name_of(&NEGATIVES, d.negatives));
        let negatives = choice(l, "train.negatives", &v, &NEGATIVES)?;
        let (l, v) = pick("train.loss", d.loss.name());
        let loss = LossKind::parse(&v).ok_or_else(|| {
            let names: Vec<&str> = LossKind::ALL.iter().map(|k| k.name()).collect();
            ConfigError::value(l, "train.loss", format!("unknown loss `{v}` (expected one of: {})", names.join(", ")))
        })?;
        let grad_clip = match e.raw("train.grad_clip") {
            None | Some((_, "off")) => None,
            Some(_) => Some(e.get("train.grad_clip", 0.0)?),
        };

        let cfg = RunConfig {
            n: e.get("space.n", d.n)?,
            scenario,
            beta: e.get("conditional.beta", d.beta)?,
            sigma,
            q,
            mixer_layers: e.get("mixer.layers", d.mixer_layers)?,
            mixer_slope: e.get("mixer.slope", d.mixer_slope)?,
            mixer_perturbation: e.get("mixer.perturbation", d.mixer_perturbation)?,
            mixer_bias_scale: e.get("mixer.bias_scale", d.mixer_bias_scale)?,
            mixer_seed: e.get("mixer.seed", d.mixer_seed)?,
            head,
            dhat,
            alpha_mode,
            loss,
            batch: e.get("train.batch", d.batch)?,
            iterations: e.get("train.iterations", d.iterations)?,
            seed: e.get("train.seed", d.seed)?,
            lr_encoder: e.get("train.lr_encoder", d.lr_encoder)?,
            lr_alpha: e.get("train.lr_alpha", d.lr_alpha)?,
            negatives,
            eval_every: e.get("train.eval_every", d.eval_every)?,
            clamp: e.get("train.clamp", d.clamp)?,
            grad_clip,
            eval_size: e.get("eval.size", d.eval_size)?,
            out_dir: PathBuf::from(e.raw("output.dir").map(|(_, v)| v).unwrap_or("runs/default")),
        };
        cfg.experiment().map_err(|err| match err {
            ConfigError::Value { line: None, key, msg } => ConfigError::Value { line: e.line(&key), key, msg },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Every key with its resolved value; parsing the result yields `self`.
    pub fn to_canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("space.n", self.n.to_string());
        kv("space.scenario", self.scenario.name().to_string());
        match self.scenario {
            Scenario::BoxSimple => {}
            Scenario::BoxComplex { rho, mean, std } => {
                kv("space.rho", rho.to_string());
                kv("space.mean", mean.to_string());
                kv("space.std", std.to_string());
            }
            Scenario::HollowBall { r_inner, r_outer } => {
                kv("space.r_inner", r_inner.to_string());
                kv("space.r_outer", r_outer.to_string());
            }
            Scenario::CubeGrid { b } => kv("space.b", b.to_string()),
        }
        kv("conditional.beta", self.beta.to_string());
        kv(
            "conditional.sigma",
            match &self.sigma {
                SigmaSetting::Default => "default".into(),
                SigmaSetting::PerAxis(v) => join(v),
            },
        );
        match self.q {
            QSpec::Constant => kv("conditional.q", "constant".into()),
            QSpec::Checkerboard { low } => {
                kv("conditional.q", "checkerboard".into());
                kv("conditional.q_low", low.to_string());
            }
        }
        kv("mixer.layers", self.mixer_layers.to_string());
        kv("mixer.slope", self.mixer_slope.to_string());
        kv("mixer.perturbation", self.mixer_perturbation.to_string());
        kv("mixer.bias_scale", self.mixer_bias_scale.to_string());
        kv("mixer.seed", self.mixer_seed.to_string());
        kv("model.head", name_of(&HEADS, self.head).into());
        match &self.dhat {
            DhatSetting::MatchData => kv("model.dhat", "match-data".into()),
            DhatSetting::Lp { beta, sigma } => {
                kv("model.dhat", "lp".into());
                kv("model.dhat_beta", beta.to_string());
                kv("model.dhat_sigma", join(sigma));
            }
            DhatSetting::SquaredEuclidean => kv("model.dhat", "squared-euclidean".into()),
        }
        kv("model.alpha_mode", name_of(&ALPHA_MODES, self.alpha_mode).into());
        kv("train.loss", self.loss.name().into());
        kv("train.batch", self.batch.to_string());
        kv("train.iterations", self.iterations.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.lr_encoder", self.lr_encoder.to_string());
        kv("train.lr_alpha", self.lr_alpha.to_string());
        kv("train.negatives", name_of(&NEGATIVES, self.negatives).into());
        kv("train.eval_every", self.eval_every.to_string());
        kv("train.clamp", self.clamp.to_string());
        kv("train.grad_clip", self.grad_clip.map_or("off".into(), |c| c.to_string()));
        kv("eval.size", self.eval_size.to_string());
        kv("output.dir", self.out_dir.display().to_string());
        s
    }

    /// Resolves the configuration into a runnable experiment, validating
    /// every component.
    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        let bad = |key: &str, e: &dyn std::fmt::Display| ConfigError::value(None, key, e.to_string());
        let space = LatentSpaceSpec::new(self.n, self.scenario.clone()).map_err(|e| bad("space.n", &e))?;
        let sigma = match &self.sigma {
            SigmaSetting::Default => space.default_sigma(),
            SigmaSetting::PerAxis(v) if v.len() == 1 => vec![v[0]; self.n],
            SigmaSetting::PerAxis(v) => v.clone(),
        };
        if sigma.len() != self.n {
            return Err(ConfigError::value(
                None,
                "conditional.sigma",
                format!("{} scales given for n = {}", sigma.len(), self.n),
            ));
        }
        let cond = ConditionalSpec::new(self.beta, sigma, self.q).map_err(|e| bad("conditional.sigma", &e))?;
        let train = TrainConfig {
            loss: self.loss,
            batch: self.batch,
            iterations: self.iterations,
            seed: self.seed,
            lr_encoder: self.lr_encoder,
            lr_alpha: self.lr_alpha,
            negative_source: self.negatives,
            alpha_mode: self.alpha_mode,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
            clamp_hi: self.clamp,
            grad_clip: self.grad_clip,
        };
        train.validate().map_err(|e| {
            let msg = e.to_string();
            let key = if msg.contains("batch") {
                "train.batch"
            } else if msg.contains("iterations") {
                "train.iterations"
            } else if msg.contains("learning") {
                "train.lr_encoder"
            } else if msg.contains("evaluation") {
                "eval.size"
            } else {
                "train.grad_clip"
            };
            ConfigError::value(None, key, msg)
        })?;
        if !(self.clamp > 0.0) {
            return Err(ConfigError::value(None, "train.clamp", "must be positive"));
        }
        let mut exp = Experiment::new(space, cond, train);
        exp.mixer = MixerConfig {
            n: self.n,
            m: self.n,
            layers: self.mixer_layers,
            slope: self.mixer_slope,
            perturbation: self.mixer_perturbation,
            bias_scale: self.mixer_bias_scale,
        };
        if self.mixer_layers == 0 {
            return Err(ConfigError::value(None, "mixer.layers", "need at least one layer"));
        }
        if !(self.mixer_slope > 0.0 && self.mixer_slope <= 1.0) {
            return Err(ConfigError::value(None, "mixer.slope", "must lie in (0, 1]"));
        }
        exp.mixer_seed = self.mixer_seed;
        exp.head = self.head;
        match &self.dhat {
            DhatSetting::MatchData => {}
            DhatSetting::Lp { beta, sigma } => {
                let sigma = if sigma.len() == 1 { vec![sigma[0]; self.n] } else { sigma.clone() };
                exp.dhat = Dhat::LpBeta { beta: *beta, sigma };
            }
            DhatSetting::SquaredEuclidean => exp.dhat = Dhat::SquaredEuclidean,
        }
        exp.dhat.validate(self.n).map_err(|e| bad("model.dhat_sigma", &e))?;
        Ok(exp)
    }
}
