//! Experiment configuration.
//!
//! ```toml
//! [model]
//! a = 0.0
//! b = 1.0
//! sigma = 0.01
//! theta = 1e-5
//! mu = 0.0
//! x0 = 1.0
//! t_end = 1.0
//! gamma_choice = "sigma_beta"   # or "one"
//! variant = "derived_ode"       # or "paper_printed"
//!
//! [simulation]
//! n_paths = 10000
//! n_steps = 1000
//! seed = 1
//! control_grid = { start = -5.0, stop = 5.0, step = 0.1 }
//! vi_tolerance = 1e-8
//! cost_thetas = [0.1, 0.05, 0.025]
//! suites = ["riccati", "simulate", "adjoint", "cost", "smp", "paper-repro"]
//! repro_dt = 1e-4
//! repro_paths = 1000
//! repro_t_end = 5.0
//!
//! [outputs]
//! dir = "out"
//! plots = true
//! ```
//!
//! Every key is optional. Unknown keys and wrongly typed values are rejected.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use toml::{Table, Value};

use crate::model::LqParams;
use crate::riccati::{FormulaVariant, GammaChoice};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Suite {
    #[serde(rename = "riccati")]
    Riccati,
    #[serde(rename = "simulate")]
    Simulate,
    #[serde(rename = "adjoint")]
    Adjoint,
    #[serde(rename = "cost")]
    Cost,
    #[serde(rename = "smp")]
    Smp,
    #[serde(rename = "paper-repro")]
    PaperRepro,
}

impl Suite {
    /// Execution order.
    pub const ALL: [Suite; 6] = [
        Suite::Riccati,
        Suite::Simulate,
        Suite::Adjoint,
        Suite::Cost,
        Suite::Smp,
        Suite::PaperRepro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Riccati => "riccati",
            Suite::Simulate => "simulate",
            Suite::Adjoint => "adjoint",
            Suite::Cost => "cost",
            Suite::Smp => "smp",
            Suite::PaperRepro => "paper-repro",
        }
    }
}

impl FromStr for Suite {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| ConfigError(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlGridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: LqParams,
    pub gamma_choice: GammaChoice,
    pub variant: FormulaVariant,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub control_grid: ControlGridSpec,
    pub vi_tolerance: f64,
    pub cost_thetas: Vec<f64>,
    pub suites: Vec<Suite>,
    pub repro_dt: f64,
    pub repro_paths: usize,
    pub repro_t_end: f64,
    pub outputs: PathBuf,
    pub plots: bool,
    /// Keys filled in from defaults, as `section.key`.
    pub defaults_applied: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: LqParams::PAPER,
            gamma_choice: GammaChoice::SigmaBeta,
            variant: FormulaVariant::DerivedOde,
            n_paths: 10_000,
            n_steps: 1000,
            seed: 1,
            control_grid: ControlGridSpec {
                start: -5.0,
                stop: 5.0,
                step: 0.1,
            },
            vi_tolerance: 1e-8,
            cost_thetas: vec![0.1, 0.05, 0.025],
            suites: Suite::ALL.to_vec(),
            repro_dt: 1e-4,
            repro_paths: 1000,
            repro_t_end: 5.0,
            outputs: PathBuf::from("out"),
            plots: true,
            defaults_applied: Vec::new(),
        }
    }
}

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    known: &'static [&'static str],
    defaults: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn new(
        root: &'a Table,
        name: &'static str,
        known: &'static [&'static str],
        defaults: &'a mut Vec<String>,
    ) -> Result<Self, ConfigError> {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return err(format!("`{name}` must be a section")),
        };
        if let Some(t) = table {
            for key in t.keys() {
                if !known.contains(&key.as_str()) {
                    return err(format!("unknown key `{name}.{key}`"));
                }
            }
        }
        Ok(Self {
            name,
            table,
            known,
            defaults,
        })
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        debug_assert!(self.known.contains(&key));
        let v = self.table.and_then(|t| t.get(key));
        if v.is_none() {
            self.defaults.push(format!("{}.{key}", self.name));
        }
        v
    }

    fn mismatch<T>(&self, key: &str, expected: &str, v: &Value) -> Result<T, ConfigError> {
        err(format!(
            "type mismatch for `{}.{key}`: expected {expected}, found {}",
            self.name,
            v.type_str()
        ))
    }

    fn float(&mut self, key: &'static str, default: f64) -> Result<f64, ConfigError> {
        let x = match self.get(key) {
            None => default,
            Some(Value::Float(x)) => *x,
            Some(Value::Integer(i)) => *i as f64,
            Some(v) => return self.mismatch(key, "a number", v),
        };
        if !x.is_finite() {
            return err(format!("`{}.{key}` must be finite", self.name));
        }
        Ok(x)
    }

    fn count(&mut self, key: &'static str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 1 => Ok(*i as usize),
            Some(Value::Integer(i)) => {
                err(format!("`{}.{key}` must be at least 1, got {i}", self.name))
            }
            Some(v) => self.mismatch(key, "an integer", v),
        }
    }

    fn string(&mut self, key: &'static str) -> Result<Option<&'a str>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => self.mismatch(key, "a string", v),
        }
    }
}

/// Parses a configuration document. Missing keys take the reference-experiment
/// defaults and are listed in `defaults_applied`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(format!("parse error: {e}")))?;
    for key in root.keys() {
        if !["model", "simulation", "outputs"].contains(&key.as_str()) {
            return err(format!("unknown key `{key}`"));
        }
    }
    let d = ExperimentConfig::default();
    let mut defaults = Vec::new();

    let mut s = Section::new(
        &root,
        "model",
        &[
            "a",
            "b",
            "sigma",
            "theta",
            "mu",
            "x0",
            "t_end",
            "gamma_choice",
            "variant",
        ],
        &mut defaults,
    )?;
    let p = d.model;
    let model = LqParams {
        a: s.float("a", p.a)?,
        b: s.float("b", p.b)?,
        sigma: s.float("sigma", p.sigma)?,
        theta: s.float("theta", p.theta)?,
        mu: s.float("mu", p.mu)?,
        x0: s.float("x0", p.x0)?,
        t_end: s.float("t_end", p.t_end)?,
    };
    let gamma_choice = match s.string("gamma_choice")? {
        None => d.gamma_choice,
        Some("sigma_beta") => GammaChoice::SigmaBeta,
        Some("one") => GammaChoice::One,
        Some(other) => {
            return err(format!(
                "`model.gamma_choice` must be \"sigma_beta\" or \"one\", got \"{other}\""
            ))
        }
    };
    let variant = match s.string("variant")? {
        None => d.variant,
        Some("derived_ode") => FormulaVariant::DerivedOde,
        Some("paper_printed") => FormulaVariant::PaperPrinted,
        Some(other) => {
            return err(format!(
                "`model.variant` must be \"derived_ode\" or \"paper_printed\", got \"{other}\""
            ))
        }
    };
    if model.sigma < 0.0 {
        return err("`model.sigma` must be non-negative");
    }
    if model.t_end <= 0.0 {
        return err("`model.t_end` must be positive");
    }

    let mut s = Section::new(
        &root,
        "simulation",
        &[
            "n_paths",
            "n_steps",
            "seed",
            "control_grid",
            "vi_tolerance",
            "cost_thetas",
            "suites",
            "repro_dt",
            "repro_paths",
            "repro_t_end",
        ],
        &mut defaults,
    )?;
    let n_paths = s.count("n_paths", d.n_paths)?;
    let n_steps = s.count("n_steps", d.n_steps)?;
    let seed = match s.get("seed") {
        None => d.seed,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(Value::Integer(_)) => return err("`simulation.seed` must be non-negative"),
        Some(v) => return s.mismatch("seed", "an integer", v),
    };
    let control_grid = match s.get("control_grid") {
        None => d.control_grid,
        Some(Value::Table(t)) => parse_range(t)?,
        Some(v) => return s.mismatch("control_grid", "a table {start, stop, step}", v),
    };
    let vi_tolerance = s.float("vi_tolerance", d.vi_tolerance)?;
    if vi_tolerance < 0.0 {
        return err("`simulation.vi_tolerance` must be non-negative");
    }
    let cost_thetas = match s.get("cost_thetas") {
        None => d.cost_thetas.clone(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::Float(x) if x.is_finite() && *x != 0.0 => Ok(*x),
                Value::Integer(i) if *i != 0 => Ok(*i as f64),
                _ => err("`simulation.cost_thetas` entries must be nonzero finite numbers"),
            })
            .collect::<Result<_, _>>()?,
        Some(v) => return s.mismatch("cost_thetas", "an array of numbers", v),
    };
    let suites = match s.get("suites") {
        None => d.suites.clone(),
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for v in items {
                match v {
                    Value::String(name) => out.push(name.parse::<Suite>()?),
                    other => return s.mismatch("suites", "an array of strings", other),
                }
            }
            out.sort();
            out.dedup();
            out
        }
        Some(v) => return s.mismatch("suites", "an array of strings", v),
    };
    let repro_dt = s.float("repro_dt", d.repro_dt)?;
    if repro_dt <= 0.0 || repro_dt > 1.0 {
        return err("`simulation.repro_dt` must lie in (0, 1]");
    }
    let repro_paths = s.count("repro_paths", d.repro_paths)?;
    let repro_t_end = s.float("repro_t_end", d.repro_t_end)?;
    if repro_t_end <= 0.0 {
        return err("`simulation.repro_t_end` must be positive");
    }

    let mut s = Section::new(&root, "outputs", &["dir", "plots"], &mut defaults)?;
    let outputs = s.string("dir")?.map(PathBuf::from).unwrap_or(d.outputs);
    let plots = match s.get("plots") {
        None => d.plots,
        Some(Value::Boolean(b)) => *b,
        Some(v) => return s.mismatch("plots", "a boolean", v),
    };

    Ok(ExperimentConfig {
        model,
        gamma_choice,
        variant,
        n_paths,
        n_steps,
        seed,
        control_grid,
        vi_tolerance,
        cost_thetas,
        suites,
        repro_dt,
        repro_paths,
        repro_t_end,
        outputs,
        plots,
        defaults_applied: defaults,
    })
}

fn parse_range(t: &Table) -> Result<ControlGridSpec, ConfigError> {
    for key in t.keys() {
        if !["start", "stop", "step"].contains(&key.as_str()) {
            return err(format!("unknown key `simulation.control_grid.{key}`"));
        }
    }
    let get = |k: &str| match t.get(k) {
        Some(Value::Float(x)) => Ok(*x),
        Some(Value::Integer(i)) => Ok(*i as f64),
        Some(v) => err(format!(
            "type mismatch for `simulation.control_grid.{k}`: expected a number, found {}",
            v.type_str()
        )),
        None => err(format!("missing key `simulation.control_grid.{k}`")),
    };
    let spec = ControlGridSpec {
        start: get("start")?,
        stop: get("stop")?,
        step: get("step")?,
    };
    if !(spec.step > 0.0) || spec.stop < spec.start {
        return err("`simulation.control_grid` needs step > 0 and stop >= start");
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_reference_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.model, LqParams::PAPER);
        assert_eq!(c.suites, Suite::ALL.to_vec());
        assert!(c.defaults_applied.contains(&"model.theta".to_string()));
        assert!(c.defaults_applied.contains(&"outputs.dir".to_string()));
    }

    #[test]
    fn values_override_defaults() {
        let c = parse_config(
            "[model]\na = 0.5\nvariant = \"paper_printed\"\n[simulation]\nn_paths = 12\nsuites = [\"smp\", \"riccati\"]\ncontrol_grid = { start = -1, stop = 1, step = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(c.model.a, 0.5);
        assert_eq!(c.variant, FormulaVariant::PaperPrinted);
        assert_eq!(c.n_paths, 12);
        assert_eq!(c.suites, vec![Suite::Riccati, Suite::Smp]);
        assert_eq!(c.control_grid.step, 0.5);
        assert!(!c.defaults_applied.contains(&"model.a".to_string()));
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let e = parse_config("[model]\ntheta = \"high\"\n").unwrap_err();
        assert!(e.0.contains("model.theta"), "{e}");
        assert!(e.0.contains("type mismatch"), "{e}");
    }

    #[test]
    fn invariant_violations() {
        let e = parse_config("[simulation]\nn_steps = 0\n").unwrap_err();
        assert!(e.0.contains("simulation.n_steps"), "{e}");
        assert!(parse_config("[model]\nsigma = -1.0\n").is_err());
        assert!(parse_config("[simulation]\ncontrol_grid = { start = 0, stop = 1 }\n").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = parse_config("[model]\nalpha = 1\n").unwrap_err();
        assert!(e.0.contains("model.alpha"), "{e}");
        assert!(parse_config("[extra]\nx = 1\n").is_err());
        assert!(parse_config("[simulation]\nsuites = [\"nope\"]\n").is_err());
    }

    #[test]
    fn syntax_error_reports_position() {
        let e = parse_config("[model]\na = = 1\n").unwrap_err();
        assert!(e.0.contains("line 2"), "{e}");
    }
}
