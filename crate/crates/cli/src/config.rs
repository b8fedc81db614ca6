//! Experiment configuration: a TOML file with top-level keys and one optional
//! section per experiment, layered under command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Gen,
    Backbone,
    Propagate,
    Annealed,
    Prefactor,
    Qlclt,
    Lclt,
    Ladder,
    GoodBoxes,
    SocialBoxes,
    Couple,
    PairTv,
    Intersect,
    Hits,
    Hybrid,
    Derivatives,
    Invariance,
    Pc,
}

impl Experiment {
    pub const ALL: [Experiment; 18] = [
        Experiment::Gen,
        Experiment::Backbone,
        Experiment::Propagate,
        Experiment::Annealed,
        Experiment::Prefactor,
        Experiment::Qlclt,
        Experiment::Lclt,
        Experiment::Ladder,
        Experiment::GoodBoxes,
        Experiment::SocialBoxes,
        Experiment::Couple,
        Experiment::PairTv,
        Experiment::Intersect,
        Experiment::Hits,
        Experiment::Hybrid,
        Experiment::Derivatives,
        Experiment::Invariance,
        Experiment::Pc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Gen => "gen",
            Experiment::Backbone => "backbone",
            Experiment::Propagate => "propagate",
            Experiment::Annealed => "annealed",
            Experiment::Prefactor => "prefactor",
            Experiment::Qlclt => "qlclt",
            Experiment::Lclt => "lclt",
            Experiment::Ladder => "ladder",
            Experiment::GoodBoxes => "goodboxes",
            Experiment::SocialBoxes => "socialboxes",
            Experiment::Couple => "couple",
            Experiment::PairTv => "pairtv",
            Experiment::Intersect => "intersect",
            Experiment::Hits => "hits",
            Experiment::Hybrid => "hybrid",
            Experiment::Derivatives => "derivatives",
            Experiment::Invariance => "invariance",
            Experiment::Pc => "pc",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                CliError::Config(format!("unknown experiment '{s}' (expected one of: {})", names.join(", ")))
            })
    }
}

/// Every configurable key. Unset keys fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub d: Option<usize>,
    pub p: Option<f64>,
    /// Walk length, or the single scale of experiments that take one.
    pub n: Option<i64>,
    pub n_list: Option<Vec<i64>>,
    pub seeds: Option<u64>,
    pub seed_base: Option<u64>,
    /// Annealed Monte Carlo replicas.
    pub reps: Option<u64>,
    pub horizon_margin: Option<i64>,
    pub spatial_margin: Option<i64>,
    /// `open` or `periodic`.
    pub boundary: Option<String>,
    /// Half-width of periodic windows and classification regions.
    pub half_width: Option<i64>,
    /// Total length `N` for ladder and coupling runs.
    pub big_n: Option<i64>,
    /// Box side `M` (ladder threshold, coupling box side, concentration box side).
    pub m: Option<f64>,
    pub m_list: Option<Vec<i64>>,
    pub theta: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    /// Constant `C` (ladder bound, good-site escape bound, social reach factor).
    pub c_big: Option<f64>,
    /// Constant `c` of the good-site escape bound.
    pub c_small: Option<f64>,
    pub alpha: Option<f64>,
    /// Cesaro depth; `0` means "use n".
    pub n_max: Option<i64>,
    pub depth_list: Option<Vec<i64>>,
    /// Fixed variance for `lclt`; estimated from the annealed slices when unset.
    pub sigma2: Option<f64>,
    /// `exact` or `mc` for the annealed experiment.
    pub mode: Option<String>,
    /// Prefactor depth of the control variate in `lclt`; 0 is the plain mean.
    pub cv_depth: Option<i64>,
    /// `xi` or `patch` for the invariance test functional.
    pub functional: Option<String>,
    pub patch_radius: Option<i64>,
    /// Survival ratio threshold and bisection steps of the `pc` helper.
    pub threshold: Option<f64>,
    pub iters: Option<u32>,
    /// Failed trend checks turn into a nonzero exit code.
    pub hard: Option<bool>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

macro_rules! overlay_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Keys set in `top` replace those in `self`.
    pub fn overlay(&mut self, top: &Settings) {
        overlay_fields!(self, top; d, p, n, n_list, seeds, seed_base, reps, horizon_margin, spatial_margin,
            boundary, half_width, big_n, m, m_list, theta, eps, delta, c_big, c_small, alpha, n_max,
            depth_list, sigma2, mode, cv_depth, functional, patch_radius, threshold, iters, hard, threads, out, cache);
    }

    /// Parse `key=value` with a TOML value, e.g. `n_list=[16,64]` or `mode="exact"`.
    pub fn parse_assignment(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got '{kv}'")))?;
        let text = format!("{} = {}", k.trim(), v.trim());
        let parsed: Settings = toml::from_str(&text)
            .or_else(|_| toml::from_str(&format!("{} = \"{}\"", k.trim(), v.trim())))
            .map_err(|e| CliError::Config(format!("bad override '{kv}': {e}")))?;
        self.overlay(&parsed);
        Ok(())
    }
}

/// A config file: optional experiment name, shared keys, per-experiment sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Option<String>,
    pub base: Settings,
    pub sections: BTreeMap<String, Settings>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("config: {e}")))?;
        let experiment = match table.remove("experiment") {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => return Err(CliError::Config(format!("experiment must be a string, got {other}"))),
            None => None,
        };
        let mut sections = BTreeMap::new();
        let names: Vec<String> = table.keys().cloned().collect();
        for k in names {
            if let Some(toml::Value::Table(_)) = table.get(&k) {
                k.parse::<Experiment>()?;
                let Some(toml::Value::Table(t)) = table.remove(&k) else { unreachable!() };
                let s: Settings = t.try_into().map_err(|e| CliError::Config(format!("[{k}]: {e}")))?;
                sections.insert(k, s);
            }
        }
        let base: Settings = table.try_into().map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(ExperimentConfig {
            experiment,
            base,
            sections,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        if let Some(e) = &self.experiment {
            table.insert("experiment".into(), toml::Value::String(e.clone()));
        }
        let base = toml::Table::try_from(&self.base).expect("settings serialize");
        table.extend(base);
        for (k, s) in &self.sections {
            let t = toml::Table::try_from(s).expect("settings serialize");
            table.insert(k.clone(), toml::Value::Table(t));
        }
        toml::to_string(&table).expect("table serializes")
    }

    /// Defaults, then shared keys, then the experiment's section, then `cli`.
    pub fn resolve(&self, experiment: Experiment, cli: &Settings) -> Result<RunConfig, CliError> {
        let mut s = defaults(experiment);
        s.overlay(&self.base);
        if let Some(sec) = self.sections.get(experiment.name()) {
            s.overlay(sec);
        }
        s.overlay(cli);
        RunConfig::from_settings(experiment, s)
    }
}

/// Desk-scale defaults per experiment (`d = 1`, `p = 0.8`).
pub fn defaults(e: Experiment) -> Settings {
    let mut s = Settings {
        d: Some(1),
        p: Some(0.8),
        n: Some(100),
        seeds: Some(10),
        seed_base: Some(1),
        reps: Some(1000),
        spatial_margin: Some(opwalk_core::annealed::DEFAULT_SPATIAL_MARGIN),
        boundary: Some("open".into()),
        half_width: Some(200),
        big_n: Some(100),
        m: Some(5.0),
        theta: Some(0.4),
        eps: Some(0.01),
        delta: Some(0.1),
        c_big: Some(1.0),
        c_small: Some(0.01),
        alpha: Some(0.1),
        n_max: Some(0),
        mode: Some("mc".into()),
        cv_depth: Some(0),
        functional: Some("xi".into()),
        patch_radius: Some(1),
        threshold: Some(0.9),
        iters: Some(10),
        hard: Some(false),
        threads: Some(0),
        ..Settings::default()
    };
    let list = |v: &[i64]| Some(v.to_vec());
    match e {
        Experiment::Gen | Experiment::Backbone | Experiment::Propagate => {
            s.seeds = Some(1);
        }
        Experiment::Annealed => {
            s.n_list = list(&[25, 50, 100]);
        }
        Experiment::Prefactor => {
            s.n = Some(64);
            s.boundary = Some("periodic".into());
            s.half_width = Some(511);
            s.m = Some(16.0);
            s.eps = Some(0.25);
        }
        Experiment::Qlclt => {
            s.n_list = list(&[25, 50, 100, 200]);
            s.seeds = Some(50);
            s.reps = Some(10_000);
        }
        Experiment::Lclt => {
            s.n_list = list(&[25, 50, 100, 200]);
            s.reps = Some(10_000);
            s.cv_depth = Some(32);
        }
        Experiment::Ladder => {
            s.big_n = Some(4096);
            s.m = Some(2.0);
            s.seeds = Some(30);
            s.reps = Some(100);
        }
        Experiment::GoodBoxes => {
            s.n_list = list(&[16, 64]);
            s.seeds = Some(30);
            s.reps = Some(2000);
        }
        Experiment::SocialBoxes => {
            s.m_list = list(&[2, 4, 8]);
            s.c_big = Some(4.0);
            s.seeds = Some(30);
            s.half_width = Some(3000);
        }
        Experiment::Couple => {
            s.seeds = Some(30);
            s.reps = Some(200);
        }
        Experiment::PairTv => {
            s.n_list = list(&[50, 100, 200]);
            s.seeds = Some(50);
        }
        Experiment::Intersect => {
            s.m_list = list(&[2, 4, 8]);
            s.c_big = Some(4.0);
            s.seeds = Some(100);
            s.half_width = Some(40);
        }
        Experiment::Hits => {
            s.n_list = list(&[5, 10, 20, 40]);
            s.reps = Some(10_000);
        }
        Experiment::Hybrid => {
            s.n_list = list(&[64, 128, 256]);
            s.eps = Some(0.24);
            s.seeds = Some(30);
            s.reps = Some(2000);
        }
        Experiment::Derivatives => {
            s.n_list = list(&[25, 50, 100]);
            s.reps = Some(2000);
            s.eps = Some(0.25);
        }
        Experiment::Invariance => {
            s.n = Some(64);
            s.depth_list = list(&[4, 64]);
            s.seeds = Some(30);
            s.boundary = Some("periodic".into());
            s.half_width = Some(511);
        }
        Experiment::Pc => {
            s.reps = Some(400);
        }
    }
    s
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub settings: Settings,
    pub d: usize,
    pub p: f64,
    pub n: i64,
    pub n_list: Vec<i64>,
    pub seeds: u64,
    pub seed_base: u64,
    pub reps: u64,
    pub horizon_margin: Option<i64>,
    pub spatial_margin: i64,
    pub periodic: bool,
    pub hard: bool,
    pub threads: usize,
    pub out: PathBuf,
}

fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Config(format!("missing key '{key}'")))
}

impl RunConfig {
    pub fn from_settings(experiment: Experiment, s: Settings) -> Result<Self, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = need(&s.d, "d")?;
        if !(1..=opwalk_core::geometry::MAX_DIM).contains(&d) {
            return bad(format!("d = {d} outside 1..={}", opwalk_core::geometry::MAX_DIM));
        }
        let p = need(&s.p, "p")?;
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("p = {p} outside [0, 1]"));
        }
        let n = need(&s.n, "n")?;
        let n_list = s.n_list.clone().unwrap_or_else(|| vec![n]);
        if n < 1 || n_list.is_empty() || n_list.iter().any(|&v| v < 1) {
            return bad("n and every n_list entry must be at least 1".into());
        }
        if n_list.windows(2).any(|w| w[1] <= w[0]) {
            return bad("n_list must be strictly increasing".into());
        }
        let seeds = need(&s.seeds, "seeds")?;
        let reps = need(&s.reps, "reps")?;
        if seeds == 0 || reps == 0 {
            return bad("seeds and reps must be at least 1".into());
        }
        if s.horizon_margin.is_some_and(|v| v < 0) || s.spatial_margin.is_some_and(|v| v < 0) {
            return bad("margins must be non-negative".into());
        }
        let periodic = match need(&s.boundary, "boundary")?.as_str() {
            "open" => false,
            "periodic" => true,
            other => return bad(format!("boundary must be 'open' or 'periodic', got '{other}'")),
        };
        if !matches!(need(&s.mode, "mode")?.as_str(), "exact" | "mc") {
            return bad("mode must be 'exact' or 'mc'".into());
        }
        if !matches!(need(&s.functional, "functional")?.as_str(), "xi" | "patch" | "one") {
            return bad("functional must be 'xi', 'patch' or 'one'".into());
        }
        for (k, v) in [("theta", s.theta), ("eps", s.eps), ("delta", s.delta)] {
            if v.is_some_and(|v| !(v > 0.0 && v < 1.0)) {
                return bad(format!("{k} must lie in (0, 1)"));
            }
        }
        if s.cv_depth.is_some_and(|v| v < 0) {
            return bad("cv_depth must be non-negative".into());
        }
        if s.half_width.is_some_and(|v| v < 1) || s.big_n.is_some_and(|v| v < 1) {
            return bad("half_width and big_n must be positive".into());
        }
        Ok(RunConfig {
            experiment,
            d,
            p,
            n,
            n_list,
            seeds,
            seed_base: need(&s.seed_base, "seed_base")?,
            reps,
            horizon_margin: s.horizon_margin,
            spatial_margin: need(&s.spatial_margin, "spatial_margin")?,
            periodic,
            hard: s.hard.unwrap_or(false),
            threads: s.threads.unwrap_or(0),
            out: s.out.clone().unwrap_or_else(|| PathBuf::from("out").join(experiment.name())),
            settings: s,
        })
    }

    pub fn f(&self, v: Option<f64>, key: &str) -> Result<f64, CliError> {
        need(&v, key)
    }

    /// Canonical echo: the resolved settings as a config file that reruns this run.
    pub fn echo(&self) -> String {
        let mut s = self.settings.clone();
        s.out = None;
        s.cache = None;
        s.threads = None;
        ExperimentConfig {
            experiment: Some(self.experiment.name().into()),
            base: s,
            sections: BTreeMap::new(),
        }
        .to_toml()
    }

    pub fn model(&self) -> opwalk_core::annealed::ModelParams {
        let mut m = opwalk_core::annealed::ModelParams::new(self.d, self.p).with_spatial_margin(self.spatial_margin);
        if let Some(h) = self.horizon_margin {
            m = m.with_horizon_margin(h);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = r#"
experiment = "qlclt"
d = 1
p = 0.8
n_list = [25, 50]
seeds = 4

[ladder]
big_n = 256
theta = 0.4
"#;
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.sections["ladder"].big_n, Some(256));
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn layering() {
        let c = ExperimentConfig::parse("n = 7\n[propagate]\nn = 9\np = 1.0\n").unwrap();
        let mut cli = Settings::default();
        cli.parse_assignment("p=0.5").unwrap();
        let r = c.resolve(Experiment::Propagate, &cli).unwrap();
        assert_eq!((r.n, r.p), (9, 0.5));
        let r = c.resolve(Experiment::Annealed, &Settings::default()).unwrap();
        assert_eq!(r.n, 7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("q = 1").is_err());
        assert!(ExperimentConfig::parse("[nope]\nd = 1").is_err());
        assert!("bogus".parse::<Experiment>().is_err());
        let c = ExperimentConfig::parse("p = 1.5").unwrap();
        assert!(c.resolve(Experiment::Gen, &Settings::default()).is_err());
        let mut s = Settings::default();
        s.parse_assignment("mode=exact").unwrap();
        assert_eq!(s.mode.as_deref(), Some("exact"));
    }

    #[test]
    fn echo_reproduces_the_run() {
        let c = ExperimentConfig::parse("d = 2\n[hits]\nreps = 50\n").unwrap();
        let r = c.resolve(Experiment::Hits, &Settings::default()).unwrap();
        let again = ExperimentConfig::parse(&r.echo()).unwrap();
        let r2 = again.resolve(Experiment::Hits, &Settings::default()).unwrap();
        assert_eq!(r2.echo(), r.echo());
        assert_eq!((r2.d, r2.reps), (2, 50));
    }
}
