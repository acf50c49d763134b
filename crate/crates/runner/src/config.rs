//! Run configuration: a TOML document with flat sections.
//!
//! Parsing rejects unknown keys; validation collects every violation with the
//! line it refers to before any computation starts.

use std::fmt;
use std::path::{Path, PathBuf};

use dynbc_core::dual::DualMethod;
use dynbc_core::graph::{Knot, DEFAULT_POWER_PIECES};
use dynbc_core::{make_preset, Geometry, Graph, GraphPair, Pair, Preset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    let lines: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{} configuration error(s):\n  {}", v.len(), lines.join("\n  "))
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub graph: GraphConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_graph: Option<GraphConfig>,
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub forcing: ForcingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// `strip` or `interval`
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pieces: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Custom graphs: `[at, left, right]` per knot, increasing `at`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_slope: Option<f64>,
    /// Overrides the default quadratic growth constant `c1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_c1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub lambda: f64,
    pub tau: f64,
    #[serde(alias = "T")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// `zero`, `single_mode`, `random_mean_zero`, `constant_plus_mode` or `file`
    pub profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            profile: "zero".into(),
            k: None,
            seed: None,
            amplitude: None,
            m0: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    /// `zero`, `random_mean_zero`, `manufactured` or `file`
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
    /// Decay rate of the manufactured solution; defaults to the free decay rate (zero forcing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        Self {
            kind: "zero".into(),
            seed: None,
            amplitude: None,
            frequency: None,
            rate: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Snapshot every this many steps; 0 disables snapshots.
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    /// Subset of `csv`, `json`.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_stride() -> usize {
    10
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            snapshot_stride: default_stride(),
            formats: default_formats(),
        }
    }
}

impl OutputConfig {
    pub fn csv(&self) -> bool {
        self.formats.iter().any(|f| f == "csv")
    }

    pub fn json(&self) -> bool {
        self.formats.iter().any(|f| f == "json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub project_forcing: bool,
    #[serde(default)]
    pub relax_intercept: bool,
    /// Solve data with nonzero mean through the shifted mean-zero problem.
    #[serde(default = "default_true")]
    pub mean_shift: bool,
    /// `pinned_cholesky` or `deflated_cg`
    #[serde(default = "default_dual_method")]
    pub dual_method: String,
}

fn default_newton_tol() -> f64 {
    1e-11
}

fn default_max_iter() -> usize {
    50
}

fn default_true() -> bool {
    true
}

fn default_dual_method() -> String {
    "pinned_cholesky".into()
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: default_newton_tol(),
            max_iter: default_max_iter(),
            project_forcing: false,
            relax_intercept: false,
            mean_shift: true,
            dual_method: default_dual_method(),
        }
    }
}

/// Line number (1-based) of `key` inside `[section]`, or of the section header.
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some(key) = key {
            let lhs = line.split('=').next().unwrap_or("").trim();
            if lhs == key {
                return Some(i + 1);
            }
        }
    }
    header
}

struct Collector<'t> {
    text: &'t str,
    out: Vec<Violation>,
}

impl Collector<'_> {
    fn push(&mut self, section: &str, key: Option<&str>, message: impl Into<String>) {
        let name = match key {
            Some(k) => format!("{section}.{k}"),
            None => section.to_string(),
        };
        self.out.push(Violation {
            key: name,
            line: locate(self.text, section, key),
            message: message.into(),
        });
    }

    fn positive(&mut self, section: &str, key: &str, v: Option<f64>) {
        if let Some(x) = v {
            if !(x > 0.0 && x.is_finite()) {
                self.push(section, Some(key), format!("{key} must be positive, got {x}"));
            }
        }
    }

    fn require<V>(&mut self, section: &str, key: &str, v: &Option<V>, context: &str) -> bool {
        if v.is_none() {
            self.push(section, None, format!("{key} is required for {context}"));
            return false;
        }
        true
    }

    fn forbid<V>(&mut self, section: &str, key: &str, v: &Option<V>, context: &str) {
        if v.is_some() {
            self.push(section, Some(key), format!("{key} is not used by {context}"));
        }
    }
}

const GRAPH_KEYS: [&str; 11] = [
    "c0",
    "c0_prime",
    "m",
    "m0",
    "pieces",
    "a",
    "b",
    "knots",
    "left_slope",
    "right_slope",
    "growth_c1",
];

impl GraphConfig {
    fn present(&self, key: &str) -> bool {
        match key {
            "c0" => self.c0.is_some(),
            "c0_prime" => self.c0_prime.is_some(),
            "m" => self.m.is_some(),
            "m0" => self.m0.is_some(),
            "pieces" => self.pieces.is_some(),
            "a" => self.a.is_some(),
            "b" => self.b.is_some(),
            "knots" => self.knots.is_some(),
            "left_slope" => self.left_slope.is_some(),
            "right_slope" => self.right_slope.is_some(),
            "growth_c1" => self.growth_c1.is_some(),
            _ => false,
        }
    }

    /// (required, optional) keys of the preset.
    fn keys(preset: &str) -> Option<(&'static [&'static str], &'static [&'static str])> {
        Some(match preset {
            "linear" => (&["c0"], &[]),
            "heleshaw_clipped" => (&[], &["c0_prime"]),
            "fast_diffusion_clipped" | "porous_clipped" => (&["m"], &["m0", "pieces"]),
            "deadzone_jump" => (&["a", "b", "c0"], &["c0_prime"]),
            "two_slope" => (&["c0", "m0"], &["c0_prime"]),
            "custom" => (&["knots", "left_slope", "right_slope", "m0"], &[]),
            _ => return None,
        })
    }

    fn preset(&self) -> Option<Preset<f64>> {
        let pieces = self.pieces.unwrap_or(DEFAULT_POWER_PIECES);
        Some(match self.preset.as_str() {
            "linear" => Preset::Linear { c0: self.c0? },
            "heleshaw_clipped" => Preset::HeleShawClipped {
                c0_prime: self.c0_prime.unwrap_or(1.0),
            },
            "fast_diffusion_clipped" => Preset::FastDiffusionClipped {
                m: self.m?,
                m0: self.m0.unwrap_or(1.0),
                pieces,
            },
            "porous_clipped" => Preset::PorousClipped {
                m: self.m?,
                m0: self.m0.unwrap_or(1.0),
                pieces,
            },
            "deadzone_jump" => Preset::DeadzoneJump {
                a: self.a?,
                b: self.b?,
                c0: self.c0?,
                c0_prime: self.c0_prime.unwrap_or(0.0),
            },
            "two_slope" => Preset::TwoSlope {
                c0: self.c0?,
                c0_prime: self.c0_prime.unwrap_or(0.0),
                m0: self.m0?,
            },
            _ => return None,
        })
    }

    /// Builds the graph; `relax` admits a negative far-field intercept.
    pub fn build(&self, relax: bool) -> Result<Graph, String> {
        let graph = if self.preset == "custom" {
            let knots = self
                .knots
                .as_ref()
                .ok_or("custom graph needs knots")?
                .iter()
                .map(|&[at, left, right]| Knot { at, left, right })
                .collect();
            let (l, r, m0) = (
                self.left_slope.ok_or("custom graph needs left_slope")?,
                self.right_slope.ok_or("custom graph needs right_slope")?,
                self.m0.ok_or("custom graph needs m0")?,
            );
            Graph::from_knots(knots, l, r, m0).map_err(|e| e.to_string())?
        } else {
            let preset = self.preset().ok_or_else(|| format!("incomplete preset {}", self.preset))?;
            make_preset(preset).map_err(|e| e.to_string())?
        };
        let graph = match self.growth_c1 {
            Some(c1) => graph.with_growth_c1(c1),
            None => graph,
        };
        let graph = graph.with_relaxed_intercept(relax);
        graph.check_origin().map_err(|e| e.to_string())?;
        graph.linear_bound().map_err(|e| e.to_string())?;
        if graph.growth().is_none() {
            return Err("no finite quadratic growth constant for this c1".into());
        }
        Ok(graph)
    }

    fn validate(&self, section: &str, relax: bool, c: &mut Collector<'_>) -> Option<Graph> {
        let Some((required, optional)) = Self::keys(&self.preset) else {
            c.push(
                section,
                Some("preset"),
                format!(
                    "unknown preset {:?}; expected linear, heleshaw_clipped, fast_diffusion_clipped, deadzone_jump, porous_clipped, two_slope or custom",
                    self.preset
                ),
            );
            return None;
        };
        let context = format!("preset {}", self.preset);
        let mut complete = true;
        for key in required {
            if !self.present(key) {
                c.push(section, None, format!("{key} is required for {context}"));
                complete = false;
            }
        }
        for key in GRAPH_KEYS {
            if key != "growth_c1" && !required.contains(&key) && !optional.contains(&key) && self.present(key) {
                c.push(section, Some(key), format!("{key} is not used by {context}"));
            }
        }
        for (key, v) in [("c0", self.c0), ("m", self.m), ("m0", self.m0), ("growth_c1", self.growth_c1)] {
            c.positive(section, key, v);
        }
        if let Some(cp) = self.c0_prime {
            if !(cp >= 0.0 && cp.is_finite()) {
                c.push(section, Some("c0_prime"), format!("c0_prime must be nonnegative, got {cp}"));
            }
        }
        if let Some(p) = self.pieces {
            if p < 2 {
                c.push(section, Some("pieces"), "pieces must be at least 2");
            }
        }
        if self.preset == "porous_clipped" && !relax {
            c.push(
                section,
                Some("preset"),
                "porous_clipped has a negative far-field intercept; set solver.relax_intercept = true",
            );
            return None;
        }
        if !complete {
            return None;
        }
        match self.build(relax) {
            Ok(g) => Some(g),
            Err(e) => {
                c.push(section, Some("preset"), e);
                None
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        config.validate_against(text)?;
        Ok(config)
    }

    /// Reads, parses and validates a file; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.initial.path, &mut config.forcing.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let text = self.to_toml();
        self.validate_against(&text)
    }

    fn validate_against(&self, text: &str) -> Result<(), ConfigError> {
        let mut c = Collector { text, out: Vec::new() };
        self.check_geometry(&mut c);
        let relax = self.solver.relax_intercept;
        let bulk = self.graph.validate("graph", relax, &mut c);
        let surface = self
            .surface_graph
            .as_ref()
            .map(|g| g.validate("surface_graph", relax, &mut c));
        if let (Some(b), Some(Some(s))) = (&bulk, &surface) {
            if let Err(e) = GraphPair::new(b.clone(), s.clone()).validate() {
                c.push(
                    "surface_graph",
                    Some("preset"),
                    format!("surface graph must share the bulk far field (same c0 and M0): {e}"),
                );
            }
        }
        self.check_time(&mut c);
        self.check_initial(&mut c);
        self.check_forcing(&mut c);
        self.check_output(&mut c);
        self.check_solver(&mut c);
        if c.out.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(c.out))
        }
    }

    fn check_geometry(&self, c: &mut Collector<'_>) {
        let g = &self.geometry;
        match g.kind.as_str() {
            "strip" => {
                c.forbid("geometry", "n", &g.n, "a strip");
                c.positive("geometry", "lx", g.lx);
                if c.require("geometry", "nx", &g.nx, "a strip") && g.nx.unwrap() < 4 {
                    c.push("geometry", Some("nx"), "nx must be at least 4");
                }
                if c.require("geometry", "ny", &g.ny, "a strip") && g.ny.unwrap() < 2 {
                    c.push("geometry", Some("ny"), "ny must be at least 2");
                }
            }
            "interval" => {
                for (key, v) in [("nx", g.nx), ("ny", g.ny)] {
                    c.forbid("geometry", key, &v, "an interval");
                }
                c.forbid("geometry", "lx", &g.lx, "an interval");
                if c.require("geometry", "n", &g.n, "an interval") && g.n.unwrap() < 2 {
                    c.push("geometry", Some("n"), "n must be at least 2");
                }
            }
            other => c.push("geometry", Some("kind"), format!("unknown geometry {other:?}; expected strip or interval")),
        }
    }

    fn check_time(&self, c: &mut Collector<'_>) {
        let t = &self.time;
        c.positive("time", "lambda", Some(t.lambda));
        c.positive("time", "tau", Some(t.tau));
        if !(t.horizon >= 0.0 && t.horizon.is_finite()) {
            c.push("time", Some("horizon"), format!("horizon must be nonnegative, got {}", t.horizon));
        }
        if t.tau > 0.0 && t.horizon / t.tau > 1e7 {
            c.push("time", Some("tau"), "more than 1e7 steps requested");
        }
    }

    fn check_initial(&self, c: &mut Collector<'_>) {
        let i = &self.initial;
        let s = "initial";
        let strip_mode = |c: &mut Collector<'_>| {
            if c.require(s, "k", &i.k, "mode profiles") && i.k == Some(0) {
                c.push(s, Some("k"), "k must be at least 1");
            }
        };
        match i.profile.as_str() {
            "zero" => {
                for (key, present) in [
                    ("k", i.k.is_some()),
                    ("seed", i.seed.is_some()),
                    ("amplitude", i.amplitude.is_some()),
                    ("m0", i.m0.is_some()),
                    ("path", i.path.is_some()),
                ] {
                    if present {
                        c.push(s, Some(key), format!("{key} is not used by the zero profile"));
                    }
                }
            }
            "single_mode" => {
                strip_mode(c);
                c.forbid(s, "seed", &i.seed, "single_mode");
                c.forbid(s, "m0", &i.m0, "single_mode");
                c.forbid(s, "path", &i.path, "single_mode");
            }
            "constant_plus_mode" => {
                strip_mode(c);
                c.require(s, "m0", &i.m0, "constant_plus_mode");
                c.forbid(s, "seed", &i.seed, "constant_plus_mode");
                c.forbid(s, "path", &i.path, "constant_plus_mode");
            }
            "random_mean_zero" => {
                c.require(s, "seed", &i.seed, "random_mean_zero");
                c.forbid(s, "k", &i.k, "random_mean_zero");
                c.forbid(s, "m0", &i.m0, "random_mean_zero");
                c.forbid(s, "path", &i.path, "random_mean_zero");
            }
            "file" => {
                c.require(s, "path", &i.path, "the file profile");
                for (key, present) in [
                    ("k", i.k.is_some()),
                    ("seed", i.seed.is_some()),
                    ("amplitude", i.amplitude.is_some()),
                    ("m0", i.m0.is_some()),
                ] {
                    if present {
                        c.push(s, Some(key), format!("{key} is not used by the file profile"));
                    }
                }
            }
            other => c.push(
                s,
                Some("profile"),
                format!("unknown profile {other:?}; expected zero, single_mode, random_mean_zero, constant_plus_mode or file"),
            ),
        }
        if let Some(a) = i.amplitude {
            if !a.is_finite() {
                c.push(s, Some("amplitude"), "amplitude must be finite");
            }
        }
        if let Some(m) = i.m0 {
            if !m.is_finite() {
                c.push(s, Some("m0"), "m0 must be finite");
            }
        }
    }

    fn check_forcing(&self, c: &mut Collector<'_>) {
        let f = &self.forcing;
        let s = "forcing";
        match f.kind.as_str() {
            "zero" => {
                for (key, present) in [
                    ("seed", f.seed.is_some()),
                    ("amplitude", f.amplitude.is_some()),
                    ("frequency", f.frequency.is_some()),
                    ("rate", f.rate.is_some()),
                    ("path", f.path.is_some()),
                ] {
                    if present {
                        c.push(s, Some(key), format!("{key} is not used by zero forcing"));
                    }
                }
            }
            "random_mean_zero" => {
                c.require(s, "seed", &f.seed, "random_mean_zero forcing");
                c.forbid(s, "rate", &f.rate, "random_mean_zero forcing");
                c.forbid(s, "path", &f.path, "random_mean_zero forcing");
            }
            "manufactured" => {
                if self.geometry.kind != "strip" {
                    c.push(s, Some("kind"), "manufactured forcing needs a strip geometry");
                }
                if self.graph.preset != "linear" || self.surface_graph.as_ref().is_some_and(|g| g != &self.graph) {
                    c.push(s, Some("kind"), "manufactured forcing needs the same linear graph in bulk and on the boundary");
                }
                if self.initial.profile != "single_mode" {
                    c.push(s, Some("kind"), "manufactured forcing needs the single_mode initial profile");
                }
                for (key, present) in [
                    ("seed", f.seed.is_some()),
                    ("amplitude", f.amplitude.is_some()),
                    ("frequency", f.frequency.is_some()),
                    ("path", f.path.is_some()),
                ] {
                    if present {
                        c.push(s, Some(key), format!("{key} is not used by manufactured forcing"));
                    }
                }
                if let Some(r) = f.rate {
                    if !r.is_finite() {
                        c.push(s, Some("rate"), "rate must be finite");
                    }
                }
            }
            "file" => {
                c.require(s, "path", &f.path, "file forcing");
                for (key, present) in [
                    ("seed", f.seed.is_some()),
                    ("amplitude", f.amplitude.is_some()),
                    ("frequency", f.frequency.is_some()),
                    ("rate", f.rate.is_some()),
                ] {
                    if present {
                        c.push(s, Some(key), format!("{key} is not used by file forcing"));
                    }
                }
            }
            other => c.push(
                s,
                Some("kind"),
                format!("unknown forcing {other:?}; expected zero, random_mean_zero, manufactured or file"),
            ),
        }
        if let Some(fr) = f.frequency {
            if !fr.is_finite() {
                c.push(s, Some("frequency"), "frequency must be finite");
            }
        }
    }

    fn check_output(&self, c: &mut Collector<'_>) {
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                c.push("output", Some("formats"), format!("unknown format {f:?}; expected csv or json"));
            }
        }
    }

    fn check_solver(&self, c: &mut Collector<'_>) {
        let s = &self.solver;
        c.positive("solver", "newton_tol", Some(s.newton_tol));
        if s.max_iter == 0 {
            c.push("solver", Some("max_iter"), "max_iter must be at least 1");
        }
        if s.dual_method != "pinned_cholesky" && s.dual_method != "deflated_cg" {
            c.push(
                "solver",
                Some("dual_method"),
                format!("unknown dual_method {:?}; expected pinned_cholesky or deflated_cg", s.dual_method),
            );
        }
    }

    pub fn geometry(&self) -> Geometry<f64> {
        let g = &self.geometry;
        match g.kind.as_str() {
            "interval" => Geometry::Interval { n: g.n.unwrap_or(2) },
            _ => Geometry::Strip {
                lx: g.lx.unwrap_or(1.0),
                nx: g.nx.unwrap_or(3),
                ny: g.ny.unwrap_or(2),
            },
        }
    }

    /// Graph pair of a validated config.
    pub fn graphs(&self) -> Result<Pair, String> {
        let relax = self.solver.relax_intercept;
        let bulk = self.graph.build(relax)?;
        Ok(match &self.surface_graph {
            Some(s) => GraphPair::new(bulk, s.build(relax)?),
            None => GraphPair::same(bulk),
        })
    }

    pub fn dual_method(&self) -> DualMethod {
        match self.solver.dual_method.as_str() {
            "deflated_cg" => DualMethod::DeflatedCg,
            _ => DualMethod::PinnedCholesky,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}
