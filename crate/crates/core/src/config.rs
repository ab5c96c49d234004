//! Solver configuration and its flat `key = value` file format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Group-level prior applied in the proximal step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    /// ℓ0 coding over rank-one SVD atoms.
    Gsr,
    /// ℓ1 coding of the residual against an NLM estimate of the codes.
    Gsrc,
    /// Internal PCA codes coupled with an external GMM sub-dictionary.
    Hsse,
    /// Weighted nuclear norm.
    Nlr,
    /// ℓ1 residual between the spectrum and a reference spectrum.
    Rrc,
    /// ℓ1 codes coupled with a low-rank code matrix.
    Lrgsc,
    /// Truncated nuclear norm: top singular values untouched.
    Trunc,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 7] = [
        RegularizerKind::Gsr,
        RegularizerKind::Gsrc,
        RegularizerKind::Hsse,
        RegularizerKind::Nlr,
        RegularizerKind::Rrc,
        RegularizerKind::Lrgsc,
        RegularizerKind::Trunc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::Gsr => "gsr",
            RegularizerKind::Gsrc => "gsrc",
            RegularizerKind::Hsse => "hsse",
            RegularizerKind::Nlr => "nlr",
            RegularizerKind::Rrc => "rrc",
            RegularizerKind::Lrgsc => "lrgsc",
            RegularizerKind::Trunc => "trunc",
        }
    }

    /// Calibrated on 8-bit images at rate 0.1 together with
    /// [`default_lambda_decay`](Self::default_lambda_decay).
    pub fn default_lambda(self) -> f64 {
        match self {
            RegularizerKind::Gsr => 2e6,
            RegularizerKind::Gsrc => 1000.0,
            RegularizerKind::Hsse => 2000.0,
            RegularizerKind::Nlr => 1e6,
            RegularizerKind::Rrc => 1000.0,
            RegularizerKind::Lrgsc => 800.0,
            RegularizerKind::Trunc => 1000.0,
        }
    }

    pub fn default_tau(self) -> f64 {
        match self {
            RegularizerKind::Hsse => 1000.0,
            RegularizerKind::Lrgsc => 1500.0,
            _ => 0.0,
        }
    }

    /// Per-iteration geometric factor applied to λ and τ.
    pub fn default_lambda_decay(self) -> f64 {
        match self {
            RegularizerKind::Gsr | RegularizerKind::Nlr | RegularizerKind::Lrgsc => 0.9,
            _ => 0.93,
        }
    }

    /// Alternation rounds (HSSE, LR-GSC) or WNNM re-weighting rounds.
    pub fn default_inner_iters(self) -> usize {
        match self {
            RegularizerKind::Hsse => 2,
            RegularizerKind::Lrgsc => 3,
            _ => 1,
        }
    }

    pub fn needs_gmm(self) -> bool {
        self == RegularizerKind::Hsse
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown regularizer `{s}`")))
    }
}

/// Every knob of the outer loop and of the group priors.
///
/// Fields stored as `Option` default to a value that depends on the chosen
/// regularizer (`lambda`, `tau`, `inner_iters`,
/// `lambda_decay`) or on the measurements (`eta`);
/// they are written as `auto` in config files.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub block_size: usize,
    pub sampling_rate: f64,
    /// Orthonormalize the rows of the sensing matrix.
    pub ortho: bool,
    /// Std-dev of additive Gaussian noise on the measurements.
    pub noise_sigma: f64,
    pub patch_side: usize,
    pub group_size: usize,
    pub search_window: usize,
    /// Exemplar grid step; values above `patch_side` act as `patch_side`.
    pub patch_stride: usize,
    pub outer_iters: usize,
    pub inner_iters: Option<usize>,
    pub mu: f64,
    pub lambda: Option<f64>,
    pub rho: f64,
    pub tau: Option<f64>,
    pub eta: Option<f64>,
    pub h: f64,
    pub k_wnnm: f64,
    pub eps_wnnm: f64,
    pub trunc_rank: usize,
    pub regularizer: RegularizerKind,
    pub seed: u64,
    /// Redo block matching every `match_every` outer iterations.
    pub match_every: usize,
    /// Per-iteration geometric factor on λ and τ; 1 keeps them constant.
    pub lambda_decay: Option<f64>,
    /// Stop once ‖Δx‖/‖x‖ falls below this value.
    pub rel_tol: Option<f64>,
    pub gmm_components: usize,
    pub em_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            block_size: 32,
            sampling_rate: 0.1,
            ortho: false,
            noise_sigma: 0.0,
            patch_side: 8,
            group_size: 60,
            search_window: 40,
            patch_stride: 4,
            outer_iters: 60,
            inner_iters: None,
            mu: 1.0,
            lambda: None,
            rho: 1.0,
            tau: None,
            eta: None,
            h: 6400.0,
            k_wnnm: 2.8,
            eps_wnnm: 1e-8,
            trunc_rank: 4,
            regularizer: RegularizerKind::Gsrc,
            seed: 0,
            match_every: 1,
            lambda_decay: None,
            rel_tol: None,
            gmm_components: 32,
            em_iters: 30,
        }
    }
}

/// Keys in file order.
const KEYS: &[&str] = &[
    "block_size",
    "sampling_rate",
    "ortho",
    "noise_sigma",
    "patch_side",
    "group_size",
    "search_window",
    "patch_stride",
    "outer_iters",
    "inner_iters",
    "mu",
    "lambda",
    "rho",
    "tau",
    "eta",
    "h",
    "k_wnnm",
    "eps_wnnm",
    "trunc_rank",
    "regularizer",
    "seed",
    "match_every",
    "lambda_decay",
    "rel_tol",
    "gmm_components",
    "em_iters",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("bad value `{value}` for `{key}`"))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value.eq_ignore_ascii_case("auto") || value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("bad value `{value}` for `{key}`")),
    }
}

fn show<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl SolverConfig {
    pub fn for_regularizer(kind: RegularizerKind) -> Self {
        Self {
            regularizer: kind,
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| self.regularizer.default_lambda())
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| self.regularizer.default_tau())
    }

    pub fn lambda_decay(&self) -> f64 {
        self.lambda_decay
            .unwrap_or_else(|| self.regularizer.default_lambda_decay())
    }

    pub fn inner_iters(&self) -> usize {
        self.inner_iters
            .unwrap_or_else(|| self.regularizer.default_inner_iters())
    }

    /// Zero every penalty weight, turning each group prior into the identity.
    pub fn without_penalties(mut self) -> Self {
        self.lambda = Some(0.0);
        self.tau = Some(0.0);
        self.k_wnnm = 0.0;
        self.trunc_rank = self.patch_side * self.patch_side;
        self
    }

    /// Copy with every `auto` field replaced by its regularizer default.
    /// `eta` stays `auto` because it depends on the measurements.
    pub fn resolved(&self) -> Self {
        Self {
            lambda: Some(self.lambda()),
            tau: Some(self.tau()),
            inner_iters: Some(self.inner_iters()),
            lambda_decay: Some(self.lambda_decay()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return fail(format!("sampling_rate {} not in (0, 1]", self.sampling_rate));
        }
        if self.block_size == 0 {
            return fail("block_size must be positive".into());
        }
        if self.patch_side == 0 || self.patch_side > self.block_size {
            return fail(format!(
                "patch_side {} must be in 1..={}",
                self.patch_side, self.block_size
            ));
        }
        if self.group_size == 0 {
            return fail("group_size must be at least 1".into());
        }
        if self.search_window < self.patch_side {
            return fail(format!(
                "search_window {} smaller than patch_side {}",
                self.search_window, self.patch_side
            ));
        }
        if self.patch_stride == 0 || self.match_every == 0 {
            return fail("patch_stride and match_every must be positive".into());
        }
        if self.inner_iters == Some(0) {
            return fail("inner_iters must be positive".into());
        }
        let weights = [
            ("mu", Some(self.mu)),
            ("lambda", self.lambda),
            ("rho", Some(self.rho)),
            ("tau", self.tau),
            ("eta", self.eta),
            ("k_wnnm", Some(self.k_wnnm)),
            ("noise_sigma", Some(self.noise_sigma)),
        ];
        for (name, value) in weights {
            if let Some(v) = value {
                if !(v >= 0.0 && v.is_finite()) {
                    return fail(format!("{name} = {v} must be finite and nonnegative"));
                }
            }
        }
        if !(self.eps_wnnm > 0.0) {
            return fail(format!("eps_wnnm = {} must be positive", self.eps_wnnm));
        }
        if !(self.h > 0.0) {
            return fail(format!("h = {} must be positive", self.h));
        }
        let decay = self.lambda_decay();
        if !(decay > 0.0 && decay <= 1.0) {
            return fail(format!("lambda_decay {decay} not in (0, 1]"));
        }
        if self.gmm_components == 0 {
            return fail("gmm_components must be at least 1".into());
        }
        Ok(())
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key.trim() {
            "block_size" => self.block_size = parse_num(key, value)?,
            "sampling_rate" => self.sampling_rate = parse_num(key, value)?,
            "ortho" => self.ortho = parse_bool(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "patch_side" => self.patch_side = parse_num(key, value)?,
            "group_size" | "m" => self.group_size = parse_num(key, value)?,
            "search_window" => self.search_window = parse_num(key, value)?,
            "patch_stride" => self.patch_stride = parse_num(key, value)?,
            "outer_iters" => self.outer_iters = parse_num(key, value)?,
            "inner_iters" => self.inner_iters = parse_auto(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "lambda" => self.lambda = parse_auto(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "tau" => self.tau = parse_auto(key, value)?,
            "eta" => self.eta = parse_auto(key, value)?,
            "h" => self.h = parse_num(key, value)?,
            "k_wnnm" => self.k_wnnm = parse_num(key, value)?,
            "eps_wnnm" => self.eps_wnnm = parse_num(key, value)?,
            "trunc_rank" => self.trunc_rank = parse_num(key, value)?,
            "regularizer" => {
                self.regularizer = value.parse().map_err(|e: Error| e.to_string())?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "match_every" => self.match_every = parse_num(key, value)?,
            "lambda_decay" => self.lambda_decay = parse_auto(key, value)?,
            "rel_tol" => self.rel_tol = parse_auto(key, value)?,
            "gmm_components" => self.gmm_components = parse_num(key, value)?,
            "em_iters" => self.em_iters = parse_num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "block_size" => self.block_size.to_string(),
            "sampling_rate" => self.sampling_rate.to_string(),
            "ortho" => self.ortho.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "patch_side" => self.patch_side.to_string(),
            "group_size" => self.group_size.to_string(),
            "search_window" => self.search_window.to_string(),
            "patch_stride" => self.patch_stride.to_string(),
            "outer_iters" => self.outer_iters.to_string(),
            "inner_iters" => show(&self.inner_iters),
            "mu" => self.mu.to_string(),
            "lambda" => show(&self.lambda),
            "rho" => self.rho.to_string(),
            "tau" => show(&self.tau),
            "eta" => show(&self.eta),
            "h" => self.h.to_string(),
            "k_wnnm" => self.k_wnnm.to_string(),
            "eps_wnnm" => self.eps_wnnm.to_string(),
            "trunc_rank" => self.trunc_rank.to_string(),
            "regularizer" => self.regularizer.to_string(),
            "seed" => self.seed.to_string(),
            "match_every" => self.match_every.to_string(),
            "lambda_decay" => show(&self.lambda_decay),
            "rel_tol" => show(&self.rel_tol),
            "gmm_components" => self.gmm_components.to_string(),
            "em_iters" => self.em_iters.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Parse the `key = value` format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value).map_err(|msg| Error::ConfigParse {
                line: idx + 1,
                msg,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for SolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.get(key))?;
        }
        Ok(())
    }
}
