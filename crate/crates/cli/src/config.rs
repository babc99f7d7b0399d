//! Run configuration: a flat `key = value` text format with full override
//! support, canonical serialisation, and a content hash.
//!
//! Grammar: one `key = value` pair per line; blank lines and `#` comments
//! are ignored; keys are dotted lowercase identifiers. Unknown keys are
//! rejected. `seed` is mandatory — every run must be replayable.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Time-marching backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Dbdp,
    Lsmc,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Dbdp => "dbdp",
            Backend::Lsmc => "lsmc",
        }
    }
}

/// Spatial basis family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisChoice {
    Legendre,
    Lagrange,
}

impl BasisChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisChoice::Legendre => "legendre",
            BasisChoice::Lagrange => "lagrange",
        }
    }
}

/// Numerical flux pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxChoice {
    /// `u_hat = u^-`, `p_hat = p^+`.
    Default,
    /// The mirrored pairing.
    Alternate,
}

impl FluxChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            FluxChoice::Default => "default",
            FluxChoice::Alternate => "alternate",
        }
    }
}

/// DBDP hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbdpParams {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub warm_start: bool,
}

impl Default for DbdpParams {
    fn default() -> Self {
        DbdpParams {
            batch: 256,
            steps: 400,
            lr: 1e-2,
            lr_decay: 0.5,
            lr_decay_every: 200,
            warm_start: true,
        }
    }
}

/// LSMC hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcParams {
    pub paths: usize,
    pub degree: usize,
}

impl Default for LsmcParams {
    fn default() -> Self {
        LsmcParams {
            paths: 200_000,
            degree: 6,
        }
    }
}

/// One experiment configuration. Output locations are CLI arguments, not
/// configuration: the hash below covers exactly the semantic fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: String,
    pub k: usize,
    pub n: usize,
    pub dt: f64,
    pub horizon: f64,
    pub backend: Backend,
    pub basis: BasisChoice,
    /// Gauss-Legendre points per cell; 0 selects the default `k + 2`.
    pub quad_order: usize,
    pub flux: FluxChoice,
    pub seed: u64,
    pub dbdp: DbdpParams,
    pub lsmc: LsmcParams,
}

impl RunConfig {
    /// A config with defaults for everything except the mandatory seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            problem: "example1".into(),
            k: 2,
            n: 10,
            dt: 0.05,
            horizon: 0.5,
            backend: Backend::Dbdp,
            basis: BasisChoice::Legendre,
            quad_order: 0,
            flux: FluxChoice::Default,
            seed,
            dbdp: DbdpParams::default(),
            lsmc: LsmcParams::default(),
        }
    }

    /// Parse the flat key-value format. `seed` must be present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::with_seed(0);
        let mut seen_seed = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            if key == "seed" {
                seen_seed = true;
            }
            cfg.set(key, value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        if !seen_seed {
            bail!("config is missing the mandatory `seed` key");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: core::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow!("bad value for {key}: {e}"))
        }
        match key {
            "problem" => self.problem = value.to_string(),
            "k" => self.k = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "t_final" => self.horizon = num(key, value)?,
            "backend" => {
                self.backend = match value {
                    "dbdp" => Backend::Dbdp,
                    "lsmc" => Backend::Lsmc,
                    other => bail!("unknown backend '{other}' (dbdp|lsmc)"),
                }
            }
            "basis" => {
                self.basis = match value {
                    "legendre" => BasisChoice::Legendre,
                    "lagrange" => BasisChoice::Lagrange,
                    other => bail!("unknown basis '{other}' (legendre|lagrange)"),
                }
            }
            "quad_order" => self.quad_order = num(key, value)?,
            "flux" => {
                self.flux = match value {
                    "default" => FluxChoice::Default,
                    "alternate" => FluxChoice::Alternate,
                    other => bail!("unknown flux '{other}' (default|alternate)"),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "dbdp.batch" => self.dbdp.batch = num(key, value)?,
            "dbdp.steps" => self.dbdp.steps = num(key, value)?,
            "dbdp.lr" => self.dbdp.lr = num(key, value)?,
            "dbdp.lr_decay" => self.dbdp.lr_decay = num(key, value)?,
            "dbdp.lr_decay_every" => self.dbdp.lr_decay_every = num(key, value)?,
            "dbdp.warm_start" => self.dbdp.warm_start = num(key, value)?,
            "lsmc.paths" => self.lsmc.paths = num(key, value)?,
            "lsmc.degree" => self.lsmc.degree = num(key, value)?,
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// Range checks shared by parsing and overrides.
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.k) {
            bail!("k = {} outside 1..=8", self.k);
        }
        if self.n < 2 || self.n > 4096 {
            bail!("n = {} outside 2..=4096", self.n);
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            bail!("dt must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bail!("t_final must be positive");
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) || steps.round() < 1.0 {
            bail!(
                "dt = {} does not divide the horizon {} into whole steps",
                self.dt,
                self.horizon
            );
        }
        if self.quad_order != 0 && !(self.k + 1..=32).contains(&self.quad_order) {
            bail!(
                "quad_order = {} outside {}..=32 (0 selects the default k + 2)",
                self.quad_order,
                self.k + 1
            );
        }
        if self.dbdp.batch < 2 {
            bail!("dbdp.batch must be at least 2");
        }
        if self.dbdp.steps == 0 || self.dbdp.lr_decay_every == 0 {
            bail!("dbdp.steps and dbdp.lr_decay_every must be positive");
        }
        if !(self.dbdp.lr > 0.0) || !(self.dbdp.lr_decay > 0.0 && self.dbdp.lr_decay <= 1.0) {
            bail!("dbdp.lr must be positive and dbdp.lr_decay in (0, 1]");
        }
        if self.lsmc.paths == 0 {
            bail!("lsmc.paths must be positive");
        }
        if self.lsmc.degree > 12 {
            bail!("lsmc.degree = {} outside 0..=12", self.lsmc.degree);
        }
        Ok(())
    }

    /// Number of time steps implied by `dt` and the horizon.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Canonical key-value serialisation; parsing it back reproduces the
    /// config exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("problem = {}\n", self.problem));
        s.push_str(&format!("k = {}\n", self.k));
        s.push_str(&format!("n = {}\n", self.n));
        s.push_str(&format!("dt = {}\n", self.dt));
        s.push_str(&format!("t_final = {}\n", self.horizon));
        s.push_str(&format!("backend = {}\n", self.backend.as_str()));
        s.push_str(&format!("basis = {}\n", self.basis.as_str()));
        s.push_str(&format!("quad_order = {}\n", self.quad_order));
        s.push_str(&format!("flux = {}\n", self.flux.as_str()));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("dbdp.batch = {}\n", self.dbdp.batch));
        s.push_str(&format!("dbdp.steps = {}\n", self.dbdp.steps));
        s.push_str(&format!("dbdp.lr = {}\n", self.dbdp.lr));
        s.push_str(&format!("dbdp.lr_decay = {}\n", self.dbdp.lr_decay));
        s.push_str(&format!(
            "dbdp.lr_decay_every = {}\n",
            self.dbdp.lr_decay_every
        ));
        s.push_str(&format!("dbdp.warm_start = {}\n", self.dbdp.warm_start));
        s.push_str(&format!("lsmc.paths = {}\n", self.lsmc.paths));
        s.push_str(&format!("lsmc.degree = {}\n", self.lsmc.degree));
        s
    }

    /// Content hash of the canonical serialisation (first 16 hex digits of
    /// SHA-256): changes exactly when a semantic field changes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        let mut out = String::with_capacity(16);
        for byte in &digest[..8] {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
