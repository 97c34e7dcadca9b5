//! Run configuration: a TOML file with `[market]`, `[investor]`,
//! `[government]`, `[run]` and optional `[hjb]` sections, dotted-path
//! overrides, and a content hash stamped on every output.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hjb::{GridSteps, HjbSettings};
use crate::mc::{RateDrift, RateModel};
use crate::model::{self, AffineCoeff, BondSpec, ControlBox, GovPrefs, IndexSpec, IndexationMode, InvestorPrefs, MarketModel};
use crate::principal::PrincipalSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondSection {
    pub name: String,
    /// Years to maturity from `t = 0`.
    pub maturity: f64,
    pub rate: AffineCoeff,
    pub premium: AffineCoeff,
    pub vol: AffineCoeff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSection {
    pub maturity: f64,
    pub drift: AffineCoeff,
    pub vol: AffineCoeff,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub horizon: f64,
    /// Multiplies every rate, drift and volatility coefficient.
    #[serde(default = "one")]
    pub coefficient_scale: f64,
    #[serde(default)]
    pub indexation: IndexationMode,
    /// Sources whose Brownian driver is reflected after loading.
    #[serde(default)]
    pub reflect: Vec<usize>,
    #[serde(default)]
    pub control_box: ControlBox,
    /// Row-major correlation of (green…, conventional…, index).
    pub correlation: Vec<Vec<f64>>,
    pub green: Vec<BondSection>,
    pub conventional: Vec<BondSection>,
    pub index: IndexSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestorSection {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernmentSection {
    pub targets: Vec<f64>,
    pub kappa: f64,
    pub nu: f64,
    #[serde(default = "yes")]
    pub kappa_in_h: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    /// Intervals of the incentive schedule.
    pub grid_m: usize,
    pub antithetic: bool,
    pub output_dir: String,
    pub incentive_cap: f64,
    pub random_starts: usize,
    pub optimizer_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            n_paths: 10_000,
            n_steps: 100,
            grid_m: 10,
            antithetic: false,
            output_dir: "out".into(),
            incentive_cap: 10.0,
            random_starts: 2,
            optimizer_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateKind {
    /// `θ (m − r)`.
    Ou,
    /// Mean reversion to the deterministic green rate curve.
    Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSection {
    pub rate: RateKind,
    pub theta: f64,
    #[serde(default)]
    pub m: f64,
    pub sigma_r: f64,
    /// Pin the rate to the deterministic curve (single-node rate axis).
    #[serde(default)]
    pub frozen_rate: bool,
    pub steps: GridSteps,
    #[serde(default = "HjbSection::default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "HjbSection::default_iterations")]
    pub max_iterations: usize,
    /// Paths used for the policy diagnostic.
    #[serde(default = "HjbSection::default_paths")]
    pub n_paths: usize,
    /// Relative tolerance of the policy diagnostic against the deterministic
    /// schedule.
    #[serde(default = "HjbSection::default_policy_tolerance")]
    pub policy_tolerance: f64,
}

impl HjbSection {
    fn default_tolerance() -> f64 {
        1e-6
    }
    fn default_iterations() -> usize {
        20
    }
    fn default_paths() -> usize {
        200
    }
    fn default_policy_tolerance() -> f64 {
        0.10
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketSection,
    pub investor: InvestorSection,
    pub government: GovernmentSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbSection>,
}

/// A parsed configuration with its hash.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    /// Hash of the inputs that determine the incentive schedule; downstream
    /// inputs are checked against it so that simulation settings may change.
    pub design_hash: String,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets `section.key[.key…] = value` in a TOML tree. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path '{path}'")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("'{path}' does not name a table")))?;
        node = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("'{path}' does not name a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
        let mut tree: toml::Value = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: RunConfig = tree.try_into().map_err(config_err)?;
        config.validate()?;
        let hash = config.hash()?;
        let design_hash = config.design_hash()?;
        Ok(LoadedConfig { config, hash, design_hash })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// SHA-256 of the market, investor and government sections and the
    /// optimizer settings.
    pub fn design_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Design<'a> {
            market: &'a MarketSection,
            investor: &'a InvestorSection,
            government: &'a GovernmentSection,
            grid_m: usize,
            incentive_cap: f64,
            random_starts: usize,
            optimizer_seed: u64,
        }
        let r = &self.run;
        let d = Design {
            market: &self.market,
            investor: &self.investor,
            government: &self.government,
            grid_m: r.grid_m,
            incentive_cap: r.incentive_cap,
            random_starts: r.random_starts,
            optimizer_seed: r.optimizer_seed,
        };
        let text = toml::to_string(&d).map_err(config_err)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model()?;
        self.investor().validate(m.n_sources())?;
        self.government().validate(m.d_g())?;
        let r = &self.run;
        if r.n_paths == 0 || r.n_steps == 0 || r.grid_m == 0 {
            return Err(Error::InvalidParameter("n_paths, n_steps and grid_m must be positive".into()));
        }
        if r.antithetic && r.n_paths % 2 != 0 {
            return Err(Error::InvalidParameter("antithetic sampling needs an even number of paths".into()));
        }
        if !(r.incentive_cap > 0.0) {
            return Err(Error::InvalidParameter("incentive_cap must be positive".into()));
        }
        if let Some(h) = &self.hjb {
            if m.d_g() != 1 {
                return Err(Error::Config(format!(
                    "[hjb] handles exactly one green bond, the market has {}",
                    m.d_g()
                )));
            }
            if !(h.theta >= 0.0) || !(h.sigma_r >= 0.0) || !h.m.is_finite() {
                return Err(Error::InvalidParameter("[hjb] needs theta >= 0, sigma_r >= 0 and finite m".into()));
            }
            if h.steps.time == 0 || h.steps.x < 2 || h.steps.w_g < 2 || h.steps.w_i < 2 || (!h.frozen_rate && h.steps.r < 2) {
                return Err(Error::InvalidParameter("[hjb] steps need at least 3 nodes per live axis".into()));
            }
        }
        Ok(())
    }

    /// Market model with scaling and reflections applied, validated.
    pub fn model(&self) -> Result<MarketModel> {
        let s = &self.market;
        let n = s.green.len() + s.conventional.len() + 1;
        if s.correlation.len() != n || s.correlation.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("correlation must be {n}x{n}")));
        }
        let bond = |b: &BondSection| BondSpec {
            name: b.name.clone(),
            maturity: b.maturity,
            rate: b.rate,
            premium: b.premium,
            vol: b.vol,
        };
        let mut m = MarketModel {
            horizon: s.horizon,
            green: s.green.iter().map(bond).collect(),
            conventional: s.conventional.iter().map(bond).collect(),
            index: IndexSpec { maturity: s.index.maturity, drift: s.index.drift, vol: s.index.vol },
            correlation: DMatrix::from_fn(n, n, |i, j| s.correlation[i][j]),
            control_box: s.control_box,
            coefficient_scale: s.coefficient_scale,
            mode: s.indexation,
        };
        for &k in &s.reflect {
            if k >= n {
                return Err(Error::InvalidParameter(format!("reflected source {k} out of range")));
            }
            m.reflect_source(k);
        }
        model::validate(&m)?;
        Ok(m)
    }

    pub fn investor(&self) -> InvestorPrefs {
        InvestorPrefs {
            alpha: DVector::from_vec(self.investor.alpha.clone()),
            beta: DVector::from_vec(self.investor.beta.clone()),
            gamma: self.investor.gamma,
        }
    }

    pub fn government(&self) -> GovPrefs {
        let g = &self.government;
        GovPrefs { targets: DVector::from_vec(g.targets.clone()), kappa: g.kappa, nu: g.nu, kappa_in_h: g.kappa_in_h }
    }

    pub fn principal_settings(&self) -> PrincipalSettings {
        PrincipalSettings {
            incentive_cap: self.run.incentive_cap,
            random_starts: self.run.random_starts,
            seed: self.run.optimizer_seed,
        }
    }

    pub fn rate_model(&self) -> Option<RateModel> {
        self.hjb.as_ref().map(|h| RateModel {
            drift: match h.rate {
                RateKind::Ou => RateDrift::Ou { theta: h.theta, m: h.m },
                RateKind::Curve => RateDrift::CurveReverting { theta: h.theta },
            },
            sigma_r: h.sigma_r,
        })
    }

    pub fn hjb_settings(&self) -> HjbSettings {
        let mut s = HjbSettings {
            incentive_cap: self.run.incentive_cap,
            random_starts: self.run.random_starts,
            seed: self.run.optimizer_seed,
            ..HjbSettings::default()
        };
        if let Some(h) = &self.hjb {
            s.tolerance = h.tolerance;
            s.max_iterations = h.max_iterations;
        }
        s
    }

    /// Market section describing `m` as is (no scaling or reflection).
    pub fn market_section(m: &MarketModel) -> MarketSection {
        let bond = |b: &BondSpec| BondSection {
            name: b.name.clone(),
            maturity: b.maturity,
            rate: b.rate,
            premium: b.premium,
            vol: b.vol,
        };
        let n = m.n_sources();
        MarketSection {
            horizon: m.horizon,
            coefficient_scale: m.coefficient_scale,
            indexation: m.mode,
            reflect: Vec::new(),
            control_box: m.control_box,
            correlation: (0..n).map(|i| (0..n).map(|j| m.correlation[(i, j)]).collect()).collect(),
            green: m.green.iter().map(bond).collect(),
            conventional: m.conventional.iter().map(bond).collect(),
            index: IndexSection { maturity: m.index.maturity, drift: m.index.drift, vol: m.index.vol },
        }
    }
}

impl LoadedConfig {
    /// `config_hash=… design_hash=… seed=…` line stamped on outputs.
    pub fn provenance(&self) -> String {
        format!("config_hash={} design_hash={} seed={}", self.hash, self.design_hash, self.config.run.seed)
    }

    /// Rejects an input whose provenance names another contract design.
    pub fn check_provenance(&self, line: &str) -> Result<()> {
        let found = line
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("design_hash="))
            .ok_or_else(|| Error::Parse { line: 1, message: "input carries no design hash".into() })?;
        if found != self.design_hash {
            return Err(Error::ConfigHashMismatch { expected: self.design_hash.clone(), found: found.to_string() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[market]
horizon = 1.0
correlation = [[1.0, 0.3, 0.2], [0.3, 1.0, 0.1], [0.2, 0.1, 1.0]]
green = [{ name = "G", maturity = 10.0, rate = { a = 0.01, b = 0.0 }, premium = { a = 0.1, b = 0.0 }, vol = { a = 0.05, b = 0.0 } }]
conventional = [{ name = "C", maturity = 5.0, rate = { a = 0.02, b = 0.0 }, premium = { a = 0.1, b = 0.0 }, vol = { a = 0.04, b = 0.0 } }]
index = { maturity = 5.0, drift = { a = 0.02, b = 0.0 }, vol = { a = 0.04, b = 0.0 } }

[investor]
alpha = [0.2, 0.2, 0.5]
beta = [0.4, 0.4, 0.4]
gamma = 1.0

[government]
targets = [0.0]
kappa = 0.0
nu = 1.0
"#;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let c = RunConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.config.run, RunSection::default());
        assert_eq!(c.config.market.indexation, IndexationMode::RiskSource);
        assert!(c.config.hjb.is_none());
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn overrides_change_values_and_hash() {
        let base = RunConfig::parse(MINIMAL, &[]).unwrap();
        let o = RunConfig::parse(MINIMAL, &s(&["government.kappa=0.8", "run.seed=7", "market.indexation=price"])).unwrap();
        assert_eq!(o.config.government.kappa, 0.8);
        assert_eq!(o.config.run.seed, 7);
        assert_eq!(o.config.market.indexation, IndexationMode::Price);
        assert_ne!(base.hash, o.hash);
        let again = RunConfig::parse(MINIMAL, &s(&["run.seed=7", "government.kappa=0.8", "market.indexation=price"])).unwrap();
        assert_eq!(o.hash, again.hash);
    }

    #[test]
    fn negative_kappa_is_rejected() {
        let e = RunConfig::parse(MINIMAL, &s(&["government.kappa=-1"])).unwrap_err();
        assert!(matches!(e, Error::InvalidParameter(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_rejected() {
        assert!(matches!(RunConfig::parse(MINIMAL, &s(&["run.speed=3"])), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse(MINIMAL, &s(&["nonsense"])), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse(MINIMAL, &s(&["market.horizon.x=1"])), Err(Error::Config(_))));
    }

    #[test]
    fn serialization_roundtrips() {
        let c = RunConfig::parse(MINIMAL, &s(&["run.n_paths=64"])).unwrap();
        let back = RunConfig::parse(&c.config.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn provenance_mismatch_is_detected() {
        let c = RunConfig::parse(MINIMAL, &[]).unwrap();
        c.check_provenance(&c.provenance()).unwrap();
        assert!(matches!(c.check_provenance("config_hash=abc design_hash=abc seed=1"), Err(Error::ConfigHashMismatch { .. })));
        let resampled = RunConfig::parse(MINIMAL, &s(&["run.n_paths=10", "run.seed=3"])).unwrap();
        resampled.check_provenance(&c.provenance()).unwrap();
        let other = RunConfig::parse(MINIMAL, &s(&["government.nu=2"])).unwrap();
        assert!(other.check_provenance(&c.provenance()).is_err());
        assert!(matches!(c.check_provenance("seed=1"), Err(Error::Parse { .. })));
    }

    #[test]
    fn hjb_section_requires_one_green_bond_and_valid_rate() {
        let hjb = "\n[hjb]\nrate = \"ou\"\ntheta = 0.4\nm = 0.04\nsigma_r = 0.02\nsteps = { time = 10, x = 40, w_g = 20, r = 10, w_i = 20 }\n";
        let c = RunConfig::parse(&format!("{MINIMAL}{hjb}"), &[]).unwrap();
        let r = c.config.rate_model().unwrap();
        assert_eq!(r.drift, RateDrift::Ou { theta: 0.4, m: 0.04 });
        assert!(matches!(RunConfig::parse(&format!("{MINIMAL}{hjb}"), &s(&["hjb.sigma_r=-1"])), Err(Error::InvalidParameter(_))));
    }
}
