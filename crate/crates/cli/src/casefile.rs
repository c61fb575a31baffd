//! TOML case files: network parameters, controller settings, and a default
//! scenario in one self-contained document.
//!
//! Bus and edge references in the file are 1-based (the convention of the
//! standard test-system tables); they are converted to 0-based indices on
//! load.  Frequency bands are given in Hz and converted to rad/s.

use serde::Deserialize;
use std::path::Path;
use swingsafe_core::controller::ControllerConfig;
use swingsafe_core::netmodel::{DisturbanceProfile, ForecastMode, NetworkError, PowerNetwork};
use swingsafe_core::units::hz_to_rad_s;
use thiserror::Error;

/// Case file format version understood by this build.
pub const SUPPORTED_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("case file parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("case schema error: {detail}")]
    Schema { detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn schema(detail: impl Into<String>) -> CaseError {
    CaseError::Schema {
        detail: detail.into(),
    }
}

#[derive(Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub version: u32,
    pub name: Option<String>,
    #[serde(default)]
    pub buses: Vec<BusEntry>,
    #[serde(default)]
    pub edges: Vec<EdgeEntry>,
    pub sets: SetsEntry,
    #[serde(default)]
    pub controller: ControllerEntry,
    pub scenario: Option<ScenarioEntry>,
}

#[derive(Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    /// 1-based bus id; ids must be 1..=n in order.
    pub id: usize,
    pub inertia: f64,
    pub damping: f64,
    pub injection: f64,
}

#[derive(Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

#[derive(Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsEntry {
    /// 1-based ids of buses with bottom-layer actuation (`I_u`).
    pub controlled: Vec<usize>,
    /// 1-based ids of buses with frequency guarantees (`I_ω`).
    pub safety: Vec<usize>,
}

/// Controller settings; all fields optional with the reference defaults.
#[derive(Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerEntry {
    /// Safe band half-width in Hz (default 0.2).
    pub band_hz: Option<f64>,
    /// Threshold half-width in Hz (default 0.1).
    pub threshold_hz: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    /// Effort weight on safety buses (default 4).
    pub effort_weight_safety: Option<f64>,
    /// Effort weight elsewhere (default 1).
    pub effort_weight: Option<f64>,
    pub slack_weight: Option<f64>,
    pub sample_period: Option<f64>,
    pub horizon_time: Option<f64>,
    pub prediction_step: Option<f64>,
    /// `"perfect"` or `"hold-current"` (default perfect).
    pub forecast: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub t_end: f64,
    pub dt: f64,
    /// Write every k-th integrator step to the trajectory CSV (default 1).
    pub output_every: Option<usize>,
    pub disturbance: Option<DisturbanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    /// `"none"` or `"ramp-hold-ramp"`.
    pub kind: String,
    #[serde(default)]
    pub buses: Vec<usize>,
    pub peak: Option<f64>,
    pub t_ramp_end: Option<f64>,
    pub t_hold_end: Option<f64>,
    pub t_end: Option<f64>,
}

impl CaseFile {
    pub fn parse(text: &str) -> Result<Self, CaseError> {
        let case: CaseFile = toml::from_str(text)?;
        if case.version != SUPPORTED_VERSION {
            return Err(schema(format!(
                "unsupported case version {} (this build reads version {SUPPORTED_VERSION})",
                case.version
            )));
        }
        if case.buses.is_empty() {
            return Err(schema("case defines no buses"));
        }
        for (k, bus) in case.buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(schema(format!(
                    "bus ids must be 1..={} in order; entry {} has id {}",
                    case.buses.len(),
                    k + 1,
                    bus.id
                )));
            }
        }
        Ok(case)
    }

    pub fn load(path: &Path) -> Result<Self, CaseError> {
        let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn to_zero_based(&self, id: usize, role: &str) -> Result<usize, CaseError> {
        if id == 0 || id > self.buses.len() {
            return Err(schema(format!(
                "{role} references bus {id}, outside 1..={}",
                self.buses.len()
            )));
        }
        Ok(id - 1)
    }

    /// Builds the network; `rebalance` subtracts the mean injection so the
    /// total balances exactly (useful for hand-edited parameter sets).
    pub fn network(&self, rebalance: bool) -> Result<PowerNetwork, CaseError> {
        let mut injection: Vec<f64> = self.buses.iter().map(|b| b.injection).collect();
        if rebalance {
            let mean = injection.iter().sum::<f64>() / injection.len() as f64;
            for p in &mut injection {
                *p -= mean;
            }
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        let mut susceptance = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            let a = self.to_zero_based(e.from, "edge endpoint")?;
            let b = self.to_zero_based(e.to, "edge endpoint")?;
            edges.push((a, b));
            susceptance.push(e.susceptance);
        }
        let controlled = self
            .sets
            .controlled
            .iter()
            .map(|&id| self.to_zero_based(id, "controlled set"))
            .collect::<Result<Vec<_>, _>>()?;
        let safety = self
            .sets
            .safety
            .iter()
            .map(|&id| self.to_zero_based(id, "safety set"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PowerNetwork::new(
            edges,
            susceptance,
            self.buses.iter().map(|b| b.inertia).collect(),
            self.buses.iter().map(|b| b.damping).collect(),
            injection,
            controlled,
            safety,
        )?)
    }

    /// Controller configuration: the reference defaults overridden by the
    /// `[controller]` table.
    pub fn controller_config(&self, net: &PowerNetwork) -> Result<ControllerConfig, CaseError> {
        let n = net.n_buses();
        let mut cfg = ControllerConfig::table_defaults(net);
        let c = &self.controller;
        if let Some(band) = c.band_hz {
            let w = hz_to_rad_s(band);
            cfg.omega_min = vec![-w; n];
            cfg.omega_max = vec![w; n];
        }
        if let Some(thr) = c.threshold_hz {
            let w = hz_to_rad_s(thr);
            cfg.omega_thr_min = vec![-w; n];
            cfg.omega_thr_max = vec![w; n];
        }
        if let Some(g) = c.gamma {
            cfg.gamma_upper = vec![g; n];
            cfg.gamma_lower = vec![g; n];
        }
        if let Some(e) = c.epsilon {
            cfg.epsilon = vec![e; n];
        }
        if let Some(t) = c.tau {
            cfg.tau = vec![t; n];
        }
        let base = c.effort_weight.unwrap_or(1.0);
        let on_safety = c.effort_weight_safety.unwrap_or(4.0);
        cfg.c = vec![base; n];
        for &i in net.safety() {
            cfg.c[i] = on_safety;
        }
        if let Some(d) = c.slack_weight {
            cfg.d = vec![d; n];
        }
        if let Some(p) = c.sample_period {
            cfg.sample_period = p;
        }
        if let Some(h) = c.horizon_time {
            cfg.horizon_time = h;
        }
        if let Some(s) = c.prediction_step {
            cfg.pred_step = s;
        }
        if let Some(f) = &c.forecast {
            cfg.forecast = parse_forecast(f)?;
        }
        cfg.validate(net)
            .map_err(|e| schema(format!("controller settings rejected: {e}")))?;
        Ok(cfg)
    }

    /// Disturbance profile of the bundled scenario (identically zero when
    /// the scenario or disturbance table is absent).
    pub fn disturbance(&self, forecast: ForecastMode) -> Result<DisturbanceProfile, CaseError> {
        let Some(scenario) = &self.scenario else {
            return Ok(DisturbanceProfile::none());
        };
        let Some(d) = &scenario.disturbance else {
            return Ok(DisturbanceProfile::none());
        };
        match d.kind.as_str() {
            "none" => Ok(DisturbanceProfile::none()),
            "ramp-hold-ramp" => {
                let buses = d
                    .buses
                    .iter()
                    .map(|&id| self.to_zero_based(id, "disturbance"))
                    .collect::<Result<Vec<_>, _>>()?;
                if buses.is_empty() {
                    return Err(schema("ramp-hold-ramp disturbance lists no buses"));
                }
                let get = |name: &str, v: Option<f64>| {
                    v.ok_or_else(|| schema(format!("ramp-hold-ramp requires `{name}`")))
                };
                let peak = get("peak", d.peak)?;
                let t_ramp_end = get("t_ramp_end", d.t_ramp_end)?;
                let t_hold_end = get("t_hold_end", d.t_hold_end)?;
                let t_end = get("t_end", d.t_end)?;
                if !(0.0 < t_ramp_end && t_ramp_end < t_hold_end && t_hold_end < t_end) {
                    return Err(schema(
                        "disturbance requires 0 < t_ramp_end < t_hold_end < t_end",
                    ));
                }
                Ok(DisturbanceProfile::ramp_hold_ramp(
                    buses, peak, t_ramp_end, t_hold_end, t_end, forecast,
                ))
            }
            other => Err(schema(format!(
                "unknown disturbance kind {other:?} (expected \"none\" or \"ramp-hold-ramp\")"
            ))),
        }
    }
}

pub fn parse_forecast(text: &str) -> Result<ForecastMode, CaseError> {
    match text {
        "perfect" => Ok(ForecastMode::Perfect),
        "hold-current" => Ok(ForecastMode::HoldCurrent),
        other => Err(schema(format!(
            "unknown forecast mode {other:?} (expected \"perfect\" or \"hold-current\")"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "toy"

[[buses]]
id = 1
inertia = 1.0
damping = 1.0
injection = 1.0

[[buses]]
id = 2
inertia = 2.0
damping = 1.0
injection = -1.0

[[edges]]
from = 1
to = 2
susceptance = 5.0

[sets]
controlled = [1]
safety = [1]
"#;

    #[test]
    fn minimal_case_round_trips() {
        let case = CaseFile::parse(MINIMAL).unwrap();
        let net = case.network(false).unwrap();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.n_edges(), 1);
        assert_eq!(net.controlled(), &[0]);
        assert_eq!(net.injection(), &[1.0, -1.0]);
        let cfg = case.controller_config(&net).unwrap();
        assert!((cfg.omega_max[0] - hz_to_rad_s(0.2)).abs() < 1e-12);
        assert!(case
            .disturbance(ForecastMode::Perfect)
            .unwrap()
            .segments
            .is_empty());
    }

    #[test]
    fn version_and_id_checks() {
        let bad = MINIMAL.replace("version = 1", "version = 99");
        assert!(matches!(
            CaseFile::parse(&bad),
            Err(CaseError::Schema { .. })
        ));
        let bad = MINIMAL.replace("id = 2", "id = 7");
        assert!(matches!(
            CaseFile::parse(&bad),
            Err(CaseError::Schema { .. })
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[controller]\nnot_a_key = 3.0\n");
        assert!(matches!(CaseFile::parse(&bad), Err(CaseError::Parse(_))));
    }

    #[test]
    fn rebalance_recentres_injections() {
        let skewed = MINIMAL.replace("injection = -1.0", "injection = -0.5");
        let case = CaseFile::parse(&skewed).unwrap();
        assert!(matches!(case.network(false), Err(CaseError::Network(_))));
        let net = case.network(true).unwrap();
        assert!((net.injection()[0] + net.injection()[1]).abs() < 1e-12);
        assert!((net.injection()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_references_are_schema_errors() {
        let bad = MINIMAL.replace("controlled = [1]", "controlled = [3]");
        let case = CaseFile::parse(&bad).unwrap();
        assert!(matches!(case.network(false), Err(CaseError::Schema { .. })));
    }

    #[test]
    fn controller_overrides_apply() {
        let text = format!(
            "{MINIMAL}\n[controller]\nband_hz = 0.3\nepsilon = 0.5\ntau = 1.0\nforecast = \"hold-current\"\n"
        );
        let case = CaseFile::parse(&text).unwrap();
        let net = case.network(false).unwrap();
        let cfg = case.controller_config(&net).unwrap();
        assert!((cfg.omega_max[0] - hz_to_rad_s(0.3)).abs() < 1e-12);
        assert_eq!(cfg.epsilon[0], 0.5);
        assert_eq!(cfg.forecast, ForecastMode::HoldCurrent);
    }

    #[test]
    fn invalid_controller_settings_rejected() {
        // ετ ≥ 1 must be caught at load time.
        let text = format!("{MINIMAL}\n[controller]\nepsilon = 2.0\ntau = 1.0\n");
        let case = CaseFile::parse(&text).unwrap();
        let net = case.network(false).unwrap();
        assert!(matches!(
            case.controller_config(&net),
            Err(CaseError::Schema { .. })
        ));
    }

    #[test]
    fn disturbance_parsing() {
        let text = format!(
            "{MINIMAL}\n[scenario]\nt_end = 10.0\ndt = 0.001\n\n[scenario.disturbance]\nkind = \"ramp-hold-ramp\"\nbuses = [2]\npeak = 0.2\nt_ramp_end = 25.0\nt_hold_end = 125.0\nt_end = 150.0\n"
        );
        let case = CaseFile::parse(&text).unwrap();
        let profile = case.disturbance(ForecastMode::Perfect).unwrap();
        assert_eq!(profile.buses, vec![1]);
        // The reference piecewise shape: 0.2·sin(πt/50) up, hold, decay.
        assert!((profile.delta(25.0) - 0.2).abs() < 1e-12);
        assert!((profile.delta(75.0) - 0.2).abs() < 1e-12);
        assert!((profile.delta(137.5) - 0.2 * (0.75 * std::f64::consts::PI).sin()).abs() < 1e-12);
        assert_eq!(profile.delta(160.0), 0.0);
    }
}
