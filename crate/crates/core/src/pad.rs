//! Physics-driven anomaly detection: score a state against a measured
//! spectrum through the forward model and a prior feasible box.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    ForwardKind, ForwardModel, GasState, LineDatabase, SpectralGrid, Spectrum, StateRanges,
    DEFAULT_PLANCK_SCALE,
};
use crate::rng::RngStream;

/// Prior box of plausible states, `{"t": [min, max], "c": [min, max]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleDomain {
    pub t: [f64; 2],
    pub c: [f64; 2],
}

impl FeasibleDomain {
    pub fn new(t: [f64; 2], c: [f64; 2]) -> Result<Self> {
        let d = Self { t, c };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !ok(self.t) || !ok(self.c) {
            return Err(Error::Domain(format!(
                "feasible domain needs min < max in both dimensions: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn min(&self) -> [f64; 2] {
        [self.t[0], self.c[0]]
    }

    pub fn max(&self) -> [f64; 2] {
        [self.t[1], self.c[1]]
    }

    pub fn span(&self) -> [f64; 2] {
        [self.t[1] - self.t[0], self.c[1] - self.c[0]]
    }

    /// Box coordinates: 0 at the lower bound, 1 at the upper bound.
    pub fn normalize(&self, state: &GasState) -> [f64; 2] {
        let (lo, span) = (self.min(), self.span());
        let x = state.as_array();
        [(x[0] - lo[0]) / span[0], (x[1] - lo[1]) / span[1]]
    }

    pub fn denormalize(&self, n: [f64; 2]) -> GasState {
        let (lo, span) = (self.min(), self.span());
        GasState::new(lo[0] + n[0] * span[0], lo[1] + n[1] * span[1])
    }

    pub fn sample(&self, rng: &mut RngStream) -> GasState {
        GasState::new(rng.uniform(self.t[0], self.t[1]), rng.uniform(self.c[0], self.c[1]))
    }

    pub fn contains(&self, state: &GasState) -> bool {
        (self.t[0]..=self.t[1]).contains(&state.temperature)
            && (self.c[0]..=self.c[1]).contains(&state.mole_fraction)
    }
}

impl From<StateRanges> for FeasibleDomain {
    fn from(r: StateRanges) -> Self {
        Self { t: r.t, c: r.c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub e_r: f64,
    pub e_f: [f64; 2],
    pub e: f64,
}

impl ErrorBreakdown {
    pub fn combine(e_r: f64, e_f: [f64; 2], weights: [f64; 3]) -> Self {
        Self {
            e_r,
            e_f,
            e: weights[0] * e_r + weights[1] * e_f[0] + weights[2] * e_f[1],
        }
    }

    /// Stand-in for states the forward model cannot evaluate.
    pub fn unevaluable() -> Self {
        Self {
            e_r: f64::INFINITY,
            e_f: [0.0, 0.0],
            e: f64::INFINITY,
        }
    }
}

/// Everything needed to score states against one measurement setup.
#[derive(Debug, Clone, PartialEq)]
pub struct PadConfig {
    pub model: ForwardModel,
    pub domain: FeasibleDomain,
    pub weights: [f64; 3],
    pub epsilon: f64,
}

impl PadConfig {
    pub fn new(model: ForwardModel, domain: FeasibleDomain, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            model,
            domain,
            weights: [1.0; 3],
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.model.grid.validate()?;
        self.model.db.validate()?;
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("PAD weights must be ≥ 0, got {:?}", self.weights)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn with_domain(&self, domain: FeasibleDomain) -> Self {
        Self {
            domain,
            ..self.clone()
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }
}

fn default_weights() -> [f64; 3] {
    [1.0; 3]
}

/// On-disk form of [`PadConfig`]; the line database is referenced by path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadConfigFile {
    #[serde(default)]
    pub forward: ForwardKind,
    /// `None` selects the bundled canonical database.
    #[serde(default)]
    pub line_db: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<SpectralGrid>,
    pub domain: FeasibleDomain,
    #[serde(default = "default_weights")]
    pub weights: [f64; 3],
    pub epsilon: f64,
}

impl PadConfigFile {
    /// Loads the referenced line database; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<PadConfig> {
        let db = match &self.line_db {
            Some(p) if p.is_absolute() => LineDatabase::load(p)?,
            Some(p) => LineDatabase::load(base_dir.join(p))?,
            None => LineDatabase::canonical(),
        };
        let model = ForwardModel {
            kind: self.forward,
            grid: self.grid.unwrap_or_default(),
            db,
            planck_scale: DEFAULT_PLANCK_SCALE,
        };
        let cfg = PadConfig {
            model,
            domain: self.domain,
            weights: self.weights,
            epsilon: self.epsilon,
        };
        cfg.validate().map_err(|e| match e {
            Error::Domain(m) => Error::Config(m),
            other => other,
        })?;
        Ok(cfg)
    }
}

/// ‖F(state) − measured‖₂
pub fn reconstruction_error(state: &GasState, measured: &Spectrum, model: &ForwardModel) -> Result<f64> {
    measured.check(&model.grid)?;
    let simulated = model.simulate(state)?;
    Ok(simulated
        .values
        .iter()
        .zip(&measured.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Per-dimension excursion outside the box in normalized units; zero inside.
pub fn feasible_error(state: &GasState, domain: &FeasibleDomain) -> [f64; 2] {
    let n = domain.normalize(state);
    n.map(|v| (v - 1.0).max(0.0) + (-v).max(0.0))
}

pub fn overall_error(state: &GasState, measured: &Spectrum, config: &PadConfig) -> Result<ErrorBreakdown> {
    let e_r = reconstruction_error(state, measured, &config.model)?;
    Ok(ErrorBreakdown::combine(
        e_r,
        feasible_error(state, &config.domain),
        config.weights,
    ))
}

/// Acceptance is `e ≤ ε`; anything above is anomalous.
pub fn is_anomaly(breakdown: &ErrorBreakdown, epsilon: f64) -> bool {
    !(breakdown.e <= epsilon)
}

/// PAD evaluator bound to one measurement, counting forward-model queries.
#[derive(Debug)]
pub struct Pad<'a> {
    config: &'a PadConfig,
    measured: &'a Spectrum,
    queries: AtomicU64,
}

impl<'a> Pad<'a> {
    pub fn new(config: &'a PadConfig, measured: &'a Spectrum) -> Result<Self> {
        measured.check(&config.model.grid)?;
        Ok(Self {
            config,
            measured,
            queries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &PadConfig {
        self.config
    }

    pub fn evaluate(&self, state: &GasState) -> Result<ErrorBreakdown> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        overall_error(state, self.measured, self.config)
    }

    /// Like [`Pad::evaluate`], but states outside the forward model's domain score `+∞`.
    pub fn evaluate_lenient(&self, state: &GasState) -> Result<ErrorBreakdown> {
        match self.evaluate(state) {
            Err(Error::Domain(_)) => Ok(ErrorBreakdown::unevaluable()),
            other => other,
        }
    }

    pub fn accepts(&self, breakdown: &ErrorBreakdown) -> bool {
        !is_anomaly(breakdown, self.config.epsilon)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn canonical_config(domain: FeasibleDomain) -> PadConfig {
        PadConfig::new(
            ForwardModel::absorbance(SpectralGrid::default(), LineDatabase::canonical()),
            domain,
            0.05,
        )
        .unwrap()
    }

    fn id_domain() -> FeasibleDomain {
        StateRanges::id_default().into()
    }

    #[test]
    fn exact_reconstruction_is_zero() {
        let cfg = canonical_config(id_domain());
        let x = GasState::new(1300.0, 0.06);
        let y = cfg.model.simulate(&x).unwrap();
        assert_eq!(reconstruction_error(&x, &y, &cfg.model).unwrap(), 0.0);
        assert_eq!(overall_error(&x, &y, &cfg).unwrap().e, 0.0);
    }

    #[test]
    fn constant_offset_gives_scaled_norm() {
        let cfg = canonical_config(id_domain());
        let x = GasState::new(900.0, 0.055);
        let mut y = cfg.model.simulate(&x).unwrap();
        for v in &mut y.values {
            *v += 0.01;
        }
        let e = reconstruction_error(&x, &y, &cfg.model).unwrap();
        assert!((e - 0.01 * (y.len() as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_temperature_matches_direct_norm() {
        let cfg = canonical_config(id_domain());
        let a = cfg.model.simulate(&GasState::new(1300.0, 0.06)).unwrap();
        let b = cfg.model.simulate(&GasState::new(1500.0, 0.06)).unwrap();
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.values[i] - b.values[i]).powi(2);
        }
        let e = reconstruction_error(&GasState::new(1300.0, 0.06), &b, &cfg.model).unwrap();
        assert!(e > 0.0);
        assert!((e - acc.sqrt()).abs() <= 1e-14 * acc.sqrt().max(1.0));
    }

    #[test]
    fn feasible_error_unit_cases() {
        let d = id_domain();
        assert_eq!(feasible_error(&GasState::new(1300.0, 0.06), &d), [0.0, 0.0]);
        let over = GasState::new(2000.0 + 0.5 * 1400.0, 0.06);
        assert!((feasible_error(&over, &d)[0] - 0.5).abs() < 1e-12);
        let under = GasState::new(1300.0, 0.05 - 0.25 * 0.02);
        let ef = feasible_error(&under, &d);
        assert_eq!(ef[0], 0.0);
        assert!((ef[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn overall_error_cases() {
        let cfg = canonical_config(id_domain());
        let over = GasState::new(2700.0, 0.06);
        let y = cfg.model.simulate(&over).unwrap();
        let b = overall_error(&over, &y, &cfg).unwrap();
        assert!((b.e - 0.5).abs() < 1e-12);
        let w = ErrorBreakdown::combine(0.1, [0.2, 0.0], [2.0, 1.0, 1.0]);
        assert!((w.e - 0.4).abs() < 1e-15);
    }

    #[test]
    fn threshold_boundary() {
        let at = ErrorBreakdown::combine(0.05, [0.0, 0.0], [1.0; 3]);
        assert!(!is_anomaly(&at, 0.05));
        assert!(!is_anomaly(&ErrorBreakdown::combine(0.0, [0.0, 0.0], [1.0; 3]), 0.05));
        assert!(is_anomaly(&ErrorBreakdown::combine(0.373, [0.0, 0.0], [1.0; 3]), 0.1));
        assert!(is_anomaly(&ErrorBreakdown::unevaluable(), 1e9));
    }

    #[test]
    fn invalid_state_propagates_domain_error() {
        let cfg = canonical_config(id_domain());
        let y = cfg.model.simulate(&GasState::new(1000.0, 0.06)).unwrap();
        let pad = Pad::new(&cfg, &y).unwrap();
        assert!(matches!(pad.evaluate(&GasState::new(-5.0, 0.06)), Err(Error::Domain(_))));
        assert_eq!(pad.evaluate_lenient(&GasState::new(-5.0, 0.06)).unwrap().e, f64::INFINITY);
        assert_eq!(pad.queries(), 2);
    }

    #[test]
    fn wrong_length_measurement_is_rejected() {
        let cfg = canonical_config(id_domain());
        assert!(Pad::new(&cfg, &Spectrum::new(vec![0.0; 10])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FeasibleDomain::new([2.0, 1.0], [0.0, 1.0]).is_err());
        assert!(FeasibleDomain::new([1.0, 1.0], [0.0, 1.0]).is_err());
        let mut cfg = canonical_config(id_domain());
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.1;
        cfg.weights = [1.0, -1.0, 1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let text = r#"{"forward": "emission", "domain": {"t": [600, 2000], "c": [0.05, 0.07]}, "epsilon": 0.05}"#;
        let file: PadConfigFile = serde_json::from_str(text).unwrap();
        let cfg = file.resolve(Path::new(".")).unwrap();
        assert_eq!(cfg.model.kind, ForwardKind::Emission);
        assert_eq!(cfg.weights, [1.0; 3]);
        let missing = PadConfigFile {
            line_db: Some("does/not/exist.json".into()),
            ..file
        };
        assert!(matches!(missing.resolve(Path::new("/nonexistent")), Err(Error::Io { .. })));
    }

    #[test]
    fn normalization_round_trip() {
        let d = id_domain();
        let x = GasState::new(1234.5, 0.0612);
        let back = d.denormalize(d.normalize(&x));
        assert!((back.temperature - x.temperature).abs() < 1e-9);
        assert!((back.mole_fraction - x.mole_fraction).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn reconstruction_of_own_spectrum_is_zero(t in 300.0f64..4000.0, c in 0.0f64..1.0) {
            let cfg = canonical_config(id_domain());
            let x = GasState::new(t, c);
            let y = cfg.model.simulate(&x).unwrap();
            prop_assert_eq!(reconstruction_error(&x, &y, &cfg.model).unwrap(), 0.0);
        }

        #[test]
        fn feasible_error_zero_on_closed_box(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let d = id_domain();
            let x = GasState::new(d.t[0] + a * (d.t[1] - d.t[0]), d.c[0] + b * (d.c[1] - d.c[0]));
            prop_assert_eq!(feasible_error(&x, &d), [0.0, 0.0]);
        }

        #[test]
        fn feasible_error_is_normalized_distance(n0 in -3.0f64..4.0, n1 in -3.0f64..4.0) {
            let d = id_domain();
            let ef = feasible_error(&d.denormalize([n0, n1]), &d);
            let expect = |n: f64| if n > 1.0 { n - 1.0 } else if n < 0.0 { -n } else { 0.0 };
            prop_assert!((ef[0] - expect(n0)).abs() < 1e-9);
            prop_assert!((ef[1] - expect(n1)).abs() < 1e-9);
        }

        #[test]
        fn overall_is_weighted_sum(
            e_r in 0.0f64..10.0, f0 in 0.0f64..3.0, f1 in 0.0f64..3.0,
            w0 in 0.0f64..3.0, w1 in 0.0f64..3.0, w2 in 0.0f64..3.0,
        ) {
            let b = ErrorBreakdown::combine(e_r, [f0, f1], [w0, w1, w2]);
            prop_assert_eq!(b.e, w0 * e_r + w1 * f0 + w2 * f1);
        }

        #[test]
        fn anomaly_monotone_in_epsilon(e in 0.0f64..2.0, eps1 in 1e-6f64..2.0, eps2 in 1e-6f64..2.0) {
            let b = ErrorBreakdown::combine(e, [0.0, 0.0], [1.0; 3]);
            let (lo, hi) = if eps1 <= eps2 { (eps1, eps2) } else { (eps2, eps1) };
            prop_assert!(is_anomaly(&b, lo) >= is_anomaly(&b, hi));
        }
    }
}
