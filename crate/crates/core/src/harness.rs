//! Experiment protocols, metrics and report files.
//!
//! Per-case randomness: case `i` of an experiment with master seed `s` uses
//! `derive_seed(s, i)` as its case seed. Stream 0 of that seed draws the true
//! state and feasible box, `derive_seed(case_seed, 1)` seeds correction, and
//! `derive_seed(case_seed, 2)` seeds measurement noise. Cases are therefore
//! independent of scheduling and thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{run_correction, CorrectionConfig, ErrorMode, SamplingMode, Scored, TraceRecord};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorModel, TrainConfig};
use crate::forward::{
    add_multiplicative_noise, fmt_sig9, gen_calibrated_db, generate_dataset, Dataset, ForwardKind,
    ForwardModel, GasState, LineDatabase, SpectralGrid, Spectrum, Split, StateRanges,
    DEFAULT_PLANCK_SCALE,
};
use crate::pad::{FeasibleDomain, Pad, PadConfig, PadConfigFile};
use crate::rng::{derive_seed, RngStream};

pub const THREADS_ENV: &str = "SPEC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    IdTest,
    OodTest,
    NoiseTest,
    ReconfigTest,
    Ablation,
}

impl ExperimentKind {
    pub fn needs_estimator(&self) -> bool {
        !matches!(self, ExperimentKind::ReconfigTest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset size.
    pub k: usize,
    pub seed: u64,
    pub id_ranges: StateRanges,
    pub ood_ranges: StateRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            k: 2000,
            seed: 0,
            id_ranges: StateRanges::id_default(),
            ood_ranges: StateRanges::ood_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub level: f64,
    pub checkpoints: Vec<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            level: 0.1,
            checkpoints: vec![25, 50, 100, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum LineDbSource {
    Canonical,
    Generated {
        seed: u64,
        n_lines: usize,
        band: [f64; 2],
        label: String,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigScenario {
    pub name: String,
    pub forward: ForwardKind,
    pub line_db: LineDbSource,
}

impl ReconfigScenario {
    pub fn defaults() -> Vec<Self> {
        vec![
            Self {
                name: "alternate_band".into(),
                forward: ForwardKind::Absorbance,
                line_db: LineDbSource::Generated {
                    seed: 43,
                    n_lines: 25,
                    band: [2175.0, 2195.0],
                    label: "CO2-like, alternate band".into(),
                },
            },
            Self {
                name: "alternate_species".into(),
                forward: ForwardKind::Absorbance,
                line_db: LineDbSource::Generated {
                    seed: 44,
                    n_lines: 12,
                    band: [2100.0, 2120.0],
                    label: "CO-like".into(),
                },
            },
            Self {
                name: "emission".into(),
                forward: ForwardKind::Emission,
                line_db: LineDbSource::Canonical,
            },
        ]
    }

    /// Forward model for this scenario; generated databases get a grid
    /// spanning their band at 0.1 cm⁻¹.
    pub fn model(&self, base_dir: &Path) -> Result<ForwardModel> {
        let (db, grid) = match &self.line_db {
            LineDbSource::Canonical => (LineDatabase::canonical(), SpectralGrid::default()),
            LineDbSource::Generated {
                seed,
                n_lines,
                band,
                label,
            } => {
                let grid = SpectralGrid {
                    nu_min: band[0],
                    nu_max: band[1],
                    spacing: 0.1,
                };
                (gen_calibrated_db(*seed, *n_lines, *band, &grid, label)?, grid)
            }
            LineDbSource::File { path } => {
                let db = LineDatabase::load(base_dir.join(path))?;
                let grid = SpectralGrid {
                    nu_min: db.band[0],
                    nu_max: db.band[1],
                    spacing: 0.1,
                };
                (db, grid)
            }
        };
        Ok(ForwardModel {
            kind: self.forward,
            grid,
            db,
            planck_scale: DEFAULT_PLANCK_SCALE,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub name: String,
    pub error_mode: ErrorMode,
    pub sampling_mode: SamplingMode,
    pub diversity_enabled: bool,
}

impl AblationArm {
    pub fn defaults() -> Vec<Self> {
        let arm = |name: &str, e, s, d| Self {
            name: name.into(),
            error_mode: e,
            sampling_mode: s,
            diversity_enabled: d,
        };
        use ErrorMode::*;
        use SamplingMode::*;
        vec![
            arm("default", ReconstructionOnly, MonteCarlo, true),
            arm("overall_error", Overall, MonteCarlo, true),
            arm("all_elements", AllElements, MonteCarlo, true),
            arm("disagreement", ReconstructionOnly, Disagreement, true),
            arm("no_diversity", ReconstructionOnly, MonteCarlo, false),
        ]
    }

    fn apply(&self, base: &CorrectionConfig) -> CorrectionConfig {
        CorrectionConfig {
            error_mode: self.error_mode,
            sampling_mode: self.sampling_mode,
            diversity_enabled: self.diversity_enabled,
            ..base.clone()
        }
    }
}

fn default_cases() -> usize {
    100
}

fn default_thresholds() -> Vec<f64> {
    vec![0.05, 0.075, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub data: DataConfig,
    pub pad: PadConfigFile,
    #[serde(default)]
    pub correction: CorrectionConfig,
    /// Estimator checkpoint stem, relative to the config file.
    #[serde(default)]
    pub estimator: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_cases")]
    pub n_cases: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Threshold sweep for the OoD protocol.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "ReconfigScenario::defaults")]
    pub reconfig: Vec<ReconfigScenario>,
    #[serde(default = "AblationArm::defaults")]
    pub arms: Vec<AblationArm>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Config("n_cases must be positive".into()));
        }
        self.correction.validate()?;
        self.data.id_ranges.validate().map_err(to_config)?;
        self.data.ood_ranges.validate().map_err(to_config)?;
        match self.kind {
            ExperimentKind::OodTest if self.thresholds.is_empty() => {
                Err(Error::Config("ood_test needs at least one threshold".into()))
            }
            ExperimentKind::NoiseTest if self.noise.checkpoints.is_empty() => {
                Err(Error::Config("noise_test needs at least one checkpoint".into()))
            }
            ExperimentKind::ReconfigTest if self.reconfig.is_empty() => {
                Err(Error::Config("reconfig_test needs at least one scenario".into()))
            }
            ExperimentKind::Ablation if self.arms.is_empty() => {
                Err(Error::Config("ablation needs at least one arm".into()))
            }
            _ if self.thresholds.iter().any(|e| !(*e > 0.0)) => {
                Err(Error::Config("thresholds must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

/// Thread count: `SPEC_THREADS` wins over the flag; default 1.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .or(flag)
        .unwrap_or(1)
        .max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mre: f64,
    /// `None` when either sequence has zero variance.
    pub r: Option<f64>,
}

pub fn compute_metrics(predictions: &[f64], truths: &[f64]) -> Result<Metrics> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::Shape(format!(
            "metrics need equal non-zero lengths, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.contains(&0.0) {
        return Err(Error::Domain("relative error undefined for zero truth".into()));
    }
    let n = truths.len() as f64;
    let (mut se, mut ae, mut re) = (0.0, 0.0, 0.0);
    for (p, t) in predictions.iter().zip(truths) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
        re += d.abs() / t.abs();
    }
    let mp = predictions.iter().sum::<f64>() / n;
    let mt = truths.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in predictions.iter().zip(truths) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    let r = if vp > 0.0 && vt > 0.0 && (cov / (vp * vt).sqrt()).is_finite() {
        Some((cov / (vp * vt).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    };
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mre: re / n,
        r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementMetrics {
    pub temperature: Metrics,
    pub mole_fraction: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: usize,
    pub truth: GasState,
    pub estimate: Option<GasState>,
    pub e_est: Option<f64>,
    pub corrected: bool,
    pub final_state: GasState,
    pub e_final: f64,
    pub iterations: usize,
    pub pad_queries: u64,
    /// Final state re-verified by an independent PAD evaluation.
    pub success: bool,
}

pub const CSV_HEADER: &str =
    "case_id,T_true,C_true,T_est,C_est,e_est,corrected,T_final,C_final,e_final,iterations,pad_queries";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

pub fn cases_to_csv(records: &[CaseRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.case_id,
            fmt_sig9(r.truth.temperature),
            fmt_sig9(r.truth.mole_fraction),
            opt(r.estimate.map(|s| s.temperature)),
            opt(r.estimate.map(|s| s.mole_fraction)),
            opt(r.e_est),
            r.corrected,
            fmt_sig9(r.final_state.temperature),
            fmt_sig9(r.final_state.mole_fraction),
            fmt_sig9(r.e_final),
            r.iterations,
            r.pad_queries
        );
    }
    out
}

/// Parses a case CSV. The success flag is unknown without a threshold and
/// is set from `epsilon` when given, `false` otherwise.
pub fn cases_from_csv(text: &str, epsilon: Option<f64>) -> std::result::Result<Vec<CaseRecord>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err("unexpected header".into());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(format!("expected 12 fields: {line}"));
            }
            let t_est = maybe(f[3])?;
            let c_est = maybe(f[4])?;
            let e_final = num(f[9])?;
            Ok(CaseRecord {
                case_id: f[0].parse().map_err(|e| format!("{e}"))?,
                truth: GasState::new(num(f[1])?, num(f[2])?),
                estimate: t_est.zip(c_est).map(|(t, c)| GasState::new(t, c)),
                e_est: maybe(f[5])?,
                corrected: f[6] == "true",
                final_state: GasState::new(num(f[7])?, num(f[8])?),
                e_final,
                iterations: f[10].parse().map_err(|e| format!("{e}"))?,
                pad_queries: f[11].parse().map_err(|e| format!("{e}"))?,
                success: epsilon.is_some_and(|eps| e_final <= eps),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub n_cases: usize,
    pub epsilon: Option<f64>,
    pub accepted_without_correction: usize,
    pub corrected: usize,
    pub failure_times: Option<usize>,
    /// Cases whose success was confirmed by the independent PAD audit.
    pub audited_successes: usize,
    /// Iterations over corrected cases that succeeded.
    pub iterations: Stats,
    pub pad_queries: Stats,
    pub mean_e_est: Option<f64>,
    pub mean_e_final: f64,
    pub estimate_metrics: Option<ElementMetrics>,
    pub final_metrics: Option<ElementMetrics>,
}

fn element_metrics(pairs: &[(GasState, GasState)]) -> Option<ElementMetrics> {
    let pt: Vec<f64> = pairs.iter().map(|p| p.0.temperature).collect();
    let tt: Vec<f64> = pairs.iter().map(|p| p.1.temperature).collect();
    let pc: Vec<f64> = pairs.iter().map(|p| p.0.mole_fraction).collect();
    let tc: Vec<f64> = pairs.iter().map(|p| p.1.mole_fraction).collect();
    Some(ElementMetrics {
        temperature: compute_metrics(&pt, &tt).ok()?,
        mole_fraction: compute_metrics(&pc, &tc).ok()?,
    })
}

pub fn summarize(records: &[CaseRecord], epsilon: Option<f64>) -> SectionSummary {
    let n = records.len();
    let successes = |r: &&CaseRecord| match epsilon {
        Some(eps) => r.success && r.e_final <= eps,
        None => false,
    };
    let iters: Vec<f64> = records
        .iter()
        .filter(|r| r.corrected)
        .filter(successes)
        .map(|r| r.iterations as f64)
        .collect();
    let queries: Vec<f64> = records.iter().map(|r| r.pad_queries as f64).collect();
    let est_pairs: Vec<(GasState, GasState)> =
        records.iter().filter_map(|r| r.estimate.map(|e| (e, r.truth))).collect();
    let e_est: Vec<f64> = records.iter().filter_map(|r| r.e_est).collect();
    SectionSummary {
        n_cases: n,
        epsilon,
        accepted_without_correction: records.iter().filter(|r| !r.corrected && r.success).count(),
        corrected: records.iter().filter(|r| r.corrected).count(),
        failure_times: epsilon.map(|_| n - records.iter().filter(successes).count()),
        audited_successes: records.iter().filter(successes).count(),
        iterations: Stats::of(&iters),
        pad_queries: Stats::of(&queries),
        mean_e_est: (e_est.len() == n && n > 0).then(|| e_est.iter().sum::<f64>() / n as f64),
        mean_e_final: records.iter().map(|r| r.e_final).sum::<f64>() / n.max(1) as f64,
        estimate_metrics: if est_pairs.len() == n { element_metrics(&est_pairs) } else { None },
        final_metrics: element_metrics(&records.iter().map(|r| (r.final_state, r.truth)).collect::<Vec<_>>()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub budget: usize,
    pub mean_best_error: f64,
}

/// One table of cases run under a single setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub records: Vec<CaseRecord>,
    pub traces: Vec<(usize, Vec<TraceRecord>)>,
    pub summary: SectionSummary,
    pub checkpoints: Vec<Checkpoint>,
    pub arm: Option<AblationArm>,
}

impl Section {
    fn new(name: impl Into<String>, outcomes: Vec<CaseOutcome>, epsilon: Option<f64>) -> Self {
        let (records, traces): (Vec<_>, Vec<_>) = outcomes
            .into_iter()
            .map(|o| {
                let id = o.record.case_id;
                (o.record, (id, o.trace))
            })
            .unzip();
        let summary = summarize(&records, epsilon);
        Self {
            name: name.into(),
            records,
            traces,
            summary,
            checkpoints: Vec::new(),
            arm: None,
        }
    }

    pub fn csv(&self) -> String {
        cases_to_csv(&self.records)
    }

    pub fn traces_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, trace) in &self.traces {
            for rec in trace {
                let mut v = serde_json::to_value(rec).expect("trace serializes");
                v["case_id"] = (*id).into();
                out.push_str(&serde_json::to_string(&v).expect("trace serializes"));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub sections: Vec<Section>,
    /// Number of estimator inferences performed.
    pub estimator_calls: usize,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    kind: ExperimentKind,
    seed: u64,
    estimator_calls: usize,
    sections: BTreeMap<&'a str, SectionEntry<'a>>,
}

#[derive(Serialize)]
struct SectionEntry<'a> {
    #[serde(flatten)]
    summary: &'a SectionSummary,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    checkpoints: &'a [Checkpoint],
    #[serde(skip_serializing_if = "Option::is_none")]
    arm: Option<&'a AblationArm>,
}

impl Report {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn summary_json(&self) -> String {
        let file = SummaryFile {
            kind: self.kind,
            seed: self.seed,
            estimator_calls: self.estimator_calls,
            sections: self
                .sections
                .iter()
                .map(|s| {
                    (
                        s.name.as_str(),
                        SectionEntry {
                            summary: &s.summary,
                            checkpoints: &s.checkpoints,
                            arm: s.arm.as_ref(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("summary serializes") + "\n"
    }

    /// Side-by-side arm table for ablations.
    pub fn ablation_table(&self) -> Option<String> {
        if self.kind != ExperimentKind::Ablation {
            return None;
        }
        let mut out = String::from("arm,error_mode,sampling_mode,diversity_enabled,failure_times,iterations_mean,iterations_std\n");
        for s in &self.sections {
            let arm = s.arm.as_ref()?;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4}",
                arm.name,
                arm.error_mode.as_str(),
                arm.sampling_mode.as_str(),
                arm.diversity_enabled,
                s.summary.failure_times.unwrap_or(0),
                s.summary.iterations.mean,
                s.summary.iterations.std
            );
        }
        Some(out)
    }

    /// Writes `cases_<section>.csv`, `traces_<section>.jsonl` and `summary.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let write = |name: String, body: String| {
            let p = out_dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        for s in &self.sections {
            write(format!("cases_{}.csv", s.name), s.csv())?;
            write(format!("traces_{}.jsonl", s.name), s.traces_jsonl())?;
        }
        write("summary.json".into(), self.summary_json())?;
        if let Some(t) = self.ablation_table() {
            write("ablation.csv".into(), t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CaseOutcome {
    record: CaseRecord,
    trace: Vec<TraceRecord>,
}

/// Everything one case runs on: the hidden truth, the measured signal and
/// the PAD configuration (per-case box and threshold included).
#[derive(Debug, Clone)]
pub struct CaseInput {
    pub id: usize,
    pub truth: GasState,
    pub measured: Spectrum,
    pub pad: PadConfig,
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct CaseMode<'a> {
    estimator: Option<&'a EstimatorModel>,
    /// Correct even when the first guess is accepted.
    always_correct: bool,
}

fn run_case(spec: &CaseInput, mode: CaseMode<'_>, correction: &CorrectionConfig) -> Result<CaseOutcome> {
    let pad = Pad::new(&spec.pad, &spec.measured)?;
    let first = match mode.estimator {
        Some(model) => {
            let state = estimate(model, &spec.measured)?;
            let breakdown = pad.evaluate_lenient(&state)?;
            Some(Scored { state, breakdown })
        }
        None => None,
    };
    let needs_correction = mode.always_correct || first.is_none_or(|f| !pad.accepts(&f.breakdown));
    let mut trace = Vec::new();
    let (final_state, corrected, iterations, correction_queries) = if needs_correction {
        let cfg = CorrectionConfig {
            seed: derive_seed(spec.seed, 1),
            ..correction.clone()
        };
        let r = run_correction(&spec.measured, first, &spec.pad, &cfg)?;
        trace = r.trace.clone();
        (r.best.state, true, r.iterations, r.pad_queries)
    } else {
        (first.expect("accepted cases have a first guess").state, false, 0, 0)
    };
    // independent audit of whatever is being reported
    let audit = Pad::new(&spec.pad, &spec.measured)?.evaluate_lenient(&final_state)?;
    Ok(CaseOutcome {
        record: CaseRecord {
            case_id: spec.id,
            truth: spec.truth,
            estimate: first.map(|f| f.state),
            e_est: first.map(|f| f.breakdown.e),
            corrected,
            final_state,
            e_final: audit.e,
            iterations,
            pad_queries: pad.queries() + correction_queries,
            success: audit.e <= spec.pad.epsilon,
        },
        trace,
    })
}

fn run_cases(
    cases: &[CaseInput],
    mode: CaseMode<'_>,
    correction: &CorrectionConfig,
    threads: usize,
) -> Result<Vec<CaseOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cases.par_iter().map(|c| run_case(c, mode, correction)).collect())
}

/// Loaded, ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub pad: PadConfig,
    pub estimator: Option<EstimatorModel>,
    pub base_dir: PathBuf,
    pub threads: usize,
}

impl Experiment {
    pub fn new(
        config: ExperimentConfig,
        pad: PadConfig,
        estimator: Option<EstimatorModel>,
        base_dir: PathBuf,
        threads: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.kind.needs_estimator() && estimator.is_none() {
            return Err(Error::Config(format!("{:?} needs a trained estimator", config.kind)));
        }
        Ok(Self {
            config,
            pad,
            estimator,
            base_dir,
            threads,
        })
    }

    /// Resolves the PAD config and, when the protocol needs it, loads the estimator checkpoint.
    pub fn from_config(config: ExperimentConfig, base_dir: &Path, threads: usize) -> Result<Self> {
        let pad = config.pad.resolve(base_dir)?;
        let estimator = if config.kind.needs_estimator() {
            let stem = config
                .estimator
                .as_ref()
                .ok_or_else(|| Error::Config("config has no estimator checkpoint".into()))?;
            let stem = base_dir.join(stem);
            Some(EstimatorModel::load(&stem).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("missing estimator checkpoint {path}: {source}")),
                other => other,
            })?)
        } else {
            None
        };
        Self::new(config, pad, estimator, base_dir.to_path_buf(), threads)
    }

    pub fn run(&self) -> Result<Report> {
        match self.config.kind {
            ExperimentKind::IdTest => run_id_test(self),
            ExperimentKind::OodTest => run_ood_test(self),
            ExperimentKind::NoiseTest => run_noise_test(self),
            ExperimentKind::ReconfigTest => run_reconfig_test(self),
            ExperimentKind::Ablation => run_ablation(self),
        }
    }

    fn estimator(&self) -> Result<&EstimatorModel> {
        self.estimator
            .as_ref()
            .ok_or_else(|| Error::Config("protocol needs a trained estimator".into()))
    }

    fn id_dataset(&self) -> Result<Dataset> {
        id_dataset(&self.config.data, &self.pad)
    }

    /// `n` test-split records picked with the master seed.
    fn id_cases(&self, n: usize) -> Result<Vec<(GasState, Spectrum)>> {
        let ds = self.id_dataset()?;
        let mut test: Vec<_> = ds.split(Split::Test).map(|r| (r.state, r.spectrum.clone())).collect();
        if test.len() < n {
            return Err(Error::Config(format!(
                "test split has {} records, {n} cases requested",
                test.len()
            )));
        }
        let mut rng = RngStream::new(self.config.seed, 3);
        for i in (1..test.len()).rev() {
            test.swap(i, rng.index(i + 1));
        }
        test.truncate(n);
        Ok(test)
    }

    fn ood_cases(&self) -> Result<Vec<CaseInput>> {
        let ranges = self.config.data.ood_ranges;
        (0..self.config.n_cases)
            .map(|i| {
                let seed = derive_seed(self.config.seed, i as u64);
                let (truth, domain) = ood_case(&ranges, seed)?;
                Ok(CaseInput {
                    id: i,
                    truth,
                    measured: self.pad.model.simulate(&truth)?,
                    pad: self.pad.with_domain(domain),
                    seed,
                })
            })
            .collect()
    }

    fn id_inputs(&self, noisy: bool) -> Result<Vec<CaseInput>> {
        let cfg = &self.config;
        Ok(self
            .id_cases(cfg.n_cases)?
            .into_iter()
            .enumerate()
            .map(|(i, (truth, clean))| {
                let seed = derive_seed(cfg.seed, i as u64);
                let measured = if noisy {
                    add_multiplicative_noise(&clean, cfg.noise.level, derive_seed(seed, 2))
                } else {
                    clean
                };
                CaseInput {
                    id: i,
                    truth,
                    measured,
                    pad: self.pad.clone(),
                    seed,
                }
            })
            .collect())
    }

    fn reconfig_inputs(&self, index: usize, scenario: &ReconfigScenario) -> Result<Vec<CaseInput>> {
        let pad = PadConfig {
            model: scenario.model(&self.base_dir)?,
            ..self.pad.clone()
        };
        pad.validate()?;
        let root = derive_seed(self.config.seed, 1_000_000 + index as u64);
        (0..self.config.n_cases)
            .map(|i| {
                let seed = derive_seed(root, i as u64);
                let truth = pad.domain.sample(&mut RngStream::new(seed, 0));
                Ok(CaseInput {
                    id: i,
                    truth,
                    measured: pad.model.simulate(&truth)?,
                    pad: pad.clone(),
                    seed,
                })
            })
            .collect()
    }

    /// Section names with the exact case inputs each section runs on.
    pub fn section_inputs(&self) -> Result<Vec<(String, Vec<CaseInput>)>> {
        let cfg = &self.config;
        Ok(match cfg.kind {
            ExperimentKind::IdTest => vec![("id".into(), self.id_inputs(false)?)],
            ExperimentKind::NoiseTest => vec![("noise".into(), self.id_inputs(true)?)],
            ExperimentKind::OodTest => {
                let base = self.ood_cases()?;
                cfg.thresholds
                    .iter()
                    .map(|&eps| {
                        let cases = base
                            .iter()
                            .map(|c| CaseInput {
                                pad: c.pad.with_epsilon(eps),
                                ..c.clone()
                            })
                            .collect();
                        (epsilon_tag(eps), cases)
                    })
                    .collect()
            }
            ExperimentKind::ReconfigTest => cfg
                .reconfig
                .iter()
                .enumerate()
                .map(|(i, sc)| Ok((sc.name.clone(), self.reconfig_inputs(i, sc)?)))
                .collect::<Result<_>>()?,
            ExperimentKind::Ablation => {
                let base = self.ood_cases()?;
                cfg.arms.iter().map(|a| (a.name.clone(), base.clone())).collect()
            }
        })
    }
}

/// The ID dataset, simulated with the PAD's forward model so estimator and
/// detector always see the same spectra.
pub fn id_dataset(data: &DataConfig, pad: &PadConfig) -> Result<Dataset> {
    generate_dataset(&data.id_ranges, data.k, &pad.model.grid, &pad.model.db, data.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEval {
    pub n: usize,
    pub metrics: ElementMetrics,
    pub epsilon: f64,
    /// Test spectra whose estimate passes PAD.
    pub accepted: usize,
    pub max_error: f64,
}

/// Scores the estimator on the test split of `dataset`.
pub fn evaluate_estimator(model: &EstimatorModel, dataset: &Dataset, pad: &PadConfig) -> Result<EstimatorEval> {
    let test: Vec<_> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Config("dataset has no test split".into()));
    }
    let mut pairs = Vec::with_capacity(test.len());
    let (mut accepted, mut max_error) = (0, 0.0f64);
    for r in &test {
        let est = estimate(model, &r.spectrum)?;
        let b = Pad::new(pad, &r.spectrum)?.evaluate_lenient(&est)?;
        accepted += usize::from(b.e <= pad.epsilon);
        max_error = max_error.max(b.e);
        pairs.push((est, r.state));
    }
    Ok(EstimatorEval {
        n: test.len(),
        metrics: element_metrics(&pairs).ok_or_else(|| Error::Domain("degenerate test split".into()))?,
        epsilon: pad.epsilon,
        accepted,
        max_error,
    })
}

/// True state and per-case box: bounds sit 10–40% of the range span below and
/// above the state, truncated to the range.
pub fn ood_case(ranges: &StateRanges, seed: u64) -> Result<(GasState, FeasibleDomain)> {
    let mut rng = RngStream::new(seed, 0);
    let truth = ranges.sample(&mut rng);
    let mut bound = |x: f64, r: [f64; 2]| {
        let span = r[1] - r[0];
        let lo = (x - rng.uniform(0.1, 0.4) * span).max(r[0]);
        let hi = (x + rng.uniform(0.1, 0.4) * span).min(r[1]);
        [lo, hi]
    };
    let t = bound(truth.temperature, ranges.t);
    let c = bound(truth.mole_fraction, ranges.c);
    Ok((truth, FeasibleDomain::new(t, c)?))
}

fn epsilon_tag(eps: f64) -> String {
    format!("eps{eps:.3}")
}

fn estimator_mode(exp: &Experiment) -> Result<CaseMode<'_>> {
    Ok(CaseMode {
        estimator: Some(exp.estimator()?),
        always_correct: false,
    })
}

fn report(exp: &Experiment, sections: Vec<Section>, estimator_calls: usize) -> Report {
    Report {
        kind: exp.config.kind,
        seed: exp.config.seed,
        sections,
        estimator_calls,
    }
}

fn single_section(exp: &Experiment) -> Result<(String, Vec<CaseInput>)> {
    exp.section_inputs()?
        .pop()
        .ok_or_else(|| Error::Config("protocol produced no cases".into()))
}

pub fn run_id_test(exp: &Experiment) -> Result<Report> {
    let (name, cases) = single_section(exp)?;
    let outcomes = run_cases(&cases, estimator_mode(exp)?, &exp.config.correction, exp.threads)?;
    let section = Section::new(name, outcomes, Some(exp.pad.epsilon));
    Ok(report(exp, vec![section], cases.len()))
}

/// Runs every threshold on the same cases.
pub fn run_ood_test(exp: &Experiment) -> Result<Report> {
    let mode = estimator_mode(exp)?;
    let mut sections = Vec::new();
    let mut calls = 0;
    for (name, cases) in exp.section_inputs()? {
        let eps = cases.first().map(|c| c.pad.epsilon);
        calls += cases.len();
        sections.push(Section::new(name, run_cases(&cases, mode, &exp.config.correction, exp.threads)?, eps));
    }
    Ok(report(exp, sections, calls))
}

/// Corrects every case to the full budget and reports best-so-far errors at each checkpoint.
pub fn run_noise_test(exp: &Experiment) -> Result<Report> {
    let cfg = &exp.config;
    let budget = *cfg.noise.checkpoints.iter().max().expect("validated non-empty");
    let (name, cases) = single_section(exp)?;
    let correction = CorrectionConfig {
        max_iterations: budget,
        run_to_budget: true,
        ..cfg.correction.clone()
    };
    let mode = CaseMode {
        always_correct: true,
        ..estimator_mode(exp)?
    };
    let outcomes = run_cases(&cases, mode, &correction, exp.threads)?;
    let checkpoints = cfg
        .noise
        .checkpoints
        .iter()
        .map(|&b| Checkpoint {
            budget: b,
            mean_best_error: outcomes.iter().map(|o| best_after(o, b)).sum::<f64>() / outcomes.len() as f64,
        })
        .collect();
    let mut section = Section::new(name, outcomes, Some(exp.pad.epsilon));
    section.checkpoints = checkpoints;
    Ok(report(exp, vec![section], cases.len()))
}

fn best_after(o: &CaseOutcome, budget: usize) -> f64 {
    o.trace
        .iter()
        .take_while(|r| r.t <= budget)
        .last()
        .map_or_else(|| o.record.e_est.unwrap_or(o.record.e_final), |r| r.e_best)
}

/// Correction-only runs against each alternative forward model; the estimator is never called.
pub fn run_reconfig_test(exp: &Experiment) -> Result<Report> {
    let mode = CaseMode {
        estimator: None,
        always_correct: true,
    };
    let mut sections = Vec::new();
    for (name, cases) in exp.section_inputs()? {
        let eps = cases.first().map(|c| c.pad.epsilon);
        sections.push(Section::new(name, run_cases(&cases, mode, &exp.config.correction, exp.threads)?, eps));
    }
    Ok(report(exp, sections, 0))
}

/// The OoD protocol once per arm, on identical cases.
pub fn run_ablation(exp: &Experiment) -> Result<Report> {
    let mode = estimator_mode(exp)?;
    let mut sections = Vec::new();
    let mut calls = 0;
    for (arm, (name, cases)) in exp.config.arms.iter().zip(exp.section_inputs()?) {
        calls += cases.len();
        let outcomes = run_cases(&cases, mode, &arm.apply(&exp.config.correction), exp.threads)?;
        let mut s = Section::new(name, outcomes, Some(exp.pad.epsilon));
        s.arm = Some(arm.clone());
        sections.push(s);
    }
    Ok(report(exp, sections, calls))
}

/// Aggregates every `cases_*.csv` in `dir`; thresholds come from a
/// `summary.json` in the same directory when present.
pub fn report_from_dir(dir: &Path) -> Result<serde_json::Value> {
    let thresholds: BTreeMap<String, f64> = std::fs::read_to_string(dir.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| {
            v.get("sections")?.as_object().map(|m| {
                m.iter()
                    .filter_map(|(k, s)| Some((k.clone(), s.get("epsilon")?.as_f64()?)))
                    .collect()
            })
        })
        .unwrap_or_default();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("cases_") && n.ends_with(".csv"))
        })
        .collect();
    names.sort();
    let mut out = serde_json::Map::new();
    for path in names {
        let section = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("cases_"))
            .unwrap_or_default()
            .to_string();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let eps = thresholds.get(&section).copied();
        let records = cases_from_csv(&text, eps).map_err(|m| Error::parse(&path, m))?;
        out.insert(
            section,
            serde_json::to_value(summarize(&records, eps)).expect("summary serializes"),
        );
    }
    Ok(serde_json::Value::Object(out))
}
