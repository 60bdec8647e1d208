//! Correction mode: an online surrogate-ensemble search that repairs a
//! rejected estimate using only forward-model queries.
//!
//! All search happens in box coordinates of the feasible domain (0 at the
//! lower bound, 1 at the upper bound). The learned part of the error model
//! approximates the reconstruction error; the feasible part is computed
//! exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{GasState, Spectrum};
use crate::nn::{self, Activation, Adam, NetworkSpec, NetworkWeights, Tensor};
use crate::pad::{ErrorBreakdown, FeasibleDomain, Pad, PadConfig};
use crate::rng::RngStream;

/// Standard deviation of U[0, 1].
pub const UNIFORM_STD: f64 = 0.288;

/// Lowest temperature handed to the forward model when a candidate strays below zero.
pub const MIN_PHYSICAL_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Nets learn `e_R`; feasible error is added exactly.
    #[default]
    ReconstructionOnly,
    /// Nets learn the overall error directly.
    Overall,
    /// Nets learn `(e_R, e_F1, e_F2)`; the estimate is their weighted sum.
    AllElements,
}

impl ErrorMode {
    pub fn out_dim(&self) -> usize {
        match self {
            ErrorMode::AllElements => 3,
            _ => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMode::ReconstructionOnly => "reconstruction_only",
            ErrorMode::Overall => "overall",
            ErrorMode::AllElements => "all_elements",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    MonteCarlo,
    Disagreement,
}

impl SamplingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingMode::MonteCarlo => "monte_carlo",
            SamplingMode::Disagreement => "disagreement",
        }
    }
}

/// Update rule for the candidate search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchOptimizer {
    /// `x ← x − lr·∇J`
    GradientDescent,
    /// Adam over all candidate coordinates, state kept for the whole run.
    #[default]
    Adam,
}

impl SearchOptimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchOptimizer::GradientDescent => "gradient_descent",
            SearchOptimizer::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub ensemble_size: usize,
    pub batch_size: usize,
    pub n_candidates: usize,
    pub max_iterations: usize,
    pub max_epochs: usize,
    pub early_stop_loss: f64,
    pub delta_g: usize,
    pub lr_surrogate: f64,
    pub lr_search: f64,
    pub search_optimizer: SearchOptimizer,
    pub c1: f64,
    pub c2: f64,
    pub error_mode: ErrorMode,
    pub sampling_mode: SamplingMode,
    pub diversity_enabled: bool,
    pub seed: u64,
    /// Hidden widths of every base network.
    pub hidden: Vec<usize>,
    pub disagreement_steps: usize,
    /// Candidate clamp in box coordinates.
    pub safety_box: [f64; 2],
    /// Keep iterating after acceptance (for budget sweeps).
    pub run_to_budget: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 4,
            batch_size: 32,
            n_candidates: 128,
            max_iterations: 200,
            max_epochs: 40,
            early_stop_loss: 1e-4,
            delta_g: 1,
            lr_surrogate: 1e-4,
            lr_search: 2.5e-2,
            search_optimizer: SearchOptimizer::default(),
            c1: 5.0,
            c2: 2.0,
            error_mode: ErrorMode::ReconstructionOnly,
            sampling_mode: SamplingMode::MonteCarlo,
            diversity_enabled: true,
            seed: 0,
            hidden: vec![512, 1024, 512],
            disagreement_steps: 20,
            safety_box: [-0.5, 1.5],
            run_to_budget: false,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.ensemble_size,
            self.batch_size,
            self.n_candidates,
            self.max_iterations,
            self.delta_g,
        ];
        if counts.contains(&0) || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("correction counts and widths must be positive".into()));
        }
        let pos = [self.lr_surrogate, self.lr_search, self.c1, self.c2];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates and c1/c2 must be positive".into()));
        }
        if !(self.early_stop_loss >= 0.0) || !(self.safety_box[0] < self.safety_box[1]) {
            return Err(Error::Config("invalid early-stop threshold or safety box".into()));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut widths = vec![2];
        widths.extend(&self.hidden);
        widths.push(self.error_mode.out_dim());
        NetworkSpec::mlp(&widths, Activation::ScaledSigmoid(2.0))
    }

    /// `δ_G·⌊2n_e/L + 1⌋`
    pub fn search_steps(&self, n_early_stopped: usize) -> usize {
        self.delta_g * ((2 * n_early_stopped) / self.ensemble_size + 1)
    }
}

/// Anything that maps box-coordinate states to per-member error estimates.
pub trait Surrogate {
    fn n_members(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Per-member outputs, each `[points, out_dim]` row-major.
    fn outputs(&self, x: &[[f64; 2]]) -> Result<Vec<Vec<f64>>>;
    /// Σᵢ Jᵢᵀ·gᵢ at every point, where `grads[i]` is shaped like member `i`'s output.
    fn pullback(&self, x: &[[f64; 2]], grads: &[Vec<f64>]) -> Result<Vec<[f64; 2]>>;
}

fn points_tensor(x: &[[f64; 2]]) -> Tensor {
    Tensor {
        shape: vec![x.len(), 2],
        values: x.iter().flatten().copied().collect(),
    }
}

#[derive(Debug, Clone)]
struct Member {
    weights: NetworkWeights,
    optimizer: Adam,
    bootstrap: RngStream,
}

/// L independently trained base networks sharing one architecture.
#[derive(Debug, Clone)]
pub struct SurrogateEnsemble {
    pub spec: NetworkSpec,
    members: Vec<Member>,
}

impl SurrogateEnsemble {
    pub fn new(config: &CorrectionConfig) -> Self {
        let spec = config.network_spec();
        let members = (0..config.ensemble_size as u64)
            .map(|i| {
                let weights = NetworkWeights::init(&spec, &mut RngStream::new(config.seed, 100 + i));
                Member {
                    optimizer: Adam::new(weights.len(), config.lr_surrogate),
                    weights,
                    bootstrap: RngStream::new(config.seed, 200 + i),
                }
            })
            .collect();
        Self { spec, members }
    }

    pub fn member_weights(&self, i: usize) -> &NetworkWeights {
        &self.members[i].weights
    }
}

impl Surrogate for SurrogateEnsemble {
    fn n_members(&self) -> usize {
        self.members.len()
    }

    fn out_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn outputs(&self, x: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
        let input = points_tensor(x);
        self.members
            .iter()
            .map(|m| Ok(nn::predict(&self.spec, &m.weights, &input)?.values))
            .collect()
    }

    fn pullback(&self, x: &[[f64; 2]], grads: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
        let input = points_tensor(x);
        let mut total = vec![[0.0; 2]; x.len()];
        for (m, g) in self.members.iter().zip(grads) {
            let (out, cache) = nn::forward(&self.spec, &m.weights, &input)?;
            let g = Tensor::new(out.shape, g.clone())?;
            let gi = nn::input_gradient(&self.spec, &m.weights, &cache, &g)?;
            for (t, row) in total.iter_mut().zip(gi.values.chunks_exact(2)) {
                t[0] += row[0];
                t[1] += row[1];
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub state: [f64; 2],
    /// Training target, clipped to the surrogate's output range.
    pub target: Vec<f64>,
}

/// Append-only set of (box-coordinate state, error target) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    pub entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, state: [f64; 2], breakdown: &ErrorBreakdown, mode: ErrorMode) {
        self.entries.push(BufferEntry {
            state,
            target: training_target(breakdown, mode),
        });
    }
}

/// Output codomain of the sigmoid×2 head.
const TARGET_CAP: f64 = 2.0;

pub fn training_target(b: &ErrorBreakdown, mode: ErrorMode) -> Vec<f64> {
    let clip = |v: f64| if v.is_nan() { TARGET_CAP } else { v.clamp(0.0, TARGET_CAP) };
    match mode {
        ErrorMode::ReconstructionOnly => vec![clip(b.e_r)],
        ErrorMode::Overall => vec![clip(b.e)],
        ErrorMode::AllElements => vec![clip(b.e_r), clip(b.e_f[0]), clip(b.e_f[1])],
    }
}

/// Exact feasible error in box coordinates and its gradient.
pub fn box_feasible_error(n: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let f = |v: f64| {
        if v > 1.0 {
            (v - 1.0, 1.0)
        } else if v < 0.0 {
            (-v, -1.0)
        } else {
            (0.0, 0.0)
        }
    };
    let (a, b) = (f(n[0]), f(n[1]));
    ([a.0, b.0], [a.1, b.1])
}

/// Per-member scalar error estimates; entry `[i][p]` is member `i` at point `p`.
fn member_estimates(
    outputs: &[Vec<f64>],
    n_points: usize,
    out_dim: usize,
    weights: [f64; 3],
    mode: ErrorMode,
) -> Vec<Vec<f64>> {
    outputs
        .iter()
        .map(|o| {
            (0..n_points)
                .map(|p| match mode {
                    ErrorMode::ReconstructionOnly => weights[0] * o[p * out_dim],
                    ErrorMode::Overall => o[p * out_dim],
                    ErrorMode::AllElements => (0..3).map(|k| weights[k] * o[p * out_dim + k]).sum(),
                })
                .collect()
        })
        .collect()
}

/// Output-gradient seed that turns a pullback into ∂(Σₚ cₚ·mean-estimate)/∂x.
fn estimate_seed(coef: &[f64], n_members: usize, out_dim: usize, weights: [f64; 3], mode: ErrorMode) -> Vec<f64> {
    let l = n_members as f64;
    let mut g = Vec::with_capacity(coef.len() * out_dim);
    for &c in coef {
        match mode {
            ErrorMode::ReconstructionOnly => g.push(c * weights[0] / l),
            ErrorMode::Overall => g.push(c / l),
            ErrorMode::AllElements => g.extend((0..3).map(|k| c * weights[k] / l)),
        }
    }
    g
}

/// Hybrid error estimate ê at each point: ensemble mean plus, for
/// reconstruction-only surrogates, the exact weighted feasible error.
pub fn estimate_error<S: Surrogate + ?Sized>(
    surrogate: &S,
    x: &[[f64; 2]],
    pad_weights: [f64; 3],
    mode: ErrorMode,
) -> Result<Vec<f64>> {
    let outputs = surrogate.outputs(x)?;
    let per_member = member_estimates(&outputs, x.len(), surrogate.out_dim(), pad_weights, mode);
    let l = surrogate.n_members() as f64;
    Ok((0..x.len())
        .map(|p| {
            let mean = per_member.iter().map(|m| m[p]).sum::<f64>() / l;
            mean + exact_feasible_part(x[p], pad_weights, mode).0
        })
        .collect())
}

fn exact_feasible_part(x: [f64; 2], w: [f64; 3], mode: ErrorMode) -> (f64, [f64; 2]) {
    if mode != ErrorMode::ReconstructionOnly {
        return (0.0, [0.0; 2]);
    }
    let (ef, g) = box_feasible_error(x);
    (w[1] * ef[0] + w[2] * ef[1], [w[1] * g[0], w[2] * g[1]])
}

/// ê and ∂ê/∂x at each point.
pub fn estimate_error_with_grad<S: Surrogate + ?Sized>(
    surrogate: &S,
    x: &[[f64; 2]],
    pad_weights: [f64; 3],
    mode: ErrorMode,
) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
    let values = estimate_error(surrogate, x, pad_weights, mode)?;
    let seed = estimate_seed(&vec![1.0; x.len()], surrogate.n_members(), surrogate.out_dim(), pad_weights, mode);
    let seeds = vec![seed; surrogate.n_members()];
    let mut grads = surrogate.pullback(x, &seeds)?;
    for (g, p) in grads.iter_mut().zip(x) {
        let (_, fg) = exact_feasible_part(*p, pad_weights, mode);
        g[0] += fg[0];
        g[1] += fg[1];
    }
    Ok((values, grads))
}

/// Mean over dimensions of the per-dimension population standard deviation.
pub fn spread(points: &[[f64; 2]]) -> f64 {
    let (s0, s1) = dim_std(points);
    0.5 * (s0 + s1)
}

fn dim_std(points: &[[f64; 2]]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean = |d: usize| points.iter().map(|p| p[d]).sum::<f64>() / n;
    let std = |d: usize, m: f64| (points.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / n).sqrt();
    let (m0, m1) = (mean(0), mean(1));
    (std(0, m0), std(1, m1))
}

/// Diversity penalty `max(0.288·c1 − σ, 0)/(0.288·c1) · ε/c2` and its gradient.
pub fn diversity_error_with_grad(points: &[[f64; 2]], epsilon: f64, c1: f64, c2: f64) -> (f64, Vec<[f64; 2]>) {
    let n = points.len();
    let a = UNIFORM_STD * c1;
    let sigma = spread(points);
    let value = (a - sigma).max(0.0) / a * epsilon / c2;
    let mut grads = vec![[0.0; 2]; n];
    if sigma >= a || n < 2 {
        return (value, grads);
    }
    let de_dsigma = -epsilon / (c2 * a);
    let (s0, s1) = dim_std(points);
    let nf = n as f64;
    let m0 = points.iter().map(|p| p[0]).sum::<f64>() / nf;
    let m1 = points.iter().map(|p| p[1]).sum::<f64>() / nf;
    for (g, p) in grads.iter_mut().zip(points) {
        // σ = (σ₀ + σ₁)/2 and ∂σ_d/∂x_d = (x_d − m_d)/(n·σ_d); zero spread has no direction
        if s0 > 0.0 {
            g[0] = de_dsigma * 0.5 * (p[0] - m0) / (nf * s0);
        }
        if s1 > 0.0 {
            g[1] = de_dsigma * 0.5 * (p[1] - m1) / (nf * s1);
        }
    }
    (value, grads)
}

pub fn diversity_error(points: &[[f64; 2]], epsilon: f64, c1: f64, c2: f64) -> f64 {
    diversity_error_with_grad(points, epsilon, c1, c2).0
}

#[derive(Debug, Clone)]
enum Stepper {
    Plain(f64),
    Adam(Adam),
}

/// Candidate population plus its search-optimizer state, which persists
/// across iterations of one correction run.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub points: Vec<[f64; 2]>,
    stepper: Stepper,
}

impl CandidateSet {
    pub fn new(points: Vec<[f64; 2]>, learning_rate: f64, optimizer: SearchOptimizer) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("candidates must be finite".into()));
        }
        let stepper = match optimizer {
            SearchOptimizer::GradientDescent => Stepper::Plain(learning_rate),
            SearchOptimizer::Adam => Stepper::Adam(Adam::new(2 * points.len(), learning_rate)),
        };
        Ok(Self { points, stepper })
    }

    pub fn uniform(n: usize, learning_rate: f64, optimizer: SearchOptimizer, rng: &mut RngStream) -> Self {
        let points = (0..n).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        Self::new(points, learning_rate, optimizer).expect("uniform draws are finite")
    }

    pub fn spread(&self) -> f64 {
        spread(&self.points)
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match &mut self.stepper {
            Stepper::Plain(lr) => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
                }
                Ok(())
            }
            Stepper::Adam(adam) => adam.step(params, grads),
        }
    }
}

/// Everything the population search needs besides the surrogate itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSettings {
    pub error_mode: ErrorMode,
    pub pad_weights: [f64; 3],
    pub epsilon: f64,
    pub c1: f64,
    pub c2: f64,
    pub diversity_enabled: bool,
    pub safety_box: [f64; 2],
}

impl SearchSettings {
    pub fn new(config: &CorrectionConfig, pad: &PadConfig) -> Self {
        Self {
            error_mode: config.error_mode,
            pad_weights: pad.weights,
            epsilon: pad.epsilon,
            c1: config.c1,
            c2: config.c2,
            diversity_enabled: config.diversity_enabled,
            safety_box: config.safety_box,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SearchStats {
    pub steps_taken: usize,
    pub steps_skipped: usize,
}

/// Population objective `mean ê + e_D` and its gradient w.r.t. every candidate.
pub fn search_objective<S: Surrogate + ?Sized>(
    points: &[[f64; 2]],
    surrogate: &S,
    settings: &SearchSettings,
) -> Result<(f64, Vec<[f64; 2]>)> {
    let n = points.len() as f64;
    let (values, mut grads) =
        estimate_error_with_grad(surrogate, points, settings.pad_weights, settings.error_mode)?;
    let mut objective = values.iter().sum::<f64>() / n;
    for g in &mut grads {
        g[0] /= n;
        g[1] /= n;
    }
    if settings.diversity_enabled {
        let (ed, dg) = diversity_error_with_grad(points, settings.epsilon, settings.c1, settings.c2);
        objective += ed;
        for (g, d) in grads.iter_mut().zip(dg) {
            g[0] += d[0];
            g[1] += d[1];
        }
    }
    Ok((objective, grads))
}

/// `steps` joint gradient steps on the population objective, clamping to the safety box.
pub fn greedy_ensemble_search<S: Surrogate + ?Sized>(
    candidates: &mut CandidateSet,
    surrogate: &S,
    settings: &SearchSettings,
    steps: usize,
) -> Result<SearchStats> {
    let mut stats = SearchStats::default();
    for _ in 0..steps {
        let (_, grads) = search_objective(&candidates.points, surrogate, settings)?;
        let flat: Vec<f64> = grads.iter().flatten().copied().collect();
        if flat.iter().any(|g| !g.is_finite()) {
            stats.steps_skipped += 1;
            continue;
        }
        let mut params: Vec<f64> = candidates.points.iter().flatten().copied().collect();
        candidates.step(&mut params, &flat)?;
        let [lo, hi] = settings.safety_box;
        for (p, v) in candidates.points.iter_mut().zip(params.chunks_exact(2)) {
            *p = [v[0].clamp(lo, hi), v[1].clamp(lo, hi)];
        }
        stats.steps_taken += 1;
    }
    Ok(stats)
}

/// Index of the candidate with the lowest ê; ties go to the lowest index.
pub fn select_candidate<S: Surrogate + ?Sized>(
    candidates: &CandidateSet,
    surrogate: &S,
    settings: &SearchSettings,
) -> Result<usize> {
    if candidates.points.is_empty() {
        return Err(Error::Domain("no candidates to select from".into()));
    }
    let values = estimate_error(surrogate, &candidates.points, settings.pad_weights, settings.error_mode)?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One exploration probe in box coordinates.
pub fn explore<S: Surrogate + ?Sized>(
    config: &CorrectionConfig,
    surrogate: &S,
    pad_weights: [f64; 3],
    rng: &mut RngStream,
) -> Result<[f64; 2]> {
    let mut x = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
    if config.sampling_mode == SamplingMode::MonteCarlo {
        return Ok(x);
    }
    let l = surrogate.n_members();
    for _ in 0..config.disagreement_steps {
        let pts = [x];
        let outputs = surrogate.outputs(&pts)?;
        let est: Vec<f64> = member_estimates(&outputs, 1, surrogate.out_dim(), pad_weights, config.error_mode)
            .into_iter()
            .map(|m| m[0])
            .collect();
        let mean = est.iter().sum::<f64>() / l as f64;
        let std = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / l as f64).sqrt();
        if !(std > 0.0) {
            break;
        }
        // ∂std/∂eᵢ = (eᵢ − ē)/(L·std)
        let seeds: Vec<Vec<f64>> = est
            .iter()
            .map(|e| {
                estimate_seed(
                    &[(e - mean) / (l as f64 * std) * l as f64],
                    l,
                    surrogate.out_dim(),
                    pad_weights,
                    config.error_mode,
                )
            })
            .collect();
        let g = surrogate.pullback(&pts, &seeds)?[0];
        if !g[0].is_finite() || !g[1].is_finite() {
            break;
        }
        x = [
            (x[0] + config.lr_search * g[0]).clamp(0.0, 1.0),
            (x[1] + config.lr_search * g[1]).clamp(0.0, 1.0),
        ];
    }
    Ok(x)
}

/// Fine-tunes every base net on bootstrap draws of the previous buffer plus
/// the newest pairs. Returns how many nets stopped early.
pub fn train_surrogate(
    ensemble: &mut SurrogateEnsemble,
    previous: &[BufferEntry],
    new_pairs: &[BufferEntry],
    config: &CorrectionConfig,
) -> Result<usize> {
    if previous.is_empty() && new_pairs.is_empty() {
        return Err(Error::Training("cannot train on an empty buffer".into()));
    }
    let spec = &ensemble.spec;
    let out_dim = spec.output_dim();
    let results: Vec<Result<bool>> = ensemble
        .members
        .par_iter_mut()
        .map(|m| {
            let mut batch: Vec<&BufferEntry> = if previous.is_empty() {
                Vec::new()
            } else {
                nn::bootstrap_sample(previous.len(), config.batch_size, &mut m.bootstrap)?
                    .into_iter()
                    .map(|i| &previous[i])
                    .collect()
            };
            batch.extend(new_pairs);
            let x = Tensor {
                shape: vec![batch.len(), 2],
                values: batch.iter().flat_map(|e| e.state).collect(),
            };
            let y = Tensor {
                shape: vec![batch.len(), out_dim],
                values: batch.iter().flat_map(|e| e.target.iter().copied()).collect(),
            };
            for _ in 0..config.max_epochs {
                let (out, cache) = nn::forward(spec, &m.weights, &x)?;
                let (loss, grad) = nn::mse_loss(&out, &y)?;
                if !loss.is_finite() {
                    return Err(Error::Training("surrogate loss became non-finite".into()));
                }
                if loss < config.early_stop_loss {
                    return Ok(true);
                }
                let g = nn::backward(spec, &m.weights, &cache, &grad)?;
                nn::optimizer_step(&mut m.optimizer, &mut m.weights, &g.weights)?;
            }
            Ok(false)
        })
        .collect();
    let mut stopped = 0;
    for r in results {
        stopped += r? as usize;
    }
    Ok(stopped)
}

/// Physical state for a box-coordinate point, kept inside the forward model's domain.
pub fn to_physical(domain: &FeasibleDomain, x: [f64; 2]) -> GasState {
    let s = domain.denormalize(x);
    GasState::new(
        s.temperature.max(MIN_PHYSICAL_TEMPERATURE),
        s.mole_fraction.clamp(0.0, 1.0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub state: GasState,
    pub breakdown: ErrorBreakdown,
}

/// Evaluates `N` uniform probes of the feasible box. Returns the buffer and the best probe.
pub fn init_buffer(
    config: &CorrectionConfig,
    pad: &Pad<'_>,
    rng: &mut RngStream,
) -> Result<(ReplayBuffer, Scored)> {
    let domain = pad.config().domain;
    let mut buffer = ReplayBuffer::default();
    let mut best: Option<Scored> = None;
    for _ in 0..config.batch_size {
        let x = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let state = domain.denormalize(x);
        let breakdown = pad.evaluate(&state)?;
        buffer.push(x, &breakdown, config.error_mode);
        if best.is_none_or(|b| breakdown.e < b.breakdown.e) {
            best = Some(Scored { state, breakdown });
        }
    }
    Ok((buffer, best.expect("batch size is positive")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub n_e: usize,
    #[serde(rename = "T_G")]
    pub t_g: usize,
    pub e_candidate: f64,
    pub e_explore: Option<f64>,
    pub e_best: f64,
    pub buffer_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub best: Scored,
    pub iterations: usize,
    pub success: bool,
    pub trace: Vec<TraceRecord>,
    pub pad_queries: u64,
    /// Best error after the initial probes (and first guess), before any iteration.
    pub initial_best: f64,
    pub first_guess_injected: bool,
    pub skipped_search_steps: usize,
}

impl CorrectionResult {
    /// Best-so-far overall error after iteration `t` (0 = after initialization).
    pub fn best_after(&self, t: usize) -> f64 {
        self.trace
            .iter()
            .take_while(|r| r.t <= t)
            .last()
            .map_or(self.initial_best, |r| r.e_best)
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serializes") + "\n")
            .collect()
    }
}

/// The full correction loop for one measured spectrum.
///
/// `first_guess` carries the estimator's state with its already computed
/// breakdown; it seeds best-so-far and, when inside the safety box, replaces
/// one initial candidate.
pub fn run_correction(
    measured: &Spectrum,
    first_guess: Option<Scored>,
    pad_config: &PadConfig,
    config: &CorrectionConfig,
) -> Result<CorrectionResult> {
    config.validate()?;
    pad_config.validate()?;
    let pad = Pad::new(pad_config, measured)?;
    let domain = pad_config.domain;
    let settings = SearchSettings::new(config, pad_config);
    let mut probe_rng = RngStream::new(config.seed, 1);
    let mut cand_rng = RngStream::new(config.seed, 2);

    let mut ensemble = SurrogateEnsemble::new(config);
    let (mut buffer, probe_best) = init_buffer(config, &pad, &mut probe_rng)?;
    let mut best = match first_guess {
        Some(fg) if fg.breakdown.e <= probe_best.breakdown.e => fg,
        _ => probe_best,
    };
    let initial_best = best.breakdown.e;

    let mut candidates = CandidateSet::uniform(config.n_candidates, config.lr_search, config.search_optimizer, &mut cand_rng);
    let mut injected = false;
    if let Some(fg) = first_guess {
        let n = domain.normalize(&fg.state);
        let [lo, hi] = config.safety_box;
        if n.iter().all(|v| (lo..=hi).contains(v)) {
            candidates.points[0] = n;
            injected = true;
        }
    }

    let done = |b: &Scored| pad.accepts(&b.breakdown) && !config.run_to_budget;
    let mut result = CorrectionResult {
        best,
        iterations: 0,
        success: false,
        trace: Vec::new(),
        pad_queries: 0,
        initial_best,
        first_guess_injected: injected,
        skipped_search_steps: 0,
    };
    if done(&best) {
        result.success = true;
        result.pad_queries = pad.queries();
        return Ok(result);
    }

    let mut trained_upto = 0;
    for t in 1..=config.max_iterations {
        let (previous, new_pairs) = buffer.entries.split_at(trained_upto);
        let (previous, new_pairs) = if trained_upto == 0 {
            (new_pairs, &[][..])
        } else {
            (previous, new_pairs)
        };
        let n_e = train_surrogate(&mut ensemble, previous, new_pairs, config)?;
        trained_upto = buffer.len();
        let t_g = config.search_steps(n_e);
        let stats = greedy_ensemble_search(&mut candidates, &ensemble, &settings, t_g)?;
        result.skipped_search_steps += stats.steps_skipped;

        let pick = select_candidate(&candidates, &ensemble, &settings)?;
        let xc = candidates.points[pick];
        let sc = to_physical(&domain, xc);
        let bc = pad.evaluate(&sc)?;
        if bc.e < best.breakdown.e {
            best = Scored {
                state: sc,
                breakdown: bc,
            };
        }
        let mut record = TraceRecord {
            t,
            n_e,
            t_g,
            e_candidate: bc.e,
            e_explore: None,
            e_best: best.breakdown.e,
            buffer_len: buffer.len(),
        };
        result.iterations = t;
        if done(&best) {
            result.trace.push(record);
            break;
        }

        let xm = explore(config, &ensemble, pad_config.weights, &mut probe_rng)?;
        let sm = to_physical(&domain, xm);
        let bm = pad.evaluate(&sm)?;
        if bm.e < best.breakdown.e {
            best = Scored {
                state: sm,
                breakdown: bm,
            };
        }
        buffer.push(domain.normalize(&sc), &bc, config.error_mode);
        buffer.push(domain.normalize(&sm), &bm, config.error_mode);
        record.e_explore = Some(bm.e);
        record.e_best = best.breakdown.e;
        record.buffer_len = buffer.len();
        result.trace.push(record);
        if done(&best) {
            break;
        }
    }
    result.best = best;
    result.success = pad.accepts(&best.breakdown);
    result.pad_queries = pad.queries();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardModel, LineDatabase, SpectralGrid, StateRanges};

    /// Every member returns `f(x)` with gradient `df(x)`, scaled per member.
    struct Stub {
        scales: Vec<f64>,
        f: fn([f64; 2]) -> f64,
        df: fn([f64; 2]) -> [f64; 2],
    }

    impl Surrogate for Stub {
        fn n_members(&self) -> usize {
            self.scales.len()
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn outputs(&self, x: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
            Ok(self.scales.iter().map(|s| x.iter().map(|p| s * (self.f)(*p)).collect()).collect())
        }
        fn pullback(&self, x: &[[f64; 2]], grads: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
            let mut out = vec![[0.0; 2]; x.len()];
            for (s, g) in self.scales.iter().zip(grads) {
                for (p, o) in x.iter().enumerate() {
                    let d = (self.df)(*o);
                    out[p][0] += s * g[p] * d[0];
                    out[p][1] += s * g[p] * d[1];
                }
            }
            Ok(out)
        }
    }

    const TARGET: [f64; 2] = [0.3, 0.7];

    fn quadratic() -> Stub {
        Stub {
            scales: vec![1.0; 4],
            f: |x| (x[0] - TARGET[0]).powi(2) + (x[1] - TARGET[1]).powi(2),
            df: |x| [2.0 * (x[0] - TARGET[0]), 2.0 * (x[1] - TARGET[1])],
        }
    }

    fn constant() -> Stub {
        Stub {
            scales: vec![1.0; 4],
            f: |_| 0.25,
            df: |_| [0.0, 0.0],
        }
    }

    fn settings(diversity: bool) -> SearchSettings {
        SearchSettings {
            error_mode: ErrorMode::ReconstructionOnly,
            pad_weights: [1.0; 3],
            epsilon: 0.05,
            c1: 5.0,
            c2: 2.0,
            diversity_enabled: diversity,
            safety_box: [-0.5, 1.5],
        }
    }

    fn small_config() -> CorrectionConfig {
        CorrectionConfig {
            hidden: vec![16, 16],
            ..CorrectionConfig::default()
        }
    }

    #[test]
    fn search_steps_rule() {
        let c = CorrectionConfig::default();
        assert_eq!((0..=4).map(|n| c.search_steps(n)).collect::<Vec<_>>(), vec![1, 1, 2, 2, 3]);
        let c3 = CorrectionConfig { delta_g: 3, ..c };
        assert_eq!(c3.search_steps(0), 3);
        assert_eq!(c3.search_steps(4), 9);
    }

    #[test]
    fn diversity_error_cases() {
        let same = vec![[0.4, 0.4]; 8];
        assert!((diversity_error(&same, 0.05, 5.0, 2.0) - 0.025).abs() < 1e-15);
        // two points ±σ around a centre give per-dimension std σ
        let pts = vec![[0.5 - 0.144, 0.5 - 0.144], [0.5 + 0.144, 0.5 + 0.144]];
        assert!((diversity_error(&pts, 0.05, 1.0, 2.0) - 0.0125).abs() < 1e-12);
        let wide = vec![[-0.5, -0.5], [1.5, 1.5]];
        assert_eq!(diversity_error(&wide, 0.05, 1.0, 2.0), 0.0);
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        let pts: Vec<[f64; 2]> = (0..6).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let (_, g) = diversity_error_with_grad(&pts, 0.1, 5.0, 2.0);
        let h = 1e-6;
        for i in 0..pts.len() {
            for d in 0..2 {
                let mut p = pts.clone();
                p[i][d] += h;
                let up = diversity_error(&p, 0.1, 5.0, 2.0);
                p[i][d] -= 2.0 * h;
                let dn = diversity_error(&p, 0.1, 5.0, 2.0);
                let num = (up - dn) / (2.0 * h);
                assert!((num - g[i][d]).abs() < 1e-8, "{num} vs {}", g[i][d]);
            }
        }
    }

    #[test]
    fn estimate_error_with_constant_members() {
        let s = constant();
        let inside = estimate_error(&s, &[[0.5, 0.5]], [1.0; 3], ErrorMode::ReconstructionOnly).unwrap();
        assert!((inside[0] - 0.25).abs() < 1e-15);
        let above = estimate_error(&s, &[[1.5, 0.5]], [1.0; 3], ErrorMode::ReconstructionOnly).unwrap();
        assert!((above[0] - 0.75).abs() < 1e-15);
        let overall = estimate_error(&s, &[[1.5, 0.5]], [1.0; 3], ErrorMode::Overall).unwrap();
        assert!((overall[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ensemble_estimate_is_member_mean() {
        let cfg = small_config();
        let ens = SurrogateEnsemble::new(&cfg);
        let pts = [[0.2, 0.9], [0.5, 0.5], [-0.3, 1.2]];
        let outs = ens.outputs(&pts).unwrap();
        let est = estimate_error(&ens, &pts, [1.0; 3], ErrorMode::Overall).unwrap();
        for p in 0..pts.len() {
            let mean = outs.iter().map(|o| o[p]).sum::<f64>() / 4.0;
            assert_eq!(est[p], mean);
        }
    }

    #[test]
    fn ensemble_gradient_matches_finite_differences() {
        for mode in [ErrorMode::ReconstructionOnly, ErrorMode::AllElements] {
            let cfg = CorrectionConfig {
                error_mode: mode,
                ..small_config()
            };
            let ens = SurrogateEnsemble::new(&cfg);
            let pts = [[0.21, 0.83], [0.55, 0.47], [1.3, -0.2]];
            let (_, g) = estimate_error_with_grad(&ens, &pts, [1.0, 0.7, 1.3], mode).unwrap();
            let h = 1e-5;
            for (i, p) in pts.iter().enumerate() {
                for d in 0..2 {
                    let mut up = *p;
                    up[d] += h;
                    let mut dn = *p;
                    dn[d] -= h;
                    let fu = estimate_error(&ens, &[up], [1.0, 0.7, 1.3], mode).unwrap()[0];
                    let fd = estimate_error(&ens, &[dn], [1.0, 0.7, 1.3], mode).unwrap()[0];
                    let num = (fu - fd) / (2.0 * h);
                    let rel = (num - g[i][d]).abs() / num.abs().max(g[i][d].abs()).max(1e-3);
                    assert!(rel < 1e-4, "{mode:?} point {i} dim {d}: {num} vs {}", g[i][d]);
                }
            }
        }
    }

    #[test]
    fn quadratic_stub_pulls_candidates_in() {
        for opt in OPTIMIZERS {
            quadratic_pull_in(opt);
        }
    }

    const OPTIMIZERS: [SearchOptimizer; 2] = [SearchOptimizer::GradientDescent, SearchOptimizer::Adam];

    fn quadratic_pull_in(opt: SearchOptimizer) {
        let mut rng = RngStream::new(3, 0);
        let mut cands = CandidateSet::uniform(32, 2.5e-2, opt, &mut rng);
        let dist = |c: &CandidateSet| {
            c.points
                .iter()
                .map(|p| ((p[0] - TARGET[0]).powi(2) + (p[1] - TARGET[1]).powi(2)).sqrt())
                .sum::<f64>()
        };
        let mut prev = dist(&cands);
        for _ in 0..5 {
            greedy_ensemble_search(&mut cands, &quadratic(), &settings(false), 1).unwrap();
            let now = dist(&cands);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_steps_leave_candidates_alone() {
        let mut cands = CandidateSet::uniform(8, 2.5e-2, SearchOptimizer::Adam, &mut RngStream::new(1, 0));
        let before = cands.points.clone();
        greedy_ensemble_search(&mut cands, &quadratic(), &settings(true), 0).unwrap();
        assert_eq!(cands.points, before);
    }

    #[test]
    fn diversity_spreads_collapsed_candidates() {
        let mut rng = RngStream::new(2, 0);
        let pts = (0..16)
            .map(|_| [0.5 + rng.uniform(-1e-3, 1e-3), 0.5 + rng.uniform(-1e-3, 1e-3)])
            .collect::<Vec<_>>();
        for opt in OPTIMIZERS {
            let mut cands = CandidateSet::new(pts.clone(), 2.5e-2, opt).unwrap();
            let before = cands.spread();
            greedy_ensemble_search(&mut cands, &constant(), &settings(true), 5).unwrap();
            assert!(cands.spread() > before, "{opt:?}");
        }
    }

    #[test]
    fn plain_descent_never_shrinks_spread_under_constant_surrogate() {
        let mut cands = CandidateSet::uniform(64, 2.5e-2, SearchOptimizer::GradientDescent, &mut RngStream::new(4, 0));
        let mut prev = cands.spread();
        for _ in 0..300 {
            greedy_ensemble_search(&mut cands, &constant(), &settings(true), 1).unwrap();
            assert!(cands.spread() >= prev);
            prev = cands.spread();
        }
    }

    #[test]
    fn candidates_stay_in_safety_box() {
        let far = Stub {
            scales: vec![1.0; 4],
            f: |x| -x[0] - x[1],
            df: |_| [-1.0, -1.0],
        };
        let mut cands = CandidateSet::uniform(8, 0.5, SearchOptimizer::Adam, &mut RngStream::new(1, 0));
        greedy_ensemble_search(&mut cands, &far, &settings(false), 20).unwrap();
        assert!(cands.points.iter().flatten().all(|v| (-0.5..=1.5).contains(v)));
        assert!(cands.points.iter().flatten().any(|v| *v == 1.5));
        let mut plain = CandidateSet::uniform(8, 0.5, SearchOptimizer::GradientDescent, &mut RngStream::new(1, 0));
        greedy_ensemble_search(&mut plain, &far, &settings(false), 200).unwrap();
        // the exact feasible term cancels the stub's slope past the box edge
        assert!(plain.points.iter().flatten().all(|v| *v > 1.0 && *v < 1.1));
    }

    #[test]
    fn selection_rules() {
        let s = settings(false);
        let cands = CandidateSet::new(vec![[0.9, 0.1], [0.31, 0.69], [0.0, 0.0]], 0.1, SearchOptimizer::GradientDescent).unwrap();
        assert_eq!(select_candidate(&cands, &quadratic(), &s).unwrap(), 1);
        let one = CandidateSet::new(vec![[0.9, 0.9]], 0.1, SearchOptimizer::GradientDescent).unwrap();
        assert_eq!(select_candidate(&one, &quadratic(), &s).unwrap(), 0);
        let tied = CandidateSet::new(vec![[0.3, 0.8], [0.3, 0.6]], 0.1, SearchOptimizer::GradientDescent).unwrap();
        assert_eq!(select_candidate(&tied, &constant(), &s).unwrap(), 0);
        let empty = CandidateSet::new(vec![], 0.1, SearchOptimizer::GradientDescent).unwrap();
        assert!(select_candidate(&empty, &quadratic(), &s).is_err());
    }

    #[test]
    fn monte_carlo_exploration_replays() {
        let cfg = small_config();
        let a = explore(&cfg, &quadratic(), [1.0; 3], &mut RngStream::new(5, 1)).unwrap();
        let b = explore(&cfg, &quadratic(), [1.0; 3], &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn disagreement_with_identical_members_returns_start() {
        let cfg = CorrectionConfig {
            sampling_mode: SamplingMode::Disagreement,
            ..small_config()
        };
        let start = {
            let mut r = RngStream::new(5, 1);
            [r.uniform(0.0, 1.0), r.uniform(0.0, 1.0)]
        };
        let x = explore(&cfg, &quadratic(), [1.0; 3], &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(x, start);
    }

    #[test]
    fn disagreement_climbs_analytic_std() {
        // members x₀ and −x₀: std = |x₀|, gradient +1 inside the box
        let stub = Stub {
            scales: vec![1.0, -1.0],
            f: |x| x[0],
            df: |_| [1.0, 0.0],
        };
        let cfg = CorrectionConfig {
            sampling_mode: SamplingMode::Disagreement,
            ..small_config()
        };
        for seed in 0..20 {
            let start = {
                let mut r = RngStream::new(seed, 1);
                [r.uniform(0.0, 1.0), r.uniform(0.0, 1.0)]
            };
            let x = explore(&cfg, &stub, [1.0; 3], &mut RngStream::new(seed, 1)).unwrap();
            let expect = (start[0] + 20.0 * cfg.lr_search).min(1.0);
            assert!((x[0] - expect).abs() < 1e-12, "{x:?} from {start:?}");
            assert_eq!(x[1], start[1]);
        }
    }

    fn entry(x: [f64; 2], e: f64) -> BufferEntry {
        BufferEntry {
            state: x,
            target: vec![e],
        }
    }

    #[test]
    fn single_point_buffer_early_stops_every_net() {
        let cfg = CorrectionConfig {
            max_epochs: 3000,
            lr_surrogate: 1e-3,
            ..small_config()
        };
        let mut ens = SurrogateEnsemble::new(&cfg);
        let buf = vec![entry([0.4, 0.6], 0.7)];
        assert_eq!(train_surrogate(&mut ens, &buf, &[], &cfg).unwrap(), 4);
    }

    #[test]
    fn zero_threshold_never_early_stops() {
        let cfg = CorrectionConfig {
            max_epochs: 5,
            early_stop_loss: 0.0,
            ..small_config()
        };
        let mut ens = SurrogateEnsemble::new(&cfg);
        let buf = vec![entry([0.4, 0.6], 0.7)];
        assert_eq!(train_surrogate(&mut ens, &buf, &[], &cfg).unwrap(), 0);
    }

    #[test]
    fn training_reduces_buffer_error() {
        let cfg = small_config();
        let mut ens = SurrogateEnsemble::new(&cfg);
        let mut rng = RngStream::new(8, 0);
        let buf: Vec<BufferEntry> = (0..32)
            .map(|_| {
                let x = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
                entry(x, 1.5 * ((x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2)))
            })
            .collect();
        let mse = |e: &SurrogateEnsemble| {
            let pts: Vec<[f64; 2]> = buf.iter().map(|b| b.state).collect();
            let est = estimate_error(e, &pts, [1.0; 3], ErrorMode::Overall).unwrap();
            est.iter().zip(&buf).map(|(a, b)| (a - b.target[0]).powi(2)).sum::<f64>() / 32.0
        };
        let before = mse(&ens);
        for _ in 0..5 {
            train_surrogate(&mut ens, &buf, &[], &cfg).unwrap();
        }
        assert!(mse(&ens) < before);
    }

    #[test]
    fn targets_are_clipped() {
        let b = ErrorBreakdown::combine(5.0, [0.1, 3.0], [1.0; 3]);
        assert_eq!(training_target(&b, ErrorMode::ReconstructionOnly), vec![2.0]);
        assert_eq!(training_target(&b, ErrorMode::Overall), vec![2.0]);
        assert_eq!(training_target(&b, ErrorMode::AllElements), vec![2.0, 0.1, 2.0]);
    }

    fn id_pad(epsilon: f64) -> PadConfig {
        PadConfig::new(
            ForwardModel::absorbance(SpectralGrid::default(), LineDatabase::canonical()),
            StateRanges::id_default().into(),
            epsilon,
        )
        .unwrap()
    }

    #[test]
    fn init_buffer_properties() {
        let pad_cfg = id_pad(0.05);
        let y = pad_cfg.model.simulate(&GasState::new(1200.0, 0.06)).unwrap();
        let pad = Pad::new(&pad_cfg, &y).unwrap();
        let cfg = small_config();
        let (a, best) = init_buffer(&cfg, &pad, &mut RngStream::new(4, 1)).unwrap();
        let (b, _) = init_buffer(&cfg, &pad, &mut RngStream::new(4, 1)).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert!(a.entries.iter().all(|e| e.state.iter().all(|v| (0.0..1.0).contains(v))));
        assert_eq!(best.breakdown.e_f, [0.0, 0.0]);
        assert_eq!(pad.queries(), 64);
    }

    #[test]
    fn buffer_grows_two_per_iteration_and_best_never_rises() {
        let pad_cfg = id_pad(1e-9);
        let y = pad_cfg.model.simulate(&GasState::new(1200.0, 0.06)).unwrap();
        let cfg = CorrectionConfig {
            max_iterations: 6,
            n_candidates: 16,
            ..small_config()
        };
        let r = run_correction(&y, None, &pad_cfg, &cfg).unwrap();
        assert_eq!(r.iterations, 6);
        for (i, rec) in r.trace.iter().enumerate() {
            assert_eq!(rec.buffer_len, 32 + 2 * (i + 1));
            assert!(rec.t_g >= 1 && rec.t_g <= 3);
        }
        assert!(r.trace.windows(2).all(|w| w[1].e_best <= w[0].e_best));
        assert!(r.trace[0].e_best <= r.initial_best);
        assert_eq!(r.pad_queries, 32 + 2 * 6);
        assert!(!r.success);
    }

    #[test]
    fn tight_box_run_succeeds_and_reverifies() {
        let truth = GasState::new(1500.0, 0.062);
        let domain = FeasibleDomain::new([1492.5, 1507.5], [0.0617, 0.0623]).unwrap();
        let pad_cfg = id_pad(0.1).with_domain(domain);
        let y = pad_cfg.model.simulate(&truth).unwrap();
        let r = run_correction(&y, None, &pad_cfg, &small_config()).unwrap();
        assert!(r.success);
        let fresh = Pad::new(&pad_cfg, &y).unwrap();
        assert!(fresh.evaluate(&r.best.state).unwrap().e <= 0.1);
    }

    #[test]
    fn run_is_deterministic() {
        let pad_cfg = id_pad(1e-9);
        let y = pad_cfg.model.simulate(&GasState::new(900.0, 0.065)).unwrap();
        let cfg = CorrectionConfig {
            max_iterations: 3,
            n_candidates: 16,
            seed: 9,
            ..small_config()
        };
        let a = run_correction(&y, None, &pad_cfg, &cfg).unwrap();
        let b = run_correction(&y, None, &pad_cfg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace_jsonl(), b.trace_jsonl());
        assert!(a.trace_jsonl().lines().next().unwrap().contains("\"T_G\""));
    }

    #[test]
    fn first_guess_is_injected_and_bounds_the_result() {
        let pad_cfg = id_pad(1e-9);
        let truth = GasState::new(900.0, 0.065);
        let y = pad_cfg.model.simulate(&truth).unwrap();
        let guess = GasState::new(905.0, 0.0652);
        let fg = Scored {
            state: guess,
            breakdown: Pad::new(&pad_cfg, &y).unwrap().evaluate(&guess).unwrap(),
        };
        let cfg = CorrectionConfig {
            max_iterations: 2,
            n_candidates: 16,
            ..small_config()
        };
        let r = run_correction(&y, Some(fg), &pad_cfg, &cfg).unwrap();
        assert!(r.first_guess_injected);
        assert!(r.best.breakdown.e <= fg.breakdown.e);
    }
}
