//! Toy line-by-line forward model: line database, wavenumber grid, absorbance
//! and emission synthesis, measurement noise and dataset generation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};

/// Reference temperature of the line parameters (K).
pub const T_REF: f64 = 296.0;
/// Second radiation constant (cm·K).
pub const C2: f64 = 1.4388;
/// Default Planck normalization: makes the emission factor 1 at 2385 cm⁻¹ and 2000 K.
pub const DEFAULT_PLANCK_SCALE: f64 = 3.361_941_745_801_468e-10;

const CANONICAL_DB_JSON: &str = include_str!("../data/canonical_db.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralLine {
    pub center: f64,
    pub strength_ref: f64,
    pub lower_state_energy: f64,
    pub gamma_ref: f64,
}

impl SpectralLine {
    pub fn validate(&self) -> Result<()> {
        let ok = self.center.is_finite()
            && self.strength_ref > 0.0
            && self.gamma_ref > 0.0
            && self.lower_state_energy >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid spectral line {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineDatabase {
    pub species_label: String,
    pub band: [f64; 2],
    pub scale_kappa: f64,
    pub lines: Vec<SpectralLine>,
}

impl LineDatabase {
    /// The committed 25-line database used by every default experiment.
    pub fn canonical() -> Self {
        serde_json::from_str(CANONICAL_DB_JSON).expect("embedded canonical line database is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_kappa > 0.0) {
            return Err(Error::Domain("scale_kappa must be > 0".into()));
        }
        if !(self.band[0] < self.band[1]) {
            return Err(Error::Domain(format!("invalid band {:?}", self.band)));
        }
        for line in &self.lines {
            line.validate()?;
            if line.center < self.band[0] - 5.0 || line.center > self.band[1] + 5.0 {
                return Err(Error::Domain(format!(
                    "line at {} outside band {:?}",
                    line.center, self.band
                )));
            }
        }
        if self.lines.windows(2).any(|w| w[0].center >= w[1].center) {
            return Err(Error::Domain(
                "lines must be sorted by center with no duplicates".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let db: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        db.validate()?;
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("line database serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Uniform wavenumber grid `nu_min + i·spacing` for `i in 0..n_points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    pub nu_min: f64,
    pub nu_max: f64,
    pub spacing: f64,
}

impl Default for SpectralGrid {
    fn default() -> Self {
        Self {
            nu_min: 2375.0,
            nu_max: 2395.0,
            spacing: 0.1,
        }
    }
}

impl SpectralGrid {
    /// Number of samples; the upper edge is excluded, so the default band gives 200.
    pub fn n_points(&self) -> usize {
        ((self.nu_max - self.nu_min) / self.spacing).round() as usize
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.n_points())
            .map(|i| self.nu_min + i as f64 * self.spacing)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !(self.nu_max > self.nu_min) || self.n_points() == 0 {
            return Err(Error::Domain(format!("invalid grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasState {
    pub temperature: f64,
    pub mole_fraction: f64,
}

impl GasState {
    pub fn new(temperature: f64, mole_fraction: f64) -> Self {
        Self {
            temperature,
            mole_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.mole_fraction) {
            return Err(Error::Domain(format!(
                "mole fraction must lie in [0, 1], got {}",
                self.mole_fraction
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.temperature, self.mole_fraction]
    }

    pub fn from_array(x: [f64; 2]) -> Self {
        Self::new(x[0], x[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
}

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, grid: &SpectralGrid) -> Result<()> {
        if self.values.len() != grid.n_points() {
            return Err(Error::Shape(format!(
                "spectrum has {} samples, grid has {}",
                self.values.len(),
                grid.n_points()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("spectrum contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Which physics maps a state to the observed signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForwardKind {
    #[default]
    Absorbance,
    Emission,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub kind: ForwardKind,
    pub grid: SpectralGrid,
    pub db: LineDatabase,
    pub planck_scale: f64,
}

impl ForwardModel {
    pub fn absorbance(grid: SpectralGrid, db: LineDatabase) -> Self {
        Self {
            kind: ForwardKind::Absorbance,
            grid,
            db,
            planck_scale: DEFAULT_PLANCK_SCALE,
        }
    }

    pub fn emission(grid: SpectralGrid, db: LineDatabase) -> Self {
        Self {
            kind: ForwardKind::Emission,
            ..Self::absorbance(grid, db)
        }
    }

    pub fn simulate(&self, state: &GasState) -> Result<Spectrum> {
        match self.kind {
            ForwardKind::Absorbance => simulate_absorbance(state, &self.grid, &self.db),
            ForwardKind::Emission => {
                simulate_emission_scaled(state, &self.grid, &self.db, self.planck_scale)
            }
        }
    }
}

/// Temperature-scaled line intensity.
pub fn line_strength(line: &SpectralLine, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let partition = (T_REF / temperature).powf(1.5);
    let boltzmann = (-C2 * line.lower_state_energy * (1.0 / temperature - 1.0 / T_REF)).exp();
    Ok(line.strength_ref * partition * boltzmann)
}

/// Area-normalized Lorentzian profile.
pub fn lorentzian(nu: f64, center: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let d = nu - center;
    Ok((gamma / std::f64::consts::PI) / (d * d + gamma * gamma))
}

/// Absorbance per unit mole fraction: `κ·(296/T)·Σ S_j(T)·φ_j(ν)`.
fn absorbance_per_mole_fraction(
    temperature: f64,
    grid: &SpectralGrid,
    db: &LineDatabase,
) -> Result<Vec<f64>> {
    let width_scale = (T_REF / temperature).sqrt();
    let lines = db
        .lines
        .iter()
        .map(|l| Ok((l.center, line_strength(l, temperature)?, l.gamma_ref * width_scale)))
        .collect::<Result<Vec<_>>>()?;
    let prefactor = db.scale_kappa * (T_REF / temperature);
    let mut out = Vec::with_capacity(grid.n_points());
    for nu in grid.wavenumbers() {
        let mut sum = 0.0;
        for &(center, strength, gamma) in &lines {
            sum += strength * lorentzian(nu, center, gamma)?;
        }
        out.push(prefactor * sum);
    }
    Ok(out)
}

pub fn simulate_absorbance(
    state: &GasState,
    grid: &SpectralGrid,
    db: &LineDatabase,
) -> Result<Spectrum> {
    state.validate()?;
    let base = absorbance_per_mole_fraction(state.temperature, grid, db)?;
    Ok(Spectrum::new(
        base.into_iter().map(|b| b * state.mole_fraction).collect(),
    ))
}

/// Normalized Planck factor `scale·ν³/(exp(c₂ν/T) − 1)`.
pub fn planck_factor(nu: f64, temperature: f64, scale: f64) -> f64 {
    scale * nu.powi(3) / (C2 * nu / temperature).exp_m1()
}

pub fn simulate_emission(
    state: &GasState,
    grid: &SpectralGrid,
    db: &LineDatabase,
) -> Result<Spectrum> {
    simulate_emission_scaled(state, grid, db, DEFAULT_PLANCK_SCALE)
}

pub fn simulate_emission_scaled(
    state: &GasState,
    grid: &SpectralGrid,
    db: &LineDatabase,
    planck_scale: f64,
) -> Result<Spectrum> {
    let absorbance = simulate_absorbance(state, grid, db)?;
    let values = grid
        .wavenumbers()
        .into_iter()
        .zip(absorbance.values)
        .map(|(nu, a)| -(-a).exp_m1() * planck_factor(nu, state.temperature, planck_scale))
        .collect();
    Ok(Spectrum::new(values))
}

/// `y[i]·(1 + level·N(0,1))`, one independent normal draw per sample.
pub fn add_multiplicative_noise(spectrum: &Spectrum, level: f64, seed: u64) -> Spectrum {
    if level == 0.0 {
        return spectrum.clone();
    }
    let mut rng = RngStream::new(seed, 0);
    Spectrum::new(
        spectrum
            .values
            .iter()
            .map(|&y| y * (1.0 + level * rng.normal()))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateRanges {
    pub t: [f64; 2],
    pub c: [f64; 2],
}

impl StateRanges {
    pub fn id_default() -> Self {
        Self {
            t: [600.0, 2000.0],
            c: [0.05, 0.07],
        }
    }

    pub fn ood_default() -> Self {
        Self {
            t: [800.0, 4000.0],
            c: [0.1, 0.6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t[0] > self.t[1] || self.c[0] > self.c[1] {
            return Err(Error::Domain(format!("range minimum exceeds maximum: {self:?}")));
        }
        if !(self.t[0] > 0.0) || self.c[0] < 0.0 || self.c[1] > 1.0 {
            return Err(Error::Domain(format!("ranges outside physical domain: {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> GasState {
        let t = rng.uniform(self.t[0], self.t[1]);
        let c = rng.uniform(self.c[0], self.c[1]);
        GasState::new(t, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub split: Split,
    pub state: GasState,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// CSV text with header `split,temperature,mole_fraction,y_0,…`.
    pub fn to_csv(&self) -> String {
        let n = self.records.first().map_or(0, |r| r.spectrum.len());
        let mut out = String::from("split,temperature,mole_fraction");
        for i in 0..n {
            write!(out, ",y_{i}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(r.split.as_str());
            write!(out, ",{},{}", fmt_sig9(r.state.temperature), fmt_sig9(r.state.mole_fraction))
                .unwrap();
            for v in &r.spectrum.values {
                write!(out, ",{}", fmt_sig9(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, seed).map_err(|m| Error::parse(path, m))
    }

    pub fn from_csv(text: &str, seed: u64) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty dataset file")?;
        if !header.starts_with("split,temperature,mole_fraction") {
            return Err(format!("unexpected header: {header}"));
        }
        let mut records = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let split = fields
                .next()
                .and_then(Split::parse)
                .ok_or_else(|| format!("row {row}: bad split label"))?;
            let nums = fields
                .map(|f| f.parse::<f64>().map_err(|e| format!("row {row}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if nums.len() < 2 {
                return Err(format!("row {row}: missing state columns"));
            }
            records.push(Record {
                split,
                state: GasState::new(nums[0], nums[1]),
                spectrum: Spectrum::new(nums[2..].to_vec()),
            });
        }
        Ok(Self { seed, records })
    }
}

/// Scientific notation with 9 significant digits.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Draws `k` i.i.d. uniform states, simulates their absorbance and assigns a
/// seeded 70/15/15 train/val/test split.
pub fn generate_dataset(
    ranges: &StateRanges,
    k: usize,
    grid: &SpectralGrid,
    db: &LineDatabase,
    seed: u64,
) -> Result<Dataset> {
    ranges.validate()?;
    if k < 10 {
        return Err(Error::Domain(format!("dataset needs at least 10 records, got {k}")));
    }
    let states: Vec<GasState> = (0..k as u64)
        .map(|i| ranges.sample(&mut RngStream::new(derive_seed(seed, i), 0)))
        .collect();
    let spectra = states
        .par_iter()
        .map(|s| simulate_absorbance(s, grid, db))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(RngStream::new(seed, 1).inner());
    let n_train = (0.70 * k as f64).round() as usize;
    let n_val = (0.15 * k as f64).round() as usize;
    let mut splits = vec![Split::Test; k];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let records = states
        .into_iter()
        .zip(spectra)
        .zip(splits)
        .map(|((state, spectrum), split)| Record {
            split,
            state,
            spectrum,
        })
        .collect();
    Ok(Dataset { seed, records })
}

/// Random line list: centers uniform in the band, strengths log-uniform in
/// [0.1, 1], E″ uniform in [0, 3000], γ uniform in [0.05, 0.2].
pub fn gen_line_db(seed: u64, n_lines: usize, band: [f64; 2], kappa: f64) -> Result<LineDatabase> {
    if n_lines == 0 {
        return Err(Error::Domain("n_lines must be at least 1".into()));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut lines: Vec<SpectralLine> = (0..n_lines)
        .map(|_| SpectralLine {
            center: rng.uniform(band[0], band[1]),
            strength_ref: 10f64.powf(rng.uniform(-1.0, 0.0)),
            lower_state_energy: rng.uniform(0.0, 3000.0),
            gamma_ref: rng.uniform(0.05, 0.2),
        })
        .collect();
    lines.sort_by(|a, b| a.center.total_cmp(&b.center));
    lines.dedup_by(|a, b| a.center == b.center);
    let db = LineDatabase {
        species_label: "synthetic".into(),
        band,
        scale_kappa: kappa,
        lines,
    };
    db.validate()?;
    Ok(db)
}

/// Returns κ such that the peak absorbance at `state` equals `target`.
pub fn calibrate_kappa(
    db: &LineDatabase,
    grid: &SpectralGrid,
    state: &GasState,
    target: f64,
) -> Result<f64> {
    let unit = LineDatabase {
        scale_kappa: 1.0,
        ..db.clone()
    };
    let peak = simulate_absorbance(state, grid, &unit)?
        .values
        .into_iter()
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Domain("cannot calibrate: spectrum is identically zero".into()));
    }
    Ok(target / peak)
}

/// Calibration point for κ: peak absorbance 1 at 2000 K, mole fraction 0.07.
pub fn calibration_state() -> GasState {
    GasState::new(2000.0, 0.07)
}

/// Generates a line database and calibrates κ on `grid`.
pub fn gen_calibrated_db(
    seed: u64,
    n_lines: usize,
    band: [f64; 2],
    grid: &SpectralGrid,
    species_label: &str,
) -> Result<LineDatabase> {
    let mut db = gen_line_db(seed, n_lines, band, 1.0)?;
    db.species_label = species_label.to_string();
    db.scale_kappa = calibrate_kappa(&db, grid, &calibration_state(), 1.0)?;
    Ok(db)
}

/// Recipe for the committed canonical database.
pub fn generate_canonical_db() -> LineDatabase {
    gen_calibrated_db(42, 25, [2375.0, 2395.0], &SpectralGrid::default(), "CO2-like")
        .expect("canonical recipe is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_line_db(center: f64) -> LineDatabase {
        LineDatabase {
            species_label: "single".into(),
            band: [2375.0, 2395.0],
            scale_kappa: 1.0,
            lines: vec![SpectralLine {
                center,
                strength_ref: 0.5,
                lower_state_energy: 100.0,
                gamma_ref: 0.1,
            }],
        }
    }

    #[test]
    fn line_strength_at_reference_is_identity() {
        let line = SpectralLine {
            center: 2380.0,
            strength_ref: 0.7,
            lower_state_energy: 1234.0,
            gamma_ref: 0.1,
        };
        assert_eq!(line_strength(&line, T_REF).unwrap(), 0.7);
    }

    #[test]
    fn line_strength_zero_energy_doubling_temperature() {
        let line = SpectralLine {
            center: 2380.0,
            strength_ref: 2.0,
            lower_state_energy: 0.0,
            gamma_ref: 0.1,
        };
        let s = line_strength(&line, 592.0).unwrap();
        assert!((s - 2.0 * 0.5f64.powf(1.5)).abs() < 1e-15);
        assert!((s / 2.0 - 0.353_553_390_593_273_8).abs() < 1e-12);
    }

    #[test]
    fn line_strength_rejects_nonpositive_temperature() {
        let line = one_line_db(2380.0).lines[0];
        assert!(line_strength(&line, 0.0).is_err());
        assert!(line_strength(&line, -5.0).is_err());
    }

    #[test]
    fn lorentzian_peak_and_domain() {
        let peak = lorentzian(2380.0, 2380.0, 0.1).unwrap();
        assert!((peak - 3.183_098_861_837_907).abs() < 1e-12);
        assert!(lorentzian(0.0, 0.0, 0.0).is_err());
        assert!(lorentzian(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn lorentzian_integrates_to_one() {
        // trapezoid over ±200γ; the truncated tails carry ≈ 2/(200π) of the mass
        let gamma = 0.1;
        let n = 400_000;
        let (a, b) = (-200.0 * gamma, 200.0 * gamma);
        let h = (b - a) / n as f64;
        let mut sum = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            sum += w * lorentzian(x, 0.0, gamma).unwrap();
        }
        assert!((sum * h - 1.0).abs() < 1e-2);
    }

    #[test]
    fn default_grid_has_200_points() {
        let g = SpectralGrid::default();
        assert_eq!(g.n_points(), 200);
        let nu = g.wavenumbers();
        assert_eq!(nu[0], 2375.0);
        assert!((nu[199] - 2394.9).abs() < 1e-9);
    }

    #[test]
    fn zero_mole_fraction_gives_zero_spectra() {
        let db = LineDatabase::canonical();
        let g = SpectralGrid::default();
        let s = GasState::new(1300.0, 0.0);
        assert!(simulate_absorbance(&s, &g, &db).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(simulate_emission(&s, &g, &db).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_mole_fraction_doubles_absorbance_exactly() {
        let db = LineDatabase::canonical();
        let g = SpectralGrid::default();
        let a = simulate_absorbance(&GasState::new(900.0, 0.03), &g, &db).unwrap();
        let b = simulate_absorbance(&GasState::new(900.0, 0.06), &g, &db).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn invalid_states_are_rejected() {
        let db = LineDatabase::canonical();
        let g = SpectralGrid::default();
        assert!(simulate_absorbance(&GasState::new(0.0, 0.05), &g, &db).is_err());
        assert!(simulate_absorbance(&GasState::new(1000.0, -0.1), &g, &db).is_err());
        assert!(simulate_emission(&GasState::new(1000.0, 1.5), &g, &db).is_err());
    }

    #[test]
    fn single_line_peaks_at_nearest_grid_point() {
        let g = SpectralGrid::default();
        for center in [2380.04, 2383.37, 2390.0] {
            let db = one_line_db(center);
            let s = simulate_absorbance(&GasState::new(1000.0, 0.05), &g, &db).unwrap();
            let argmax = s
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let nearest = ((center - g.nu_min) / g.spacing).round() as usize;
            assert_eq!(argmax, nearest, "center {center}");
        }
    }

    #[test]
    fn emission_increases_with_mole_fraction() {
        let db = LineDatabase::canonical();
        let g = SpectralGrid::default();
        let lo = simulate_emission(&GasState::new(1800.0, 0.1), &g, &db).unwrap();
        let hi = simulate_emission(&GasState::new(1800.0, 0.3), &g, &db).unwrap();
        for (a, b) in lo.values.iter().zip(&hi.values) {
            assert!(b > a);
        }
    }

    #[test]
    fn noise_level_zero_is_identity_and_seeded() {
        let s = Spectrum::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(add_multiplicative_noise(&s, 0.0, 5), s);
        let a = add_multiplicative_noise(&s, 0.1, 5);
        let b = add_multiplicative_noise(&s, 0.1, 5);
        assert_eq!(a, b);
        assert_ne!(a, s);
    }

    #[test]
    fn noise_statistics_match_level() {
        // one bin, many independent seeds: std/mean of the noisy value ≈ level
        let s = Spectrum::new(vec![2.5]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| add_multiplicative_noise(&s, 0.1, i as u64).values[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ratio = var.sqrt() / mean;
        assert!((ratio - 0.1).abs() < 0.1 * 0.02, "ratio {ratio}");
        assert!((mean - 2.5).abs() < 2.5 * 0.002);
    }

    #[test]
    fn dataset_split_and_ranges() {
        let g = SpectralGrid::default();
        let db = LineDatabase::canonical();
        let ds = generate_dataset(&StateRanges::id_default(), 200, &g, &db, 11).unwrap();
        assert_eq!(ds.count(Split::Train), 140);
        assert_eq!(ds.count(Split::Val), 30);
        assert_eq!(ds.count(Split::Test), 30);
        for r in &ds.records {
            assert!((600.0..=2000.0).contains(&r.state.temperature));
            assert!((0.05..=0.07).contains(&r.state.mole_fraction));
            assert_eq!(r.spectrum.len(), 200);
        }
    }

    #[test]
    fn dataset_csv_is_reproducible() {
        let g = SpectralGrid::default();
        let db = LineDatabase::canonical();
        let a = generate_dataset(&StateRanges::id_default(), 10, &g, &db, 3).unwrap();
        let b = generate_dataset(&StateRanges::id_default(), 10, &g, &db, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let parsed = Dataset::from_csv(&a.to_csv(), 3).unwrap();
        assert_eq!(parsed.records.len(), 10);
        assert_eq!(parsed.to_csv(), a.to_csv());
    }

    #[test]
    fn dataset_errors() {
        let g = SpectralGrid::default();
        let db = LineDatabase::canonical();
        let bad = StateRanges {
            t: [2000.0, 600.0],
            c: [0.05, 0.07],
        };
        assert!(generate_dataset(&bad, 20, &g, &db, 1).is_err());
        assert!(generate_dataset(&StateRanges::id_default(), 9, &g, &db, 1).is_err());
        let flat = StateRanges {
            t: [1000.0, 1000.0],
            c: [0.05, 0.05],
        };
        let ds = generate_dataset(&flat, 10, &g, &db, 1).unwrap();
        assert!(ds.records.iter().all(|r| r.state.temperature == 1000.0));
    }

    #[test]
    fn ood_ranges_sample_inside() {
        let r = StateRanges::ood_default();
        let mut rng = RngStream::new(5, 0);
        for _ in 0..100 {
            let s = r.sample(&mut rng);
            assert!((800.0..=4000.0).contains(&s.temperature));
            assert!((0.1..=0.6).contains(&s.mole_fraction));
        }
    }

    #[test]
    fn line_db_generation_is_seeded_and_sorted() {
        let a = gen_line_db(7, 30, [2375.0, 2395.0], 1.0).unwrap();
        let b = gen_line_db(7, 30, [2375.0, 2395.0], 1.0).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        for l in &a.lines {
            assert!((0.1..=1.0).contains(&l.strength_ref));
            assert!((0.0..=3000.0).contains(&l.lower_state_energy));
            assert!((0.05..=0.2).contains(&l.gamma_ref));
        }
        assert!(gen_line_db(7, 0, [2375.0, 2395.0], 1.0).is_err());
    }

    #[test]
    fn canonical_db_matches_recipe() {
        assert_eq!(LineDatabase::canonical(), generate_canonical_db());
    }

    #[test]
    fn canonical_calibration_peak_is_one() {
        let db = LineDatabase::canonical();
        let s = simulate_absorbance(&calibration_state(), &SpectralGrid::default(), &db).unwrap();
        let peak = s.values.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() <= 0.01);
    }

    #[test]
    fn temperature_changes_spectral_shape() {
        let db = LineDatabase::canonical();
        let g = SpectralGrid::default();
        let cold = simulate_absorbance(&GasState::new(600.0, 0.07), &g, &db).unwrap();
        let hot = simulate_absorbance(&GasState::new(2000.0, 0.07), &g, &db).unwrap();
        let num: f64 = cold
            .values
            .iter()
            .zip(&hot.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = hot.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den > 0.2, "relative distance {}", num / den);
    }
}
