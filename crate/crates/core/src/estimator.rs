//! Learned spectrum → state estimator used for the first guess.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{Dataset, GasState, Record, SpectralGrid, Spectrum, Split};
use crate::nn::{
    self, Activation, Adam, InputShape, Layer, NetworkSpec, NetworkWeights, Tensor,
};
use crate::rng::RngStream;

/// Conv blocks → adaptive pool → flatten → dense(relu) → dense(2, linear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorArch {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool_width: usize,
    pub pooled_len: usize,
    pub hidden: usize,
}

impl Default for EstimatorArch {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 64],
            kernel: 3,
            pool_width: 2,
            pooled_len: 4,
            hidden: 256,
        }
    }
}

impl EstimatorArch {
    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut layers = Vec::new();
        let mut channels = 1;
        for &c in &self.conv_channels {
            layers.push(Layer::Conv1d {
                in_channels: channels,
                out_channels: c,
                kernel: self.kernel,
                activation: Activation::Relu,
            });
            layers.push(Layer::MaxPool1d {
                width: self.pool_width,
            });
            channels = c;
        }
        layers.push(Layer::AdaptiveAvgPool {
            target_len: self.pooled_len,
        });
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            inputs: channels * self.pooled_len,
            outputs: self.hidden,
            activation: Activation::Relu,
        });
        layers.push(Layer::Dense {
            inputs: self.hidden,
            outputs: 2,
            activation: Activation::Linear,
        });
        let spec = NetworkSpec {
            input: InputShape::Signal { channels: 1 },
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Shortest spectrum that survives every pooling stage.
    pub fn min_input_len(&self) -> usize {
        self.pool_width.pow(self.conv_channels.len() as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub arch: EstimatorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            patience: 40,
            arch: EstimatorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch size and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.arch.conv_channels.contains(&0) || self.arch.hidden == 0 || self.arch.pooled_len == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Training-set scaling: inputs divided by one global scale, targets mapped
/// to `[0, 1]` per element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_scale: f64,
    pub target_min: [f64; 2],
    pub target_span: [f64; 2],
}

impl Normalization {
    pub fn fit(records: &[&Record]) -> Self {
        let mut peak: f64 = 0.0;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in records {
            for v in &r.spectrum.values {
                peak = peak.max(v.abs());
            }
            let x = r.state.as_array();
            for k in 0..2 {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
        let span = |k: usize| {
            let s = hi[k] - lo[k];
            if s > 1e-12 * lo[k].abs().max(1e-300) {
                s
            } else if lo[k] != 0.0 {
                lo[k].abs()
            } else {
                1.0
            }
        };
        Self {
            input_scale: if peak > 0.0 { peak } else { 1.0 },
            target_min: lo,
            target_span: [span(0), span(1)],
        }
    }

    pub fn normalize_target(&self, state: &GasState) -> [f64; 2] {
        let x = state.as_array();
        [
            (x[0] - self.target_min[0]) / self.target_span[0],
            (x[1] - self.target_min[1]) / self.target_span[1],
        ]
    }

    pub fn denormalize_target(&self, n: [f64; 2]) -> GasState {
        GasState::new(
            self.target_min[0] + n[0] * self.target_span[0],
            self.target_min[1] + n[1] * self.target_span[1],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    pub spec: NetworkSpec,
    pub weights: NetworkWeights,
    pub norm: Normalization,
    pub grid: SpectralGrid,
    pub seed: u64,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// SHA-256 of the dataset's CSV serialization.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let digest = Sha256::digest(dataset.to_csv().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn batch_tensors(records: &[&Record], idx: &[usize], norm: &Normalization) -> (Tensor, Tensor) {
    let len = records[idx[0]].spectrum.len();
    let mut x = Vec::with_capacity(idx.len() * len);
    let mut y = Vec::with_capacity(idx.len() * 2);
    for &i in idx {
        x.extend(records[i].spectrum.values.iter().map(|v| v / norm.input_scale));
        y.extend(norm.normalize_target(&records[i].state));
    }
    (
        Tensor {
            shape: vec![idx.len(), 1, len],
            values: x,
        },
        Tensor {
            shape: vec![idx.len(), 2],
            values: y,
        },
    )
}

fn eval_loss(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    records: &[&Record],
    norm: &Normalization,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = batch_tensors(records, chunk, norm);
        let out = nn::predict(spec, weights, &x)?;
        let (loss, _) = nn::mse_loss(&out, &y)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Minibatch Adam on normalized-target MSE; returns the best-validation weights.
pub fn train_estimator(
    dataset: &Dataset,
    grid: &SpectralGrid,
    config: &TrainConfig,
) -> Result<(EstimatorModel, TrainTrace)> {
    config.validate()?;
    let train: Vec<&Record> = dataset.split(Split::Train).collect();
    let val: Vec<&Record> = dataset.split(Split::Val).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(format!(
            "need non-empty train and validation splits (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    let n_points = grid.n_points();
    for r in train.iter().chain(&val) {
        r.spectrum.check(grid)?;
    }
    if n_points < config.arch.min_input_len() {
        return Err(Error::Shape(format!(
            "grid of {n_points} points is too short for {} pooling stages",
            config.arch.conv_channels.len()
        )));
    }

    let spec = config.arch.spec()?;
    let norm = Normalization::fit(&train);
    let mut weights = NetworkWeights::init(&spec, &mut RngStream::new(config.seed, 0));
    let mut shuffle_rng = RngStream::new(config.seed, 1);
    let mut opt = Adam::new(weights.len(), config.learning_rate);

    let mut trace = TrainTrace::default();
    let mut best = (f64::INFINITY, weights.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        // Fisher–Yates with the run's own stream
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.index(i + 1));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = batch_tensors(&train, chunk, &norm);
            let (out, cache) = nn::forward(&spec, &weights, &x)?;
            let (loss, grad) = nn::mse_loss(&out, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let g = nn::backward(&spec, &weights, &cache, &grad)?;
            nn::optimizer_step(&mut opt, &mut weights, &g.weights)?;
        }
        trace.train_loss.push(epoch_loss / train.len() as f64);
        let val_loss = eval_loss(&spec, &weights, &val, &norm, 256)?;
        trace.val_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, weights.clone());
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let model = EstimatorModel {
        spec,
        weights: best.1,
        norm,
        grid: *grid,
        seed: config.seed,
        dataset_hash: dataset_hash(dataset),
    };
    Ok((model, trace))
}

pub fn estimate(model: &EstimatorModel, spectrum: &Spectrum) -> Result<GasState> {
    Ok(estimate_batch(model, std::slice::from_ref(spectrum))?[0])
}

pub fn estimate_batch(model: &EstimatorModel, spectra: &[Spectrum]) -> Result<Vec<GasState>> {
    let Some(first) = spectra.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    let mut x = Vec::with_capacity(spectra.len() * len);
    for s in spectra {
        if s.len() != len {
            return Err(Error::Shape("spectra in one batch must share a length".into()));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("spectrum contains non-finite values".into()));
        }
        x.extend(s.values.iter().map(|v| v / model.norm.input_scale));
    }
    let input = Tensor::new(vec![spectra.len(), 1, len], x)?;
    let out = nn::predict(&model.spec, &model.weights, &input)?;
    Ok((0..spectra.len())
        .map(|i| model.norm.denormalize_target([out.values[2 * i], out.values[2 * i + 1]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EstimatorMeta {
    grid: SpectralGrid,
    normalization: Normalization,
    dataset_hash: String,
    seed: u64,
}

impl EstimatorModel {
    /// Writes `<stem>.json`/`<stem>.bin` network files plus `<stem>.meta.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        nn::save_checkpoint(stem, &self.spec, &self.weights, self.seed)?;
        let meta = EstimatorMeta {
            grid: self.grid,
            normalization: self.norm,
            dataset_hash: self.dataset_hash.clone(),
            seed: self.seed,
        };
        let path = meta_path(stem);
        let text = serde_json::to_string_pretty(&meta).expect("estimator metadata serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let (spec, weights, seed) = nn::load_checkpoint(stem)?;
        let path = meta_path(stem);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: EstimatorMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if spec.output_dim() != 2 {
            return Err(Error::parse(&path, "estimator network must output 2 values"));
        }
        Ok(Self {
            spec,
            weights,
            norm: meta.normalization,
            grid: meta.grid,
            seed,
            dataset_hash: meta.dataset_hash,
        })
    }
}

fn meta_path(stem: &Path) -> std::path::PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    stem.with_file_name(name)
}
