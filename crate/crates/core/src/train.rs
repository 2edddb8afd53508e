//! Training loop, evaluation, FPS benchmark, prediction and model files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, make_batch, Resolution, SegSample, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{self, MaskPair, MetricReport};
use crate::model::{Ablation, Branches, ModelConfig, MugenNet};
use crate::nn::{ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory with the run seed.
    Synthetic { samples: usize },
    /// A directory with `manifest.json` or `images/` + `masks/`.
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    pub resolution: Option<Resolution>,
    pub patch_size: Option<usize>,
    /// Overrides the pyramid widths `D₀, D₁, D₂`.
    pub widths: Option<[usize; 3]>,
    pub branches: Branches,
    pub loss: LossConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub data: DataSource,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            resolution: None,
            patch_size: None,
            widths: None,
            branches: Branches::default(),
            loss: LossConfig::desk(),
            lr: 1e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            checkpoint: None,
            data: DataSource::Synthetic { samples: 285 },
            split: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.branches = self.branches.ablate(a);
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.preset.model();
        if let Some(r) = self.resolution {
            m.width = r.width;
            m.height = r.height;
        }
        if let Some(p) = self.patch_size {
            m.patch.patch_size = p;
        }
        if let Some(w) = self.widths {
            m.pyramid = w;
            m.patch.embed_dim = w[0];
        }
        m.branches = self.branches;
        m
    }

    pub fn resolution(&self) -> Resolution {
        let m = self.model_config();
        Resolution { width: m.width, height: m.height }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if let DataSource::Synthetic { samples: 0 } = self.data {
            return Err(Error::Config("synthetic dataset needs at least one sample".into()));
        }
        self.loss.validate()?;
        self.split.validate()?;
        self.model_config().validate()
    }

    /// Loads or generates the data and splits it into train / val / test.
    pub fn datasets(&self) -> Result<Datasets> {
        let res = self.resolution();
        let all: Vec<(SegSample, Option<Split>)> = match &self.data {
            DataSource::Synthetic { samples } => data::synth_samples(*samples, res, self.seed)?
                .into_iter()
                .map(|s| (s.sample, None))
                .collect(),
            DataSource::Dir { path } => {
                let m = data::DatasetManifest::open(path, res)?;
                let samples = m.load()?;
                samples.into_iter().zip(m.entries.iter().map(|e| e.split)).collect()
            }
        };
        let assigned = if all.iter().all(|(_, s)| s.is_some()) {
            all.iter().map(|(_, s)| s.unwrap()).collect()
        } else {
            data::assign_splits(all.len(), self.split, self.seed)?
        };
        let mut d = Datasets::default();
        for ((s, _), split) in all.into_iter().zip(assigned) {
            match split {
                Split::Train => d.train.push(s),
                Split::Val => d.val.push(s),
                Split::Test => d.test.push(s),
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_t: f64,
    pub loss_r: f64,
    pub loss_z: f64,
    pub val_mdice: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub seconds: f64,
}

impl TrainLog {
    /// Equal up to wall-clock fields.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |l: &Self| -> Vec<EpochRecord> {
            l.epochs.iter().map(|e| EpochRecord { seconds: 0.0, ..e.clone() }).collect()
        };
        self.best_epoch == other.best_epoch && strip(self) == strip(other)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub struct TrainOutcome {
    pub net: MugenNet,
    /// Parameters of the best validation epoch.
    pub store: ParamStore<f32>,
    pub log: TrainLog,
}

fn scalar(s: &Session<'_, f32>, v: Option<crate::autodiff::Var>) -> f64 {
    v.map_or(0.0, |v| s.value(v).item().f64())
}

/// Adam training with per-epoch validation; keeps the best-mDice weights.
pub fn train(cfg: &RunConfig, train_set: &[SegSample], val_set: &[SegSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput(format!(
            "training needs non-empty train and val splits (got {} / {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let mcfg = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, mut store) = MugenNet::init::<f32, _>(&mcfg, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    info!("training {} params on {} samples", store.num_trainable(), train_set.len());
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch::<f32>(&chunk.iter().map(|&i| &train_set[i]).collect::<Vec<_>>())?;
            let mut s = Session::train(&mut store).with_finite_checks();
            let x = s.input(batch.images);
            let out = net.forward(&mut s, x)?;
            let terms = total_loss(&mut s.graph, out.s_t, out.s_r, out.s_z, &batch.masks, &cfg.loss)?;
            let loss = scalar(&s, Some(terms.total));
            if !loss.is_finite() {
                let (node, op) = s.graph.first_non_finite().unwrap_or((terms.total.index(), "total_loss"));
                return Err(Error::NonFinite { op, node });
            }
            let w = chunk.len() as f64;
            for (acc, v) in sums.iter_mut().zip([Some(terms.total), terms.transformer, terms.cnn, terms.fused]) {
                acc.push(scalar(&s, v) * w);
            }
            let grads = s.backward(terms.total)?;
            drop(s);
            adam.step(&mut store, &grads);
        }
        let n = train_set.len() as f64;
        let mean = |v: &Vec<f64>| crate::tensor::pairwise_sum_f64(v) / n;
        let report = evaluate(&net, &mut store, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            loss: mean(&sums[0]),
            loss_t: mean(&sums[1]),
            loss_r: mean(&sums[2]),
            loss_z: mean(&sums[3]),
            val_mdice: report.mdice,
            val_miou: report.miou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch:>3}  loss {:.4}  val mDice {:.4}  mIoU {:.4}  ({:.1}s)",
            rec.loss, rec.val_mdice, rec.val_miou, rec.seconds
        );
        if best.as_ref().is_none_or(|(d, _)| report.mdice > *d) {
            best = Some((report.mdice, store.clone()));
            log.best_epoch = epoch;
            if let Some(path) = &cfg.checkpoint {
                save_model(&mcfg, &store, path)?;
            }
        }
        log.epochs.push(rec);
    }
    log.seconds = start.elapsed().as_secs_f64();
    let store = best.map(|(_, s)| s).unwrap_or(store);
    Ok(TrainOutcome { net, store, log })
}

/// Eval-mode fused predictions for `samples`, in order, as `h×w` maps.
pub fn predict_maps(
    net: &MugenNet,
    store: &mut ParamStore<f32>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch::<f32>(&chunk.iter().collect::<Vec<_>>())?;
        let pred = net.predict(store, batch.images)?;
        for i in 0..chunk.len() {
            out.push(pred.batch_item(i).to_f64_vec());
        }
    }
    Ok(out)
}

/// All six measures of the fused prediction over `samples`.
pub fn evaluate(
    net: &MugenNet,
    store: &mut ParamStore<f32>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let preds = predict_maps(net, store, samples, batch_size)?;
    let pairs: Vec<MaskPair> = preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| {
            let r = s.resolution();
            MaskPair::new(p, s.mask.to_f64_vec(), r.height, r.width)
        })
        .collect::<Result<_>>()?;
    metrics::evaluate_pairs(&pairs)
}

/// Sidecar file holding the model configuration of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_model(cfg: &ModelConfig, store: &ParamStore<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(store, path)?;
    fs::write(config_path(path), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(MugenNet, ParamStore<f32>)> {
    let cfg_file = config_path(path);
    let text = fs::read_to_string(&cfg_file)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", cfg_file.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let (net, mut store) = MugenNet::init::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::load(&mut store, path)?;
    Ok((net, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub preset: String,
    pub resolution: Resolution,
    pub frames: usize,
    pub mean_fps: f64,
    pub p50_fps: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
}

impl std::fmt::Display for FpsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "preset={} res={} frames={} mean_fps={:.2} p50_fps={:.2} mean_ms={:.3} p50_ms={:.3}",
            self.preset, self.resolution, self.frames, self.mean_fps, self.p50_fps, self.mean_ms, self.p50_ms
        )
    }
}

/// Frames excluded from timing.
pub const WARMUP_FRAMES: usize = 5;

/// Times `frames` single-image eval forwards on a fixed random frame.
pub fn bench_fps(net: &MugenNet, store: &mut ParamStore<f32>, frames: usize, preset: &str) -> Result<FpsReport> {
    if frames == 0 {
        return Err(Error::Config("benchmark needs at least one frame".into()));
    }
    let c = &net.cfg;
    let frame = Tensor::<f32>::uniform(
        &[1, c.in_channels, c.height, c.width],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    for _ in 0..WARMUP_FRAMES {
        net.predict(store, frame.clone())?;
    }
    let mut ms = Vec::with_capacity(frames);
    for _ in 0..frames {
        let t = Instant::now();
        net.predict(store, frame.clone())?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = ms.iter().sum::<f64>() / frames as f64;
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let p50_ms = if frames % 2 == 1 {
        sorted[frames / 2]
    } else {
        0.5 * (sorted[frames / 2 - 1] + sorted[frames / 2])
    };
    Ok(FpsReport {
        preset: preset.to_string(),
        resolution: Resolution { width: c.width, height: c.height },
        frames,
        mean_fps: 1e3 / mean_ms,
        p50_fps: 1e3 / p50_ms,
        mean_ms,
        p50_ms,
    })
}

/// One row in the style of a training-cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub epochs: usize,
    pub lr: f64,
    pub minutes: f64,
    pub fps: f64,
    pub mdice: f64,
}

impl CostRow {
    pub const HEADER: &'static str = "model,epochs,lr,time_min,fps,mDice";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:.2},{:.2},{:.4}",
            self.model, self.epochs, self.lr, self.minutes, self.fps, self.mdice
        )
    }
}

/// Writes `S_z·255` as an 8-bit gray PNG at the input image's size, and
/// optionally the mask binarized at ½. Inputs at another resolution are
/// resized for the network and the output resized back.
pub fn predict_file(
    net: &MugenNet,
    store: &mut ParamStore<f32>,
    image_path: &Path,
    out: &Path,
    mask_out: Option<&Path>,
) -> Result<()> {
    let img = image::open(image_path).map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))?;
    let (w0, h0) = (img.width(), img.height());
    if w0 == 0 || h0 == 0 {
        return Err(Error::Data(format!("{} has zero extent", image_path.display())));
    }
    let (w, h) = (net.cfg.width as u32, net.cfg.height as u32);
    let mut rgb: RgbImage = img.to_rgb8();
    if (w0, h0) != (w, h) {
        warn!("{}: resizing {w0}x{h0} to {w}x{h} for the network", image_path.display());
        rgb = image::imageops::resize(&rgb, w, h, FilterType::Triangle);
    }
    let (wu, hu) = (w as usize, h as usize);
    let mut planes = vec![0.0f32; 3 * wu * hu];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * wu + x as usize;
        for c in 0..3 {
            planes[c * wu * hu + i] = px.0[c] as f32 / 255.0;
        }
    }
    let pred = net.predict(store, Tensor::new(&[1, 3, hu, wu], planes)?)?;
    let p = pred.data();
    let mut gray = GrayImage::from_fn(w, h, |x, y| {
        image::Luma([(p[y as usize * wu + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    if (w0, h0) != (w, h) {
        gray = image::imageops::resize(&gray, w0, h0, FilterType::Triangle);
    }
    gray.save(out)?;
    if let Some(mp) = mask_out {
        let bin = GrayImage::from_fn(w0, h0, |x, y| {
            image::Luma([if gray.get_pixel(x, y).0[0] >= 128 { 255 } else { 0 }])
        });
        bin.save(mp)?;
    }
    Ok(())
}
