//! Optimization loop: crop/flip augmentation, batch composition, Adam with a
//! step learning-rate schedule, global-norm clipping, checkpoints and
//! held-out evaluation.
//!
//! Every iteration draws its batch from its own RNG stream
//! (`seed`, stream = iteration index), so a run resumed from a checkpoint
//! follows the uninterrupted trajectory exactly.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{load_image, load_manifest, manifest_root, ImageRGB};
use crate::losses::l_total;
use crate::metrics::{psnr, ssim_image};
use crate::network::{enhance, stack_views, ModelConfig, ModelParams, Network};
use crate::tensor::{Scalar, Snapshot, Tape, Tensor};

/// Snapshot record holding the JSON trainer state.
pub const TRAINER_RECORD: &str = "__trainer__";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub crop: usize,
    pub flip_prob: f64,
    pub batch_triplets: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First iteration trained at `lr_final`.
    pub decay_at: usize,
    pub total_iters: usize,
    pub seed: u64,
    /// Held-out evaluation period; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint period; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 48,
            flip_prob: 0.5,
            batch_triplets: 2,
            lr_initial: 2e-4,
            lr_final: 1e-5,
            // 37k of 92k iterations, scaled to the 2k desk schedule
            decay_at: 804,
            total_iters: 2000,
            seed: 0,
            eval_every: 200,
            checkpoint_every: 500,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        let window = model.patch * (2 * model.radius + 1);
        if self.crop < crate::image_io::MIN_NETWORK_SIDE || self.crop < window {
            return bad(format!(
                "crop {} is below the minimum of max(16, patch·(2·radius+1) = {window})",
                self.crop
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_final ({}) <= lr_initial ({})",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} is not a probability", self.flip_prob));
        }
        if self.batch_triplets == 0 {
            return bad("batch_triplets must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        Ok(())
    }
}

/// Step schedule: `lr_initial` before `decay_at`, `lr_final` from then on.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.decay_at {
        cfg.lr_initial
    } else {
        cfg.lr_final
    }
}

/// A low-light triplet with its ground truth, views in capture order.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub scene: String,
    pub low: [ImageRGB; 3],
    pub gt: [ImageRGB; 3],
}

/// Loads every triplet a manifest references.
pub fn load_triplets(manifest: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let manifest = manifest.as_ref();
    let m = load_manifest(manifest)?;
    let root = manifest_root(manifest);
    let load3 = |paths: &[PathBuf; 3]| -> Result<[ImageRGB; 3]> {
        Ok([
            load_image(root.join(&paths[0]))?,
            load_image(root.join(&paths[1]))?,
            load_image(root.join(&paths[2]))?,
        ])
    };
    m.entries
        .iter()
        .map(|e| {
            let t = Triplet {
                scene: e.scene.clone(),
                low: load3(&e.low)?,
                gt: load3(&e.gt)?,
            };
            let dims = t.low[0].dims();
            if t.low.iter().chain(&t.gt).any(|i| i.dims() != dims) {
                return Err(Error::Dimension(format!(
                    "scene {}: views and ground truth differ in size",
                    e.scene
                )));
            }
            Ok(t)
        })
        .collect()
}

/// One augmented training sample.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Index into the training set.
    pub triplet: usize,
    /// Cropped (and possibly flipped) low-light views in capture order.
    pub views: [ImageRGB; 3],
    /// Matching crop of the primary view's ground truth.
    pub gt: ImageRGB,
    pub primary: usize,
    /// Top-left corner of the crop window.
    pub window: (usize, usize),
    pub flipped: bool,
}

/// Draws `batch_triplets` samples. Within a sample the crop window and flip
/// are shared by all three views and the ground truth.
pub fn make_batch(data: &[Triplet], rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    (0..cfg.batch_triplets)
        .map(|_| {
            let triplet = rng.random_range(0..data.len());
            let t = &data[triplet];
            let (h, w) = t.low[0].dims();
            if cfg.crop > h || cfg.crop > w {
                return Err(Error::Dimension(format!(
                    "crop {} exceeds {h}x{w} scene {}",
                    cfg.crop, t.scene
                )));
            }
            let y0 = rng.random_range(0..=h - cfg.crop);
            let x0 = rng.random_range(0..=w - cfg.crop);
            let flipped = rng.random_bool(cfg.flip_prob);
            let primary = rng.random_range(0..3);
            let aug = |img: &ImageRGB| -> Result<ImageRGB> {
                let c = img.crop(y0, x0, cfg.crop, cfg.crop)?;
                Ok(if flipped { c.flip_horizontal() } else { c })
            };
            Ok(Sample {
                triplet,
                views: [aug(&t.low[0])?, aug(&t.low[1])?, aug(&t.low[2])?],
                gt: aug(&t.gt[primary])?,
                primary,
                window: (y0, x0),
                flipped,
            })
        })
        .collect()
}

/// Bias-corrected Adam moments, one pair per parameter tensor in storage
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update. `grads` follows the parameters' storage order.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment pairs for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::Contract(format!("no gradient for `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Contract(format!(
                    "gradient for `{name}` has the wrong shape"
                )))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bias1 = T::lit(1.0 - ADAM_BETA1.powi(t));
    let bias2 = T::lit(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + c1 * g[j];
            v[j] = b2 * v[j] + c2 * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Mean quality over a held-out set, every view taking a turn as primary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// The same measures for the unprocessed low-light primaries.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

pub fn evaluate(params: &ModelParams<f32>, data: &[Triplet]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut acc = [0.0f64; 4];
    for t in data {
        for primary in 0..3 {
            let out = enhance(params, &t.low, primary)?;
            let gt = &t.gt[primary];
            acc[0] += psnr(&out.restored, gt)?;
            acc[1] += ssim_image(&out.restored, gt)?;
            acc[2] += psnr(&t.low[primary], gt)?;
            acc[3] += ssim_image(&t.low[primary], gt)?;
        }
    }
    let n = (3 * data.len()) as f64;
    Ok(EvalReport {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        input_psnr: acc[2] / n,
        input_ssim: acc[3] / n,
    })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// Completed iterations, counting this one.
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,eval_psnr,eval_ssim";

    pub fn to_csv(&self) -> String {
        let (p, s) = match self.eval {
            Some(e) => (e.psnr.to_string(), e.ssim.to_string()),
            None => (String::new(), String::new()),
        };
        format!("{},{},{},{p},{s}", self.iter, self.lr, self.loss)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerRecord {
    iter: usize,
    adam_step: u64,
    train: TrainConfig,
}

/// Sidecar written next to each checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub iter: usize,
    pub checkpoint: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct Trainer {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub cfg: TrainConfig,
    /// Completed iterations.
    pub iter: usize,
}

impl Trainer {
    /// Fresh parameters initialized from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&model)?;
        let params = ModelParams::init(model, cfg.seed)?;
        Ok(Trainer {
            adam: AdamState::new(&params),
            params,
            cfg,
            iter: 0,
        })
    }

    fn batch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.iter as u64);
        rng
    }

    /// Runs one iteration and returns its batch loss.
    pub fn step(&mut self, data: &[Triplet]) -> Result<f64> {
        let batch = make_batch(data, &mut self.batch_rng(), &self.cfg)?;
        let tape = Tape::new();
        let net = Network::new(&tape, &self.params, true)?;
        let mut terms = Vec::with_capacity(batch.len());
        for s in &batch {
            let out = net.forward(tape.constant(stack_views::<f32>(&s.views, s.primary)?))?;
            let gt = tape.constant(s.gt.to_tensor());
            terms.push(l_total(&tape, &out.stages, out.restored, gt)?);
        }
        let sum = crate::losses::sum_terms(&tape, &terms)?;
        let loss = tape.scale(sum, 1.0 / batch.len() as f32)?;
        let value = tape.value(loss).item()?.as_f64();
        if !value.is_finite() {
            let scenes: Vec<&str> = batch
                .iter()
                .map(|s| data[s.triplet].scene.as_str())
                .collect();
            return Err(Error::NumericDomain(format!(
                "loss became {value} at iteration {} (scenes {scenes:?})",
                self.iter + 1
            )));
        }
        tape.backward(loss)?;
        let mut grads = self
            .params
            .iter()
            .map(|(name, _)| Ok(tape.grad(net.param(name)?)))
            .collect::<Result<Vec<_>>>()?;
        let norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NumericDomain(format!(
                "gradient norm became {norm} at iteration {}",
                self.iter + 1
            )));
        }
        adam_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            lr_at(self.iter, &self.cfg),
        )?;
        self.iter += 1;
        Ok(value)
    }

    /// Trains until `cfg.total_iters`, logging to `out/metrics.csv` and
    /// writing checkpoints under `out` when given.
    pub fn run(
        &mut self,
        train: &[Triplet],
        held_out: &[Triplet],
        out: Option<&Path>,
    ) -> Result<Vec<LogRow>> {
        self.run_with(train, held_out, out, |_| {})
    }

    /// As [`Trainer::run`], calling `on_row` after every iteration.
    pub fn run_with(
        &mut self,
        train: &[Triplet],
        held_out: &[Triplet],
        out: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(open_log(&dir.join("metrics.csv"))?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.iter < self.cfg.total_iters {
            let lr = lr_at(self.iter, &self.cfg);
            let loss = self.step(train)?;
            let due = |every: usize| every > 0 && self.iter.is_multiple_of(every);
            let last = self.iter == self.cfg.total_iters;
            let eval = if !held_out.is_empty() && (due(self.cfg.eval_every) || last) {
                Some(evaluate(&self.params, held_out)?)
            } else {
                None
            };
            let row = LogRow {
                iter: self.iter,
                lr,
                loss,
                eval,
            };
            if let Some((file, path)) = log.as_mut() {
                writeln!(file, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_row(&row);
            rows.push(row);
            if let Some(dir) = out {
                if due(self.cfg.checkpoint_every) || last {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(rows)
    }

    pub fn checkpoint_name(iter: usize) -> String {
        format!("checkpoint_{iter:06}.rctn")
    }

    /// Writes `checkpoint_NNNNNN.rctn` and its JSON sidecar into `dir`;
    /// returns the checkpoint path.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let mut snap = self.params.to_snapshot()?;
        for (i, (name, _)) in self.params.iter().enumerate() {
            snap.push_tensor(format!("adam.m.{name}"), self.adam.m[i].clone());
            snap.push_tensor(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        let record = TrainerRecord {
            iter: self.iter,
            adam_step: self.adam.step,
            train: self.cfg.clone(),
        };
        snap.push_bytes(TRAINER_RECORD, to_json(&record)?);
        let name = Self::checkpoint_name(self.iter);
        let path = dir.join(&name);
        snap.save(&path)?;
        let info = CheckpointInfo {
            iter: self.iter,
            checkpoint: name,
            model: self.params.config.clone(),
            train: self.cfg.clone(),
        };
        let side = path.with_extension("json");
        std::fs::write(&side, to_json(&info)?).map_err(|e| Error::io(&side, e))?;
        Ok(path)
    }

    /// Restores parameters, optimizer moments and the iteration counter.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let snap = Snapshot::load(path)?;
        let params = ModelParams::from_snapshot(&snap)?;
        let bytes = snap
            .bytes(TRAINER_RECORD)
            .ok_or_else(|| Error::schema(TRAINER_RECORD, "checkpoint has no trainer state"))?;
        let record: TrainerRecord = serde_json::from_slice(bytes)
            .map_err(|e| Error::schema(TRAINER_RECORD, e.to_string()))?;
        record.train.validate(&params.config)?;
        let moment = |kind: &str, name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let key = format!("adam.{kind}.{name}");
            match snap.tensor(&key) {
                Some(t) if t.shape() == shape => Ok(t.clone()),
                Some(_) => Err(Error::schema(key, "shape differs from its parameter")),
                None => Err(Error::schema(key, "missing optimizer moment")),
            }
        };
        let mut adam = AdamState::new(&params);
        for (i, (name, p)) in params.iter().enumerate() {
            adam.m[i] = moment("m", name, p.shape())?;
            adam.v[i] = moment("v", name, p.shape())?;
        }
        adam.step = record.adam_step;
        Ok(Trainer {
            params,
            adam,
            cfg: record.train,
            iter: record.iter,
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Malformed(e.to_string()))
}

fn open_log(path: &Path) -> Result<(File, PathBuf)> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(file, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(path, e))?;
    }
    Ok((file, path.to_path_buf()))
}
