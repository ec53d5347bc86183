//! Losses, the training loop, and whole-volume inference.
//!
//! One iteration samples fresh patch pairs from randomly chosen interior
//! slices (no fixed epochs), runs the architecture's forward (and, for M2/M3,
//! reverse) path, and applies one Adam step on `L = w_f*L_f + w_r*L_r`.
//! Everything that feeds the final checkpoint is driven by seeded streams,
//! so a fixed config reproduces checkpoints byte for byte, and a resumed run
//! is bit-compatible with an uninterrupted one.

pub mod adam;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, TrainSnapshot};
use crate::model::{build_model, Arch, ModelBundle, ModelConfig};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::volume::{denormalize, make_n2n_pair, normalize, sample_patches, slice_triple, Volume, Window};
use adam::Adam;

/// Hyperparameters; the JSON config document mirrors these field names.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halve_every: u64,
    pub total_iters: u64,
    pub patch_size: usize,
    pub patches_per_slice: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub w_f: f64,
    pub w_r: f64,
    pub channels: usize,
    pub blocks: usize,
    pub shuffle_r: usize,
    pub s_max: f64,
    pub growth: usize,
    pub window: [f32; 2],
    pub log_every: u64,
    /// Linear learning-rate ramp over the first `warmup_iters` iterations;
    /// 0 disables it. Off by default: the published schedule has no warmup.
    pub warmup_iters: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::M3,
            batch_size: 16,
            lr0: 1e-4,
            lr_halve_every: 6000,
            total_iters: 5000,
            patch_size: 120,
            patches_per_slice: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            w_f: 1.0,
            w_r: 1.0,
            channels: 64,
            blocks: 12,
            shuffle_r: 2,
            s_max: 2.0,
            growth: 32,
            window: [-1024.0, 3071.0],
            log_every: 100,
            warmup_iters: 0,
            clip_grad_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            blocks: self.blocks,
            shuffle_r: self.shuffle_r,
            s_max: self.s_max,
            growth: self.growth,
        }
    }

    pub fn window_struct(&self) -> Window {
        Window { lo: self.window[0], hi: self.window[1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_iters == 0 || self.patch_size == 0 || self.patches_per_slice == 0 {
            return Err(Error::ConfigInvalid {
                detail: "batch_size, total_iters, patch_size and patches_per_slice must be positive".into(),
            });
        }
        if self.lr0 <= 0.0 || self.lr_halve_every == 0 || self.eps <= 0.0 {
            return Err(Error::ConfigInvalid { detail: "lr0, lr_halve_every and eps must be positive".into() });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::ConfigInvalid { detail: "betas must lie in [0, 1)".into() });
        }
        if self.w_f < 0.0 || self.w_r < 0.0 {
            return Err(Error::ConfigInvalid { detail: "loss weights must be non-negative".into() });
        }
        if self.clip_grad_norm < 0.0 {
            return Err(Error::ConfigInvalid { detail: "clip_grad_norm must be >= 0".into() });
        }
        if self.patch_size % self.shuffle_r != 0 {
            return Err(Error::ConfigInvalid {
                detail: format!("patch_size {} must be divisible by shuffle_r {}", self.patch_size, self.shuffle_r),
            });
        }
        self.window_struct().validate()?;
        self.model_config().validate()
    }

    /// Parse a JSON config document; unknown keys are named in the error.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::ConfigInvalid { detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 * 2^-floor(iter / halve_every)`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((iter / cfg.lr_halve_every) as i32)
}

/// Forward loss: `(1/k) * sum_batch ||target - prediction||^2`, the norm
/// summing over every pixel of each sample.
pub fn loss_forward<T: crate::tensor::Scalar>(
    g: &mut Graph<T>,
    prediction: NodeId,
    target: NodeId,
    batch: usize,
) -> Result<NodeId> {
    let diff = g.sub(target, prediction)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / batch as f64)
}

/// Reverse (cycle) loss: same form, against the original input.
pub fn loss_reverse<T: crate::tensor::Scalar>(
    g: &mut Graph<T>,
    prediction: NodeId,
    original: NodeId,
    batch: usize,
) -> Result<NodeId> {
    loss_forward(g, prediction, original, batch)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss_f: f64,
    pub loss_r: f64,
    pub secs: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub log: Vec<LogRecord>,
    pub final_loss_f: f64,
    pub final_loss_r: f64,
    pub checkpoint_path: PathBuf,
}

/// Assemble one batch of (input, target) patch pairs as NCHW tensors.
/// The draw count per call is a pure function of the config, which keeps
/// resumed runs aligned with uninterrupted ones.
fn assemble_batch(
    volumes: &[Volume],
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let p = cfg.patch_size;
    let k = cfg.batch_size;
    let mut inputs: Vec<f32> = Vec::with_capacity(k * p * p);
    let mut targets: Vec<f32> = Vec::with_capacity(k * p * p);
    let mut filled = 0usize;
    while filled < k {
        let vi = rng.random_range(0..volumes.len());
        let v = &volumes[vi];
        let z = rng.random_range(1..v.dims[0] - 1);
        let pair = make_n2n_pair(&slice_triple(v, z)?);
        let take = cfg.patches_per_slice.min(k - filled);
        for (a, b) in sample_patches(&pair, take, p, rng)? {
            inputs.extend_from_slice(&a);
            targets.extend_from_slice(&b);
        }
        filled += take;
    }
    Ok((
        Tensor::new(vec![k, 1, p, p], inputs)?,
        Tensor::new(vec![k, 1, p, p], targets)?,
    ))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

/// Run one training-step graph for the architecture; returns per-parameter
/// gradients plus the two loss values.
fn train_step(
    bundle: &ModelBundle<f32>,
    cfg: &TrainConfig,
    input: Tensor<f32>,
    target: Tensor<f32>,
) -> Result<(Vec<(String, Tensor<f32>)>, f64, f64)> {
    let k = cfg.batch_size;
    let mut g: Graph<f32> = Graph::new();
    let y = g.leaf(input);
    let t = g.leaf(target);

    let (param_ids, lf_id, lr_id) = match bundle {
        ModelBundle::M3(m) => {
            let bound = m.bind(&mut g, true);
            let xhat = bound.forward(&mut g, y)?;
            let yhat = bound.reverse(&mut g, xhat)?;
            let lf = loss_forward(&mut g, xhat, t, k)?;
            let lr = loss_reverse(&mut g, yhat, y, k)?;
            (bound.param_ids(), lf, Some(lr))
        }
        ModelBundle::M2 { fwd, rev } => {
            let bf = fwd.bind(&mut g, true);
            let br = rev.bind(&mut g, true);
            let xhat = bf.forward(&mut g, y)?;
            let yhat = br.forward(&mut g, xhat)?;
            let lf = loss_forward(&mut g, xhat, t, k)?;
            let lr = loss_reverse(&mut g, yhat, y, k)?;
            let mut ids: Vec<(String, NodeId)> =
                bf.param_ids().into_iter().map(|(n, i)| (format!("f.{n}"), i)).collect();
            ids.extend(br.param_ids().into_iter().map(|(n, i)| (format!("r.{n}"), i)));
            (ids, lf, Some(lr))
        }
        ModelBundle::M1(m) => {
            let bound = m.bind(&mut g, true);
            let xhat = bound.forward(&mut g, y)?;
            let lf = loss_forward(&mut g, xhat, t, k)?;
            (bound.param_ids(), lf, None)
        }
    };

    let loss_f_val = g.value(lf_id).data()[0] as f64;
    let loss_r_val = lr_id.map(|id| g.value(id).data()[0] as f64).unwrap_or(0.0);
    // M1 trains on the forward loss alone; w_r is ignored by construction.
    let total = match lr_id {
        Some(lr) => {
            let a = g.scale(lf_id, cfg.w_f)?;
            let b = g.scale(lr, cfg.w_r)?;
            g.add(a, b)?
        }
        None => g.scale(lf_id, cfg.w_f)?,
    };
    if !g.value(total).is_all_finite() {
        return Err(Error::TrainAbort { iteration: 0, detail: "non-finite loss".into() });
    }
    let mut grads = g.backward(total)?;
    let named: Vec<(String, Tensor<f32>)> = param_ids
        .into_iter()
        .map(|(name, id)| {
            let g = grads.take(id).unwrap_or_else(|| panic!("missing grad for {name}"));
            (name, g)
        })
        .collect();
    Ok((named, loss_f_val, loss_r_val))
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let scale = (max_norm / total) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

fn apply_grads(
    bundle: &mut ModelBundle<f32>,
    optimizer: &mut Adam<f32>,
    grads: Vec<(String, Tensor<f32>)>,
    lr: f64,
    iteration: u64,
) -> Result<()> {
    let by_name: std::collections::HashMap<String, Tensor<f32>> = grads.into_iter().collect();
    let mut triples_err: Option<Error> = None;
    let mut collected: Vec<(String, *mut Tensor<f32>, &Tensor<f32>)> = Vec::new();
    bundle.visit_params_mut(&mut |name, param| {
        if let Some(g) = by_name.get(name) {
            collected.push((name.to_string(), param as *mut _, g));
        } else if triples_err.is_none() {
            triples_err = Some(Error::TrainAbort {
                iteration,
                detail: format!("no gradient produced for parameter {name}"),
            });
        }
    });
    if let Some(e) = triples_err {
        return Err(e);
    }
    // visit_params_mut hands out disjoint &mut borrows one at a time; the raw
    // pointers reconstruct them as one batch for the optimizer.
    let mut triples: Vec<(String, &mut Tensor<f32>, &Tensor<f32>)> = collected
        .into_iter()
        .map(|(n, p, g)| (n, unsafe { &mut *p }, g))
        .collect();
    optimizer.step(&mut triples, lr).map_err(|e| match e {
        Error::TrainAbort { detail, .. } => Error::TrainAbort { iteration, detail },
        other => other,
    })
}

/// Train `cfg.arch` on the given HU volumes, writing a JSONL log and a final
/// INNC checkpoint. `resume_from` continues an earlier run's counter, rng
/// position and optimizer state exactly. `observer` sees every log record as
/// it is produced.
pub fn train(
    cfg: &TrainConfig,
    volumes_hu: &[Volume],
    checkpoint_path: &Path,
    log_path: Option<&Path>,
    resume_from: Option<&Path>,
    mut observer: impl FnMut(&LogRecord, &ModelBundle<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if volumes_hu.is_empty() {
        return Err(Error::InvalidArgument { detail: "training needs at least one volume".into() });
    }
    for v in volumes_hu {
        if v.dims[0] < 3 {
            return Err(Error::InvalidArgument {
                detail: format!("volume with {} slices cannot form neighbor triples (need >= 3)", v.dims[0]),
            });
        }
        if cfg.patch_size > v.dims[1] || cfg.patch_size > v.dims[2] {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "patch_size {} exceeds slice dims {}x{}",
                    cfg.patch_size, v.dims[1], v.dims[2]
                ),
            });
        }
    }

    let window = cfg.window_struct();
    let volumes: Vec<Volume> = volumes_hu.iter().map(|v| normalize(v, window)).collect::<Result<_>>()?;

    let mut optimizer = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH);
    let mut start_iter = 0u64;

    let mut bundle: ModelBundle<f32> = match resume_from {
        None => {
            let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
            build_model(cfg.arch, &cfg.model_config(), &mut init_rng)?
        }
        Some(path) => {
            let (bundle, snap) = load_checkpoint(path)?;
            if bundle.arch() != cfg.arch {
                return Err(Error::CheckpointMismatch {
                    detail: format!("checkpoint holds {} but config asks for {}", bundle.arch(), cfg.arch),
                });
            }
            if bundle.config() != &cfg.model_config() {
                return Err(Error::CheckpointMismatch {
                    detail: format!(
                        "checkpoint model config {:?} differs from requested {:?}",
                        bundle.config(),
                        cfg.model_config()
                    ),
                });
            }
            let snap = snap.ok_or_else(|| Error::CheckpointMismatch {
                detail: "checkpoint carries no training state to resume from".into(),
            })?;
            start_iter = snap.iteration;
            batch_rng.set_word_pos(snap.rng_word_pos);
            optimizer.restore(snap.iteration, snap.moments);
            bundle
        }
    };

    let mut log_file = match log_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };

    let started = Instant::now();
    let mut log = Vec::new();
    let mut acc_f = 0.0f64;
    let mut acc_r = 0.0f64;
    let mut acc_n = 0u64;
    let mut last_f = f64::NAN;
    let mut last_r = f64::NAN;

    for iteration in start_iter..cfg.total_iters {
        let mut lr = lr_schedule(iteration, cfg);
        if cfg.warmup_iters > 0 && iteration < cfg.warmup_iters {
            lr *= (iteration + 1) as f64 / cfg.warmup_iters as f64;
        }
        let (input, target) = assemble_batch(&volumes, cfg, &mut batch_rng)?;
        let (mut grads, lf, lrv) = train_step(&bundle, cfg, input, target).map_err(|e| match e {
            Error::TrainAbort { detail, .. } => Error::TrainAbort { iteration, detail },
            other => other,
        })?;
        if cfg.clip_grad_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_grad_norm);
        }
        apply_grads(&mut bundle, &mut optimizer, grads, lr, iteration)?;

        acc_f += lf;
        acc_r += lrv;
        acc_n += 1;
        last_f = lf;
        last_r = lrv;

        if (iteration + 1) % cfg.log_every == 0 || iteration + 1 == cfg.total_iters {
            let rec = LogRecord {
                iter: iteration + 1,
                lr,
                loss_f: acc_f / acc_n as f64,
                loss_r: acc_r / acc_n as f64,
                secs: started.elapsed().as_secs_f64(),
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)
                    .map_err(|e| Error::ConfigInvalid { detail: e.to_string() })?;
                writeln!(f, "{line}").map_err(|e| Error::Io { path: None, source: e })?;
            }
            observer(&rec, &bundle);
            log.push(rec);
            acc_f = 0.0;
            acc_r = 0.0;
            acc_n = 0;
        }
    }

    let snapshot = TrainSnapshot {
        iteration: cfg.total_iters,
        rng_word_pos: batch_rng.get_word_pos(),
        moments: optimizer.moments().clone(),
        config_json: Some(
            serde_json::to_value(cfg).map_err(|e| Error::ConfigInvalid { detail: e.to_string() })?,
        ),
        loss_f: last_f,
        loss_r: last_r,
    };
    save_checkpoint(checkpoint_path, &bundle, Some(&snapshot))?;
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| Error::Io { path: None, source: e })?;
    }

    Ok(TrainOutcome {
        bundle,
        log,
        final_loss_f: last_f,
        final_loss_r: last_r,
        checkpoint_path: checkpoint_path.to_path_buf(),
    })
}

/// Reflect-pad a slice on the bottom/right to multiples of `r`.
fn reflect_pad(slice: &[f32], h: usize, w: usize, r: usize) -> (Vec<f32>, usize, usize) {
    let hp = h.div_ceil(r) * r;
    let wp = w.div_ceil(r) * r;
    if hp == h && wp == w {
        return (slice.to_vec(), h, w);
    }
    let mut out = vec![0.0f32; hp * wp];
    for y in 0..hp {
        // reflect without repeating the edge sample
        let sy = if y < h { y } else { 2 * h - 2 - y };
        for x in 0..wp {
            let sx = if x < w { x } else { 2 * w - 2 - x };
            out[y * wp + x] = slice[sy * w + sx];
        }
    }
    (out, hp, wp)
}

/// Denoise every slice of a volume (boundary slices included) with the
/// bundle's test-time network, returning HU values. Slices are independent
/// and processed in parallel.
pub fn denoise_volume(bundle: &ModelBundle<f32>, volume_hu: &Volume, window: Window) -> Result<Volume> {
    use rayon::prelude::*;
    let normalized = normalize(volume_hu, window)?;
    let (h, w) = (volume_hu.dims[1], volume_hu.dims[2]);
    let r = bundle.config().shuffle_r;
    let slices: Vec<Vec<f32>> = (0..volume_hu.dims[0])
        .into_par_iter()
        .map(|z| -> Result<Vec<f32>> {
            let (padded, hp, wp) = reflect_pad(normalized.slice(z), h, w, r);
            let input = Tensor::new(vec![1, 1, hp, wp], padded)?;
            let out = bundle.infer(&input)?;
            let data = out.data();
            let mut cropped = Vec::with_capacity(h * w);
            for y in 0..h {
                cropped.extend_from_slice(&data[y * wp..y * wp + w]);
            }
            Ok(cropped)
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(volume_hu.values.len());
    for s in slices {
        values.extend_from_slice(&s);
    }
    let out = Volume { dims: volume_hu.dims, spacing: volume_hu.spacing, values };
    denormalize(&out, window)
}
