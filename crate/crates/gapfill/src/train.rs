//! Supervised training on gap-simulated sequences: masked-L1 objective over
//! all pixels, rotation/flip augmentation, Adam with a halving learning-rate
//! schedule, validation-driven early stopping and exactly resumable state.
//!
//! Every source of randomness is derived from `(seed, purpose, epoch,
//! sample)` via [`crate::gapsim::derive_seed`], so a fixed seed gives a
//! bit-stable training trajectory and resume-from-state reproduces the
//! uninterrupted run step for step.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::SampleRecord;
use crate::error::{Error, Result};
use crate::gapsim::{derive_seed, imprint, sample_gap_pattern, trim_or_pad, GapSpec, MaskPool, TrimMode};
use crate::model::checkpoint::{read_blob_file, write_blob_file, BlobDtype};
use crate::model::layers::GradStore;
use crate::model::{ModelConfig, TemporalUnet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fixed temporal window length `T`.
    pub window: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The learning rate is halved every this many epochs.
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    /// Number of consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Validation loss must improve by more than this to count.
    pub min_delta: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 10,
            batch_size: 3,
            base_lr: 2e-4,
            lr_halving_period: 50,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 300,
            patience: 10,
            min_delta: 1e-5,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::param("window", "must be >= 1"));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::param("base_lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::param("lr_halving_period", "must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: the base rate halved every halving period.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * 0.5_f64.powi((epoch / config.lr_halving_period) as i32)
}

/// Sequence-averaged L1 objective over a batch.
///
/// Per sequence, the absolute differences are averaged over its effective
/// (non-pad) frames; the batch average then runs over sequences, channels and
/// pixels. All pixels enter, observed and imputed alike; pad frames are
/// excluded through the effective lengths.
pub fn sequence_l1_loss(
    preds: &[Array4<f64>],
    targets: &[Array4<f64>],
    valid_lens: &[usize],
) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != valid_lens.len() || preds.is_empty() {
        return Err(Error::param("batch", "empty or mismatched batch arrays"));
    }
    let (_, c, h, w) = preds[0].dim();
    let mut total = 0.0;
    for ((pred, target), &len) in preds.iter().zip(targets).zip(valid_lens) {
        if len == 0 {
            return Err(Error::param("valid_lens", "zero effective length"));
        }
        if pred.dim() != target.dim() {
            return Err(Error::shape(
                "loss operands",
                format!("{:?}", pred.dim()),
                format!("{:?}", target.dim()),
            ));
        }
        let mut seq = 0.0;
        for t in 0..len {
            let p = pred.slice(s![t, .., .., ..]);
            let y = target.slice(s![t, .., .., ..]);
            seq += p
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        total += seq / len as f64;
    }
    Ok(total / (preds.len() * c * h * w) as f64)
}

/// Gradient of [`sequence_l1_loss`] w.r.t. one sequence's prediction.
/// `batch_size` is the `N` of the batch the sequence belongs to.
pub fn sequence_l1_loss_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    valid_len: usize,
    batch_size: usize,
) -> Array4<f64> {
    let (t, c, h, w) = pred.dim();
    let scale = 1.0 / (batch_size * c * h * w) as f64 / valid_len as f64;
    let mut grad = Array4::zeros((t, c, h, w));
    for ti in 0..valid_len {
        let p = pred.slice(s![ti, .., .., ..]);
        let y = target.slice(s![ti, .., .., ..]);
        let mut g = grad.slice_mut(s![ti, .., .., ..]);
        ndarray::Zip::from(&mut g).and(&p).and(&y).for_each(|g, &a, &b| {
            *g = if a > b {
                scale
            } else if a < b {
                -scale
            } else {
                0.0
            };
        });
    }
    grad
}

/// One per-sequence augmentation decision: a quarter-turn rotation and
/// independent flips along both axes, applied identically to every frame,
/// channel and the mask volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentChoice {
    pub quarter_turns: u8,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl AugmentChoice {
    pub const IDENTITY: AugmentChoice = AugmentChoice {
        quarter_turns: 0,
        flip_x: false,
        flip_y: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentChoice {
            quarter_turns: rng.gen_range(0..4u8),
            flip_x: rng.gen_bool(0.5),
            flip_y: rng.gen_bool(0.5),
        }
    }
}

fn rotate_plane_quarter<A: Copy + Default>(
    src: &ndarray::ArrayView2<'_, A>,
    turns: u8,
) -> ndarray::Array2<A> {
    let (h, w) = src.dim();
    match turns % 4 {
        0 => src.to_owned(),
        // 90° counterclockwise: (y, x) <- (x, W-1-y) of the source.
        1 => ndarray::Array2::from_shape_fn((w, h), |(y, x)| src[[x, w - 1 - y]]),
        2 => ndarray::Array2::from_shape_fn((h, w), |(y, x)| src[[h - 1 - y, w - 1 - x]]),
        _ => ndarray::Array2::from_shape_fn((w, h), |(y, x)| src[[h - 1 - x, y]]),
    }
}

fn flip_plane<A: Copy>(plane: &mut ndarray::Array2<A>, flip_x: bool, flip_y: bool) {
    let (h, w) = plane.dim();
    if flip_x {
        for y in 0..h {
            for x in 0..w / 2 {
                plane.swap([y, x], [y, w - 1 - x]);
            }
        }
    }
    if flip_y {
        for y in 0..h / 2 {
            for x in 0..w {
                plane.swap([y, x], [h - 1 - y, x]);
            }
        }
    }
}

/// Apply one augmentation choice to a whole record. Quarter-turn rotations of
/// non-square frames are rejected.
pub fn augment_record(record: &SampleRecord, choice: AugmentChoice) -> Result<SampleRecord> {
    let (h, w) = (record.height(), record.width());
    if choice.quarter_turns % 2 == 1 && h != w {
        return Err(Error::param(
            "augment",
            format!("90°/270° rotation needs square frames, got {h}×{w}"),
        ));
    }
    let mut out = record.clone();
    for t in 0..record.t_len() {
        for c in 0..record.channels() {
            let src = record.images.slice(s![t, c, .., ..]);
            let mut plane = rotate_plane_quarter(&src, choice.quarter_turns);
            flip_plane(&mut plane, choice.flip_x, choice.flip_y);
            out.images.slice_mut(s![t, c, .., ..]).assign(&plane);
        }
        let src = record.mask.slice(s![t, 0, .., ..]);
        let mut plane = rotate_plane_quarter(&src, choice.quarter_turns);
        flip_plane(&mut plane, choice.flip_x, choice.flip_y);
        out.mask.slice_mut(s![t, 0, .., ..]).assign(&plane);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam moment buffers aligned with the model's parameter registry.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(model: &TemporalUnet) -> Self {
        let mut m = vec![Vec::new(); model.registry().len()];
        model.for_each_param(&mut |id, slice| m[id.0] = vec![0.0; slice.len()]);
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    /// One Adam update with the given learning rate.
    pub fn apply(
        &mut self,
        model: &mut TemporalUnet,
        grads: &GradStore,
        lr: f64,
        config: &TrainConfig,
    ) {
        self.step += 1;
        let b1 = config.beta1;
        let b2 = config.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        const EPS: f64 = 1e-8;
        let (m, v) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(&mut |id, weights| {
            let g = grads.flat(id);
            let m = &mut m[id.0];
            let v = &mut v[id.0];
            for i in 0..weights.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                weights[i] -=
                    lr * (m_hat / (v_hat.sqrt() + EPS) + config.weight_decay * weights[i]);
            }
        });
    }
}

pub fn snapshot_params(model: &TemporalUnet) -> Vec<Vec<f64>> {
    let mut snap = vec![Vec::new(); model.registry().len()];
    model.for_each_param(&mut |id, s| snap[id.0] = s.to_vec());
    snap
}

pub fn restore_params(model: &mut TemporalUnet, snapshot: &[Vec<f64>]) {
    model.for_each_param_mut(&mut |id, s| s.copy_from_slice(&snapshot[id.0]));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Clean training material plus the gap-simulation inputs.
pub struct EpochData<'a> {
    pub samples: &'a [SampleRecord],
    pub pool: &'a MaskPool,
    pub gap_spec: &'a GapSpec,
}

/// Resumable training state. Serializing and reloading it reproduces the
/// subsequent updates exactly (all per-epoch randomness is derived from the
/// seed and the epoch counter, never from a streaming RNG).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: AdamState,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub best_weights: Vec<Vec<f64>>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &TemporalUnet, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            adam: AdamState::zeros(model),
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            best_weights: snapshot_params(model),
            seed,
        }
    }
}

/// Prepared input/target pair for one sequence.
struct PreparedSample {
    input: SampleRecord,
    target: Array4<f64>,
    valid_len: usize,
    id: String,
}

/// Trim, augment, re-sample gaps and imprint one clean sequence.
fn prepare_sample(
    record: &SampleRecord,
    data: &EpochData<'_>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    augment: bool,
) -> Result<PreparedSample> {
    let padded = trim_or_pad(record, config.window, TrimMode::Train, rng)?;
    let clean = if augment {
        let choice = AugmentChoice::sample(rng);
        augment_record(&padded.record, choice)?
    } else {
        padded.record
    };

    let pattern = sample_gap_pattern(data.gap_spec, data.pool, padded.valid_len, rng)?;
    let mut gaps = pattern.to_dense(data.pool, config.window);
    // Gaps apply to real frames only; pad frames are already fully missing.
    if padded.valid_len < config.window {
        gaps.slice_mut(s![padded.valid_len.., .., .., ..]).fill(0);
    }
    let input = imprint(&clean, &gaps)?;

    let rec_idx = clean.reconstruct_indices();
    let (t, h, w) = (clean.t_len(), clean.height(), clean.width());
    let mut target = Array4::zeros((t, rec_idx.len(), h, w));
    for (ci, &src) in rec_idx.iter().enumerate() {
        target
            .slice_mut(s![.., ci, .., ..])
            .assign(&clean.images.slice(s![.., src, .., ..]).mapv(f64::from));
    }

    Ok(PreparedSample {
        input,
        target,
        valid_len: padded.valid_len,
        id: record.sample_id.clone(),
    })
}

/// Run one epoch of Adam updates; gaps, crops and augmentations are freshly
/// re-sampled for every sample from the epoch-derived seeds. Returns the mean
/// train loss.
pub fn train_epoch(
    model: &mut TemporalUnet,
    state: &mut TrainState,
    data: &EpochData<'_>,
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    if data.samples.is_empty() {
        return Err(Error::EmptySplit {
            split: "train".to_string(),
        });
    }
    let epoch = state.epoch;
    let lr = lr_at(epoch, config);

    // Epoch-local sample order.
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, "order", epoch as u64));
    for i in (1..order.len()).rev() {
        let j = order_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut grads = GradStore::zeros(model.registry());
    let mut loss_sum = 0.0;
    let mut n_sequences = 0usize;

    for batch in order.chunks(config.batch_size) {
        grads.reset();
        let mut batch_loss = 0.0;
        for &idx in batch {
            let record = &data.samples[idx];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                state.seed,
                "sample",
                ((epoch as u64) << 32) | idx as u64,
            ));
            let prepared = prepare_sample(record, data, config, &mut rng, config.augment)?;

            let pass = model.forward(&prepared.input)?;
            let loss = sequence_l1_loss(
                std::slice::from_ref(&pass.output),
                std::slice::from_ref(&prepared.target),
                &[prepared.valid_len],
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample_id: prepared.id,
                });
            }
            batch_loss += loss;
            let dout = sequence_l1_loss_grad(
                &pass.output,
                &prepared.target,
                prepared.valid_len,
                batch.len(),
            );
            model.backward(&pass, &dout, &mut grads);
        }
        state.adam.apply(model, &grads, lr, config);
        loss_sum += batch_loss / batch.len() as f64 * batch.len() as f64;
        n_sequences += batch.len();
    }

    state.epoch += 1;
    Ok(loss_sum / n_sequences as f64)
}

/// Validation loss with per-run fixed gap patterns and crops (derived from the
/// seed and the sample index only, never the epoch) and no augmentation.
pub fn validation_loss(
    model: &TemporalUnet,
    samples: &[SampleRecord],
    pool: &MaskPool,
    gap_spec: &GapSpec,
    config: &TrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySplit {
            split: "val".to_string(),
        });
    }
    let data = EpochData {
        samples,
        pool,
        gap_spec,
    };
    let mut total = 0.0;
    for (idx, record) in samples.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "val", idx as u64));
        let prepared = prepare_sample(record, &data, config, &mut rng, false)?;
        let pass = model.forward(&prepared.input)?;
        let loss = sequence_l1_loss(
            std::slice::from_ref(&pass.output),
            std::slice::from_ref(&prepared.target),
            &[prepared.valid_len],
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample_id: prepared.id,
            });
        }
        total += loss;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub log: Vec<LogRow>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Train until the validation loss stops improving by more than `min_delta`
/// for `patience + 1` consecutive epochs, or `max_epochs` is reached. The
/// model is left holding the best-validation weights.
pub fn fit(
    model: &mut TemporalUnet,
    train: &[SampleRecord],
    val: &[SampleRecord],
    pool: &MaskPool,
    gap_spec: &GapSpec,
    config: &TrainConfig,
    resume: Option<TrainState>,
    state_path: Option<&Path>,
) -> Result<(TrainState, FitResult)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit {
            split: "train".to_string(),
        });
    }
    if val.is_empty() {
        return Err(Error::EmptySplit {
            split: "val".to_string(),
        });
    }

    let mut state = resume.unwrap_or_else(|| TrainState::new(model, config.seed));
    let data = EpochData {
        samples: train,
        pool,
        gap_spec,
    };
    let started = Instant::now();
    let mut log = Vec::new();
    let mut stopped_early = false;

    while state.epoch < config.max_epochs {
        let lr = lr_at(state.epoch, config);
        let epoch = state.epoch;
        let train_loss = train_epoch(model, &mut state, &data, config)?;
        let val_loss = validation_loss(model, val, pool, gap_spec, config)?;
        log.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        if val_loss < state.best_val_loss - config.min_delta {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            state.best_weights = snapshot_params(model);
        } else {
            state.epochs_since_improvement += 1;
        }

        // Persist the resumable state with the *current* weights before any
        // best-weight restoration happens.
        if let Some(path) = state_path {
            save_train_state(model, &state, path)?;
        }

        if state.epochs_since_improvement > config.patience {
            stopped_early = true;
            break;
        }
    }

    restore_params(model, &state.best_weights);
    Ok((
        state.clone(),
        FitResult {
            log,
            best_val_loss: state.best_val_loss,
            best_epoch: state.best_epoch,
            stopped_early,
        },
    ))
}

// ---------------------------------------------------------------------------
// Train-state persistence
// ---------------------------------------------------------------------------

pub const TRAIN_STATE_MAGIC: &[u8; 8] = b"GFTRST01";

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateExtra {
    epoch: usize,
    adam_step: u64,
    best_val_loss: f64,
    best_epoch: usize,
    epochs_since_improvement: usize,
    seed: u64,
    model_config: ModelConfig,
}

/// Persist the full training state (current weights, Adam moments, best
/// weights) at `f64` precision so a resumed run is bit-identical.
pub fn save_train_state(model: &TemporalUnet, state: &TrainState, path: &Path) -> Result<()> {
    let registry = model.registry();
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); registry.len()];
    model.for_each_param(&mut |id, s| weights[id.0] = s.to_vec());

    let mut blobs: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for id in registry.ids() {
        blobs.push((
            format!("w.{}", registry.name(id)),
            registry.shape(id).to_vec(),
            weights[id.0].as_slice(),
        ));
    }
    for id in registry.ids() {
        blobs.push((
            format!("m.{}", registry.name(id)),
            registry.shape(id).to_vec(),
            state.adam.m[id.0].as_slice(),
        ));
    }
    for id in registry.ids() {
        blobs.push((
            format!("v.{}", registry.name(id)),
            registry.shape(id).to_vec(),
            state.adam.v[id.0].as_slice(),
        ));
    }
    for id in registry.ids() {
        blobs.push((
            format!("best.{}", registry.name(id)),
            registry.shape(id).to_vec(),
            state.best_weights[id.0].as_slice(),
        ));
    }

    write_blob_file(
        path,
        TRAIN_STATE_MAGIC,
        BlobDtype::F64,
        &TrainStateExtra {
            epoch: state.epoch,
            adam_step: state.adam.step,
            best_val_loss: state.best_val_loss,
            best_epoch: state.best_epoch,
            epochs_since_improvement: state.epochs_since_improvement,
            seed: state.seed,
            model_config: model.config.clone(),
        },
        &blobs,
    )
}

/// Reload a training state saved by [`save_train_state`], rebuilding the
/// model it belongs to.
pub fn load_train_state(path: &Path) -> Result<(TemporalUnet, TrainState)> {
    let file = read_blob_file::<TrainStateExtra>(path, TRAIN_STATE_MAGIC)?;
    let extra = file.extra;
    let mut model = TemporalUnet::new(extra.model_config.clone(), 0)?;
    let registry = model.registry().clone();
    let n = registry.len();
    if file.blobs.len() != 4 * n {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected {} blobs, found {}", 4 * n, file.blobs.len()),
        });
    }

    let section = |offset: usize, prefix: &str| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n);
        for (i, id) in registry.ids().enumerate() {
            let (info, values) = &file.blobs[offset + i];
            let expected = format!("{prefix}.{}", registry.name(id));
            if info.name != expected {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("expected blob {expected}, found {}", info.name),
                });
            }
            out.push(values.clone());
        }
        Ok(out)
    };

    let weights = section(0, "w")?;
    let m = section(n, "m")?;
    let v = section(2 * n, "v")?;
    let best = section(3 * n, "best")?;

    model.for_each_param_mut(&mut |id, s| s.copy_from_slice(&weights[id.0]));
    let state = TrainState {
        epoch: extra.epoch,
        adam: AdamState {
            step: extra.adam_step,
            m,
            v,
        },
        best_val_loss: extra.best_val_loss,
        best_epoch: extra.best_epoch,
        epochs_since_improvement: extra.epochs_since_improvement,
        best_weights: best,
        seed: extra.seed,
    };
    Ok((model, state))
}
