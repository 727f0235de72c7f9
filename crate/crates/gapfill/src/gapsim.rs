//! Training/evaluation material: cloud filtering of real sequences, synthetic
//! gap injection from a pool of masks, gap imprinting at maximum intensity,
//! trimming/padding to a fixed window length, and a procedural scene generator
//! used for desk-scale verification.
//!
//! All operations are pure given an explicit RNG; parallel sample preparation
//! derives an independent seed per sample via [`derive_seed`].

use ndarray::{s, Array2, Array4};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{ChannelRole, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};

/// Pixels with cloud probability above this are treated as cloudy unless the
/// caller overrides the threshold.
pub const DEFAULT_CLOUD_THRESHOLD: f64 = 0.01;

/// Minimum number of clean frames a sequence must keep to stay usable.
pub const MIN_SEQUENCE_FRAMES: usize = 5;

/// Deterministic per-sample seed derivation: mixes a base seed, a purpose tag
/// and an index so independent streams never collide.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters controlling synthetic gap injection.
#[derive(Debug, Clone)]
pub struct GapSpec {
    /// At most this fraction of the frames of a sequence is masked.
    pub max_masked_frame_ratio: f64,
    /// At least this many frames are masked per sequence.
    pub min_masked_frames: usize,
    pub seed: u64,
}

impl Default for GapSpec {
    fn default() -> Self {
        GapSpec {
            max_masked_frame_ratio: 0.5,
            min_masked_frames: 1,
            seed: 0,
        }
    }
}

impl GapSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_masked_frame_ratio > 0.0 && self.max_masked_frame_ratio <= 1.0) {
            return Err(Error::param("max_masked_frame_ratio", "must be in (0, 1]"));
        }
        if self.min_masked_frames < 1 {
            return Err(Error::param("min_masked_frames", "must be >= 1"));
        }
        Ok(())
    }
}

/// Collection of binary occlusion masks (`1` = occluded) sampled during gap
/// simulation. Sources are real cloud/shadow masks or generated blobs; the
/// pool makes no distinction between cloud and shadow, both are opaque gaps.
#[derive(Debug, Clone)]
pub struct MaskPool {
    masks: Vec<Array2<u8>>,
    source_tags: Vec<String>,
    height: usize,
    width: usize,
}

impl MaskPool {
    pub fn new(height: usize, width: usize) -> Self {
        MaskPool {
            masks: Vec::new(),
            source_tags: Vec::new(),
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self, index: usize) -> &Array2<u8> {
        &self.masks[index]
    }

    pub fn source_tag(&self, index: usize) -> &str {
        &self.source_tags[index]
    }

    pub fn push(&mut self, mask: Array2<u8>, tag: impl Into<String>) -> Result<()> {
        if mask.shape() != [self.height, self.width] {
            return Err(Error::shape(
                "pool mask",
                format!("{}×{}", self.height, self.width),
                format!("{}×{}", mask.shape()[0], mask.shape()[1]),
            ));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::param("pool mask", "must be binary"));
        }
        self.masks.push(mask);
        self.source_tags.push(tag.into());
        Ok(())
    }

    /// Build a pool from every frame of every sample in a dataset, reading
    /// only the mask payloads. Container masks flag *valid* pixels, so they
    /// are inverted here (pool masks flag occlusion).
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let mut pool = MaskPool::new(manifest.height, manifest.width);
        for id in &manifest.samples {
            let record = manifest.load_sample(id)?;
            for t in 0..record.t_len() {
                let frame = record.mask.slice(s![t, 0, .., ..]);
                // Fully valid frames contribute nothing worth occluding with.
                if frame.iter().all(|&v| v == 1) {
                    continue;
                }
                let inverted = frame.mapv(|v| 1 - v);
                pool.push(inverted, format!("sample:{id}:frame{t}"))?;
            }
        }
        Ok(pool)
    }

    /// Fill the pool with `count` generated blobs, coverage drawn uniformly
    /// from `coverage_range`, plus a `full_frame_fraction` share of masks that
    /// occlude the entire frame (standing in for missing acquisitions).
    pub fn generate_blobs(
        height: usize,
        width: usize,
        count: usize,
        coverage_range: (f64, f64),
        full_frame_fraction: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut pool = MaskPool::new(height, width);
        for i in 0..count {
            if rng.gen::<f64>() < full_frame_fraction {
                pool.push(Array2::ones((height, width)), format!("full:{i}"))?;
            } else {
                let coverage = rng.gen_range(coverage_range.0..coverage_range.1);
                let blob = generate_blob_mask(height, width, coverage, rng)?;
                pool.push(blob, format!("blob:{i}"))?;
            }
        }
        Ok(pool)
    }
}

/// Frames chosen for masking and the pool mask applied to each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapPattern {
    /// `(frame index, pool mask index)`, frames ascending.
    pub assignments: Vec<(usize, usize)>,
}

impl GapPattern {
    /// Expand to a dense `(T, 1, H, W)` volume with `1` = gap.
    pub fn to_dense(&self, pool: &MaskPool, t_len: usize) -> Array4<u8> {
        let mut gaps = Array4::zeros((t_len, 1, pool.height(), pool.width()));
        for &(frame, mask_idx) in &self.assignments {
            gaps.slice_mut(s![frame, 0, .., ..])
                .assign(pool.mask(mask_idx));
        }
        gaps
    }
}

/// Pick which frames of a `t_len`-frame sequence to occlude and with which
/// pool mask.
///
/// The number of masked frames `n` is drawn uniformly from
/// `max(1, min_masked_frames) ..= max(min_masked_frames, floor(ratio·T))`,
/// clamped to the sequence length; the minimum dominates when the ratio bound
/// is smaller.
pub fn sample_gap_pattern(
    spec: &GapSpec,
    pool: &MaskPool,
    t_len: usize,
    rng: &mut impl Rng,
) -> Result<GapPattern> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyMaskPool);
    }
    if t_len == 0 {
        return Err(Error::param("t_len", "sequence is empty"));
    }

    let ratio_bound = (spec.max_masked_frame_ratio * t_len as f64).floor() as usize;
    let lo = spec.min_masked_frames.max(1).min(t_len);
    let hi = spec.min_masked_frames.max(ratio_bound).min(t_len).max(lo);
    let n = rng.gen_range(lo..=hi);

    let mut frames: Vec<usize> = index_sample(rng, t_len, n).into_vec();
    frames.sort_unstable();
    let assignments = frames
        .into_iter()
        .map(|f| (f, rng.gen_range(0..pool.len())))
        .collect();
    Ok(GapPattern { assignments })
}

/// Overwrite occluded pixels with the maximum intensity `1` and clear their
/// validity bits, encoding the gap in the image itself.
///
/// Only reconstruct channels are imprinted; auxiliary channels pass through
/// untouched. Pixels outside the gap volume are bit-identical to the input,
/// which also makes the operation idempotent.
pub fn imprint(record: &SampleRecord, gaps: &Array4<u8>) -> Result<SampleRecord> {
    let (t, _, h, w) = (
        record.t_len(),
        record.channels(),
        record.height(),
        record.width(),
    );
    if gaps.shape() != [t, 1, h, w] {
        return Err(Error::shape(
            "gap volume",
            format!("{:?}", [t, 1, h, w]),
            format!("{:?}", gaps.shape()),
        ));
    }
    if gaps.iter().any(|&v| v > 1) {
        return Err(Error::param("gap volume", "must be binary"));
    }

    let mut out = record.clone();
    for ti in 0..t {
        let gap_frame = gaps.slice(s![ti, 0, .., ..]);
        for (c, role) in record.channel_roles.iter().enumerate() {
            if *role != ChannelRole::Reconstruct {
                continue;
            }
            let mut img = out.images.slice_mut(s![ti, c, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    if gap_frame[[y, x]] == 1 {
                        img[[y, x]] = 1.0;
                    }
                }
            }
        }
        let mut mask = out.mask.slice_mut(s![ti, 0, .., ..]);
        for y in 0..h {
            for x in 0..w {
                if gap_frame[[y, x]] == 1 {
                    mask[[y, x]] = 0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimMode {
    /// Longer sequences are randomly cropped to the window length.
    Train,
    /// No random cropping; longer sequences are a caller error here because
    /// they go through sliding-window inference instead.
    Eval,
}

/// A fixed-length record plus the annotation of how many leading frames carry
/// real data; the remaining frames are padding and are excluded from loss and
/// metrics.
#[derive(Debug, Clone)]
pub struct PaddedRecord {
    pub record: SampleRecord,
    pub valid_len: usize,
}

impl PaddedRecord {
    pub fn is_pad(&self, frame: usize) -> bool {
        frame >= self.valid_len
    }
}

/// Force a sequence to exactly `target_len` frames.
///
/// Longer sequences keep a contiguous window (random in train mode); shorter
/// ones get no-data frames appended (all-ones images, all-zeros mask) with
/// days extrapolated at the sequence's median spacing. Extrapolated pad days
/// may exceed day 366; padded records are transient model inputs and are
/// never written back to disk.
pub fn trim_or_pad(
    record: &SampleRecord,
    target_len: usize,
    mode: TrimMode,
    rng: &mut impl Rng,
) -> Result<PaddedRecord> {
    let t = record.t_len();
    if t == 0 {
        return Err(Error::param("record", "sequence is empty"));
    }
    if target_len == 0 {
        return Err(Error::param("target_len", "must be >= 1"));
    }

    if t > target_len {
        let start = match mode {
            TrimMode::Train => rng.gen_range(0..=t - target_len),
            TrimMode::Eval => {
                return Err(Error::param(
                    "target_len",
                    format!(
                        "eval-mode sequence of length {t} exceeds window {target_len}; \
                         use sliding-window inference"
                    ),
                ))
            }
        };
        let end = start + target_len;
        let out = SampleRecord {
            images: record.images.slice(s![start..end, .., .., ..]).to_owned(),
            mask: record.mask.slice(s![start..end, .., .., ..]).to_owned(),
            days: record.days[start..end].to_vec(),
            channel_roles: record.channel_roles.clone(),
            sample_id: record.sample_id.clone(),
        };
        return Ok(PaddedRecord {
            record: out,
            valid_len: target_len,
        });
    }

    if t == target_len {
        return Ok(PaddedRecord {
            record: record.clone(),
            valid_len: t,
        });
    }

    let (c, h, w) = (record.channels(), record.height(), record.width());
    let spacing = median_spacing(&record.days);
    let mut images = Array4::ones((target_len, c, h, w));
    images.slice_mut(s![..t, .., .., ..]).assign(&record.images);
    let mut mask = Array4::zeros((target_len, 1, h, w));
    mask.slice_mut(s![..t, .., .., ..]).assign(&record.mask);
    let mut days = record.days.clone();
    for k in 0..target_len - t {
        days.push(record.days[t - 1] + spacing * (k as u32 + 1));
    }

    Ok(PaddedRecord {
        record: SampleRecord {
            images,
            mask,
            days,
            channel_roles: record.channel_roles.clone(),
            sample_id: record.sample_id.clone(),
        },
        valid_len: t,
    })
}

/// Median day spacing, at least 1. Falls back to the nominal 5-day revisit
/// interval for single-frame sequences.
fn median_spacing(days: &[u32]) -> u32 {
    if days.len() < 2 {
        return 5;
    }
    let mut diffs: Vec<u32> = days.windows(2).map(|w| w[1] - w[0]).collect();
    diffs.sort_unstable();
    diffs[(diffs.len() - 1) / 2].max(1)
}

/// Outcome of [`filter_cloudy_frames`].
#[derive(Debug, Clone)]
pub enum FilterOutcome {
    Kept(SampleRecord),
    /// Fewer than [`MIN_SEQUENCE_FRAMES`] clean frames survived.
    TooShort { remaining: usize },
}

/// Drop every frame that contains at least one pixel whose cloud score
/// exceeds `threshold`; reject the sequence when fewer than five frames
/// survive.
///
/// `cloud_score` is a `(T, 1, H, W)` per-pixel probability (or binary) volume
/// aligned with the record's frames.
pub fn filter_cloudy_frames(
    record: &SampleRecord,
    cloud_score: &Array4<f32>,
    threshold: f64,
) -> Result<FilterOutcome> {
    let (t, h, w) = (record.t_len(), record.height(), record.width());
    if cloud_score.shape() != [t, 1, h, w] {
        return Err(Error::shape(
            "cloud score",
            format!("{:?}", [t, 1, h, w]),
            format!("{:?}", cloud_score.shape()),
        ));
    }

    let keep: Vec<usize> = (0..t)
        .filter(|&ti| {
            cloud_score
                .slice(s![ti, 0, .., ..])
                .iter()
                .all(|&p| f64::from(p) <= threshold)
        })
        .collect();

    if keep.len() < MIN_SEQUENCE_FRAMES {
        return Ok(FilterOutcome::TooShort {
            remaining: keep.len(),
        });
    }
    if keep.len() == t {
        return Ok(FilterOutcome::Kept(record.clone()));
    }

    let c = record.channels();
    let mut images = Array4::zeros((keep.len(), c, h, w));
    let mut mask = Array4::zeros((keep.len(), 1, h, w));
    let mut days = Vec::with_capacity(keep.len());
    for (new_t, &old_t) in keep.iter().enumerate() {
        images
            .slice_mut(s![new_t, .., .., ..])
            .assign(&record.images.slice(s![old_t, .., .., ..]));
        mask.slice_mut(s![new_t, .., .., ..])
            .assign(&record.mask.slice(s![old_t, .., .., ..]));
        days.push(record.days[old_t]);
    }

    Ok(FilterOutcome::Kept(SampleRecord {
        images,
        mask,
        days,
        channel_roles: record.channel_roles.clone(),
        sample_id: record.sample_id.clone(),
    }))
}

/// Grow one connected irregular blob covering `coverage` of an `H×W` frame;
/// the set pixel count equals `round(coverage·H·W)` exactly.
pub fn generate_blob_mask(
    height: usize,
    width: usize,
    coverage: f64,
    rng: &mut impl Rng,
) -> Result<Array2<u8>> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::param("coverage", "must be in (0, 1)"));
    }
    let total = height * width;
    let target = ((coverage * total as f64).round() as usize).clamp(1, total - 1);

    let mut mask = Array2::<u8>::zeros((height, width));
    let mut in_frontier = vec![false; total];
    let mut frontier: Vec<usize> = Vec::new();

    fn push_neighbors(
        idx: usize,
        height: usize,
        width: usize,
        mask: &Array2<u8>,
        frontier: &mut Vec<usize>,
        in_frontier: &mut [bool],
    ) {
        let (y, x) = (idx / width, idx % width);
        let mut try_push = |ny: usize, nx: usize| {
            let nidx = ny * width + nx;
            if mask[[ny, nx]] == 0 && !in_frontier[nidx] {
                in_frontier[nidx] = true;
                frontier.push(nidx);
            }
        };
        if y > 0 {
            try_push(y - 1, x);
        }
        if y + 1 < height {
            try_push(y + 1, x);
        }
        if x > 0 {
            try_push(y, x - 1);
        }
        if x + 1 < width {
            try_push(y, x + 1);
        }
    }

    let seed = rng.gen_range(0..total);
    mask[[seed / width, seed % width]] = 1;
    let mut filled = 1usize;
    push_neighbors(seed, height, width, &mask, &mut frontier, &mut in_frontier);

    while filled < target && !frontier.is_empty() {
        let pick = rng.gen_range(0..frontier.len());
        let idx = frontier.swap_remove(pick);
        in_frontier[idx] = false;
        mask[[idx / width, idx % width]] = 1;
        filled += 1;
        push_neighbors(idx, height, width, &mask, &mut frontier, &mut in_frontier);
    }

    Ok(mask)
}

/// Parameters of the procedural scene generator: a piecewise-constant
/// land-cover segmentation whose segments follow smooth seasonal sinusoids
/// with optional abrupt step events, per-frame global brightness jitter and
/// additive noise.
#[derive(Debug, Clone)]
pub struct SyntheticSceneParams {
    pub segments: usize,
    /// Per-segment seasonal amplitude drawn uniformly from this range.
    pub amplitude_range: (f64, f64),
    /// Per-frame probability of a segment undergoing its (single) abrupt step.
    pub event_probability: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-frame multiplicative brightness factor drawn from `[1-j, 1+j]`.
    pub brightness_jitter: f64,
    pub t_len: usize,
    pub channels: usize,
    /// Extra input-only channels appended after `channels`, tagged auxiliary.
    pub aux_channels: usize,
    pub height: usize,
    pub width: usize,
    /// First acquisition day-of-year drawn uniformly from this range.
    pub first_day_range: (u32, u32),
    /// Day spacing between consecutive frames drawn uniformly from this range.
    pub day_spacing_range: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        SyntheticSceneParams {
            segments: 6,
            amplitude_range: (0.05, 0.25),
            event_probability: 0.05,
            noise_sigma: 0.01,
            brightness_jitter: 0.03,
            t_len: 12,
            channels: 4,
            aux_channels: 0,
            height: 32,
            width: 32,
            first_day_range: (30, 160),
            day_spacing_range: (4, 8),
            seed: 0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::param("segments", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.event_probability) {
            return Err(Error::param("event_probability", "must be in [0, 1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::param("noise_sigma", "must be >= 0"));
        }
        if self.brightness_jitter < 0.0 || self.brightness_jitter >= 1.0 {
            return Err(Error::param("brightness_jitter", "must be in [0, 1)"));
        }
        if self.t_len == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::param("dimensions", "must all be >= 1"));
        }
        if self.amplitude_range.0 < 0.0 || self.amplitude_range.1 < self.amplitude_range.0 {
            return Err(Error::param(
                "amplitude_range",
                "must be non-negative and ordered",
            ));
        }
        if self.day_spacing_range.0 < 1 || self.day_spacing_range.1 < self.day_spacing_range.0 {
            return Err(Error::param("day_spacing_range", "must be ordered and >= 1"));
        }
        if self.first_day_range.0 < 1 || self.first_day_range.1 < self.first_day_range.0 {
            return Err(Error::param("first_day_range", "must be ordered and >= 1"));
        }
        let worst_last_day = self.first_day_range.1 as u64
            + (self.t_len as u64 - 1) * self.day_spacing_range.1 as u64;
        if worst_last_day > 366 {
            return Err(Error::param(
                "first_day_range/day_spacing_range",
                format!("sequence can run past day 366 (worst case {worst_last_day})"),
            ));
        }
        Ok(())
    }
}

/// Generate one clean synthetic scene; fully deterministic given the RNG.
pub fn generate_synthetic_scene(
    params: &SyntheticSceneParams,
    sample_id: &str,
    rng: &mut impl Rng,
) -> Result<SampleRecord> {
    params.validate()?;
    let (t, h, w) = (params.t_len, params.height, params.width);
    let c_total = params.channels + params.aux_channels;

    // Acquisition days.
    let mut days = Vec::with_capacity(t);
    let mut day = rng.gen_range(params.first_day_range.0..=params.first_day_range.1);
    days.push(day);
    for _ in 1..t {
        day += rng.gen_range(params.day_spacing_range.0..=params.day_spacing_range.1);
        days.push(day);
    }

    // Voronoi land-cover segmentation.
    let seeds: Vec<(f64, f64)> = (0..params.segments)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect();
    let mut labels = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (si, &(sy, sx)) in seeds.iter().enumerate() {
                let d = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = si;
                }
            }
            labels[[y, x]] = best;
        }
    }

    // Per-segment dynamics.
    let n_seg = params.segments;
    let mut base = vec![vec![0.0f64; c_total]; n_seg];
    let mut amplitude = vec![vec![0.0f64; c_total]; n_seg];
    let mut phase = vec![0.0f64; n_seg];
    for si in 0..n_seg {
        let amp = rng.gen_range(params.amplitude_range.0..=params.amplitude_range.1);
        phase[si] = rng.gen_range(0.0..365.0);
        for ci in 0..c_total {
            base[si][ci] = rng.gen_range(0.15..0.70);
            amplitude[si][ci] = amp * rng.gen_range(0.5..1.0);
        }
    }

    // At most one abrupt step event per segment.
    let mut event_frame = vec![None::<usize>; n_seg];
    let mut event_delta = vec![vec![0.0f64; c_total]; n_seg];
    for si in 0..n_seg {
        for ti in 1..t {
            if rng.gen::<f64>() < params.event_probability {
                event_frame[si] = Some(ti);
                for ci in 0..c_total {
                    event_delta[si][ci] = rng.gen_range(-0.25..0.25);
                }
                break;
            }
        }
    }

    let brightness: Vec<f64> = (0..t)
        .map(|_| {
            if params.brightness_jitter > 0.0 {
                1.0 + rng.gen_range(-params.brightness_jitter..params.brightness_jitter)
            } else {
                1.0
            }
        })
        .collect();

    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut images = Array4::<f32>::zeros((t, c_total, h, w));
    for ti in 0..t {
        let day_angle = 2.0 * std::f64::consts::PI * days[ti] as f64 / 365.0;
        // Per-segment value for this frame and channel, computed once.
        let mut seg_value = vec![vec![0.0f64; c_total]; n_seg];
        for si in 0..n_seg {
            let season = day_angle - 2.0 * std::f64::consts::PI * phase[si] / 365.0;
            for ci in 0..c_total {
                let mut v = base[si][ci] + amplitude[si][ci] * season.sin();
                if let Some(ev) = event_frame[si] {
                    if ti >= ev {
                        v += event_delta[si][ci];
                    }
                }
                seg_value[si][ci] = v * brightness[ti];
            }
        }
        for ci in 0..c_total {
            let mut plane = images.slice_mut(s![ti, ci, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    let mut v = seg_value[labels[[y, x]]][ci];
                    if let Some(n) = &noise {
                        v += n.sample(rng);
                    }
                    plane[[y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let mut channel_roles = vec![ChannelRole::Reconstruct; params.channels];
    channel_roles.extend(std::iter::repeat(ChannelRole::Auxiliary).take(params.aux_channels));

    Ok(SampleRecord {
        images,
        mask: Array4::ones((t, 1, h, w)),
        days,
        channel_roles,
        sample_id: sample_id.to_string(),
    })
}
