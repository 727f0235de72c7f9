//! Evaluation metrics with the imputed-domain restriction.
//!
//! Pixel metrics (MAE, RMSE, SAM, PSNR) run over `Ω`: the spatio-temporal
//! locations that are masked in the input *and* have a cloud-free reference.
//! SSIM runs over the frames that contain masked pixels (`T_m`), using global
//! per-image statistics, not local windows. Valid-pixel preservation is
//! measured by MAE and SSIM restricted to `V`, the unmasked locations; the
//! non-learned baselines score exactly 0 / 1 there by construction.
//!
//! Aggregation order: metrics are computed per sequence and then averaged
//! over sequences; PSNR is averaged over per-sequence PSNRs, not recomputed
//! from pooled errors.

use ndarray::{Array3, Array4};
use serde::Serialize;

use crate::error::{Error, Result};

/// SSIM stabilizer on the mean term, `(0.01)^2` on the unit dynamic range.
pub const SSIM_EPS: f64 = 0.01 * 0.01;
/// SSIM stabilizer on the variance term, `(0.03)^2`.
pub const SSIM_EPS_PRIME: f64 = 0.03 * 0.03;

/// Index sets of one sequence evaluation.
#[derive(Debug, Clone)]
pub struct EvalDomain {
    /// Imputed pixels with usable reference: input mask 0 ∧ reference valid.
    pub omega: Array3<bool>,
    /// Valid (observed) pixels with usable reference.
    pub valid: Array3<bool>,
    /// Frames containing at least one masked pixel.
    pub frames_masked: Vec<usize>,
    /// Frames containing at least one valid pixel.
    pub frames_valid: Vec<usize>,
}

impl EvalDomain {
    /// Build the domain from the gapped input mask (`1` = observed) and the
    /// optional original cloud validity of the reference (`1` = cloud-free).
    /// Synthetic references are clean by construction, so `None` means every
    /// reference pixel is usable.
    pub fn build(input_mask: &Array4<u8>, reference_ok: Option<&Array4<u8>>) -> Result<Self> {
        let shape = input_mask.dim();
        if let Some(r) = reference_ok {
            if r.dim() != shape {
                return Err(Error::shape(
                    "reference validity",
                    format!("{shape:?}"),
                    format!("{:?}", r.dim()),
                ));
            }
        }
        let (t, _, h, w) = shape;
        let mut omega = Array3::default((t, h, w));
        let mut valid = Array3::default((t, h, w));
        let mut frames_masked = Vec::new();
        let mut frames_valid = Vec::new();
        for ti in 0..t {
            let mut any_masked = false;
            let mut any_valid = false;
            for y in 0..h {
                for x in 0..w {
                    let observed = input_mask[[ti, 0, y, x]] == 1;
                    let ref_ok = reference_ok.map_or(true, |r| r[[ti, 0, y, x]] == 1);
                    if observed {
                        any_valid = true;
                        valid[[ti, y, x]] = ref_ok;
                    } else {
                        any_masked = true;
                        omega[[ti, y, x]] = ref_ok;
                    }
                }
            }
            if any_masked {
                frames_masked.push(ti);
            }
            if any_valid {
                frames_valid.push(ti);
            }
        }
        Ok(EvalDomain {
            omega,
            valid,
            frames_masked,
            frames_valid,
        })
    }

    pub fn omega_count(&self) -> usize {
        self.omega.iter().filter(|&&b| b).count()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

fn check_shapes(pred: &Array4<f64>, target: &Array4<f64>, domain: &Array3<bool>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            "metric operands",
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
        ));
    }
    let (t, _, h, w) = pred.dim();
    if domain.dim() != (t, h, w) {
        return Err(Error::shape(
            "metric domain",
            format!("{:?}", (t, h, w)),
            format!("{:?}", domain.dim()),
        ));
    }
    Ok(())
}

/// Mean absolute error over the domain, averaged across channels.
pub fn mae(pred: &Array4<f64>, target: &Array4<f64>, domain: &Array3<bool>) -> Result<f64> {
    check_shapes(pred, target, domain)?;
    let (t, c, h, w) = pred.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if domain[[ti, y, x]] {
                    count += 1;
                    for ci in 0..c {
                        sum += (pred[[ti, ci, y, x]] - target[[ti, ci, y, x]]).abs();
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::param("domain", "empty evaluation domain"));
    }
    Ok(sum / (c * count) as f64)
}

/// Root mean square error over the domain, averaged across channels.
pub fn rmse(pred: &Array4<f64>, target: &Array4<f64>, domain: &Array3<bool>) -> Result<f64> {
    check_shapes(pred, target, domain)?;
    let (t, c, h, w) = pred.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if domain[[ti, y, x]] {
                    count += 1;
                    for ci in 0..c {
                        let d = pred[[ti, ci, y, x]] - target[[ti, ci, y, x]];
                        sum += d * d;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::param("domain", "empty evaluation domain"));
    }
    Ok((sum / (c * count) as f64).sqrt())
}

/// Spectral angle mapper in degrees: the mean angle between predicted and
/// reference spectral vectors over the domain.
pub struct SamOutcome {
    pub degrees: f64,
    /// Pixels skipped because one of the spectral vectors had zero norm.
    pub skipped_zero_norm: usize,
}

pub fn sam(pred: &Array4<f64>, target: &Array4<f64>, domain: &Array3<bool>) -> Result<SamOutcome> {
    check_shapes(pred, target, domain)?;
    let (t, c, h, w) = pred.dim();
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if !domain[[ti, y, x]] {
                    continue;
                }
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for ci in 0..c {
                    let a = pred[[ti, ci, y, x]];
                    let b = target[[ti, ci, y, x]];
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                if na == 0.0 || nb == 0.0 {
                    skipped += 1;
                    continue;
                }
                let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
                sum += cos.acos();
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::param("domain", "no usable spectra in domain"));
    }
    Ok(SamOutcome {
        degrees: (sum / used as f64).to_degrees(),
        skipped_zero_norm: skipped,
    })
}

/// Peak signal-to-noise ratio from an RMSE on the unit dynamic range;
/// `RMSE = 0` maps to the infinity sentinel.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (1.0 / rmse).log10()
    }
}

pub fn psnr(pred: &Array4<f64>, target: &Array4<f64>, domain: &Array3<bool>) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(pred, target, domain)?))
}

/// Structural similarity from global per-image statistics (not windowed),
/// computed per channel and averaged over channels, then over `frames`.
/// An optional pixel filter restricts the statistics (used for the
/// valid-pixel preservation column); frames with no pixels left are skipped.
pub fn ssim_over(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    frames: &[usize],
    pixel_filter: Option<&Array3<bool>>,
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            "metric operands",
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
        ));
    }
    if frames.is_empty() {
        return Err(Error::param("frames", "empty frame set"));
    }
    let (_, c, h, w) = pred.dim();
    let mut frame_sum = 0.0;
    let mut frame_count = 0usize;
    for &ti in frames {
        let mut channel_sum = 0.0;
        let mut n_px = 0usize;
        for ci in 0..c {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if let Some(f) = pixel_filter {
                        if !f[[ti, y, x]] {
                            continue;
                        }
                    }
                    let a = pred[[ti, ci, y, x]];
                    let b = target[[ti, ci, y, x]];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                    n += 1;
                }
            }
            if n == 0 {
                break;
            }
            n_px = n;
            let nf = n as f64;
            let mx = sx / nf;
            let my = sy / nf;
            let vx = (sxx / nf - mx * mx).max(0.0);
            let vy = (syy / nf - my * my).max(0.0);
            let cov = sxy / nf - mx * my;
            channel_sum += (2.0 * mx * my + SSIM_EPS) * (2.0 * cov + SSIM_EPS_PRIME)
                / ((mx * mx + my * my + SSIM_EPS) * (vx + vy + SSIM_EPS_PRIME));
        }
        if n_px == 0 {
            continue;
        }
        frame_sum += channel_sum / c as f64;
        frame_count += 1;
    }
    if frame_count == 0 {
        return Err(Error::param("frames", "no frames with usable pixels"));
    }
    Ok(frame_sum / frame_count as f64)
}

/// SSIM over the frames containing masked pixels, full-image statistics.
pub fn ssim(pred: &Array4<f64>, target: &Array4<f64>, frames: &[usize]) -> Result<f64> {
    ssim_over(pred, target, frames, None)
}

/// All metrics of one sequence.
#[derive(Debug, Clone, Serialize)]
pub struct SequenceEval {
    pub mae: f64,
    pub rmse: f64,
    pub sam_deg: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Valid-pixel preservation: MAE over `V`.
    pub mae_valid: f64,
    /// Valid-pixel preservation: SSIM restricted to valid pixels.
    pub ssim_valid: f64,
    pub omega_count: usize,
    pub valid_count: usize,
    pub sam_skipped: usize,
}

/// Outcome of evaluating one sequence; sequences whose `Ω` is empty are
/// excluded from aggregation and reported as such.
pub enum SequenceOutcome {
    Evaluated(SequenceEval),
    EmptyOmega,
}

/// Evaluate one imputed sequence against its clean reference, following the
/// restriction protocol: pixel metrics over `Ω`, SSIM over `T_m`, and the
/// valid-pixel preservation pair over `V`.
pub fn evaluate_sequence(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    input_mask: &Array4<u8>,
    reference_ok: Option<&Array4<u8>>,
) -> Result<SequenceOutcome> {
    let domain = EvalDomain::build(input_mask, reference_ok)?;
    if domain.omega_count() == 0 {
        return Ok(SequenceOutcome::EmptyOmega);
    }

    let mae_v = if domain.valid_count() > 0 {
        mae(pred, target, &domain.valid)?
    } else {
        0.0
    };
    let ssim_v = if domain.frames_valid.is_empty() {
        1.0
    } else {
        ssim_over(pred, target, &domain.frames_valid, Some(&domain.valid))?
    };

    let sam_out = sam(pred, target, &domain.omega)?;
    let rmse_val = rmse(pred, target, &domain.omega)?;

    Ok(SequenceOutcome::Evaluated(SequenceEval {
        mae: mae(pred, target, &domain.omega)?,
        rmse: rmse_val,
        sam_deg: sam_out.degrees,
        psnr_db: psnr_from_rmse(rmse_val),
        ssim: ssim(pred, target, &domain.frames_masked)?,
        mae_valid: mae_v,
        ssim_valid: ssim_v,
        omega_count: domain.omega_count(),
        valid_count: domain.valid_count(),
        sam_skipped: sam_out.skipped_zero_norm,
    }))
}

/// Dataset-level aggregate: the mean of per-sequence metrics.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateEval {
    pub mae: f64,
    pub rmse: f64,
    pub sam_deg: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae_valid: f64,
    pub ssim_valid: f64,
    pub sequences: usize,
    pub excluded: usize,
}

/// Accumulates per-sequence rows of one (method, split) combination.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub rows: Vec<(String, SequenceEval)>,
    /// Sample ids excluded because their `Ω` was empty.
    pub excluded: Vec<String>,
}

impl EvalReport {
    pub fn new(method: &str, split: &str) -> Self {
        EvalReport {
            method: method.to_string(),
            split: split.to_string(),
            rows: Vec::new(),
            excluded: Vec::new(),
        }
    }

    pub fn push(&mut self, sample_id: &str, outcome: SequenceOutcome) {
        match outcome {
            SequenceOutcome::Evaluated(eval) => self.rows.push((sample_id.to_string(), eval)),
            SequenceOutcome::EmptyOmega => self.excluded.push(sample_id.to_string()),
        }
    }

    pub fn aggregate(&self) -> Option<AggregateEval> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = |f: &dyn Fn(&SequenceEval) -> f64| -> f64 {
            self.rows.iter().map(|(_, e)| f(e)).sum::<f64>() / n
        };
        Some(AggregateEval {
            mae: sum(&|e| e.mae),
            rmse: sum(&|e| e.rmse),
            sam_deg: sum(&|e| e.sam_deg),
            psnr_db: sum(&|e| e.psnr_db),
            ssim: sum(&|e| e.ssim),
            mae_valid: sum(&|e| e.mae_valid),
            ssim_valid: sum(&|e| e.ssim_valid),
            sequences: self.rows.len(),
            excluded: self.excluded.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4 as A4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        A4::from_shape_simple_fn(dims, || rng.gen_range(0.0..1.0))
    }

    fn random_domain(seed: u64, t: usize, h: usize, w: usize) -> Array3<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let d = Array3::from_shape_simple_fn((t, h, w), || rng.gen_bool(0.4));
            if d.iter().any(|&b| b) {
                return d;
            }
        }
    }

    #[test]
    fn identical_volumes_score_perfectly() {
        let v = random_volume(1, (3, 2, 4, 4));
        let d = random_domain(2, 3, 4, 4);
        assert_eq!(mae(&v, &v, &d).unwrap(), 0.0);
        assert_eq!(rmse(&v, &v, &d).unwrap(), 0.0);
        assert_eq!(psnr(&v, &v, &d).unwrap(), f64::INFINITY);
        assert_abs_diff_eq!(sam(&v, &v, &d).unwrap().degrees, 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(ssim(&v, &v, &[0, 1, 2]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset_gives_exact_mae_rmse() {
        let v = random_volume(3, (3, 2, 4, 4));
        let shifted = v.mapv(|x| x + 0.02);
        let d = random_domain(4, 3, 4, 4);
        assert_abs_diff_eq!(mae(&shifted, &v, &d).unwrap(), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(rmse(&shifted, &v, &d).unwrap(), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn sam_is_scale_invariant_and_orthogonality_is_90_degrees() {
        let v = random_volume(5, (2, 3, 2, 2));
        let scaled = v.mapv(|x| 3.7 * x);
        let d = Array3::from_elem((2, 2, 2), true);
        assert_abs_diff_eq!(sam(&scaled, &v, &d).unwrap().degrees, 0.0, epsilon = 1e-5);

        let mut a = A4::zeros((1, 4, 1, 1));
        let mut b = A4::zeros((1, 4, 1, 1));
        a[[0, 0, 0, 0]] = 1.0;
        b[[0, 1, 0, 0]] = 1.0;
        let d1 = Array3::from_elem((1, 1, 1), true);
        assert_abs_diff_eq!(sam(&a, &b, &d1).unwrap().degrees, 90.0, epsilon = 1e-10);
    }

    #[test]
    fn psnr_frozen_values() {
        assert_abs_diff_eq!(psnr_from_rmse(0.01), 40.0, epsilon = 1e-10);
        assert_abs_diff_eq!(psnr_from_rmse(1.0), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(psnr_from_rmse(0.1), 20.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_images_of_equal_value_have_unit_ssim() {
        let a = A4::from_elem((1, 1, 4, 4), 0.6);
        assert_abs_diff_eq!(ssim(&a, &a.clone(), &[0]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_norm_spectra_are_skipped_and_counted() {
        let mut pred = random_volume(6, (1, 3, 2, 2));
        let target = random_volume(7, (1, 3, 2, 2));
        for c in 0..3 {
            pred[[0, c, 0, 0]] = 0.0;
        }
        let d = Array3::from_elem((1, 2, 2), true);
        let out = sam(&pred, &target, &d).unwrap();
        assert_eq!(out.skipped_zero_norm, 1);
    }

    // ----- independent nested-loop oracles -----

    fn oracle_mae(p: &Array4<f64>, t: &Array4<f64>, d: &Array3<bool>) -> f64 {
        let (tn, c, h, w) = p.dim();
        let mut acc = 0.0;
        let mut n = 0;
        for ci in 0..c {
            for ti in 0..tn {
                for y in 0..h {
                    for x in 0..w {
                        if d[[ti, y, x]] {
                            acc += (p[[ti, ci, y, x]] - t[[ti, ci, y, x]]).abs();
                            n += 1;
                        }
                    }
                }
            }
        }
        acc / n as f64
    }

    fn oracle_rmse(p: &Array4<f64>, t: &Array4<f64>, d: &Array3<bool>) -> f64 {
        let (tn, c, h, w) = p.dim();
        let mut acc = 0.0;
        let mut n = 0;
        for ci in 0..c {
            for ti in 0..tn {
                for y in 0..h {
                    for x in 0..w {
                        if d[[ti, y, x]] {
                            acc += (p[[ti, ci, y, x]] - t[[ti, ci, y, x]]).powi(2);
                            n += 1;
                        }
                    }
                }
            }
        }
        (acc / n as f64).sqrt()
    }

    fn oracle_sam_deg(p: &Array4<f64>, t: &Array4<f64>, d: &Array3<bool>) -> f64 {
        let (tn, c, h, w) = p.dim();
        let mut acc = 0.0;
        let mut n = 0;
        for ti in 0..tn {
            for y in 0..h {
                for x in 0..w {
                    if d[[ti, y, x]] {
                        let a: Vec<f64> = (0..c).map(|ci| p[[ti, ci, y, x]]).collect();
                        let b: Vec<f64> = (0..c).map(|ci| t[[ti, ci, y, x]]).collect();
                        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        acc += (dot / (na * nb)).clamp(-1.0, 1.0).acos();
                        n += 1;
                    }
                }
            }
        }
        (acc / n as f64) * 180.0 / std::f64::consts::PI
    }

    fn oracle_ssim(p: &Array4<f64>, t: &Array4<f64>, frames: &[usize]) -> f64 {
        let (_, c, h, w) = p.dim();
        let n = (h * w) as f64;
        let mut total = 0.0;
        for &ti in frames {
            let mut per_channel = 0.0;
            for ci in 0..c {
                let xs: Vec<f64> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| p[[ti, ci, y, x]])
                    .collect();
                let ys: Vec<f64> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| t[[ti, ci, y, x]])
                    .collect();
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(a, b)| (a - mx) * (b - my))
                    .sum::<f64>()
                    / n;
                per_channel += (2.0 * mx * my + SSIM_EPS) * (2.0 * cov + SSIM_EPS_PRIME)
                    / ((mx * mx + my * my + SSIM_EPS) * (vx + vy + SSIM_EPS_PRIME));
            }
            total += per_channel / c as f64;
        }
        total / frames.len() as f64
    }

    #[test]
    fn metrics_match_oracles_on_random_volumes() {
        for seed in 0..50u64 {
            let pred = random_volume(seed * 3 + 1, (3, 2, 4, 4));
            let target = random_volume(seed * 3 + 2, (3, 2, 4, 4));
            let d = random_domain(seed * 3 + 3, 3, 4, 4);
            assert_abs_diff_eq!(
                mae(&pred, &target, &d).unwrap(),
                oracle_mae(&pred, &target, &d),
                epsilon = 1e-6
            );
            assert_abs_diff_eq!(
                rmse(&pred, &target, &d).unwrap(),
                oracle_rmse(&pred, &target, &d),
                epsilon = 1e-6
            );
            assert_abs_diff_eq!(
                sam(&pred, &target, &d).unwrap().degrees,
                oracle_sam_deg(&pred, &target, &d),
                epsilon = 1e-6
            );
            assert_abs_diff_eq!(
                ssim(&pred, &target, &[0, 1, 2]).unwrap(),
                oracle_ssim(&pred, &target, &[0, 1, 2]),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn evaluate_sequence_splits_domains() {
        // Frame 0 fully masked, frame 1 untouched: valid-pixel metrics must
        // score the identity part perfectly for a baseline-style prediction.
        let target = random_volume(20, (2, 2, 4, 4));
        let mut pred = target.clone();
        // Imputed values differ on frame 0.
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    pred[[0, c, y, x]] += 0.1;
                }
            }
        }
        let mut mask = A4::<u8>::ones((2, 1, 4, 4));
        mask.slice_mut(ndarray::s![0, 0, .., ..]).fill(0);

        match evaluate_sequence(&pred, &target, &mask, None).unwrap() {
            SequenceOutcome::Evaluated(eval) => {
                assert_abs_diff_eq!(eval.mae, 0.1, epsilon = 1e-9);
                assert_eq!(eval.mae_valid, 0.0);
                assert_abs_diff_eq!(eval.ssim_valid, 1.0, epsilon = 1e-12);
                assert_eq!(eval.omega_count, 16);
                assert_eq!(eval.valid_count, 16);
            }
            SequenceOutcome::EmptyOmega => panic!("omega should be non-empty"),
        }
    }

    #[test]
    fn gapless_sequence_is_excluded() {
        let target = random_volume(21, (2, 2, 4, 4));
        let mask = A4::<u8>::ones((2, 1, 4, 4));
        match evaluate_sequence(&target, &target, &mask, None).unwrap() {
            SequenceOutcome::EmptyOmega => {}
            SequenceOutcome::Evaluated(_) => panic!("expected exclusion"),
        }
    }

    #[test]
    fn cloudy_reference_pixels_leave_omega() {
        let target = random_volume(22, (1, 1, 2, 2));
        let mut mask = A4::<u8>::ones((1, 1, 2, 2));
        mask[[0, 0, 0, 0]] = 0;
        mask[[0, 0, 0, 1]] = 0;
        let mut ref_ok = A4::<u8>::ones((1, 1, 2, 2));
        ref_ok[[0, 0, 0, 1]] = 0; // masked but reference cloudy -> not in omega
        let domain = EvalDomain::build(&mask, Some(&ref_ok)).unwrap();
        assert!(domain.omega[[0, 0, 0]]);
        assert!(!domain.omega[[0, 0, 1]]);
        assert_eq!(domain.omega_count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// MAE ≤ RMSE (Jensen), PSNR strictly decreasing in RMSE, SSIM symmetric.
        #[test]
        fn metric_interrelations(seed in 0u64..500) {
            let pred = random_volume(seed * 7 + 1, (3, 2, 4, 4));
            let target = random_volume(seed * 7 + 2, (3, 2, 4, 4));
            let d = random_domain(seed * 7 + 3, 3, 4, 4);

            let mae_v = mae(&pred, &target, &d).unwrap();
            let rmse_v = rmse(&pred, &target, &d).unwrap();
            prop_assert!(mae_v <= rmse_v + 1e-12);

            let p1 = psnr_from_rmse(rmse_v);
            let p2 = psnr_from_rmse(rmse_v * 1.5);
            prop_assert!(p1 > p2);

            let s1 = ssim(&pred, &target, &[0, 1, 2]).unwrap();
            let s2 = ssim(&target, &pred, &[0, 1, 2]).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}
