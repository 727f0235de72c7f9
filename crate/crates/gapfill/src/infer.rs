//! Full-length sequence imputation: one shot for sequences within the model
//! window, sliding-window decomposition and reassembly for longer ones.
//!
//! Overlapping windows are not averaged; every frame is taken from exactly
//! one window (the one whose center is nearest), which keeps each imputed
//! frame attributable to a single attention volume.

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::SampleRecord;
use crate::error::{Error, Result};
use crate::gapsim::{trim_or_pad, TrimMode};
use crate::model::{AttentionVolume, TemporalUnet};

/// Decomposition of a `full_len`-frame sequence into model windows plus the
/// assignment of every frame to exactly one window containing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    /// `[start, end)` windows, in order.
    pub windows: Vec<(usize, usize)>,
    /// Source window index per frame.
    pub assignment: Vec<usize>,
}

/// Plan the windows for a sequence of `full_len` frames and a model window of
/// `window` frames.
///
/// Sequences that fit are processed in one shot. Longer sequences get windows
/// of exactly `window` frames with stride `ceil(window/2)`, the last window
/// right-aligned to the sequence end; each frame is assigned to the window
/// with the nearest center, ties going to the earlier window.
pub fn plan_windows(full_len: usize, window: usize) -> Result<WindowPlan> {
    if full_len == 0 {
        return Err(Error::param("full_len", "must be >= 1"));
    }
    if window < 2 {
        return Err(Error::param("window", "must be >= 2"));
    }

    if full_len <= window {
        return Ok(WindowPlan {
            windows: vec![(0, full_len)],
            assignment: vec![0; full_len],
        });
    }

    let stride = window.div_ceil(2);
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window < full_len {
        windows.push((start, start + window));
        start += stride;
    }
    windows.push((full_len - window, full_len));

    let centers: Vec<f64> = windows
        .iter()
        .map(|&(a, b)| (a + b - 1) as f64 / 2.0)
        .collect();
    let assignment = (0..full_len)
        .map(|frame| {
            let mut best = usize::MAX;
            let mut best_dist = f64::INFINITY;
            for (wi, &(a, b)) in windows.iter().enumerate() {
                if frame < a || frame >= b {
                    continue;
                }
                let dist = (frame as f64 - centers[wi]).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best = wi;
                }
            }
            best
        })
        .collect();

    Ok(WindowPlan {
        windows,
        assignment,
    })
}

/// Imputation of one full-length sequence.
pub struct ImputedSequence {
    /// `(T_i, C_out, H, W)` imputed volume.
    pub volume: Array4<f64>,
    /// Attention scores of each window's forward pass (absent for models
    /// without a temporal encoder).
    pub window_attention: Vec<Option<AttentionVolume>>,
    pub plan: WindowPlan,
}

/// Impute a full (imprinted) sequence with the model, windowing as needed.
/// Sequences shorter than the window are padded for the forward pass and the
/// pad outputs discarded.
pub fn impute_sequence(
    model: &TemporalUnet,
    record: &SampleRecord,
    window: usize,
) -> Result<ImputedSequence> {
    let full_len = record.t_len();
    let plan = plan_windows(full_len, window)?;

    let (h, w) = (record.height(), record.width());
    let c_out = model.config.out_channels;
    let mut volume = Array4::zeros((full_len, c_out, h, w));
    let mut window_attention = Vec::with_capacity(plan.windows.len());

    for (wi, &(a, b)) in plan.windows.iter().enumerate() {
        let piece = record.slice_frames(a, b);
        // Only the single-window case can be shorter than the model window;
        // eval-mode padding draws nothing from the RNG.
        let input = if b - a < window {
            trim_or_pad(
                &piece,
                window,
                TrimMode::Eval,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?
            .record
        } else {
            piece
        };
        let pass = model.forward(&input)?;
        for frame in a..b {
            if plan.assignment[frame] == wi {
                volume
                    .slice_mut(s![frame, .., .., ..])
                    .assign(&pass.output.slice(s![frame - a, .., .., ..]));
            }
        }
        window_attention.push(pass.attention);
    }

    Ok(ImputedSequence {
        volume,
        window_attention,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gapsim::{generate_synthetic_scene, imprint, SyntheticSceneParams};
    use crate::model::ModelConfig;
    use ndarray::Array4 as A4;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn one_shot_when_sequence_fits() {
        let plan = plan_windows(10, 10).unwrap();
        assert_eq!(plan.windows, vec![(0, 10)]);
        assert_eq!(plan.assignment, vec![0; 10]);
    }

    #[test]
    fn fifteen_frames_split_at_the_center_rule() {
        // Windows [0,10) and [5,15). Centers 4.5 and 9.5; frame 7 is
        // equidistant and ties to the earlier window, so frames 0..=7 come
        // from the first window and 8..=14 from the second.
        let plan = plan_windows(15, 10).unwrap();
        assert_eq!(plan.windows, vec![(0, 10), (5, 15)]);
        let expected: Vec<usize> = (0..15).map(|f| usize::from(f > 7)).collect();
        assert_eq!(plan.assignment, expected);
    }

    #[test]
    fn thirty_frames_make_five_windows() {
        let plan = plan_windows(30, 10).unwrap();
        assert_eq!(
            plan.windows,
            vec![(0, 10), (5, 15), (10, 20), (15, 25), (20, 30)]
        );
        // Full coverage and containment.
        for (frame, &wi) in plan.assignment.iter().enumerate() {
            let (a, b) = plan.windows[wi];
            assert!(frame >= a && frame < b);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_frame_is_assigned_to_a_window_containing_it(
            full_len in 1usize..60,
            window in 2usize..16,
        ) {
            let plan = plan_windows(full_len, window).unwrap();
            prop_assert_eq!(plan.assignment.len(), full_len);
            // Union of windows covers [0, full_len).
            let mut covered = vec![false; full_len];
            for &(a, b) in &plan.windows {
                prop_assert!(b <= full_len);
                prop_assert!(b - a <= window);
                for c in covered.iter_mut().take(b).skip(a) {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            for (frame, &wi) in plan.assignment.iter().enumerate() {
                let (a, b) = plan.windows[wi];
                prop_assert!(frame >= a && frame < b);
            }
        }
    }

    fn tiny_model() -> TemporalUnet {
        let cfg = ModelConfig {
            in_channels: 2,
            out_channels: 2,
            base_channels: 4,
            bottleneck_channels: 8,
            levels: 2,
            heads: 2,
            key_dim: 2,
            norm_groups: 2,
            ..ModelConfig::default()
        };
        TemporalUnet::new(cfg, 5).unwrap()
    }

    fn gapped_scene(t_len: usize, seed: u64) -> SampleRecord {
        let params = SyntheticSceneParams {
            segments: 3,
            t_len,
            channels: 2,
            height: 8,
            width: 8,
            day_spacing_range: (3, 5),
            ..SyntheticSceneParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let clean = generate_synthetic_scene(&params, "scene", &mut rng).unwrap();
        let mut gaps = A4::<u8>::zeros((t_len, 1, 8, 8));
        gaps.slice_mut(s![1, 0, ..4, ..]).fill(1);
        imprint(&clean, &gaps).unwrap()
    }

    #[test]
    fn short_sequence_equals_direct_forward() {
        let model = tiny_model();
        let record = gapped_scene(6, 1);
        let out = impute_sequence(&model, &record, 6).unwrap();
        let direct = model.forward(&record).unwrap();
        assert_eq!(out.volume, direct.output);
        assert_eq!(out.plan.windows, vec![(0, 6)]);
    }

    #[test]
    fn padded_short_sequence_discards_pad_outputs() {
        let model = tiny_model();
        let record = gapped_scene(4, 2);
        let out = impute_sequence(&model, &record, 6).unwrap();
        assert_eq!(out.volume.dim(), (4, 2, 8, 8));
    }

    #[test]
    fn long_sequence_output_has_full_length() {
        let model = tiny_model();
        let record = gapped_scene(15, 3);
        let out = impute_sequence(&model, &record, 10).unwrap();
        assert_eq!(out.volume.dim(), (15, 2, 8, 8));
        assert_eq!(out.window_attention.len(), 2);
        // Frames assigned to the first window must match its direct forward.
        let first = model.forward(&record.slice_frames(0, 10)).unwrap();
        for frame in 0..8 {
            assert_eq!(
                out.volume.slice(s![frame, .., .., ..]),
                first.output.slice(s![frame, .., .., ..])
            );
        }
    }
}
