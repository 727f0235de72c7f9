//! Non-learned temporal imputation baselines, each operating independently on
//! every spatial location and channel: copy the last valid observation, copy
//! the temporally closest one, or interpolate linearly over acquisition days.
//!
//! Boundary rule: gaps before the first or after the last valid observation
//! take the nearest valid value, so every baseline is total on any sequence
//! with at least one valid observation per pixel.

use ndarray::Array4;

use crate::datamodel::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Last,
    Closest,
    Linear,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Last => "last",
            BaselineMethod::Closest => "closest",
            BaselineMethod::Linear => "linear",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "last" => Some(BaselineMethod::Last),
            "closest" => Some(BaselineMethod::Closest),
            "linear" => Some(BaselineMethod::Linear),
            _ => None,
        }
    }
}

/// Baseline imputation result over the reconstruct channels.
pub struct BaselineOutput {
    /// `(T, C_rec, H, W)` volume; valid pixels are bit-identical to the input.
    pub volume: Array4<f64>,
    /// Pixels with no valid observation anywhere in the sequence. Their
    /// time-lines are filled with the imprint value `1.0` and flagged here.
    pub unobserved_pixels: Vec<(usize, usize)>,
}

pub fn impute_last(record: &SampleRecord) -> Result<BaselineOutput> {
    impute_baseline(BaselineMethod::Last, record)
}

pub fn impute_closest(record: &SampleRecord) -> Result<BaselineOutput> {
    impute_baseline(BaselineMethod::Closest, record)
}

pub fn impute_linear(record: &SampleRecord) -> Result<BaselineOutput> {
    impute_baseline(BaselineMethod::Linear, record)
}

pub fn impute_baseline(method: BaselineMethod, record: &SampleRecord) -> Result<BaselineOutput> {
    let (t, h, w) = (record.t_len(), record.height(), record.width());
    if record.days.len() != t {
        return Err(Error::shape(
            "days",
            t.to_string(),
            record.days.len().to_string(),
        ));
    }
    let channels = record.reconstruct_indices();
    let mut volume = Array4::zeros((t, channels.len(), h, w));
    let mut unobserved = Vec::new();

    let mut valid_frames: Vec<usize> = Vec::with_capacity(t);
    for y in 0..h {
        for x in 0..w {
            valid_frames.clear();
            for ti in 0..t {
                if record.mask[[ti, 0, y, x]] == 1 {
                    valid_frames.push(ti);
                }
            }
            if valid_frames.is_empty() {
                unobserved.push((y, x));
                for ti in 0..t {
                    for ci in 0..channels.len() {
                        volume[[ti, ci, y, x]] = 1.0;
                    }
                }
                continue;
            }

            for ti in 0..t {
                if record.mask[[ti, 0, y, x]] == 1 {
                    for (ci, &src) in channels.iter().enumerate() {
                        volume[[ti, ci, y, x]] = f64::from(record.images[[ti, src, y, x]]);
                    }
                    continue;
                }
                // Bracketing valid observations around the gap frame.
                let next_pos = valid_frames.partition_point(|&v| v < ti);
                let prev = next_pos.checked_sub(1).map(|i| valid_frames[i]);
                let next = valid_frames.get(next_pos).copied();

                for (ci, &src) in channels.iter().enumerate() {
                    let value_at = |frame: usize| f64::from(record.images[[frame, src, y, x]]);
                    let imputed = match (method, prev, next) {
                        (BaselineMethod::Last, Some(p), _) => value_at(p),
                        (BaselineMethod::Last, None, Some(n)) => value_at(n),
                        (BaselineMethod::Closest, Some(p), Some(n)) => {
                            let dp = record.days[ti] - record.days[p];
                            let dn = record.days[n] - record.days[ti];
                            // Ties go to the earlier observation.
                            if dp <= dn {
                                value_at(p)
                            } else {
                                value_at(n)
                            }
                        }
                        (BaselineMethod::Closest, Some(p), None) => value_at(p),
                        (BaselineMethod::Closest, None, Some(n)) => value_at(n),
                        (BaselineMethod::Linear, Some(p), Some(n)) => {
                            let t0 = record.days[p] as f64;
                            let t1 = record.days[n] as f64;
                            let tt = record.days[ti] as f64;
                            let v0 = value_at(p);
                            let v1 = value_at(n);
                            v0 + (tt - t0) / (t1 - t0) * (v1 - v0)
                        }
                        (BaselineMethod::Linear, Some(p), None) => value_at(p),
                        (BaselineMethod::Linear, None, Some(n)) => value_at(n),
                        (_, None, None) => unreachable!("handled by unobserved check"),
                    };
                    volume[[ti, ci, y, x]] = imputed;
                }
            }
        }
    }

    Ok(BaselineOutput {
        volume,
        unobserved_pixels: unobserved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ChannelRole;
    use ndarray::Array4 as A4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single-pixel record with the given per-frame values and validity.
    fn pixel_record(values: &[f32], valid: &[u8], days: &[u32]) -> SampleRecord {
        let t = values.len();
        let mut images = A4::zeros((t, 1, 1, 1));
        let mut mask = A4::zeros((t, 1, 1, 1));
        for i in 0..t {
            images[[i, 0, 0, 0]] = values[i];
            mask[[i, 0, 0, 0]] = valid[i];
        }
        SampleRecord {
            images,
            mask,
            days: days.to_vec(),
            channel_roles: vec![ChannelRole::Reconstruct],
            sample_id: "px".to_string(),
        }
    }

    #[test]
    fn last_carries_forward_and_handles_leading_gaps() {
        let r = pixel_record(&[0.2, 1.0, 1.0], &[1, 0, 0], &[1, 2, 3]);
        let out = impute_last(&r).unwrap();
        let vals: Vec<f64> = (0..3).map(|t| out.volume[[t, 0, 0, 0]]).collect();
        assert_eq!(vals, vec![0.2f32 as f64; 3]);

        let r = pixel_record(&[1.0, 0.4, 1.0], &[0, 1, 0], &[1, 2, 3]);
        let out = impute_last(&r).unwrap();
        let vals: Vec<f64> = (0..3).map(|t| out.volume[[t, 0, 0, 0]]).collect();
        assert_eq!(vals, vec![0.4f32 as f64; 3]);
    }

    #[test]
    fn closest_uses_day_distance_with_earlier_tie() {
        // Gap at day 10 between valid days 0* and 15 -> value from day 15.
        // (Day-of-year fields start at 1, so use days 1, 11, 16.)
        let r = pixel_record(&[0.2, 1.0, 0.8], &[1, 0, 1], &[1, 11, 16]);
        let out = impute_closest(&r).unwrap();
        assert_eq!(out.volume[[1, 0, 0, 0]], 0.8f32 as f64);

        // Equidistant (day 6 between days 1 and 11) -> earlier observation.
        let r = pixel_record(&[0.2, 1.0, 0.8], &[1, 0, 1], &[1, 6, 11]);
        let out = impute_closest(&r).unwrap();
        assert_eq!(out.volume[[1, 0, 0, 0]], 0.2f32 as f64);
    }

    #[test]
    fn linear_interpolates_in_days() {
        // v(day 1) = 0.2, v(day 11) = 0.4, gap at day 6 -> midpoint 0.3.
        let r = pixel_record(&[0.2, 1.0, 0.4], &[1, 0, 1], &[1, 6, 11]);
        let out = impute_linear(&r).unwrap();
        assert!((out.volume[[1, 0, 0, 0]] - 0.3).abs() < 1e-7);

        // v(day 1) = 0.0, v(day 16) = 0.3, gap at day 6 -> (5/15)*0.3 = 0.1.
        let r = pixel_record(&[0.0, 1.0, 0.3], &[1, 0, 1], &[1, 6, 16]);
        let out = impute_linear(&r).unwrap();
        assert!((out.volume[[1, 0, 0, 0]] - 0.1).abs() < 1e-7);

        // Leading gap takes the first valid value.
        let r = pixel_record(&[1.0, 0.5, 0.7], &[0, 1, 1], &[1, 6, 11]);
        let out = impute_linear(&r).unwrap();
        assert_eq!(out.volume[[0, 0, 0, 0]], 0.5f32 as f64);
    }

    #[test]
    fn gap_free_sequence_is_identity_for_all_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 6;
        let images = A4::from_shape_simple_fn((t, 2, 4, 4), || rng.gen::<f32>());
        let record = SampleRecord {
            images: images.clone(),
            mask: A4::ones((t, 1, 4, 4)),
            days: (0..t as u32).map(|i| 1 + 5 * i).collect(),
            channel_roles: vec![ChannelRole::Reconstruct; 2],
            sample_id: "clean".to_string(),
        };
        for method in [
            BaselineMethod::Last,
            BaselineMethod::Closest,
            BaselineMethod::Linear,
        ] {
            let out = impute_baseline(method, &record).unwrap();
            for (got, want) in out.volume.iter().zip(images.iter()) {
                assert_eq!(*got, f64::from(*want));
            }
        }
    }

    #[test]
    fn fully_unobserved_pixel_is_flagged() {
        let r = pixel_record(&[1.0, 1.0], &[0, 0], &[1, 6]);
        let out = impute_last(&r).unwrap();
        assert_eq!(out.unobserved_pixels, vec![(0, 0)]);
        assert_eq!(out.volume[[0, 0, 0, 0]], 1.0);
    }

    /// Independent per-pixel scan oracle used by the randomized comparison.
    fn oracle(
        method: BaselineMethod,
        values: &[f32],
        valid: &[u8],
        days: &[u32],
    ) -> Vec<f64> {
        let t = values.len();
        let valid_ts: Vec<usize> = (0..t).filter(|&i| valid[i] == 1).collect();
        (0..t)
            .map(|ti| {
                if valid[ti] == 1 {
                    return f64::from(values[ti]);
                }
                if valid_ts.is_empty() {
                    return 1.0;
                }
                let prev = valid_ts.iter().rev().find(|&&v| v < ti).copied();
                let next = valid_ts.iter().find(|&&v| v > ti).copied();
                match method {
                    BaselineMethod::Last => {
                        f64::from(values[prev.unwrap_or_else(|| next.unwrap())])
                    }
                    BaselineMethod::Closest => match (prev, next) {
                        (Some(p), Some(n)) => {
                            if days[ti] - days[p] <= days[n] - days[ti] {
                                f64::from(values[p])
                            } else {
                                f64::from(values[n])
                            }
                        }
                        (Some(p), None) => f64::from(values[p]),
                        (None, Some(n)) => f64::from(values[n]),
                        (None, None) => unreachable!(),
                    },
                    BaselineMethod::Linear => match (prev, next) {
                        (Some(p), Some(n)) => {
                            let alpha =
                                (days[ti] - days[p]) as f64 / (days[n] - days[p]) as f64;
                            f64::from(values[p]) * (1.0 - alpha) + f64::from(values[n]) * alpha
                        }
                        (Some(p), None) => f64::from(values[p]),
                        (None, Some(n)) => f64::from(values[n]),
                        (None, None) => unreachable!(),
                    },
                }
            })
            .collect()
    }

    #[test]
    fn random_sequences_match_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = rng.gen_range(2..=12);
            let values: Vec<f32> = (0..t).map(|_| rng.gen()).collect();
            let valid: Vec<u8> = loop {
                let v: Vec<u8> = (0..t).map(|_| u8::from(rng.gen_bool(0.6))).collect();
                if v.iter().any(|&b| b == 1) {
                    break v;
                }
            };
            let mut days = Vec::with_capacity(t);
            let mut day = rng.gen_range(1..20u32);
            for _ in 0..t {
                days.push(day);
                day += rng.gen_range(1..9u32);
            }
            let record = pixel_record(&values, &valid, &days);
            for method in [
                BaselineMethod::Last,
                BaselineMethod::Closest,
                BaselineMethod::Linear,
            ] {
                let got = impute_baseline(method, &record).unwrap();
                let want = oracle(method, &values, &valid, &days);
                for ti in 0..t {
                    let g = got.volume[[ti, 0, 0, 0]];
                    let w = want[ti];
                    match method {
                        BaselineMethod::Linear => {
                            assert!((g - w).abs() <= 1e-12, "linear {g} vs {w}")
                        }
                        _ => assert_eq!(g.to_bits(), w.to_bits(), "{method:?} copies"),
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Valid pixels are untouched and outputs stay inside the per-pixel
        /// hull of observed values.
        #[test]
        fn outputs_stay_in_observed_hull(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.gen_range(3..=8);
            let values: Vec<f32> = (0..t).map(|_| rng.gen()).collect();
            let valid: Vec<u8> = loop {
                let v: Vec<u8> = (0..t).map(|_| u8::from(rng.gen_bool(0.5))).collect();
                if v.iter().any(|&b| b == 1) {
                    break v;
                }
            };
            let days: Vec<u32> = (0..t as u32).map(|i| 1 + 7 * i).collect();
            let record = pixel_record(&values, &valid, &days);

            let observed: Vec<f64> = (0..t)
                .filter(|&i| valid[i] == 1)
                .map(|i| f64::from(values[i]))
                .collect();
            let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

            for method in [BaselineMethod::Last, BaselineMethod::Closest, BaselineMethod::Linear] {
                let out = impute_baseline(method, &record).unwrap();
                for ti in 0..t {
                    let v = out.volume[[ti, 0, 0, 0]];
                    if valid[ti] == 1 {
                        prop_assert_eq!(v.to_bits(), f64::from(values[ti]).to_bits());
                    } else {
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                        if method != BaselineMethod::Linear {
                            prop_assert!(observed.iter().any(|&o| o.to_bits() == v.to_bits()));
                        }
                    }
                }
            }
        }
    }
}
