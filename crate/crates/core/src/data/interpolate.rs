//! Gap filling for the hourly traffic grid.
//!
//! A missing bucket is filled by the first applicable rule:
//!
//! 1. mean of same-hour-of-day observations at day offsets +-1..7,
//! 2. mean of same-hour-of-day observations at day offsets +-8..14,
//! 3. the segment's overall mean,
//! 4. the global mean.
//!
//! Only in-span offsets participate (windows truncate at the boundaries).
//! Filled buckets keep their imputed flag for audit.

use crate::data::schema::{FilledSpeedTable, SpeedBucket, SpeedTable};
use crate::error::{Error, Result};

pub fn interpolate(speeds: &SpeedTable) -> Result<FilledSpeedTable> {
    let nh = speeds.num_hours;
    let ns = speeds.num_segments;

    let mut global_sum = [0.0; 3];
    let mut global_count = 0usize;
    let mut seg_mean: Vec<Option<[f64; 3]>> = Vec::with_capacity(ns);
    for segment in 0..ns {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for t in 0..nh {
            if let Some(b) = &speeds.buckets[segment * nh + t] {
                let v = [b.avg_speed, b.veh_count, b.occupancy];
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            for (g, s) in global_sum.iter_mut().zip(sum) {
                *g += s;
            }
            global_count += count;
            seg_mean.push(Some(sum.map(|s| s / count as f64)));
        } else {
            seg_mean.push(None);
        }
    }
    if global_count == 0 {
        return Err(Error::Precondition(
            "cannot interpolate: no observed traffic buckets anywhere".into(),
        ));
    }
    let global_mean = global_sum.map(|s| s / global_count as f64);

    let mut buckets = Vec::with_capacity(ns * nh);
    let mut imputed = Vec::with_capacity(ns * nh);
    for segment in 0..ns {
        for t in 0..nh {
            if let Some(b) = &speeds.buckets[segment * nh + t] {
                buckets.push(*b);
                imputed.push(false);
                continue;
            }
            let same_hour_mean = |lo: i64, hi: i64| -> Option<[f64; 3]> {
                let mut sum = [0.0; 3];
                let mut count = 0usize;
                for day in lo..=hi {
                    for signed in [day, -day] {
                        let tt = t as i64 + signed * 24;
                        if tt < 0 || tt >= nh as i64 {
                            continue;
                        }
                        if let Some(b) = &speeds.buckets[segment * nh + tt as usize] {
                            sum[0] += b.avg_speed;
                            sum[1] += b.veh_count;
                            sum[2] += b.occupancy;
                            count += 1;
                        }
                    }
                }
                (count > 0).then(|| sum.map(|s| s / count as f64))
            };
            let fill = same_hour_mean(1, 7)
                .or_else(|| same_hour_mean(8, 14))
                .or(seg_mean[segment])
                .unwrap_or(global_mean);
            buckets.push(SpeedBucket {
                avg_speed: fill[0],
                veh_count: fill[1],
                occupancy: fill[2],
            });
            imputed.push(true);
        }
    }
    Ok(FilledSpeedTable {
        start_hour: speeds.start_hour,
        num_hours: nh,
        num_segments: ns,
        buckets,
        imputed,
    })
}
