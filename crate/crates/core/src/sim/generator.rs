use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::entity::{Timestamp, NANOS_PER_SEC};

/// Closed-form metric value generators. Times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Generator {
    Constant {
        value: f64,
    },
    /// `start + rate * (t - entity_start)`, a monotone counter.
    LinearCounter {
        rate: f64,
        #[serde(default)]
        start: f64,
    },
    /// `amplitude * sin(2*pi*t/period) + offset` on the global clock.
    Sinusoid {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        offset: f64,
    },
    Step {
        before: f64,
        after: f64,
        at: f64,
    },
    /// Holds the value of the latest point at or before `t`; the first
    /// point's value before that.
    Piecewise {
        points: Vec<(f64, f64)>,
    },
    /// Deterministic noise in `[low, high)` keyed by seed, entity, metric
    /// and instant.
    UniformNoise {
        low: f64,
        high: f64,
    },
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` that depends only on its inputs.
pub fn stable_unit(seed: u64, entity: &str, metric: &str, t: Timestamp) -> f64 {
    let h = splitmix64(
        seed ^ fnv1a(entity.as_bytes()) ^ fnv1a(metric.as_bytes()).rotate_left(17) ^ (t as u64).rotate_left(41),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Generator {
    pub fn value(
        &self,
        t: Timestamp,
        entity_start: Timestamp,
        seed: u64,
        entity: &str,
        metric: &str,
    ) -> f64 {
        let secs = t as f64 / NANOS_PER_SEC as f64;
        match self {
            Generator::Constant { value } => *value,
            Generator::LinearCounter { rate, start } => {
                start + rate * ((t - entity_start) as f64 / NANOS_PER_SEC as f64)
            }
            Generator::Sinusoid {
                amplitude,
                period,
                offset,
            } => amplitude * (2.0 * PI * secs / period).sin() + offset,
            Generator::Step { before, after, at } => {
                if secs >= *at {
                    *after
                } else {
                    *before
                }
            }
            Generator::Piecewise { points } => points
                .iter()
                .take_while(|(pt, _)| (pt * NANOS_PER_SEC as f64).round() as i64 <= t)
                .last()
                .or(points.first())
                .map_or(0.0, |(_, v)| *v),
            Generator::UniformNoise { low, high } => {
                low + (high - low) * stable_unit(seed, entity, metric, t)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Generator::Constant { value } => value.is_finite(),
            Generator::LinearCounter { rate, start } => rate.is_finite() && start.is_finite(),
            Generator::Sinusoid {
                amplitude,
                period,
                offset,
            } => amplitude.is_finite() && offset.is_finite() && period.is_finite() && *period != 0.0,
            Generator::Step { before, after, at } => {
                before.is_finite() && after.is_finite() && at.is_finite()
            }
            Generator::Piecewise { points } => {
                !points.is_empty()
                    && points.iter().all(|(t, v)| t.is_finite() && v.is_finite())
                    && points.windows(2).all(|w| w[0].0 <= w[1].0)
            }
            Generator::UniformNoise { low, high } => low.is_finite() && high.is_finite() && low <= high,
        }
    }
}
