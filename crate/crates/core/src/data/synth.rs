//! Synthetic multi-attribute grid series.
//!
//! Each attribute is a Poisson count with rate
//! `base · daily(t) · spatial(region)`. The first `round(shared_frac · C)`
//! attributes share one hotspot map and one daily phase; every other
//! attribute draws its own hotspots, phase and a second harmonic.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::GridSeries;
use crate::error::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub attributes: usize,
    pub timesteps: usize,
    pub seed: u64,
    /// Fraction of attributes in the shared-pattern group.
    pub shared_frac: f64,
    pub interval_minutes: u32,
}

impl SynthSpec {
    pub fn new(rows: usize, cols: usize, attributes: usize, timesteps: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            attributes,
            timesteps,
            seed,
            shared_frac: 0.5,
            interval_minutes: 60,
        }
    }

    pub fn shared_count(&self) -> usize {
        ((self.shared_frac.clamp(0.0, 1.0) * self.attributes as f64).round() as usize)
            .min(self.attributes)
    }
}

struct Hotspot {
    row: f64,
    col: f64,
    width: f64,
    amplitude: f64,
}

fn hotspot_map(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let count = rng.random_range(1..=2);
    let spots: Vec<Hotspot> = (0..count)
        .map(|_| Hotspot {
            row: rng.random_range(0.0..rows as f64),
            col: rng.random_range(0.0..cols as f64),
            width: rng.random_range(0.6..1.5) * (rows.max(cols) as f64 / 4.0).max(0.5),
            amplitude: rng.random_range(1.0..3.0),
        })
        .collect();
    let mut map = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let intensity: f64 = spots
                .iter()
                .map(|s| {
                    let d2 = (r as f64 - s.row).powi(2) + (c as f64 - s.col).powi(2);
                    s.amplitude * (-d2 / (2.0 * s.width * s.width)).exp()
                })
                .sum();
            map.push(0.15 + intensity);
        }
    }
    map
}

struct Profile {
    base: f64,
    phase: f64,
    amplitude: f64,
    harmonic: f64,
    spatial: Vec<f64>,
}

pub fn synthesize(spec: &SynthSpec) -> Result<GridSeries, DataError> {
    if spec.rows == 0 || spec.cols == 0 || spec.attributes == 0 {
        return Err(DataError::Invalid(
            "synthetic grid needs rows, cols and attributes".into(),
        ));
    }
    if spec.interval_minutes == 0 {
        return Err(DataError::Invalid("interval must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols, c) = (spec.rows, spec.cols, spec.attributes);
    let shared = spec.shared_count();
    let shared_map = hotspot_map(rows, cols, &mut rng);
    let shared_phase = rng.random_range(0.0..TAU);

    let profiles: Vec<Profile> = (0..c)
        .map(|a| {
            let base = rng.random_range(4.0..12.0);
            if a < shared {
                Profile {
                    base,
                    phase: shared_phase + rng.random_range(-0.2..0.2),
                    amplitude: 0.6,
                    harmonic: 0.0,
                    spatial: shared_map.clone(),
                }
            } else {
                Profile {
                    base,
                    phase: rng.random_range(0.0..TAU),
                    amplitude: rng.random_range(0.4..0.8),
                    harmonic: rng.random_range(0.2..0.5),
                    spatial: hotspot_map(rows, cols, &mut rng),
                }
            }
        })
        .collect();

    let period = (1440.0 / spec.interval_minutes as f64).max(2.0);
    let n = rows * cols;
    let mut values = Vec::with_capacity(spec.timesteps * n * c);
    for t in 0..spec.timesteps {
        let angle = TAU * t as f64 / period;
        for r in 0..n {
            for p in &profiles {
                let daily = 1.0
                    + p.amplitude * (angle + p.phase).sin()
                    + p.harmonic * (2.0 * angle + p.phase).sin();
                let rate = p.base * daily.max(0.05) * p.spatial[r];
                let draw = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                values.push(draw);
            }
        }
    }
    let names = (0..c)
        .map(|a| {
            if a < shared {
                format!("shared_{a}")
            } else {
                format!("distinct_{a}")
            }
        })
        .collect();
    let mut series = GridSeries::new(rows, cols, spec.interval_minutes, names, values)?;
    series.start_step = 0;
    Ok(series)
}
