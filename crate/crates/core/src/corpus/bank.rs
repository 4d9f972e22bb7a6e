//! Phoneme inventory with paired visemes and mel templates.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{LOG_FLOOR, MEL_BINS};
use crate::error::{invalid, Result};
use crate::seed::{self, Rng};

pub const SILENCE: usize = 0;
pub const MIN_VISEME_SEPARATION: f64 = 0.5;
pub const MIN_MEL_SEPARATION: f64 = 2.0;
const MAX_JAW_OPENING: f64 = 0.3;
const MAX_TRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSpec {
    pub id: usize,
    /// Targets for the mouth channels followed by a jaw opening angle.
    pub viseme: Vec<f64>,
    pub mel_template: Vec<f64>,
    pub unit_id: usize,
}

impl PhonemeSpec {
    pub fn jaw_opening(&self) -> f64 {
        *self.viseme.last().expect("viseme carries a jaw entry")
    }

    pub fn mouth_targets(&self) -> &[f64] {
        &self.viseme[..self.viseme.len() - 1]
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Smooth spectral envelope: a level plus a few Gaussian bumps across bins.
fn random_envelope(r: &mut Rng) -> Vec<f64> {
    let level = r.random_range(-3.0..0.0);
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                r.random_range(0.0..MEL_BINS as f64),
                r.random_range(4.0..12.0),
                r.random_range(-4.0..4.0),
            )
        })
        .collect();
    (0..MEL_BINS)
        .map(|j| {
            let v = bumps.iter().fold(level, |acc, (c, w, a)| {
                acc + a * (-(j as f64 - c).powi(2) / (2.0 * w * w)).exp()
            });
            round_f32(v.clamp(LOG_FLOOR + 1.0, 4.0))
        })
        .collect()
}

/// `k` phonemes; phoneme 0 is silence (closed mouth, floor mel). Visemes and
/// templates are drawn by rejection until every pair is separated.
pub fn make_phoneme_bank(k: usize, n_units: usize, mouth_dims: usize, seed: u64) -> Result<Vec<PhonemeSpec>> {
    if k < 2 || k > n_units {
        return Err(invalid!("phoneme count {k} must lie in [2, n_units = {n_units}]"));
    }
    if mouth_dims == 0 {
        return Err(invalid!("visemes need at least one mouth channel"));
    }
    let mut r = seed::rng(seed);
    let mut bank = vec![PhonemeSpec {
        id: SILENCE,
        viseme: vec![0.0; mouth_dims + 1],
        mel_template: vec![LOG_FLOOR; MEL_BINS],
        unit_id: SILENCE,
    }];
    let mut tries = 0;
    while bank.len() < k {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(invalid!("could not draw {k} separated phonemes"));
        }
        let mut viseme: Vec<f64> = (0..mouth_dims)
            .map(|_| round_f32(StandardNormal.sample(&mut r)))
            .collect();
        viseme.push(round_f32(r.random_range(0.05..MAX_JAW_OPENING)));
        let mel_template = random_envelope(&mut r);
        let ok = bank.iter().all(|p| {
            dist(&p.viseme, &viseme) >= MIN_VISEME_SEPARATION
                && dist(&p.mel_template, &mel_template) >= MIN_MEL_SEPARATION
        });
        if ok {
            let id = bank.len();
            bank.push(PhonemeSpec {
                id,
                viseme,
                mel_template,
                unit_id: id,
            });
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_is_deterministic_and_separated() {
        let a = make_phoneme_bank(8, 8, 6, 42).unwrap();
        assert_eq!(a, make_phoneme_bank(8, 8, 6, 42).unwrap());
        for i in 0..8 {
            for j in 0..i {
                assert!(dist(&a[i].viseme, &a[j].viseme) >= MIN_VISEME_SEPARATION);
                assert!(dist(&a[i].mel_template, &a[j].mel_template) >= MIN_MEL_SEPARATION);
            }
        }
        let mut units: Vec<usize> = a.iter().map(|p| p.unit_id).collect();
        units.dedup();
        assert_eq!(units.len(), 8);
    }

    #[test]
    fn silence_is_closed_and_on_the_floor() {
        let a = make_phoneme_bank(4, 8, 6, 1).unwrap();
        assert!(a[SILENCE].mel_template.iter().all(|v| *v == LOG_FLOOR));
        assert!(a[SILENCE].viseme.iter().all(|v| *v == 0.0));
        assert!(a[1..].iter().all(|p| p.jaw_opening() > 0.0));
    }

    #[test]
    fn out_of_range_sizes_are_rejected() {
        assert!(make_phoneme_bank(1, 8, 6, 0).is_err());
        assert!(make_phoneme_bank(9, 8, 6, 0).is_err());
    }
}
