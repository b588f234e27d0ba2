use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    BoundedRandomWalk,
    FixedSequence,
}

/// How a simulated sensor produces values. Values are kept on a grid of
/// tenths so rendering with one decimal never rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGenerator {
    pub kind: GeneratorKind,
    #[serde(default)]
    pub min: f64,
    #[serde(default)]
    pub max: f64,
    #[serde(default)]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    /// Values replayed in a loop by `fixed_sequence`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("min {min} exceeds max {max}")]
    EmptyRange { min: f64, max: f64 },
    #[error("{0} is not finite or not a multiple of 0.1")]
    OffGrid(f64),
    #[error("fixed sequence is empty")]
    EmptySequence,
}

fn tenths(x: f64) -> Result<i64, GeneratorError> {
    let t = (x * 10.0).round();
    if !x.is_finite() || (t - x * 10.0).abs() > 1e-6 || t.abs() > 1e15 {
        return Err(GeneratorError::OffGrid(x));
    }
    Ok(t as i64)
}

fn render(t: i64) -> String {
    let sign = if t < 0 { "-" } else { "" };
    format!("{sign}{}.{}", t.unsigned_abs() / 10, t.unsigned_abs() % 10)
}

impl SensorGenerator {
    pub fn random_walk(min: f64, max: f64, step: f64, seed: u64) -> Self {
        SensorGenerator { kind: GeneratorKind::BoundedRandomWalk, min, max, step, seed, sequence: Vec::new() }
    }

    pub fn fixed(sequence: Vec<f64>) -> Self {
        SensorGenerator { kind: GeneratorKind::FixedSequence, min: 0.0, max: 0.0, step: 0.0, seed: 0, sequence }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        self.start().map(|_| ())
    }

    pub fn start(&self) -> Result<GeneratorState, GeneratorError> {
        match self.kind {
            GeneratorKind::BoundedRandomWalk => {
                let (lo, hi, step) = (tenths(self.min)?, tenths(self.max)?, tenths(self.step)?.abs());
                if lo > hi {
                    return Err(GeneratorError::EmptyRange { min: self.min, max: self.max });
                }
                let mid = if step == 0 { lo } else { lo + (hi - lo) / 2 / step * step };
                Ok(GeneratorState::Walk { lo, hi, step, at: mid, rng: ChaCha8Rng::seed_from_u64(self.seed) })
            }
            GeneratorKind::FixedSequence => {
                if self.sequence.is_empty() {
                    return Err(GeneratorError::EmptySequence);
                }
                let values = self.sequence.iter().map(|&v| tenths(v)).collect::<Result<Vec<_>, _>>()?;
                Ok(GeneratorState::Fixed { values, next: 0 })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum GeneratorState {
    Walk { lo: i64, hi: i64, step: i64, at: i64, rng: ChaCha8Rng },
    Fixed { values: Vec<i64>, next: usize },
}

impl GeneratorState {
    /// Value for the next tick, rendered with one decimal.
    pub fn next_value(&mut self) -> String {
        match self {
            GeneratorState::Walk { lo, hi, step, at, rng } => {
                let current = *at;
                let delta = rng.random_range(-1i64..=1) * *step;
                *at = (*at + delta).clamp(*lo, *hi);
                render(current)
            }
            GeneratorState::Fixed { values, next } => {
                let v = values[*next % values.len()];
                *next += 1;
                render(v)
            }
        }
    }
}

/// Value of `g` at tick `t`, replayed from the seed.
pub fn generate_reading(g: &SensorGenerator, t: u64) -> Result<String, GeneratorError> {
    let mut state = g.start()?;
    for _ in 0..t {
        state.next_value();
    }
    Ok(state.next_value())
}
