//! Success rate, Pass@N, judge-subset accuracy and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no tasks")]
    Empty,
    #[error("row {row} has {len} rewards, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("row {row}: reward {value} is not 0 or 1")]
    NotBinary { row: usize, value: u8 },
    #[error("row {row}: choice {choice} is outside 1..={len}")]
    ChoiceOutOfRange { row: usize, choice: usize, len: usize },
    #[error("{choices} choices for {rows} rows")]
    ChoiceCount { choices: usize, rows: usize },
}

/// Per-task binary rewards, aligned with candidate-set order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardMatrix {
    pub rows: Vec<Vec<u8>>,
}

impl RewardMatrix {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, MetricsError> {
        let m = RewardMatrix { rows };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<usize, MetricsError> {
        let first = self.rows.first().ok_or(MetricsError::Empty)?;
        let expected = first.len();
        for (row, r) in self.rows.iter().enumerate() {
            if r.len() != expected || r.is_empty() {
                return Err(MetricsError::Ragged {
                    row,
                    len: r.len(),
                    expected,
                });
            }
            if let Some(&value) = r.iter().find(|&&v| v > 1) {
                return Err(MetricsError::NotBinary { row, value });
            }
        }
        Ok(expected)
    }

    pub fn n(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// The first `k` candidates of every row.
    pub fn prefix(&self, k: usize) -> RewardMatrix {
        RewardMatrix {
            rows: self.rows.iter().map(|r| r[..k.min(r.len())].to_vec()).collect(),
        }
    }

    /// Rewards of the 1-based `choices`.
    pub fn chosen(&self, choices: &[usize]) -> Result<Vec<u8>, MetricsError> {
        if choices.len() != self.rows.len() {
            return Err(MetricsError::ChoiceCount {
                choices: choices.len(),
                rows: self.rows.len(),
            });
        }
        self.rows
            .iter()
            .zip(choices)
            .enumerate()
            .map(|(row, (r, &choice))| {
                if choice == 0 || choice > r.len() {
                    Err(MetricsError::ChoiceOutOfRange {
                        row,
                        choice,
                        len: r.len(),
                    })
                } else {
                    Ok(r[choice - 1])
                }
            })
            .collect()
    }
}

pub fn success_rate(chosen: &[u8]) -> Result<f64, MetricsError> {
    if chosen.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(chosen.iter().map(|&r| r as f64).sum::<f64>() / chosen.len() as f64)
}

pub fn pass_at_n(matrix: &RewardMatrix) -> Result<f64, MetricsError> {
    matrix.check()?;
    let hits = matrix.rows.iter().filter(|r| r.contains(&1)).count();
    Ok(hits as f64 / matrix.rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset_size: usize,
    /// `None` when no task has both a correct and an incorrect candidate.
    pub accuracy: Option<f64>,
}

/// Accuracy over tasks with at least one correct and one incorrect
/// candidate. `choices` are 1-based.
pub fn judge_subset_accuracy(matrix: &RewardMatrix, choices: &[usize]) -> Result<SubsetAccuracy, MetricsError> {
    matrix.check()?;
    let chosen = matrix.chosen(choices)?;
    let mut size = 0;
    let mut correct = 0;
    for (r, c) in matrix.rows.iter().zip(&chosen) {
        if r.contains(&1) && r.contains(&0) {
            size += 1;
            correct += *c as usize;
        }
    }
    Ok(SubsetAccuracy {
        subset_size: size,
        accuracy: (size > 0).then(|| correct as f64 / size as f64),
    })
}

pub const DEFAULT_RESAMPLES: usize = 1000;

/// Percentile bootstrap interval of the mean at `level` (e.g. 0.95).
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64, level: f64) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() || resamples == 0 {
        return Err(MetricsError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        assert_eq!(success_rate(&[1, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(success_rate(&[0, 0]).unwrap(), 0.0);
        assert_eq!(success_rate(&[1]).unwrap(), 1.0);
        assert_eq!(success_rate(&[]), Err(MetricsError::Empty));
        let m = RewardMatrix::new(vec![vec![1, 0], vec![0, 0]]).unwrap();
        assert_eq!(pass_at_n(&m).unwrap(), 0.5);
        let m = RewardMatrix::new(vec![vec![1, 0], vec![1, 1], vec![0, 0]]).unwrap();
        let acc = judge_subset_accuracy(&m, &[1, 2, 1]).unwrap();
        assert_eq!(acc.subset_size, 1);
        assert_eq!(acc.accuracy, Some(1.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            RewardMatrix::new(vec![vec![1, 0], vec![1]]),
            Err(MetricsError::Ragged { row: 1, .. })
        ));
        let m = RewardMatrix::new(vec![vec![1, 0]]).unwrap();
        assert!(matches!(
            judge_subset_accuracy(&m, &[3]),
            Err(MetricsError::ChoiceOutOfRange { choice: 3, .. })
        ));
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let v: Vec<f64> = (0..100).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (lo, hi) = bootstrap_ci(&v, 1000, 1, 0.95).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(lo <= mean && mean <= hi);
        assert_eq!(bootstrap_ci(&v, 1000, 1, 0.95).unwrap(), (lo, hi));
    }
}
