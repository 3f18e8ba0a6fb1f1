use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Share of samples used for training; the rest is the validation set.
pub const TRAIN_FRACTION: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Two unit-variance blobs centred at (2, 2) and (-2, -2).
    TwoGaussians,
    /// Uniform points in [-1, 1]², labelled by the sign of x·y.
    XorGrid,
    /// Two interleaved noisy spirals.
    Spirals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub samples: usize,
    pub seed: u64,
}

/// Two-class, two-feature classification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Array2<f64>,
    pub val_y: Vec<usize>,
}

impl SyntheticTask {
    pub fn features(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn classes(&self) -> usize {
        2
    }
}

/// Balanced, shuffled dataset with an 85/15 train/validation split. Fewer
/// than 40 samples are raised to 40.
pub fn synthetic_task(spec: &TaskSpec) -> SyntheticTask {
    let n = spec.samples.max(40);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n / 2);
        let p = match spec.task {
            TaskKind::TwoGaussians => {
                let sign = if class == 0 { 1.0 } else { -1.0 };
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                [2.0 * sign + zx, 2.0 * sign + zy]
            }
            TaskKind::XorGrid => loop {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                let label = usize::from(x * y < 0.0);
                if label == class && x.abs() > 1e-3 && y.abs() > 1e-3 {
                    break [x, y];
                }
            },
            TaskKind::Spirals => {
                let t: f64 = rng.random_range(0.0..1.0);
                let r = 0.1 + 0.9 * t;
                let angle = 3.0 * PI * t + class as f64 * PI;
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                [r * angle.cos() + 0.02 * zx, r * angle.sin() + 0.02 * zy]
            }
        };
        points.push((p, class));
    }
    points.shuffle(&mut rng);
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    let to_arrays = |slice: &[([f64; 2], usize)]| {
        let x = Array2::from_shape_fn((slice.len(), 2), |(i, j)| slice[i].0[j]);
        let y = slice.iter().map(|p| p.1).collect();
        (x, y)
    };
    let (train_x, train_y) = to_arrays(&points[..n_train]);
    let (val_x, val_y) = to_arrays(&points[n_train..]);
    SyntheticTask {
        spec: *spec,
        train_x,
        train_y,
        val_x,
        val_y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskKind, samples: usize, seed: u64) -> TaskSpec {
        TaskSpec { task, samples, seed }
    }

    #[test]
    fn balance_and_split() {
        for kind in [TaskKind::TwoGaussians, TaskKind::XorGrid, TaskKind::Spirals] {
            let t = synthetic_task(&spec(kind, 1000, 3));
            assert_eq!(t.train_x.nrows(), 850);
            assert_eq!(t.val_x.nrows(), 150);
            let ones = t.train_y.iter().chain(&t.val_y).filter(|c| **c == 1).count();
            assert_eq!(ones, 500);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [TaskKind::TwoGaussians, TaskKind::XorGrid, TaskKind::Spirals] {
            let a = synthetic_task(&spec(kind, 200, 11));
            let b = synthetic_task(&spec(kind, 200, 11));
            let bits = |x: &Array2<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.train_x), bits(&b.train_x));
            assert_eq!(bits(&a.val_x), bits(&b.val_x));
            assert_eq!(a.train_y, b.train_y);
            assert_ne!(bits(&a.train_x), bits(&synthetic_task(&spec(kind, 200, 12)).train_x));
        }
    }

    #[test]
    fn xor_labels_follow_quadrants() {
        let t = synthetic_task(&spec(TaskKind::XorGrid, 400, 1));
        for (row, y) in t.train_x.rows().into_iter().zip(&t.train_y) {
            assert_eq!(*y, usize::from(row[0] * row[1] < 0.0));
        }
    }
}
