//! Piecewise-smooth synthetic tasks.
//!
//! The input cube `[−1, 1]^d` is split into Voronoi cells around random
//! centroids; each cell has its own map `x ↦ A tanh(B x + c)`. Regression
//! targets are the map plus Gaussian noise. Classification labels are the
//! argmax of the (noisy) map, stored one-hot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{TaskConfig, TaskKind};
use crate::autodiff::Tensor;
use crate::error::Result;

/// Width of the hidden layer of each region's target map.
const MAP_HIDDEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n×d`
    pub inputs: Tensor,
    /// `n×d_out`; one-hot rows for classification.
    pub targets: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
    pub d_out: usize,
}

struct RegionMap {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl RegionMap {
    fn eval(&self, x: &[f64], d_out: usize) -> Vec<f64> {
        let d = x.len();
        let hidden: Vec<f64> = (0..MAP_HIDDEN)
            .map(|j| {
                let z: f64 = self.b[j * d..(j + 1) * d].iter().zip(x).map(|(p, q)| p * q).sum();
                (z + self.c[j]).tanh()
            })
            .collect();
        (0..d_out)
            .map(|k| {
                self.a[k * MAP_HIDDEN..(k + 1) * MAP_HIDDEN]
                    .iter()
                    .zip(&hidden)
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect()
    }
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if dist(c) < dist(&centroids[best]) {
            best = i;
        }
    }
    best
}

/// Generates train and eval splits from `rng`. Identical generator state
/// gives bit-identical data.
pub fn gen_synthetic(task: &TaskConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticData> {
    let d_out = match task.kind {
        TaskKind::Regression => d,
        TaskKind::Classification => task.n_classes,
    };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..task.regions)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let b_scale = 2.0 / (d as f64).sqrt();
    let a_scale = 1.0 / (MAP_HIDDEN as f64).sqrt();
    let maps: Vec<RegionMap> = (0..task.regions)
        .map(|_| RegionMap {
            b: (0..MAP_HIDDEN * d).map(|_| b_scale * unit.sample(rng)).collect(),
            c: (0..MAP_HIDDEN).map(|_| unit.sample(rng)).collect(),
            a: (0..d_out * MAP_HIDDEN).map(|_| a_scale * unit.sample(rng)).collect(),
        })
        .collect();

    let mut split = |n: usize| -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y = maps[nearest(&centroids, &x)].eval(&x, d_out);
            for v in &mut y {
                *v += task.noise_std * unit.sample(rng);
            }
            match task.kind {
                TaskKind::Regression => targets.extend(y),
                TaskKind::Classification => {
                    let class = crate::routing::argmax(&y);
                    targets.extend((0..d_out).map(|k| if k == class { 1.0 } else { 0.0 }));
                }
            }
            inputs.extend(x);
        }
        Ok(Dataset {
            inputs: Tensor::matrix(n, d, inputs)?,
            targets: Tensor::matrix(n, d_out, targets)?,
        })
    };
    let train = split(task.n_train)?;
    let eval = split(task.n_eval)?;
    Ok(SyntheticData { train, eval, d_out })
}
