//! Independent reference implementations used as test oracles. Nothing here
//! calls the engine's loss or gradient code.

#![allow(dead_code)]

use fedblocks_core::data::ClientShard;
use fedblocks_core::problems::Dataset;
use nalgebra::{DMatrix, SymmetricEigen};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sig(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `log(1 + e^{-m})` without overflow.
fn log1pexp_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Loss {
    Logistic,
    Sigmoid,
}

/// Loss of `x` on the samples `idx`, plus `reg/2 ‖x‖²`.
pub fn shard_loss(kind: Loss, data: &Dataset, idx: &[usize], reg: f64, x: &[f64]) -> f64 {
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let m = data.label(i) * dot(data.row(i), x);
            match kind {
                Loss::Logistic => log1pexp_neg(m),
                Loss::Sigmoid => sig(-m),
            }
        })
        .sum();
    total / idx.len() as f64 + 0.5 * reg * dot(x, x)
}

pub fn shard_grad(kind: Loss, data: &Dataset, idx: &[usize], reg: f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for &i in idx {
        let a = data.row(i);
        let b = data.label(i);
        let m = b * dot(a, x);
        let s = match kind {
            Loss::Logistic => -sig(-m),
            Loss::Sigmoid => -sig(-m) * (1.0 - sig(-m)),
        } * b;
        for (gj, aj) in g.iter_mut().zip(a) {
            *gj += s * aj;
        }
    }
    let n = idx.len() as f64;
    g.iter_mut().zip(x).for_each(|(gj, xj)| *gj = *gj / n + reg * xj);
    g
}

/// `(1/M) Σ_i f_i(x)`.
pub fn fed_loss(data: &Dataset, shards: &[ClientShard], reg: f64, x: &[f64]) -> f64 {
    shards
        .iter()
        .map(|s| shard_loss(Loss::Logistic, data, &s.indices, reg, x))
        .sum::<f64>()
        / shards.len() as f64
}

pub fn fed_grad(data: &Dataset, shards: &[ClientShard], reg: f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for s in shards {
        let gi = shard_grad(Loss::Logistic, data, &s.indices, reg, x);
        g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
    }
    let m = shards.len() as f64;
    g.iter_mut().for_each(|a| *a /= m);
    g
}

/// Largest eigenvalue of the symmetric matrix, by dense eigendecomposition.
pub fn top_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.max()
}

/// Smoothness of the federated logistic objective:
/// `λ_max((1/M) Σ_i A_iᵀA_i / (4 n_i)) + reg`.
pub fn fed_smoothness(data: &Dataset, shards: &[ClientShard], reg: f64) -> f64 {
    let d = data.dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for s in shards {
        let w = 1.0 / (4.0 * s.indices.len() as f64 * shards.len() as f64);
        for &i in &s.indices {
            let a = data.row(i);
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] += w * a[r] * a[c];
                }
            }
        }
    }
    top_eigenvalue(h) + reg
}

/// Minimum of the federated logistic objective by `steps` of gradient
/// descent with step `1/L`.
pub fn fed_optimum(data: &Dataset, shards: &[ClientShard], reg: f64, steps: usize) -> (Vec<f64>, f64) {
    let l = fed_smoothness(data, shards, reg);
    let mut x = vec![0.0; data.dim()];
    for _ in 0..steps {
        let g = fed_grad(data, shards, reg, &x);
        x.iter_mut().zip(&g).for_each(|(a, b)| *a -= b / l);
    }
    let f = fed_loss(data, shards, reg, &x);
    (x, f)
}

/// `T` steps of full-batch gradient descent on one shard.
pub fn local_gd(data: &Dataset, idx: &[usize], reg: f64, x0: &[f64], eta: f64, steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let g = shard_grad(Loss::Logistic, data, idx, reg, &x);
        x.iter_mut().zip(&g).for_each(|(a, b)| *a -= eta * b);
    }
    x
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        // Average of the middle pair; inf stays inf.
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            a.max(b)
        } else {
            0.5 * (a + b)
        }
    }
}
