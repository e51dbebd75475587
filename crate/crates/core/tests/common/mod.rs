//! Shared test helpers: random tuples, objective lists and a Jacobi
//! eigen-solver oracle.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sare_core::{l2_normalize, Kernel, LossSpec, NegativeMode};

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v).unwrap().into_values()
}

pub fn random_tuple(
    rng: &mut ChaCha8Rng,
    d: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let q = unit(rng, d);
    let p = unit(rng, d);
    let negs = (0..n).map(|_| unit(rng, d)).collect();
    (q, p, negs)
}

/// Every objective configuration: triplet, contrastive and each SARE
/// kernel in both negative modes.
pub fn all_specs() -> Vec<LossSpec> {
    let mut specs = vec![LossSpec::triplet(), LossSpec::contrastive()];
    for k in Kernel::ALL {
        for m in [NegativeMode::Independent, NegativeMode::Joint] {
            specs.push(LossSpec::sare(k, m));
        }
    }
    specs
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; returns
/// eigenvalues and eigenvectors as columns of `v`.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (apk, aqk) = (*x, *y);
                    *x = c * apk - s * aqk;
                    *y = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}
