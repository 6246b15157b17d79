//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written with explicit loops and no shared code paths
//! with the library's fast kernels.

#![allow(dead_code)]

use cpgamp::tensor::{DenseTensor, FactorState, Matrix, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All multi-indices of `dims` in row-major order.
pub fn all_indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in dims {
        let mut next = Vec::with_capacity(out.len() * d);
        for prefix in &out {
            for i in 0..d {
                let mut p = prefix.clone();
                p.push(i);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

pub fn flat(dims: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_factors(rng: &mut ChaCha8Rng, dims: &[usize], rank: usize) -> FactorState {
    let means = dims
        .iter()
        .map(|&d| random_matrix(rng, d, rank, -1.5, 1.5))
        .collect();
    let vars = dims
        .iter()
        .map(|&d| random_matrix(rng, d, rank, 0.0, 0.5))
        .collect();
    FactorState::new(means, vars).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> DenseTensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let n = shape.element_count();
    DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `z[i] = sum_r prod_n A_n[i_n, r]`.
pub fn naive_kruskal(f: &FactorState) -> Vec<f64> {
    let dims = f.dims();
    all_indices(&dims)
        .iter()
        .map(|idx| {
            let mut total = 0.0;
            for r in 0..f.rank() {
                let mut p = 1.0;
                for (n, &i) in idx.iter().enumerate() {
                    p *= f.mean(n).get(i, r);
                }
                total += p;
            }
            total
        })
        .collect()
}

/// Mean and (floored) variance of every entry of the CP model.
pub fn naive_output_moments(f: &FactorState, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let dims = f.dims();
    let mut pm = Vec::new();
    let mut pv = Vec::new();
    for idx in all_indices(&dims) {
        let (mut m, mut v) = (0.0, 0.0);
        for r in 0..f.rank() {
            let (mut prod, mut second, mut square) = (1.0, 1.0, 1.0);
            for (n, &i) in idx.iter().enumerate() {
                let a = f.mean(n).get(i, r);
                let va = f.variance(n).get(i, r);
                prod *= a;
                second *= va + a * a;
                square *= a * a;
            }
            m += prod;
            v += second - square;
        }
        pm.push(m);
        pv.push(v.max(floor));
    }
    (pm, pv)
}

/// Input moments by looping, for each factor entry, over every tensor entry
/// in its slice and recomputing the other modes' products from scratch.
pub fn naive_input_moments(
    f: &FactorState,
    s_mean: &[f64],
    s_var: &[f64],
    floor: f64,
) -> (Vec<Matrix>, Vec<Matrix>) {
    let dims = f.dims();
    let indices = all_indices(&dims);
    let mut qm_all = Vec::new();
    let mut qv_all = Vec::new();
    for n in 0..dims.len() {
        let mut qm = Matrix::zeros(dims[n], f.rank());
        let mut qv = Matrix::zeros(dims[n], f.rank());
        for i in 0..dims[n] {
            for r in 0..f.rank() {
                let (mut precision, mut correction, mut residual) = (0.0, 0.0, 0.0);
                for idx in indices.iter().filter(|idx| idx[n] == i) {
                    let (mut prod, mut second, mut square) = (1.0, 1.0, 1.0);
                    for (l, &il) in idx.iter().enumerate() {
                        if l == n {
                            continue;
                        }
                        let a = f.mean(l).get(il, r);
                        prod *= a;
                        second *= f.variance(l).get(il, r) + a * a;
                        square *= a * a;
                    }
                    let a_var = second - square;
                    let k = flat(&dims, idx);
                    precision += prod * prod * s_var[k];
                    correction += a_var * (s_mean[k] * s_mean[k] - s_var[k]);
                    residual += prod * s_mean[k];
                }
                let var = if precision > 0.0 {
                    (1.0 / precision).max(floor)
                } else {
                    1.0 / floor
                };
                qv.set(i, r, var);
                let a = f.mean(n).get(i, r);
                qm.set(i, r, a * (1.0 + var * correction) + var * residual);
            }
        }
        qm_all.push(qm);
        qv_all.push(qv);
    }
    (qm_all, qv_all)
}

/// `|a - b| <= tol * max(|a|, |b|)`, with exact equality required at zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}
