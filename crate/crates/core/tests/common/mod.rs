//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use flowmix::flow::GridShape;
use flowmix::{FlowConfig, FlowNetwork, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Flow with every parameter redrawn from `U(-spread, spread)`, far from identity.
pub fn random_flow(dim: usize, config: &FlowConfig, spread: f64, rng: &mut impl Rng) -> FlowNetwork {
    let mut net = FlowNetwork::new(dim, config, rng).unwrap();
    for p in net.parameters_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-spread..spread);
        }
    }
    net
}

/// Random architecture: depth, optional split, optional squeeze for square grids.
pub fn random_config(dim: usize, depth: usize, rng: &mut impl Rng) -> FlowConfig {
    let mut cfg = FlowConfig::with_depth(depth);
    cfg.hidden = Some(rng.random_range(4..=24));
    if depth >= 2 && dim >= 4 && rng.random_bool(0.5) {
        cfg.splits = vec![rng.random_range(0..depth - 1)];
    }
    let side = (dim as f64).sqrt() as usize;
    if side * side == dim && side.is_multiple_of(2) && rng.random_bool(0.5) {
        cfg.grid = Some(GridShape {
            channels: 1,
            height: side,
            width: side,
        });
    }
    cfg
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, spread: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

/// Central-difference Jacobian of `f` at `x`: entry `[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` with respect to the scalars reached by `slots`.
///
/// `set(i, v)` writes scalar `i` of the parameter vector, `f()` evaluates the objective.
pub fn fd_gradient<S>(
    state: &mut S,
    count: usize,
    get: impl Fn(&S, usize) -> f64,
    set: impl Fn(&mut S, usize, f64),
    f: impl Fn(&S) -> f64,
    h: f64,
) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let v = get(state, i);
            set(state, i, v + h);
            let fp = f(state);
            set(state, i, v - h);
            let fm = f(state);
            set(state, i, v);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Diagonal-covariance Gaussian mixture written out longhand.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl Gmm {
    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        (0..self.pi.len())
            .map(|c| {
                let mut lp = self.pi[c].ln();
                for j in 0..x.len() {
                    let v = self.var[c][j];
                    lp += -0.5 * (x[j] - self.mu[c][j]).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
                }
                lp
            })
            .collect()
    }

    /// Posterior component probabilities per sample.
    pub fn e_step(&self, x: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                let lp = self.log_joint(x.row(i));
                let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = lp.iter().map(|v| (v - m).exp()).sum();
                lp.iter().map(|v| (v - m).exp() / s).collect()
            })
            .collect()
    }

    pub fn nll_per_dim(&self, x: &Tensor) -> f64 {
        let mut total = 0.0;
        for i in 0..x.rows() {
            let lp = self.log_joint(x.row(i));
            let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        }
        -total / (x.rows() * x.cols()) as f64
    }

    /// Closed-form M-step.
    pub fn m_step(&mut self, x: &Tensor, r: &[Vec<f64>]) {
        let (n, d) = (x.rows(), x.cols());
        for c in 0..self.pi.len() {
            let nk: f64 = r.iter().map(|ri| ri[c]).sum();
            self.pi[c] = nk / n as f64;
            for j in 0..d {
                self.mu[c][j] = (0..n).map(|i| r[i][c] * x.get(i, j)).sum::<f64>() / nk;
                self.var[c][j] = (0..n).map(|i| r[i][c] * (x.get(i, j) - self.mu[c][j]).powi(2)).sum::<f64>() / nk;
            }
        }
    }

    /// Classical EM run to convergence; returns the final NLL per dimension.
    pub fn fit(&mut self, x: &Tensor, max_iters: usize) -> f64 {
        let mut prev = f64::INFINITY;
        for _ in 0..max_iters {
            let r = self.e_step(x);
            self.m_step(x, &r);
            let nll = self.nll_per_dim(x);
            if (prev - nll).abs() < 1e-12 {
                break;
            }
            prev = nll;
        }
        self.nll_per_dim(x)
    }
}
