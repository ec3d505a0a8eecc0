mod common;

use common::relative_error;
use flowmix::{Graph, Tensor, Var};
use proptest::prelude::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Weighted sum of the op output so every output entry gets a distinct upstream gradient.
fn loss_of(g: &mut Graph, out: Var) -> Var {
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).numel();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 1.7).cos()).collect()).unwrap();
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = loss_of(&mut g, out);
    g.value(loss).item()
}

/// Largest relative error between backward and central differences over all inputs.
fn gradient_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = loss_of(&mut g, out);
    g.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (slot, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        let numeric: Vec<f64> = (0..inputs[slot].numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[slot].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[slot].data_mut()[i] -= h;
                (eval(&plus, build) - eval(&minus, build)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

/// Values bounded away from zero, for division, log and abs.
fn away_from_zero(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec((0.2f64..2.0, any::<bool>()), rows * cols).prop_map(move |d| {
        let data = d.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    })
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

const LIMIT: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_elementwise((a, b) in shape().prop_flat_map(|(r, c)| (matrix(r, c, -2.0, 2.0), away_from_zero(r, c)))) {
        let ops: [&Build; 4] = [
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &|g, v| g.sub(v[0], v[1]).unwrap(),
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            &|g, v| g.div(v[0], v[1]).unwrap(),
        ];
        for op in ops {
            prop_assert!(gradient_error(&[a.clone(), b.clone()], op) < LIMIT);
        }
    }

    #[test]
    fn scalar_right_operand(a in shape().prop_flat_map(|(r, c)| matrix(r, c, -2.0, 2.0)), s in 0.3f64..2.0) {
        let ops: [&Build; 4] = [
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &|g, v| g.sub(v[0], v[1]).unwrap(),
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            &|g, v| g.div(v[0], v[1]).unwrap(),
        ];
        for op in ops {
            prop_assert!(gradient_error(&[a.clone(), Tensor::scalar(s)], op) < LIMIT);
        }
    }

    #[test]
    fn unary_elementwise(a in shape().prop_flat_map(|(r, c)| away_from_zero(r, c)), c in -3.0f64..3.0) {
        let log_abs = |g: &mut Graph, v: &[Var]| {
            let a = g.abs(v[0]).unwrap();
            g.log(a).unwrap()
        };
        let ops: [&Build; 6] = [
            &|g, v| g.exp(v[0]).unwrap(),
            &|g, v| g.tanh(v[0]).unwrap(),
            &|g, v| g.abs(v[0]).unwrap(),
            &|g, v| g.neg(v[0]).unwrap(),
            &|g, v| g.square(v[0]).unwrap(),
            &log_abs,
        ];
        for op in ops {
            prop_assert!(gradient_error(std::slice::from_ref(&a), op) < LIMIT);
        }
        let scaled = move |g: &mut Graph, v: &[Var]| g.scale(v[0], c).unwrap();
        prop_assert!(gradient_error(&[a], &scaled) < LIMIT);
    }

    #[test]
    fn matmul_gradient((a, b) in (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(m, k, n)| (matrix(m, k, -2.0, 2.0), matrix(k, n, -2.0, 2.0))))
    {
        prop_assert!(gradient_error(&[a, b], &|g, v| g.matmul(v[0], v[1]).unwrap()) < LIMIT);
    }

    #[test]
    fn reductions(a in shape().prop_flat_map(|(r, c)| matrix(r, c, -3.0, 3.0))) {
        let ops: [&Build; 5] = [
            &|g, v| g.sum(v[0]).unwrap(),
            &|g, v| g.sum_axis(v[0], 0).unwrap(),
            &|g, v| g.sum_axis(v[0], 1).unwrap(),
            &|g, v| g.log_sum_exp_rows(v[0]).unwrap(),
            &|g, v| g.log_sum_exp(v[0]).unwrap(),
        ];
        for op in ops {
            prop_assert!(gradient_error(std::slice::from_ref(&a), op) < LIMIT);
        }
    }

    #[test]
    fn structural_ops(
        a in (2usize..5, 2usize..5).prop_flat_map(|(r, c)| matrix(r, c, -2.0, 2.0)),
        cut in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let (rows, cols) = (a.rows(), a.cols());
        let col_cut = 1 + (cut * (cols - 1) as f64) as usize;
        let row_cut = 1 + (cut * (rows - 1) as f64) as usize;
        let mut perm: Vec<usize> = (0..cols).collect();
        perm.rotate_left((seed % cols as u64) as usize);
        perm.swap(0, cols - 1);

        prop_assert!(gradient_error(std::slice::from_ref(&a), &move |g, v| g.slice_cols(v[0], col_cut, cols).unwrap()) < LIMIT);
        prop_assert!(gradient_error(std::slice::from_ref(&a), &move |g, v| g.slice_rows(v[0], 0, row_cut).unwrap()) < LIMIT);
        prop_assert!(gradient_error(std::slice::from_ref(&a), &move |g, v| g.permute_cols(v[0], &perm).unwrap()) < LIMIT);
        prop_assert!(gradient_error(std::slice::from_ref(&a), &move |g, v| g.reshape(v[0], &[cols, rows]).unwrap()) < LIMIT);
        let mixed = move |g: &mut Graph, v: &[Var]| {
            let left = g.slice_cols(v[0], 0, col_cut).unwrap();
            let right = g.slice_cols(v[0], col_cut, cols).unwrap();
            let t = g.tanh(right).unwrap();
            g.concat_cols(&[t, left]).unwrap()
        };
        prop_assert!(gradient_error(std::slice::from_ref(&a), &mixed) < LIMIT);
        let row = Tensor::matrix(1, cols, a.row(0).to_vec()).unwrap();
        prop_assert!(gradient_error(&[row], &move |g, v| g.broadcast_rows(v[0], rows).unwrap()) < LIMIT);
    }

    #[test]
    fn composite_with_shared_parameter(a in shape().prop_flat_map(|(r, c)| matrix(r, c, -1.5, 1.5))) {
        // one parameter feeding several branches
        let build: &Build = &|g, v| {
            let e = g.exp(v[0]).unwrap();
            let t = g.tanh(v[0]).unwrap();
            let p = g.mul(e, t).unwrap();
            let s = g.square(v[0]).unwrap();
            g.sub(p, s).unwrap()
        };
        prop_assert!(gradient_error(&[a], build) < LIMIT);
    }

    #[test]
    fn forward_is_deterministic(a in shape().prop_flat_map(|(r, c)| matrix(r, c, -2.0, 2.0))) {
        let run = |a: &Tensor| {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let e = g.exp(x).unwrap();
            let l = g.log_sum_exp_rows(e).unwrap();
            g.value(l).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(&a), run(&a));
    }
}
