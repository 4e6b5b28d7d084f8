//! Reverse-mode differentiation substrate shared by training and attribution.

mod fdcheck;
mod segment;
mod tape;

pub use fdcheck::{finite_difference_check, FdOptions, FdReport, Probe};
pub use segment::{Aggregation, STD_EPS};
pub use tape::{Matrix, Tape, Var};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(W ⊙ build(x)))/dx against finite differences, W random.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_w = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true).unwrap();
            let y = build(&mut t, x);
            random(&mut rng, t.shape(y).0, t.shape(y).1)
        };
        let eval = |xv: &Matrix| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone(), true).unwrap();
            let y = build(&mut t, x);
            let w = t.constant(probe_w.clone()).unwrap();
            let p = t.mul(y, w).unwrap();
            let out = t.sum_all(p).unwrap();
            (t, x, out)
        };
        let (t, x, out) = eval(&x0);
        let g = t.grad(out, &[x]).unwrap().remove(0);
        let shape = x0.dim();
        let report = finite_difference_check(
            |p| {
                let xv = Matrix::from_shape_vec(shape, p.to_vec()).unwrap();
                let (t, _, out) = eval(&xv);
                Probe {
                    value: t.scalar(out),
                    signature: t.kink_signature(),
                }
            },
            x0.as_slice().unwrap(),
            g.as_slice().unwrap(),
            None,
            &FdOptions::new(1e-6, tol),
        );
        assert!(report.passed, "max rel error {:?}", report);
        assert!(report.checked > 0);
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(array![[-2.0, 3.0]], false).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y), &array![[0.0, 3.0]]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros((2, 3)), false).unwrap();
        let y = t.row_softmax(x).unwrap();
        for v in t.value(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_mean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = random(&mut rng, 3, 4);
        let b0 = random(&mut rng, 4, 2);
        let f = |a: &Matrix| {
            let mut t = Tape::new();
            let a = t.leaf(a.clone(), true).unwrap();
            let b = t.constant(b0.clone()).unwrap();
            let c = t.matmul(a, b).unwrap();
            let m = t.mean_all(c).unwrap();
            (t, a, m)
        };
        let (t, a, m) = f(&a0);
        let g = t.grad(m, &[a]).unwrap().remove(0);
        let report = finite_difference_check(
            |p| {
                let (t, _, m) = f(&Matrix::from_shape_vec((3, 4), p.to_vec()).unwrap());
                Probe::smooth(t.scalar(m))
            },
            a0.as_slice().unwrap(),
            g.as_slice().unwrap(),
            None,
            &FdOptions::new(1e-5, 1e-6),
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let other = random(&mut rng, 3, 4);
        let col = random(&mut rng, 3, 1);
        let row = random(&mut rng, 1, 4);
        let right = random(&mut rng, 4, 5);
        let x0 = random(&mut rng, 3, 4);

        check_unary(|t, x| t.relu(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.row_softmax(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.layernorm(x, 1e-5).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.transpose(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.square(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.abs(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.mean_all(x).unwrap(), x0.clone(), 1e-6);
        check_unary(|t, x| t.scale(x, -2.5).unwrap(), x0.clone(), 1e-6);
        check_unary(
            |t, x| {
                let o = t.constant(other.clone()).unwrap();
                let a = t.add(x, o).unwrap();
                let m = t.mul(a, x).unwrap();
                t.sub(m, o).unwrap()
            },
            x0.clone(),
            1e-6,
        );
        check_unary(
            |t, x| {
                let r = t.constant(right.clone()).unwrap();
                t.matmul(x, r).unwrap()
            },
            x0.clone(),
            1e-6,
        );
        check_unary(
            |t, x| {
                let c = t.constant(col.clone()).unwrap();
                let b = t.constant(row.clone()).unwrap();
                let y = t.mul_col(x, c).unwrap();
                t.add_row(y, b).unwrap()
            },
            x0.clone(),
            1e-6,
        );
        // The broadcast operand itself as the differentiated input.
        check_unary(
            |t, c| {
                let a = t.constant(other.clone()).unwrap();
                t.mul_col(a, c).unwrap()
            },
            col.clone(),
            1e-6,
        );
        check_unary(
            |t, b| {
                let a = t.constant(other.clone()).unwrap();
                t.add_row(a, b).unwrap()
            },
            row.clone(),
            1e-6,
        );
        check_unary(
            |t, x| {
                let s1 = t.slice_cols(x, 1, 3).unwrap();
                let s2 = t.slice_rows(x, 0, 2).unwrap();
                let s2t = t.transpose(s2).unwrap();
                let s2c = t.slice_rows(s2t, 0, 3).unwrap();
                t.concat_cols(&[s1, x, s2c]).unwrap()
            },
            x0.clone(),
            1e-6,
        );
        check_unary(
            |t, x| t.scale_rows(x, Arc::new(Array1::from(vec![0.5, -1.0, 2.0]))).unwrap(),
            x0.clone(),
            1e-6,
        );
        check_unary(
            |t, x| t.gather_rows(x, Arc::from(vec![2usize, 0, 2, 1])).unwrap(),
            x0.clone(),
            1e-6,
        );
        let dst: Arc<[usize]> = Arc::from(vec![0usize, 2, 0]);
        for kind in Aggregation::ALL {
            let dst = dst.clone();
            check_unary(
                move |t, x| t.segment_aggregate(x, dst.clone(), 4, kind).unwrap(),
                x0.clone(),
                1e-6,
            );
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_deterministic_in_train() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::ones((20, 20)), true).unwrap();
        let e = t.dropout(x, 0.5, 3, false).unwrap();
        assert_eq!(e, x);
        let a = t.dropout(x, 0.5, 3, true).unwrap();
        let b = t.dropout(x, 0.5, 3, true).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(t.value(a).iter().all(|&v| v == 0.0 || v == 2.0));
        let zeros = t.value(a).iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 100 && zeros < 300);
    }

    #[test]
    fn grad_of_sum_is_ones_and_unreached_leaf_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0]], true).unwrap();
        let unused = t.leaf(array![[5.0]], true).unwrap();
        let y = t.sum_all(x).unwrap();
        let g = t.grad(y, &[x, unused]).unwrap();
        assert_eq!(g[0], Matrix::ones((2, 2)));
        assert_eq!(g[1], Matrix::zeros((1, 1)));
    }

    #[test]
    fn grad_rejects_non_scalar_output() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::ones((2, 2)), true).unwrap();
        assert!(matches!(t.grad(x, &[x]), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::ones((2, 3)), false).unwrap();
        let b = t.leaf(Matrix::ones((2, 3)), false).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.add_row(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(array![[f64::MAX]], false).unwrap();
        assert!(matches!(t.scale(a, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_and_layernorm_normalize_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(random(&mut rng, 6, 9).mapv(|v| v * 20.0), false).unwrap();
        let s = t.row_softmax(x).unwrap();
        for row in t.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let l = t.layernorm(x, 0.0).unwrap();
        for row in t.value(l).rows() {
            let mean = row.sum() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_message_and_isolated_node() {
        let mut t = Tape::new();
        let m = t.leaf(array![[0.7, -1.5]], false).unwrap();
        let dst: Arc<[usize]> = Arc::from(vec![1usize]);
        for kind in Aggregation::ALL {
            let a = t.segment_aggregate(m, dst.clone(), 3, kind).unwrap();
            let v = t.value(a);
            assert_eq!(v.row(0).to_vec(), vec![0.0, 0.0]);
            assert_eq!(v.row(2).to_vec(), vec![0.0, 0.0]);
            match kind {
                Aggregation::Std => assert_eq!(v.row(1).to_vec(), vec![STD_EPS.sqrt(); 2]),
                _ => assert_eq!(v.row(1).to_vec(), vec![0.7, -1.5]),
            }
        }
    }

    #[test]
    fn segment_out_of_range_is_an_error() {
        let mut t = Tape::new();
        let m = t.leaf(array![[1.0]], false).unwrap();
        let r = t.segment_aggregate(m, Arc::from(vec![5usize]), 3, Aggregation::Mean);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn max_tie_routes_gradient_to_first_arc() {
        let mut t = Tape::new();
        let m = t.leaf(array![[2.0], [2.0], [1.0]], true).unwrap();
        let a = t
            .segment_aggregate(m, Arc::from(vec![0usize, 0, 0]), 1, Aggregation::Max)
            .unwrap();
        let s = t.sum_all(a).unwrap();
        let g = t.grad(s, &[m]).unwrap().remove(0);
        assert_eq!(g, array![[1.0], [0.0], [0.0]]);
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let f = |x: &[f64]| x.iter().map(|v| 3.0 * v * v + v).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 6.0 * v + 1.0).collect();
        let r = finite_difference_check(
            |p| Probe::smooth(f(p)),
            &x,
            &g,
            None,
            &FdOptions::new(1e-4, 1e-8),
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_kink_coordinates_are_excluded() {
        let h = 1e-5;
        let x = [5.0 * h, 1.0, -1.0];
        let eval = |p: &[f64]| {
            let mut t = Tape::new();
            let v = t
                .leaf(Matrix::from_shape_vec((1, 3), p.to_vec()).unwrap(), true)
                .unwrap();
            let r = t.relu(v).unwrap();
            let s = t.sum_all(r).unwrap();
            (t, v, s)
        };
        let (t, v, s) = eval(&x);
        let g = t.grad(s, &[v]).unwrap().remove(0);
        let r = finite_difference_check(
            |p| {
                let (t, _, s) = eval(p);
                Probe {
                    value: t.scalar(s),
                    signature: t.kink_signature(),
                }
            },
            &x,
            g.as_slice().unwrap(),
            None,
            &FdOptions::new(h, 1e-8),
        );
        assert_eq!(r.skipped, 1);
        assert!(r.errors[0].is_none());
        assert!(r.passed);
    }
}
