//! Dense arrays, a reverse-mode tape, and a finite-difference oracle.

pub mod gradcheck;
pub mod init;
pub mod linalg;
pub mod memory;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{gelu_value, CustomOp, Gradients, Precision, Reduction, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::init::{randn, seeded};
    use super::*;

    fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
        let w = randn(t.value(y).shape(), 1.0, &mut seeded(seed));
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let x = t.constant(randn(&[2, 3], 1.0, &mut seeded(1)));
        let i = t.constant(Tensor::identity(2));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = seeded(11);
        let a = randn(&[5, 4], 1.0, &mut rng);
        let b = randn(&[4, 3], 1.0, &mut rng);
        let report = finite_difference_check(&[a, b], 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 12)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::full(&[1, 4], 3.5));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradient_check() {
        let mut rng = seeded(5);
        let x = randn(&[3, 8], 1.0, &mut rng);
        let g = randn(&[8], 1.0, &mut rng);
        let b = randn(&[8], 1.0, &mut rng);
        let report = finite_difference_check(&[x, g, b], 1e-5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 6)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn gelu_examples_and_gradient() {
        assert_eq!(gelu_value(0.0), 0.0);
        assert!((gelu_value(10.0) - 10.0).abs() <= 1e-6);
        let x = Tensor::new(&[5], vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let report = finite_difference_check(&[x], 1e-5, |t, v| {
            let y = t.gelu(v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::new(&[1], vec![42.0]).unwrap());
        let s = t.softmax_lastdim(one).unwrap();
        assert_eq!(t.value(s).data(), &[1.0]);

        let z = t.constant(Tensor::zeros(&[2]));
        let s = t.softmax_lastdim(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let x = randn(&[3, 5], 2.0, &mut seeded(9));
        let xv = t.constant(x.clone());
        let shifted = t.constant(x.map(|v| v + 123.25));
        let a = t.softmax_lastdim(xv).unwrap();
        let b = t.softmax_lastdim(shifted).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) <= 1e-12);
        for row in t.value(a).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[3]));
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(randn(&[3, 2], 1.0, &mut seeded(1)));
        let x = t.param(randn(&[4, 2], 1.0, &mut seeded(2)));
        let y = t.linear(x, w, None).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().shape(), &[4, 2]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = seeded(21);
        let a = randn(&[4, 3], 1.0, &mut rng);
        let b = randn(&[3, 2], 1.0, &mut rng);
        let build = |which: u8| {
            let mut t = Tape::new();
            let va = t.param(a.clone());
            let vb = t.param(b.clone());
            let y = t.matmul(va, vb).unwrap();
            let g = t.gelu(y).unwrap();
            let l1 = t.sum(g).unwrap();
            let sq = t.mul(y, y).unwrap();
            let l2 = t.mean(sq).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            let grads = t.backward(loss).unwrap();
            (grads.get(va).unwrap().clone(), grads.get(vb).unwrap().clone())
        };
        let (a1, b1) = build(0);
        let (a2, b2) = build(1);
        let (a12, b12) = build(2);
        let sum_a = a1.zip_map(&a2, |x, y| x + y).unwrap();
        let sum_b = b1.zip_map(&b2, |x, y| x + y).unwrap();
        assert!(sum_a.max_abs_diff(&a12) <= 1e-12);
        assert!(sum_b.max_abs_diff(&b12) <= 1e-12);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(randn(&[6, 8], 1.0, &mut seeded(4)));
            let w = t.constant(randn(&[5, 8], 1.0, &mut seeded(5)));
            let y = t.linear(x, w, None).unwrap();
            let s = t.softmax_lastdim(y).unwrap();
            let m = t.mean(s).unwrap();
            (t.value(s).clone(), t.value(m).item())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma.to_bits(), mb.to_bits());
    }

    #[test]
    fn tiled_reduction_stays_close_to_sequential() {
        let x = randn(&[10_000], 1.0, &mut seeded(8)).map(|v| v + 3.0);
        let mut seq = Tape::new();
        let mut tiled = Tape::new().with_reduction(Reduction::Tiled { tile: 256 });
        let a = seq.constant(x.clone());
        let b = tiled.constant(x);
        let sa = seq.sum(a).unwrap();
        let sb = tiled.sum(b).unwrap();
        let (va, vb) = (seq.value(sa).item(), tiled.value(sb).item());
        assert!(((va - vb) / va).abs() <= 1e-10);
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut t = Tape::new().with_precision(Precision::F32);
        let x = t.constant(Tensor::new(&[1], vec![0.1]).unwrap());
        assert_eq!(t.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        type Build = fn(&mut Tape, &[Var]) -> crate::Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |t, v| t.matmul_nt(v[0], v[1])),
            ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
            ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
            ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
            ("add_row", vec![vec![4, 3], vec![3]], |t, v| t.add_row(v[0], v[1])),
            ("mul_row", vec![vec![4, 3], vec![3]], |t, v| t.mul_row(v[0], v[1])),
            ("add_col", vec![vec![4, 3], vec![4]], |t, v| t.add_col(v[0], v[1])),
            ("scale_rows", vec![vec![4, 3], vec![4]], |t, v| t.scale_rows(v[0], v[1])),
            ("scale", vec![vec![5]], |t, v| t.scale(v[0], -1.5)),
            ("mul_scalar", vec![vec![2, 2], vec![]], |t, v| t.mul_scalar(v[0], v[1])),
            ("add_scalar", vec![vec![2, 2], vec![1]], |t, v| t.add_scalar(v[0], v[1])),
            ("softmax", vec![vec![3, 4]], |t, v| t.softmax_lastdim(v[0])),
            ("swap01", vec![vec![2, 3, 2]], |t, v| t.swap01(v[0])),
            ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
            ("concat", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]])),
            ("mean", vec![vec![3, 3]], |t, v| t.mean(v[0])),
        ];
        for (k, (name, shapes, build)) in cases.into_iter().enumerate() {
            let mut rng = seeded(100 + k as u64);
            let params: Vec<Tensor> = shapes.iter().map(|s| randn(s, 1.0, &mut rng)).collect();
            let report = finite_difference_check(&params, 1e-5, |t, v| {
                let y = build(t, v)?;
                weighted_sum(t, y, 7)
            })
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{name}: {report:?}");
        }
    }
}
