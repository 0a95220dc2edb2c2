//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only the primitives the temporal-sets network needs are provided. Every
//! primitive records an adjoint on the [`Tape`]; [`grad_check`] compares
//! the resulting gradients against central finite differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, TensorCheck, REL_ERR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

/// Additive mask letting row `t` of a `len × len` score matrix see only
/// columns `t' ≤ t`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(len, len);
    for t in 0..len {
        for s in t + 1..len {
            m.set(t, s, f64::NEG_INFINITY);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(rows, cols, 1.0, rng)
    }

    fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
        ts.into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    fn check<F>(params: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
    {
        let report = grad_check(f, &named(params), STEP, TOL).unwrap();
        assert!(report.passed, "{report:#?}");
    }

    // Reduces any output to a scalar through a fixed random projection so
    // every output coordinate carries a distinct weight.
    fn project(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
        let [r, c] = tape.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_t(r, c, &mut rng));
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }

    #[test]
    fn masked_softmax_annihilates_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let mask = Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY]]).unwrap();
        let y = tape.masked_softmax(x, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_of_zero_and_its_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(w);
        assert_eq!(tape.value(y).item(), 0.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 0.25);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![1.0, -2.0, 3.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(
            tape.backward(x),
            Err(crate::Error::NonScalarLoss([2, 1]))
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 3.0);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(1, 2), f64::NEG_INFINITY);
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(5, 3, &mut rng);
        let params = named(vec![rand_t(3, 1, &mut rng)]);
        let report = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = tape.matmul(xv, p[0])?;
                Ok(tape.sum(y))
            },
            &params,
            STEP,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let params = named(vec![Tensor::filled(2, 2, 0.3)]);
        let report = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            &params,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.tensors[0].max_abs_error, 0.0);
    }

    // Each primitive's adjoint in isolation, on a handful of random shapes ≤ 6×6.
    fn shapes() -> Vec<(usize, usize, usize)> {
        vec![(1, 1, 1), (2, 3, 4), (6, 6, 6), (5, 2, 3), (3, 6, 1)]
    }

    #[test]
    fn adjoint_matmul_transpose() {
        for (i, (n, k, m)) in shapes().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            check(vec![rand_t(n, k, &mut rng), rand_t(m, k, &mut rng)], |t, p| {
                let bt = t.transpose(p[1]);
                let y = t.matmul(p[0], bt)?;
                project(t, y, 9)
            });
        }
    }

    #[test]
    fn adjoint_add_sub_mul_affine() {
        for (i, (n, k, _)) in shapes().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
            check(
                vec![
                    rand_t(n, k, &mut rng),
                    rand_t(n, k, &mut rng),
                    rand_t(1, k, &mut rng),
                ],
                |t, p| {
                    let a = t.add(p[0], p[1])?;
                    let b = t.sub(a, p[1])?;
                    let c = t.mul(b, p[1])?;
                    let d = t.add(c, p[2])?;
                    let e = t.affine(d, -1.5, 0.25);
                    project(t, e, 11)
                },
            );
        }
    }

    #[test]
    fn adjoint_scale_rows_and_concat() {
        for (i, (n, k, m)) in shapes().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + i as u64);
            check(
                vec![
                    rand_t(n, 1, &mut rng),
                    rand_t(n, k, &mut rng),
                    rand_t(n, m, &mut rng),
                ],
                |t, p| {
                    let s = t.scale_rows(p[0], p[1])?;
                    let c = t.concat_cols(&[s, p[2], s])?;
                    project(t, c, 21)
                },
            );
        }
    }

    #[test]
    fn adjoint_gather_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        check(vec![rand_t(6, 4, &mut rng), rand_t(3, 4, &mut rng)], |t, p| {
            let g = t.row_gather(p[0], &[5, 0, 5, 2, 1])?;
            let s = t.row_scatter_update(p[0], &[4, 1, 3], p[1])?;
            let a = project(t, g, 31)?;
            let b = project(t, s, 32)?;
            t.add(a, b)
        });
    }

    #[test]
    fn adjoint_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        check(vec![rand_t(6, 5, &mut rng)], |t, p| {
            let r = t.relu(p[0]);
            let s = t.sigmoid(p[0]);
            let l = t.log(s);
            let c = t.clamp(p[0], -0.5, 0.5);
            let a = project(t, r, 41)?;
            let b = project(t, l, 42)?;
            let d = project(t, c, 43)?;
            let ab = t.add(a, b)?;
            t.add(ab, d)
        });
    }

    #[test]
    fn adjoint_masked_softmax() {
        for len in 1..=6 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + len as u64);
            let mask = causal_mask(len);
            check(vec![rand_t(len, len, &mut rng)], |t, p| {
                let y = t.masked_softmax(p[0], &mask)?;
                project(t, y, 51)
            });
        }
    }

    #[test]
    fn adjoint_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        check(vec![rand_t(6, 3, &mut rng)], |t, p| {
            let seg = t.segment_sum(p[0], 3)?;
            let a = project(t, seg, 61)?;
            let sq = t.mul(p[0], p[0])?;
            let m = t.mean(sq);
            t.add(a, m)
        });
    }

    #[test]
    fn adjoint_block_matmul_const() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let blocks: std::sync::Arc<[Tensor]> =
            vec![rand_t(2, 3, &mut rng), rand_t(3, 3, &mut rng), rand_t(1, 1, &mut rng)].into();
        check(vec![rand_t(7, 4, &mut rng)], |t, p| {
            let y = t.block_matmul_const(blocks.clone(), p[0])?;
            project(t, y, 71)
        });
    }

    #[test]
    fn adjoint_batched_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        // 3 batches; a: 3·2 × 4, b: 3·3 × 4, v: 3·3 × 5
        check(
            vec![
                rand_t(6, 4, &mut rng),
                rand_t(9, 4, &mut rng),
                rand_t(9, 5, &mut rng),
            ],
            |t, p| {
                let s = t.batched_matmul_nt(p[0], p[1], 3)?;
                let y = t.batched_matmul(s, p[2], 3)?;
                project(t, y, 81)
            },
        );
    }

    #[test]
    fn batched_matmuls_match_blockwise_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let a = rand_t(6, 4, &mut rng);
        let b = rand_t(6, 4, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = tape.batched_matmul_nt(va, vb, 2).unwrap();
        for blk in 0..2 {
            let ab = Tensor::from_vec(3, 4, a.data()[blk * 12..(blk + 1) * 12].to_vec()).unwrap();
            let bb = Tensor::from_vec(3, 4, b.data()[blk * 12..(blk + 1) * 12].to_vec()).unwrap();
            let expect = ab.matmul(&bb.transpose()).unwrap();
            for i in 0..3 {
                assert_eq!(tape.value(s).row(blk * 3 + i), expect.row(i));
            }
        }
    }

    #[test]
    fn adjoint_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let mask = Tensor::zeros(3, 2);
        check(vec![rand_t(6, 1, &mut rng)], |t, p| {
            let r = t.reshape(p[0], 3, 2)?;
            let s = t.masked_softmax(r, &mask)?;
            project(t, s, 96)
        });
    }

    #[test]
    fn adjoint_standardize_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        check(vec![rand_t(5, 3, &mut rng)], |t, p| {
            let y = t.standardize_cols(p[0], 1e-5);
            project(t, y, 91)
        });
    }

    #[test]
    fn gradients_are_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let a = tape.leaf(rand_t(4, 4, &mut rng));
            let b = tape.leaf(rand_t(4, 4, &mut rng));
            let y = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(y);
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            (tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
