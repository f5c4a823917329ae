//! Minimal reverse-mode automatic differentiation over `f32` tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! replays the record in reverse. Binary elementwise ops accept identical
//! shapes or a single-element operand and nothing else.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{BatchStats, Binary, Gradients, Pool, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn adding_zero_is_identity() {
        let tape = Tape::new();
        let data = [0.5, -1.25, 3.0, 7.0];
        let x = tape.constant(t(&[2, 2], &data));
        let z = tape.constant(Tensor::zeros([2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    #[test]
    fn log_of_half() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.5]));
        let y = tape.log(x).unwrap();
        assert!((tape.item(y) as f64 - 0.5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.param(t(&[1], &[2.0]));
        let y = tape.mul(x, s).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(s).data(), &[6.0]);
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_hand_example_and_identities() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let m = Tensor::from_fn([3, 3], |i| i as f32 - 4.0);
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mv = tape.constant(m.clone());
        let iv = tape.constant(eye);
        let zv = tape.constant(Tensor::zeros([3, 3]));
        assert_eq!(tape.value(tape.matmul(mv, iv).unwrap()).data(), m.data());
        assert!(tape
            .value(tape.matmul(mv, zv).unwrap())
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros([2, 3]));
        assert!(tape.matmul(mv, bad).is_err());
    }

    #[test]
    fn conv_hand_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);

        let img = Tensor::from_fn([2, 3, 5, 5], |i| (i as f32 * 0.1).sin());
        let xi = tape.constant(img.clone());
        let zeros = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = tape.conv2d(xi, zeros, 1, 1).unwrap();
        assert_eq!(tape.shape(y), vec![2, 4, 5, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let unit = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let single = tape.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f32));
        let y = tape.conv2d(single, unit, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(single).data());
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 2, 0),
            Err(Error::Domain { op: "conv2d", .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let s = tape.pool(ones, Pool::GlobalSum).unwrap();
        assert_eq!(tape.value(s).data(), &[16.0, 16.0]);
        let c = tape.constant(Tensor::full([1, 1, 4, 6], 2.5));
        let m = tape.pool(c, Pool::Mean2x2).unwrap();
        assert_eq!(tape.shape(m), vec![1, 1, 2, 3]);
        assert!(tape.value(m).data().iter().all(|&v| v == 2.5));
        let z = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let s = tape.pool(z, Pool::GlobalSum).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(tape.pool(odd, Pool::Mean2x2).is_err());
    }

    #[test]
    fn upsample_gradient_is_block_sum() {
        let tape = Tape::new();
        let x = tape.param(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let w = tape.constant(Tensor::from_fn([1, 1, 2, 4], |i| i as f32));
        let l = tape.sum(tape.mul(y, w).unwrap());
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[5.0, 5.0]));
        let l = tape.sum(tape.square(x).unwrap());
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
        assert_eq!(g.wrt(y).data(), &[0.0, 0.0]);

        let l2 = tape.sum(x);
        let g = tape.backward(l2).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_of_loss_wrt_itself_is_one() {
        let tape = Tape::new();
        let l = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(l).data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -0.2, 0.9]));
        let g1 = tape.sum(tape.tanh(x).unwrap());
        let once = tape.backward(g1).unwrap().wrt(x).clone();
        let a = tape.tanh(x).unwrap();
        let b = tape.tanh(x).unwrap();
        let twice = tape.sum(tape.add(a, b).unwrap());
        let g = tape.backward(twice).unwrap();
        for (o, t) in once.data().iter().zip(g.wrt(x).data()) {
            assert_eq!(2.0 * o, *t);
        }
    }

    #[test]
    fn backward_wrt_skips_other_leaves() {
        let tape = Tape::new();
        let a = tape.param(Tensor::full([2], 2.0));
        let b = tape.param(Tensor::full([2], 3.0));
        let l = tape.sum(tape.mul(a, b).unwrap());
        let g = tape.backward_wrt(l, &[a]).unwrap();
        assert_eq!(g.wrt(a).data(), &[3.0, 3.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let tape = Tape::new();
        let data = Tensor::from_fn([1, 2, 4, 4], |i| (i as f32 * 0.7).cos());
        let x = tape.param(data.clone());
        let w = tape.param(Tensor::from_fn([3, 2, 3, 3], |i| (i as f32).sin()));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.pool(y, Pool::Mean2x2).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.value(x).data(), data.data());
    }

    #[test]
    fn batch_norm_two_sample_batch() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[0.0, 2.0]));
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let (y, stats) = tape.batch_norm(x, g, b, 1e-5, None).unwrap();
        let y = tape.value(y);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        assert_eq!(stats.unwrap().mean, vec![1.0]);
    }

    #[test]
    fn softmax_ce_uniform_is_ln_k() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let l = tape.softmax_cross_entropy(logits, &[0, 1, 2, 1]).unwrap();
        assert!((tape.item(l) as f64 - 3f64.ln()).abs() < 1e-6);
        assert!(tape.softmax_cross_entropy(logits, &[0, 1, 3, 1]).is_err());
    }
}
