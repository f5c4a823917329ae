use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares `backward()` against central differences of `f` at `x`.
///
/// Returns the normwise relative error `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞)`
/// (the plain max abs error when both gradients vanish). The step actually
/// taken in `f32` is used as the denominator, not the nominal `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "finite_diff_check: eps must be positive");
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv).clone();

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&tape, v)?;
        Ok(tape.item_f64(out))
    };

    let mut numeric = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let f_hi = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (f_hi - f_lo) / (hi as f64 - lo as f64);
    }

    let mut max_diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, n) in analytic.data().iter().zip(&numeric) {
        let a = *a as f64;
        max_diff = max_diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    Ok(if scale < 1e-12 {
        max_diff
    } else {
        max_diff / scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_fn([6], |i| i as f32 * 0.3 - 0.7);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_at_zero_has_unit_gradient() {
        let x = Tensor::zeros([5]);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.tanh(v).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(v).data().iter().all(|&d| (d - 1.0).abs() < 1e-7));
        let err = finite_diff_check(|t, v| Ok(t.sum(t.tanh(v)?)), &x, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn squared_sum_matches_at_random_points() {
        let x = Tensor::from_fn([8], |i| ((i * 7919 % 13) as f32 / 6.5) - 1.0);
        let err = finite_diff_check(|t, v| Ok(t.sum(t.square(v)?)), &x, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
