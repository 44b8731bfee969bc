//! Central finite differences. Independent of the tape's reverse-mode rules;
//! used by `verify` and by the gradient-correctness tests as the oracle side
//! of every gradient check.

use super::Tensor;

/// Gradient of `f` with respect to each input tensor by central differences
/// with the given step. `f` must be a pure function of the inputs.
pub fn finite_diff_grad(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    step: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape().to_vec());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = f(&work);
            work[t].data_mut()[i] = orig - step;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with an absolute floor so that entries
/// near zero compare absolutely.
pub fn max_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape());
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}
