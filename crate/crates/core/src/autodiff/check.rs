//! Central finite-difference gradient verification. The loss closure must
//! rebuild its computation from the given parameter tensors on every call;
//! any internal randomness (dropout masks) has to replay identically, which
//! holds whenever the closure reseeds its tape from fixed values.

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst mismatch.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// Compare analytic gradients against (f(x+h) - f(x-h)) / 2h, perturbing
/// every element of every parameter. The relative error denominator is
/// floored at 1 so near-zero gradients are compared absolutely.
pub fn check_gradients(
    params: &[Tensor],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> f64,
    h: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    for pi in 0..params.len() {
        assert_eq!(params[pi].shape(), analytic[pi].shape());
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = loss(&work);
            work[pi].data_mut()[ei] = orig - h;
            let down = loss(&work);
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pi].data()[ei];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    report
}
