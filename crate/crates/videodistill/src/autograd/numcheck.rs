//! Central finite-difference gradients, independent of the tape.
//!
//! Used as the numerical oracle for gradient verification: it only ever
//! calls a black-box scalar function, so it shares no code with the
//! backward pass it checks.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&ArrayD<f32>) -> f64, x: &ArrayD<f32>, h: f32) -> ArrayD<f32> {
    let mut grad = ArrayD::<f32>::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat_len = x.len();
    for i in 0..flat_len {
        let orig = probe.as_slice().expect("standard layout")[i];
        probe.as_slice_mut().expect("standard layout")[i] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig;
        grad.as_slice_mut().expect("standard layout")[i] = ((fp - fm) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn rel_error(a: &ArrayD<f32>, b: &ArrayD<f32>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_error shape mismatch");
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff += ((x - y) as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

/// Panics unless `analytic` matches `numeric` to the given norm-relative
/// tolerance.
pub fn assert_grad_close(analytic: &ArrayD<f32>, numeric: &ArrayD<f32>, rel_tol: f64, what: &str) {
    let err = rel_error(analytic, numeric, 1e-12);
    assert!(
        err <= rel_tol,
        "{what}: gradient mismatch, relative error {err:.3e} > {rel_tol:.1e}\nanalytic: {analytic:?}\nnumeric:  {numeric:?}"
    );
}
