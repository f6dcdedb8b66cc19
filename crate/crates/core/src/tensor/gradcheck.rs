//! Finite-difference validation of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked_coords: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let root = f(&mut tape, x)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: v.shape().to_vec(),
        });
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(out)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_at(&f, point, eps, tol, &coords)
}

/// Same check restricted to a random subset of coordinates; used where a
/// full sweep would be needlessly slow.
pub fn grad_check_sampled<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut coords: Vec<usize> = (0..point.numel()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    grad_check_at(&f, point, eps, tol, &coords)
}

fn grad_check_at<F>(
    f: &F,
    point: &Tensor,
    eps: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Domain {
            op: "grad_check",
            reason: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let root = f(&mut tape, x)?;
    if tape.value(root).numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: tape.value(root).shape().to_vec(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic = grads.grad(x).expect("gradient of checked leaf");

    let mut max_rel = 0.0_f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * eps);
        let at = analytic.data()[i];
        let rel = (at - fd).abs() / at.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked_coords: coords.len(),
        passed: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let point = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let report = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum_all(s)
            },
            &point,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);

        // and the analytic gradient itself is [2, -4, 6]
        let mut tape = Tape::new();
        let x = tape.leaf(point, true);
        let s = tape.square(x).unwrap();
        let root = tape.sum_all(s).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_function_passes_with_zero_error() {
        let point = Tensor::new(vec![2], vec![0.7, -0.1]).unwrap();
        let report = grad_check(
            |t, x| {
                let c = t.scalar_const(4.0);
                let z = t.sum_all(x)?;
                let zero = t.scale_add(z, 0.0, 0.0)?;
                t.add(c, zero)
            },
            &point,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let point = Tensor::scalar(1.0);
        let err = grad_check(|t, x| t.square(x), &point, 1e-2, 1e-4);
        assert!(err.is_err());
    }
}
