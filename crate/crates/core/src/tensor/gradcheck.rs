//! Central-difference gradient checking.
//!
//! The numeric side is an independent oracle for the tape: it only calls the
//! forward path, with recording off, and never touches the analytic rules it
//! verifies. Run with `E = f64` for the shadow-precision mode.

use crate::error::{Error, Result};
use crate::tensor::{Element, GradTape, Tensor};

/// Compare tape gradients of `f` against central differences at `inputs`.
///
/// `f` must map the given inputs to a scalar tensor using only tape
/// operations. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], eps: E) -> Result<E>
where
    E: Element,
    F: Fn(&mut GradTape<E>, &[Tensor<E>]) -> Result<Tensor<E>>,
{
    if inputs.is_empty() {
        return Err(Error::Invalid("grad_check needs at least one input".into()));
    }
    let leaves: Vec<Tensor<E>> = inputs.iter().map(|t| t.clone().with_requires_grad()).collect();
    let mut tape = GradTape::new();
    let root = f(&mut tape, &leaves)?;
    if root.len() != 1 {
        return Err(Error::Tape("grad_check function must return a scalar".into()));
    }
    let analytic = tape.backward(&root)?;

    let eval = |probe: &[Tensor<E>]| -> Result<E> {
        let mut tape = GradTape::no_grad();
        let out = f(&mut tape, probe)?;
        out.item()
    };

    let floor = E::from_f64(1e-8);
    let two = E::from_f64(2.0);
    let mut worst = E::zero();
    for (i, input) in leaves.iter().enumerate() {
        let grad = analytic.get(input);
        for j in 0..input.len() {
            let mut plus = leaves.clone();
            let mut data = input.data().to_vec();
            data[j] = data[j] + eps;
            plus[i] = Tensor::from_vec(input.shape(), data)?;
            let f_plus = eval(&plus)?;

            let mut minus = leaves.clone();
            let mut data = input.data().to_vec();
            data[j] = data[j] - eps;
            minus[i] = Tensor::from_vec(input.shape(), data)?;
            let f_minus = eval(&minus)?;

            let numeric = (f_plus - f_minus) / (two * eps);
            let a = grad.as_ref().map(|g| g.data()[j]).unwrap_or_else(E::zero);
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
