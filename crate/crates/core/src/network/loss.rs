use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn one_hot(rows: usize, classes: usize, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
    }
    let mut data = vec![0.0; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Argument(format!("label {l} outside [0, {classes})")));
        }
        data[r * classes + l] = 1.0;
    }
    Tensor::new(&[rows, classes], data)
}

fn logit_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim("cross_entropy", format!("logits must be a matrix, got {s:?}"))),
    }
}

/// Mean over rows of `-log softmax(logits)[label]`, recorded on the tape.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = logit_shape(tape.shape(logits))?;
    let mask = tape.constant(one_hot(rows, classes, labels)?);
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Value-only form of [`cross_entropy_loss`].
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logit_shape(logits.shape())?;
    let mask = one_hot(rows, classes, labels)?;
    let logp = logits.log_softmax_axis(1)?;
    Ok(-logp.mul(&mask)?.sum_all() / rows as f64)
}
