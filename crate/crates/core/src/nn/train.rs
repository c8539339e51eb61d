use super::{AdamW, Grads, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Global gradient-norm ceiling applied before every optimizer step.
pub const CLIP_NORM: f64 = 1.0;

/// One optimizer step over a mini-batch. `build` records the loss of one
/// sample on a fresh tape; gradients are averaged over the batch, clipped
/// and applied. Returns the mean sample loss.
pub fn train_step<F>(params: &mut ParamSet, opt: &mut AdamW, lr: f64, batch: &[usize], mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, usize) -> Result<Var>,
{
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut grads = Grads::new(params.len());
    let mut total = 0.0;
    for &i in batch {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape, i)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::TrainingDivergence(format!(
                "non-finite loss {value} on sample {i}"
            )));
        }
        total += value;
        grads.merge(&tape.backward(loss).params);
    }
    grads.scale(1.0 / batch.len() as f64);
    if !grads.is_finite() {
        return Err(Error::TrainingDivergence("non-finite gradient".into()));
    }
    grads.clip_global_norm(CLIP_NORM);
    opt.step(params, &grads, lr);
    Ok(total / batch.len() as f64)
}
