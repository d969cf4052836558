//! Reverse-mode differentiation, trainable parameters, Adam and a
//! central-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Gradients, Tape, Tensor, Var, DEGENERATE_NORM};

pub(crate) use tape::theta_over_sin;

use crate::error::{Error, Result};

/// A trainable matrix with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    /// Registers the current value on `tape` as a differentiated leaf.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.variable(self.value.clone())
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.dim() != self.value.dim() {
            return Err(Error::Contract(format!(
                "gradient for '{}' has shape {:?}, expected {:?}",
                self.name,
                grad.dim(),
                self.value.dim()
            )));
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Binds every parameter, builds the loss, runs backward and stores each
/// gradient on its parameter. Returns the loss value.
pub fn compute_gradients<F>(params: &mut [Parameter], build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| p.bind(&mut tape)).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.grad(loss, &vars)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.set_grad(g)?;
    }
    Ok(value)
}
