use super::{backward_seq, forward_seq, Layer, Mode};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// `body(x) + shortcut(x)`; an empty shortcut is the identity.
#[derive(Debug, Clone)]
pub struct Residual<T> {
    pub name: String,
    pub body: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
}

impl<T: Scalar> Residual<T> {
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let a = forward_seq(&mut self.body, x, mode)?;
        if self.shortcut.is_empty() {
            a.add(x)
        } else {
            a.add(&forward_seq(&mut self.shortcut, x, mode)?)
        }
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g_body = backward_seq(&mut self.body, grad)?;
        if self.shortcut.is_empty() {
            g_body.add(grad)
        } else {
            g_body.add(&backward_seq(&mut self.shortcut, grad)?)
        }
    }
}
