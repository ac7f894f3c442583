use crate::tensor::{Tensor, TensorError};

pub fn relu_forward(input: &Tensor) -> Result<Tensor, TensorError> {
    input.max_scalar(0.0)
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor, TensorError> {
    if input.dims() != grad_out.dims() {
        return Err(TensorError::ShapeMismatch {
            left: input.dims().to_vec(),
            right: grad_out.dims().to_vec(),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.dims(), data)
}
