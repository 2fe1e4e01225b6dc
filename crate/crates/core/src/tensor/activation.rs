use super::Tensor;
use crate::error::Result;

/// Negative-side slope used by the structure network.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu_forward(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// The derivative at exactly zero takes the negative branch.
pub fn leaky_relu_backward(grad_out: &Tensor, x: &Tensor, slope: f64) -> Result<Tensor> {
    grad_out.zip_map(x, |g, v| if v > 0.0 { g } else { slope * g })
}
