use super::Tensor;

/// What a trainable tensor is, which decides e.g. whether L2 decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        self == ParamRole::ConvWeight
    }
}

/// A trainable value and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub role: ParamRole,
}

impl ParamTensor {
    pub fn new(value: Tensor, role: ParamRole) -> Self {
        let grad = Tensor::zeros_unchecked(value.shape());
        ParamTensor { value, grad, role }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
