use super::Real;

/// A dense row-major tensor. Values are immutable during a forward pass;
/// `grad` is filled by the optimizer path after backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Real = f32> {
    shape: Vec<usize>,
    values: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Real> Tensor<E> {
    pub fn new(values: Vec<E>, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![E::ZERO; n], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], vec![1])
    }

    pub fn filled(v: E, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![v; n], shape)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[E] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [E] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<E>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.values.len(), "grad length mismatch");
        }
        self.grad = grad;
    }

    /// Converts element type; drops any gradient.
    pub fn cast<F: Real>(&self) -> Tensor<F> {
        let mut t = Tensor::new(
            self.values.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            self.shape.clone(),
        );
        t.requires_grad = self.requires_grad;
        t
    }
}
