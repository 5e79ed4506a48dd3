use crate::diffcore::rng::Rng;
use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but data has {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| std * rng.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape.first().copied().unwrap_or(1).max(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
