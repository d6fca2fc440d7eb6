use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

/// A named array of weights (or a non-trainable buffer such as BN running
/// statistics) with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape does not match data");
        let grad = vec![0.0; value.len()];
        Self { shape: shape.to_vec(), value, grad, trainable: true }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    pub fn buffer(shape: &[usize], v: f64) -> Self {
        Self { trainable: false, ..Self::filled(shape, v) }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.into()
    } else {
        format!("{prefix}.{name}")
    }
}
