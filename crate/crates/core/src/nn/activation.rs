use alloc::vec::Vec;

use crate::math;

/// In-place rectifier; returns the pass-through mask for the backward pass.
pub fn relu_forward(data: &mut [f64]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let pass = *v > 0.0;
            if !pass {
                *v = 0.0;
            }
            pass
        })
        .collect()
}

pub fn relu_backward(grad: &mut [f64], mask: &[bool]) {
    for (g, &m) in grad.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

/// In-place logistic function; the outputs double as the backward cache.
pub fn sigmoid_forward(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = math::sigmoid(*v));
}

pub fn sigmoid_backward(grad: &mut [f64], outputs: &[f64]) {
    for (g, &s) in grad.iter_mut().zip(outputs) {
        *g *= s * (1.0 - s);
    }
}
