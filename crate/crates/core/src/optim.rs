//! Trainable parameters and stochastic gradient descent with momentum.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    /// Dotted path, e.g. `encoder.stage2.block0.conv1.weight`.
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Same length as `value`, zero until the first step.
    pub momentum: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// One SGD update over every parameter, then clears the gradients:
///
/// ```text
/// g <- grad + weight_decay * w
/// m <- momentum * m + g
/// w <- w - lr * (g + momentum * m)   (nesterov)
/// w <- w - lr * m                    (otherwise)
/// ```
pub fn sgd_step(params: &mut [Parameter], opt: Sgd) -> Result<()> {
    for p in params.iter() {
        ensure!(p.grad.is_some(), "parameter {} has no gradient", p.name);
        ensure!(
            p.momentum.len() == p.value.len(),
            "momentum buffer of {} has {} values, expected {}",
            p.name,
            p.momentum.len(),
            p.value.len()
        );
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        for ((w, m), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.iter_mut())
            .zip(grad.data())
        {
            let g = g + opt.weight_decay * *w;
            *m = opt.momentum * *m + g;
            let update = if opt.nesterov { g + opt.momentum * *m } else { *m };
            *w -= opt.lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("p", Tensor::full(&[1], v));
        p.grad = Some(Tensor::full(&[1], g));
        p
    }

    const PLAIN: Sgd = Sgd {
        lr: 0.5,
        momentum: 0.0,
        nesterov: false,
        weight_decay: 0.0,
    };

    #[test]
    fn vanilla_step() {
        let mut ps = [param(1.0, 2.0)];
        sgd_step(&mut ps, PLAIN).unwrap();
        assert_eq!(ps[0].value.data(), &[0.0]);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = [param(3.0, 0.0)];
        sgd_step(&mut ps, PLAIN).unwrap();
        assert_eq!(ps[0].value.data(), &[3.0]);
    }

    #[test]
    fn heavy_ball_recurrence() {
        let opt = Sgd {
            lr: 1.0,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
        };
        let mut ps = [param(0.0, 1.0)];
        sgd_step(&mut ps, opt).unwrap();
        assert_eq!(ps[0].value.data(), &[-1.0]);
        ps[0].grad = Some(Tensor::full(&[1], 1.0));
        sgd_step(&mut ps, opt).unwrap();
        assert!((ps[0].value.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn nesterov_looks_ahead() {
        let opt = Sgd {
            lr: 1.0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
        };
        let mut ps = [param(0.0, 1.0)];
        sgd_step(&mut ps, opt).unwrap();
        // m = 1, update = 1 + 0.9
        assert!((ps[0].value.data()[0] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = [Parameter::new("w", Tensor::zeros(&[2]))];
        assert!(sgd_step(&mut ps, PLAIN).is_err());
    }
}
