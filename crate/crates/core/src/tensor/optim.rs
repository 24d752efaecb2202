use super::Tensor;
use crate::error::{Error, Result};

fn check_buffers(state: &mut Vec<Vec<f32>>, params: &[&mut Tensor]) -> Result<()> {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.len() != params.len() || state.iter().zip(params).any(|(s, p)| s.len() != p.len()) {
        return Err(Error::invalid(
            "optimizer state does not match parameter list",
        ));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `buf ← μ·buf + g`, `p ← p − lr·buf`.
/// The first step initializes `buf = g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    buffers: Vec<Vec<f32>>,
    steps: u64,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            buffers: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter that requires a gradient. A trainable
    /// parameter without a gradient is an error.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_buffers(&mut self.buffers, params)?;
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        let first = self.steps == 0;
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad.take().unwrap_or_default();
            for ((w, b), gv) in p.data.iter_mut().zip(buf.iter_mut()).zip(&g) {
                *b = if first || self.momentum == 0.0 {
                    *gv
                } else {
                    self.momentum * *b + gv
                };
                *w -= self.lr * *b;
            }
            p.grad = Some(g);
        }
        self.steps += 1;
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_buffers(&mut self.m, params)?;
        check_buffers(&mut self.v, params)?;
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad.take().unwrap_or_default();
            for (((w, mi), vi), &gv) in p
                .data
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(&g)
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor {
        let mut p = Tensor::full(&[1], v).with_grad();
        p.accumulate_grad(&[g]).unwrap();
        p
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = param(1.0, 1.0);
        let mut opt = Sgd::new(0.001, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = param(0.5, 0.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut [&mut p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 0.5);
    }

    #[test]
    fn sgd_momentum_unrolled() {
        let lr = 0.001f32;
        let mut p = param(1.0, 1.0);
        let mut opt = Sgd::new(lr, 0.9);
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - lr * 1.0 - lr * 1.9;
        assert!((p.data()[0] - expected).abs() < 1e-7);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Tensor::full(&[2], 1.0).with_grad();
        assert!(matches!(
            Sgd::new(0.1, 0.0).step(&mut [&mut p]),
            Err(Error::MissingGrad(0))
        ));
        assert!(matches!(
            Adam::new(0.1).step(&mut [&mut p]),
            Err(Error::MissingGrad(0))
        ));
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = param(1.0, 1.0);
        let mut opt = Adam::new(0.001);
        opt.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = param(2.0, 0.0);
        let mut opt = Adam::new(0.001);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 2.0);
    }

    #[test]
    fn adam_step_scale_invariant() {
        for scale in [1e-2f32, 1.0, 1e3] {
            let mut p = param(0.0, scale);
            let mut opt = Adam::new(0.001);
            opt.step(&mut [&mut p]).unwrap();
            assert!((p.data()[0].abs() - 0.001).abs() < 1e-6, "scale {scale}");
        }
    }

    #[test]
    fn optimizers_are_deterministic() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.1, -0.2, 0.3])
                .unwrap()
                .with_grad();
            let mut opt = Adam::new(0.01);
            for k in 0..5 {
                p.zero_grad();
                p.accumulate_grad(&[k as f32, 1.0, -0.5]).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            p.into_data()
        };
        assert_eq!(run(), run());
    }
}
