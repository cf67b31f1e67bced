use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Validation(format!(
                "adam state holds {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg, 4);
        let mut p = vec![0.5; 4];
        st.step(&mut p, &[1.0; 4]).unwrap();
        // m_hat = 1, v_hat = 1 => update = lr / (1 + eps).
        let expected = 0.5 - cfg.lr / (1.0 + cfg.eps);
        for v in &p {
            assert!((v - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, -1.0];
        st.step(&mut p, &[0.3, -0.2]).unwrap();
        let (m, v) = (st.m.clone(), st.v.clone());
        let before = p.clone();
        let mut st2 = st.clone();
        st2.m.iter_mut().for_each(|x| *x = 0.0);
        st2.v.iter_mut().for_each(|x| *x = 0.0);
        let mut q = before.clone();
        st2.step(&mut q, &[0.0, 0.0]).unwrap();
        assert_eq!(q, before);
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            assert_eq!(st.m[i], 0.9 * m[i]);
            assert_eq!(st.v[i], 0.999 * v[i]);
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut a = AdamState::new(AdamConfig::default(), 3);
        let mut b = a.clone();
        let mut pa = vec![0.1, 0.2, 0.3];
        let mut pb = pa.clone();
        a.step(&mut pa, &[1.0, -2.0, 3.0]).unwrap();
        b.step(&mut pb, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert!(a.step(&mut pa, &[1.0]).is_err());
    }
}
