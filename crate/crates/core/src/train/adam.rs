use ndarray::{Array1, Array2};

use super::loss::Gradients;
use crate::model::{swap_cols, swap_rows, GeomMlp};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(model: &GeomMlp, lr: f64) -> Self {
        let zw = || model.weights().iter().map(|w| Array2::zeros(w.dim())).collect();
        let zb = || model.biases().iter().map(|b| Array1::zeros(b.len())).collect();
        Self {
            lr,
            t: 0,
            m_w: zw(),
            v_w: zw(),
            m_b: zb(),
            v_b: zb(),
        }
    }

    pub fn step(&mut self, model: &mut GeomMlp, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        };
        for g in 0..grads.weights.len() {
            ndarray::Zip::from(&mut model.weights[g])
                .and(&grads.weights[g])
                .and(&mut self.m_w[g])
                .and(&mut self.v_w[g])
                .for_each(|p, &gr, m, v| update(p, gr, m, v));
            ndarray::Zip::from(&mut model.biases[g])
                .and(&grads.biases[g])
                .and(&mut self.m_b[g])
                .and(&mut self.v_b[g])
                .for_each(|p, &gr, m, v| update(p, gr, m, v));
        }
    }

    /// Mirror [`GeomMlp::swap_neurons`] on the optimizer moments.
    pub fn swap_neurons(&mut self, layer: usize, a: usize, b: usize) {
        if a == b {
            return;
        }
        for (mw, mb) in [(&mut self.m_w, &mut self.m_b), (&mut self.v_w, &mut self.v_b)] {
            swap_rows(&mut mw[layer - 1], a, b);
            mb[layer - 1].swap(a, b);
            swap_cols(&mut mw[layer], a, b);
        }
    }
}
