use crate::autodiff::{Gradients, ParamStore};
use crate::scalar::Scalar;

/// AdamW with the AMSGrad running maximum of the second moment.
///
/// Weight decay is decoupled and skipped for biases and layer-norm
/// parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
            decay: params.iter().map(|(_, n, _)| decays(n)).collect(),
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.0;
            let tensor = params.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let g = grads.get(id);
            let decay = if self.decay[i] { self.weight_decay } else { 0.0 };
            for (j, w) in tensor.values_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j].as_f64());
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                let vm = &mut self.v_max[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *vm = vm.max(*v);
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * (*m / bc1) / ((*vm / bc2).sqrt() + self.eps);
                *w = T::from_f64_lossy(x);
            }
        }
    }
}
