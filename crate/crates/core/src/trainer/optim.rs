use crate::model::ParamSet;

/// Adam with bias correction; the step size is mutable for plateau decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<ParamSet>,
    v: Vec<ParamSet>,
}

impl Adam {
    pub fn new(lr: f64, params: &[ParamSet]) -> Self {
        let zeros = |p: &ParamSet| {
            let mut z = p.clone();
            for (_, t) in z.iter_mut() {
                t.fill(0.0);
            }
            z
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [ParamSet], grads: &[ParamSet]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (name, w) in p.iter_mut() {
                let Some(g) = g.get(name) else { continue };
                let m = m.get_mut(name).expect("moment layout");
                let v = v.get_mut(name).expect("moment layout");
                ndarray::Zip::from(w)
                    .and(g)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [ParamSet], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter().flat_map(|(_, t)| t.iter()))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for (_, t) in g.iter_mut() {
                t.mapv_inplace(|v| v * s);
            }
        }
    }
    norm
}
