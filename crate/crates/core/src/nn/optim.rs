use super::Real;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= T::from_f64(self.lr * mhat / (vhat.sqrt() + self.eps));
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: Vec<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(params: &[T], decay: f64) -> Self {
        Ema {
            decay,
            shadow: params.to_vec(),
        }
    }

    pub fn update(&mut self, params: &[T]) {
        let d = T::from_f64(self.decay);
        let one_minus = T::from_f64(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + one_minus * *p;
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.to_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_with_zero_decay_tracks_params() {
        let mut p = vec![1.0f32, 2.0, 3.0];
        let mut ema = Ema::new(&p, 0.0);
        let mut adam = Adam::new(3, 0.1);
        for _ in 0..5 {
            adam.step(&mut p, &[0.5, -1.0, 2.0]);
            ema.update(&p);
            assert_eq!(ema.shadow, p);
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
