//! Adam optimizer over a flat parameter vector.

/// Learning-rate schedule applied on top of the base rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to `floor * base` over `total` steps.
    Cosine { total: usize, floor: f64 },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { total, floor } => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    fn advance(&mut self, grad: &[f64]) -> (f64, f64, f64) {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        }
        let lr = self.lr * self.schedule.factor(self.t - 1);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        (lr, bc1, bc2)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let (lr, bc1, bc2) = self.advance(grad);
        for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
        }
    }

    /// Adam step on a smooth objective followed by the proximal map of
    /// `weight * ||params - anchor||_1` under the same diagonal metric.
    pub fn step_prox_l1(&mut self, params: &mut [f64], grad: &[f64], anchor: &[f64], weight: f64) {
        let (lr, bc1, bc2) = self.advance(grad);
        for (((p, m), v), a) in params.iter_mut().zip(&self.m).zip(&self.v).zip(anchor) {
            let scale = lr / ((v / bc2).sqrt() + self.eps);
            let moved = *p - scale * (m / bc1) - a;
            let threshold = scale * weight;
            *p = a + moved.signum() * (moved.abs() - threshold).max(0.0);
        }
    }
}
