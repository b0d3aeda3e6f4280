use crate::params::ParamSet;

/// Adam with a fixed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, lr: f32) -> Self {
        Self::with_moments(params, lr, 0.9, 0.999)
    }

    pub fn with_moments(params: &ParamSet<f32>, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched (their moments do not decay either).
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Vec<f32>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Raw optimizer state for checkpointing: (step, first moments, second moments).
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::new();
        ps.add("x", &[3], vec![1.0, -1.0, 0.5]);
        let mut opt = Adam::new(&ps, 0.01);
        opt.step(&mut ps, &[Some(vec![2.0, -3.0, 0.0])]);
        let d = &ps.iter().next().unwrap().data;
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] - -0.99).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("x", &[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..2000 {
            let x = ps.iter().next().unwrap().data.clone();
            let g = vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            opt.step(&mut ps, &[Some(g)]);
        }
        let x = &ps.iter().next().unwrap().data;
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }
}
