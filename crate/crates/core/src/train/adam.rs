//! Adam over flat parameter vectors.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize, eps: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update with a per-element learning rate.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let rate = lr(i);
            if rate == 0.0 {
                continue;
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Keep moments of retained entries; new entries start at zero.
    /// `source[j]` is the old index of new element block `j`, with blocks
    /// of `block` elements.
    pub fn remap(&mut self, source: &[Option<usize>], block: usize) {
        let mut m = vec![0.0; source.len() * block];
        let mut v = vec![0.0; source.len() * block];
        for (j, s) in source.iter().enumerate() {
            if let Some(i) = s {
                m[j * block..(j + 1) * block].copy_from_slice(&self.m[i * block..(i + 1) * block]);
                v[j * block..(j + 1) * block].copy_from_slice(&self.v[i * block..(i + 1) * block]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_a_quadratic() {
        // f(x) = sum_i a_i (x_i - c_i)^2 has its minimum at c
        let a = [1.0, 10.0, 0.1];
        let c = [0.7, -1.3, 2.5];
        let mut x = vec![0.0; 3];
        let mut opt = Adam::new(3, 1e-8);
        for step in 0..2000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
            // step decay keeps the final iterate tight
            let lr = 0.05 * 0.998f64.powi(step);
            opt.update(&mut x, &g, |_| lr);
        }
        for i in 0..3 {
            assert!((x[i] - c[i]).abs() < 1e-4, "{i}: {}", x[i]);
        }
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut x = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 1e-15);
        opt.update(&mut x, &[3.0, -4.0], |_| 0.0);
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn remap_keeps_and_zeroes() {
        let mut opt = Adam::new(4, 1e-8);
        opt.m = vec![1.0, 2.0, 3.0, 4.0];
        opt.v = vec![5.0, 6.0, 7.0, 8.0];
        opt.remap(&[Some(1), None, Some(0)], 2);
        assert_eq!(opt.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(opt.v, vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
