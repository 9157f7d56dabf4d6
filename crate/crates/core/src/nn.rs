//! Minimal f64 multilayer perceptron with exact gradients, used by the
//! variational plan-inference model and the representation probes.
//! Hidden activations are tanh; the output layer is linear.

use rand_chacha::ChaCha8Rng;

use crate::model::tensor::{dot, gauss};

#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// weights[l] is [sizes[l+1] x sizes[l]] row-major
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// acts[0] is the input; acts[l+1] the output of layer l (post-activation)
    pub acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Xavier-style init: normal with std 1/sqrt(fan_in).
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| gauss(rng) * std).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        assert_eq!(x.len(), self.sizes[0]);
        let mut acts = vec![x.to_vec()];
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = acts.last().unwrap();
            let mut out = vec![0.0; n_out];
            for (o, y) in out.iter_mut().enumerate() {
                *y = dot(&self.weights[l][o * n_in..(o + 1) * n_in], prev) + self.biases[l][o];
                if l + 1 < self.n_layers() {
                    *y = y.tanh();
                }
            }
            acts.push(out);
        }
        MlpCache { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    /// Backpropagates dL/d(output); accumulates into `grads`, returns dL/dx.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut delta = dout.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.acts[l];
            if l + 1 < self.n_layers() {
                // delta currently holds dL/d(post-tanh); convert to pre-act
                for (dv, &a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *dv *= 1.0 - a * a;
                }
            }
            for o in 0..n_out {
                let d = delta[o];
                grads.biases[l][o] += d;
                let grow = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                for (g, &xi) in grow.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let wrow = &self.weights[l][o * n_in..(o + 1) * n_in];
                for (dxi, &w) in dx.iter_mut().zip(wrow) {
                    *dxi += d * w;
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub fn flat_grads(grads: &MlpGrads) -> Vec<&Vec<f64>> {
        grads.weights.iter().chain(grads.biases.iter()).collect()
    }
}

/// AdamW over a set of flat parameter vectors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; `params[i]` and `grads[i]` must match the shapes given at
    /// construction in the same order.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[4, 6, 3], &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        // loss = sum of squares of outputs
        let cache = mlp.forward_cached(&x);
        let out = cache.acts.last().unwrap().clone();
        let dout: Vec<f64> = out.iter().map(|&o| 2.0 * o).collect();
        let mut grads = mlp.zero_grads();
        let dx = mlp.backward(&cache, &dout, &mut grads);
        let f = |m: &Mlp, x: &[f64]| -> f64 { m.forward(x).iter().map(|o| o * o).sum() };
        let h = 1e-6;
        for l in 0..mlp.n_layers() {
            for i in (0..mlp.weights[l].len()).step_by(5) {
                let mut mp = mlp.clone();
                mp.weights[l][i] += h;
                let mut mm = mlp.clone();
                mm.weights[l][i] -= h;
                let fd = (f(&mp, &x) - f(&mm, &x)) / (2.0 * h);
                assert!((fd - grads.weights[l][i]).abs() < 1e-6, "w{l}[{i}]");
            }
            let mut bp = mlp.clone();
            bp.biases[l][0] += h;
            let mut bm = mlp.clone();
            bm.biases[l][0] -= h;
            let fd = (f(&bp, &x) - f(&bm, &x)) / (2.0 * h);
            assert!((fd - grads.biases[l][0]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&mlp, &xp) - f(&mlp, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut p = vec![vec![5.0, -3.0]];
        let mut opt = AdamW::new(0.1, 0.0, &[2]);
        for _ in 0..500 {
            let g = vec![vec![2.0 * p[0][0], 2.0 * p[0][1]]];
            let grefs: Vec<&Vec<f64>> = g.iter().collect();
            let mut prefs: Vec<&mut Vec<f64>> = p.iter_mut().collect();
            opt.update(&mut prefs, &grefs);
        }
        assert!(p[0][0].abs() < 1e-3 && p[0][1].abs() < 1e-3);
    }
}
