use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;

use super::FlowError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            cond_dim: 16,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + 1 + self.cond_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        w
    }
}

/// Dense layer with row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
                self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// MLP `(x_t, t, h) -> v` with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    config: NetConfig,
    layers: Vec<Dense>,
}

/// Gradient with the same shape as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<Dense>,
}

impl NetGrad {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &NetGrad, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += s * y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.w.iter().chain(&l.b)).copied().collect()
}

impl VelocityNet {
    /// Xavier-style Gaussian initialization from `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self, FlowError> {
        if config.latent_dim == 0 || config.hidden.contains(&0) {
            return Err(FlowError::BadConfig("layer widths must be positive".into()));
        }
        let mut r = rng::stream(config.seed, "flow/init", 0);
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut d = Dense::zeros(w[0], w[1]);
                let std = (1.0 / w[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                d.w.iter_mut().for_each(|x| *x = normal.sample(&mut r));
                d
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), FlowError> {
        if flat.len() != self.num_params() {
            return Err(FlowError::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut()
                .chain(l.b.iter_mut())
                .for_each(|x| *x = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|x| x.is_finite()))
    }

    fn input(&self, x: &[f64], t: f64, h: &[f64]) -> Result<Vec<f64>, FlowError> {
        if x.len() != self.config.latent_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: x.len(),
            });
        }
        if h.len() != self.config.cond_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.config.cond_dim,
                got: h.len(),
            });
        }
        let mut v = Vec::with_capacity(self.config.input_dim());
        v.extend_from_slice(x);
        v.push(t);
        v.extend_from_slice(h);
        Ok(v)
    }

    pub fn forward(&self, x: &[f64], t: f64, h: &[f64]) -> Result<Vec<f64>, FlowError> {
        let mut a = self.input(x, t, h)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            a = l.forward(&a);
            if i < last {
                a.iter_mut().for_each(|z| *z = z.tanh());
            }
        }
        Ok(a)
    }

    /// Squared error `‖v(x,t,h) − target‖²` and its parameter gradient.
    pub fn sq_error_grad(&self, x: &[f64], t: f64, h: &[f64], target: &[f64]) -> Result<(f64, NetGrad), FlowError> {
        if target.len() != self.config.latent_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: target.len(),
            });
        }
        // Activations entering each layer.
        let mut acts = vec![self.input(x, t, h)?];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.forward(acts.last().expect("non-empty"));
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        let out = acts.pop().expect("output");
        let resid: Vec<f64> = out.iter().zip(target).map(|(o, y)| o - y).collect();
        let loss = resid.iter().map(|r| r * r).sum();

        let mut grad = NetGrad::zeros_like(self);
        let mut delta: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let a = &acts[i];
            let g = &mut grad.layers[i];
            for (o, &d) in delta.iter().enumerate().take(l.outputs) {
                g.b[o] = d;
                let row = &mut g.w[o * l.inputs..(o + 1) * l.inputs];
                row.iter_mut().zip(a).for_each(|(w, x)| *w = d * x);
            }
            if i > 0 {
                // a = tanh(z) for hidden activations, so dz = da · (1 − a²).
                delta = (0..l.inputs)
                    .map(|j| {
                        let back: f64 = (0..l.outputs).map(|o| l.w[o * l.inputs + j] * delta[o]).sum();
                        back * (1.0 - a[j] * a[j])
                    })
                    .collect();
            }
        }
        Ok((loss, grad))
    }

    pub fn apply(&mut self, grad: &NetGrad, scale: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.w.iter_mut().zip(&g.w).for_each(|(x, d)| *x += scale * d);
            l.b.iter_mut().zip(&g.b).for_each(|(x, d)| *x += scale * d);
        }
    }
}

/// Adam state over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// Descends `grad` with step size `lr`. A zero rate is a no-op.
    pub fn step(&mut self, net: &mut VelocityNet, grad: &NetGrad, lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let g = grad.flatten();
        let mut p = net.params();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        net.set_params(&p).expect("same shape");
    }
}

/// Standard normal vector of length `d`.
pub fn gaussian<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}
