//! Feed-forward encoders with a Gaussian head, forward and backward by hand.
//!
//! `input -> tanh(W1 x + b1) -> tanh(W2 h1 + b2) -> (W_mu h2 + b_mu, clamp(W_lv h2 + b_lv))`

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gaussian::{clamp_log_var_grad, GaussianEmbedding, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::{Error, Result};

/// Initial bias of the log-variance head.
pub const LOG_VAR_BIAS_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Weights uniform in `+-1/sqrt(in_dim)`, biases zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter grads for `d_out` and, when asked, writes `d_in`.
    #[inline]
    fn backward(&self, x: &[f64], d_out: &[f64], grads: &mut Dense, d_in: Option<&mut [f64]>) {
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if let Some(d_in) = d_in {
            d_in.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in d_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, w) in d_in.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

fn embedding(mu: Vec<f64>, raw_log_var: &[f64]) -> Result<GaussianEmbedding> {
    if raw_log_var.iter().chain(&mu).any(|v| !v.is_finite()) {
        return Err(Error::invalid("encoder produced non-finite output"));
    }
    let clamped = raw_log_var.iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
    GaussianEmbedding::new(mu, clamped)
}

/// Two tanh hidden layers followed by mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Vec<Dense>,
    pub mu_head: Dense,
    pub log_var_head: Dense,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre_activations: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    mu: Vec<f64>,
    raw_log_var: Vec<f64>,
}

impl Encoder {
    pub fn init(input_dim: usize, hidden: &[usize], embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Dense::init(prev, h, rng));
            prev = h;
        }
        let mu_head = Dense::init(prev, embed_dim, rng);
        let mut log_var_head = Dense::init(prev, embed_dim, rng);
        log_var_head.bias.iter_mut().for_each(|b| *b = LOG_VAR_BIAS_INIT);
        Self { hidden: layers, mu_head, log_var_head }
    }

    /// Same architecture, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            mu_head: Dense::zeros(self.mu_head.in_dim, self.mu_head.out_dim),
            log_var_head: Dense::zeros(self.log_var_head.in_dim, self.log_var_head.out_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.mu_head).in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.mu_head.out_dim
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.out_dim).collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain([&self.mu_head, &self.log_var_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain([&mut self.mu_head, &mut self.log_var_head])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: per layer, weights then biases.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn add_assign(&mut self, other: &Encoder) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<GaussianEmbedding> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(GaussianEmbedding, ForwardCache)> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.hidden.len());
        let mut activations = Vec::with_capacity(self.hidden.len());
        let mut cur = x.to_vec();
        for layer in &self.hidden {
            let mut pre = vec![0.0; layer.out_dim];
            layer.forward_into(&cur, &mut pre);
            let next: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            pre_activations.push(pre);
            activations.push(next.clone());
            cur = next;
        }
        let (mu, raw_log_var) = self.heads(&cur);
        let z = embedding(mu.clone(), &raw_log_var)?;
        Ok((z, ForwardCache { input: x.to_vec(), pre_activations, activations, mu, raw_log_var }))
    }

    fn heads(&self, top: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut mu = vec![0.0; self.mu_head.out_dim];
        self.mu_head.forward_into(top, &mut mu);
        let mut raw_log_var = vec![0.0; self.log_var_head.out_dim];
        self.log_var_head.forward_into(top, &mut raw_log_var);
        (mu, raw_log_var)
    }

    /// Output when the parameter at `index` (in [`Encoder::param_slices`]
    /// order) is replaced by `value`, reusing the unperturbed pass in `cache`.
    ///
    /// Only values downstream of the changed parameter are recomputed: one
    /// unit of its layer, a rank-one update of the next layer, dense layers
    /// after that. Finite-difference checks use this to avoid full passes.
    pub fn forward_with_param(&self, cache: &ForwardCache, index: usize, value: f64) -> Result<GaussianEmbedding> {
        let (layer_idx, offset) = self.locate(index)?;
        let n_hidden = self.hidden.len();
        let layer = self.layers().nth(layer_idx).expect("located layer exists");
        let layer_in = match layer_idx {
            0 => &cache.input,
            k if k >= n_hidden => cache.activations.last().unwrap_or(&cache.input),
            k => &cache.activations[k - 1],
        };
        let n_weights = layer.weight.len();
        // change in the pre-activation of one output unit
        let (unit, d_pre) = if offset < n_weights {
            let (r, c) = (offset / layer.in_dim, offset % layer.in_dim);
            (r, (value - layer.weight[offset]) * layer_in[c])
        } else {
            let r = offset - n_weights;
            (r, value - layer.bias[r])
        };

        if layer_idx >= n_hidden {
            let mut mu = cache.mu.clone();
            let mut raw = cache.raw_log_var.clone();
            let target = if layer_idx == n_hidden { &mut mu } else { &mut raw };
            target[unit] += d_pre;
            return embedding(mu, &raw);
        }

        let mut act = cache.activations[layer_idx].clone();
        let new_unit = (cache.pre_activations[layer_idx][unit] + d_pre).tanh();
        let mut sparse = Some((unit, new_unit - act[unit]));
        act[unit] = new_unit;
        for k in layer_idx + 1..n_hidden {
            let next = &self.hidden[k];
            act = match sparse.take() {
                Some((r, dh)) => cache.pre_activations[k]
                    .iter()
                    .enumerate()
                    .map(|(o, p)| (p + next.weight[o * next.in_dim + r] * dh).tanh())
                    .collect(),
                None => {
                    let mut pre = vec![0.0; next.out_dim];
                    next.forward_into(&act, &mut pre);
                    pre.iter().map(|v| v.tanh()).collect()
                }
            };
        }
        let (mu, raw) = match sparse {
            Some((r, dh)) => {
                let rank_one = |head: &Dense, base: &[f64]| -> Vec<f64> {
                    base.iter().enumerate().map(|(o, b)| b + head.weight[o * head.in_dim + r] * dh).collect()
                };
                (rank_one(&self.mu_head, &cache.mu), rank_one(&self.log_var_head, &cache.raw_log_var))
            }
            None => self.heads(&act),
        };
        embedding(mu, &raw)
    }

    /// Layer index (hidden layers, then mu head, then log-variance head) and
    /// offset within that layer's weights-then-biases block.
    fn locate(&self, mut index: usize) -> Result<(usize, usize)> {
        for (k, layer) in self.layers().enumerate() {
            let n = layer.weight.len() + layer.bias.len();
            if index < n {
                return Ok((k, index));
            }
            index -= n;
        }
        Err(Error::invalid(format!("parameter index out of range for {} parameters", self.num_params())))
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// on the mean and the (clamped) log-variance.
    pub fn backward(&self, cache: &ForwardCache, d_mu: &[f64], d_log_var: &[f64], grads: &mut Encoder) {
        let top = cache.activations.last().unwrap_or(&cache.input);
        let d_raw: Vec<f64> =
            d_log_var.iter().zip(&cache.raw_log_var).map(|(g, &raw)| g * clamp_log_var_grad(raw)).collect();

        let mut d_h = vec![0.0; top.len()];
        let mut d_tmp = vec![0.0; top.len()];
        self.mu_head.backward(top, d_mu, &mut grads.mu_head, Some(&mut d_h));
        self.log_var_head.backward(top, &d_raw, &mut grads.log_var_head, Some(&mut d_tmp));
        for (a, b) in d_h.iter_mut().zip(&d_tmp) {
            *a += b;
        }

        for k in (0..self.hidden.len()).rev() {
            let act = &cache.activations[k];
            // through tanh: d pre = d h * (1 - h^2)
            let d_pre: Vec<f64> = d_h.iter().zip(act).map(|(g, h)| g * (1.0 - h * h)).collect();
            let layer_in = if k == 0 { &cache.input } else { &cache.activations[k - 1] };
            let mut d_in = vec![0.0; layer_in.len()];
            let want_input = k > 0;
            self.hidden[k].backward(layer_in, &d_pre, &mut grads.hidden[k], want_input.then_some(&mut d_in[..]));
            d_h = d_in;
        }
    }
}
