use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::GraphConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub horizon: usize,
    pub leaky_slope: f64,
    /// Positions and edge features are divided by this before use; means
    /// and Cholesky factors are multiplied by it.
    pub length_scale: f64,
    /// Per-column input multiplier (length `input_width`).
    pub input_scale: Vec<f64>,
}

impl ModelConfig {
    pub fn for_graph(graph: &GraphConfig, hidden: usize, layers: usize) -> Self {
        let length_scale = 20.0;
        ModelConfig {
            input_width: graph.feature_width(),
            hidden,
            layers,
            horizon: graph.horizon,
            leaky_slope: 0.2,
            length_scale,
            input_scale: graph.input_scale(length_scale, 10.0),
        }
    }

    /// Width of the concatenated `[h_i | e_ij | h_j]` vector.
    pub fn cat_width(&self) -> usize {
        2 * self.hidden + 2
    }

    pub fn head_width(&self) -> usize {
        5 * self.horizon
    }
}

/// Every learnable tensor, row-major (`out x in` for matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed0_w: Vec<f64>,
    pub embed0_b: Vec<f64>,
    pub embed1_w: Vec<f64>,
    pub embed1_b: Vec<f64>,
    /// Per attention layer: `W` (hidden x cat_width) and `a` (cat_width).
    pub layer_w: Vec<Vec<f64>>,
    pub layer_a: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        Weights {
            embed0_w: vec![0.0; d * cfg.input_width],
            embed0_b: vec![0.0; d],
            embed1_w: vec![0.0; d * d],
            embed1_b: vec![0.0; d],
            layer_w: vec![vec![0.0; d * cfg.cat_width()]; cfg.layers],
            layer_a: vec![vec![0.0; cfg.cat_width()]; cfg.layers],
            head_w: vec![0.0; cfg.head_width() * d],
            head_b: vec![0.0; cfg.head_width()],
        }
    }

    /// (name, shape) for every tensor, in a fixed order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.hidden;
        let mut v = vec![
            ("embed.0.weight".to_string(), vec![d, cfg.input_width]),
            ("embed.0.bias".to_string(), vec![d]),
            ("embed.1.weight".to_string(), vec![d, d]),
            ("embed.1.bias".to_string(), vec![d]),
        ];
        for l in 0..cfg.layers {
            v.push((format!("egat.{l}.weight"), vec![d, cfg.cat_width()]));
            v.push((format!("egat.{l}.attn"), vec![cfg.cat_width()]));
        }
        v.push(("head.weight".to_string(), vec![cfg.head_width(), d]));
        v.push(("head.bias".to_string(), vec![cfg.head_width()]));
        v
    }

    /// Tensors in [`Weights::layout`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.embed0_w, &self.embed0_b, &self.embed1_w, &self.embed1_b];
        for (w, a) in self.layer_w.iter().zip(&self.layer_a) {
            v.push(w);
            v.push(a);
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.embed0_w,
            &mut self.embed0_b,
            &mut self.embed1_w,
            &mut self.embed1_b,
        ];
        for (w, a) in self.layer_w.iter_mut().zip(self.layer_a.iter_mut()) {
            v.push(w);
            v.push(a);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
}

/// Gradient of a scalar loss with respect to every entry of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct TapeGradients {
    pub weights: Weights,
}

impl TapeGradients {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        TapeGradients {
            weights: Weights::zeros(cfg),
        }
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in out {
        *x = rng.random_range(-bound..bound);
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, and a head scaled down so the
    /// initial prediction is close to a unit Gaussian at the origin.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut w = Weights::zeros(&config);
        let d = config.hidden;
        glorot(rng, config.input_width, d, &mut w.embed0_w);
        glorot(rng, d, d, &mut w.embed1_w);
        for l in 0..config.layers {
            glorot(rng, config.cat_width(), d, &mut w.layer_w[l]);
            glorot(rng, config.cat_width(), 1, &mut w.layer_a[l]);
        }
        glorot(rng, d, config.head_width(), &mut w.head_w);
        for x in &mut w.head_w {
            *x *= 0.1;
        }
        ModelParams { config, weights: w }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let weights = Weights::zeros(&config);
        ModelParams { config, weights }
    }
}
