use std::f64::consts::PI;

use super::params::{ModelConfig, ModelParams, TapeGradients, Weights};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::graph::{Edge, GraphSnapshot};

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out = W x (+ b), W is rows x cols row-major.
fn matvec(w: &[f64], cols: usize, x: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x) + b.map_or(0.0, |b| b[r]);
    }
}

/// out += W^T y
fn matvec_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += yr * wv;
        }
    }
}

/// G += y x^T
fn outer_acc(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (gv, xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

/// In-edges grouped by receiver, preserving input order within a group.
struct EdgeGroups {
    order: Vec<usize>,
    offsets: Vec<usize>,
}

impl EdgeGroups {
    fn new(edges: &[Edge], n: usize) -> Result<Self> {
        let mut counts = vec![0usize; n + 1];
        for e in edges {
            if e.dst >= n || e.src >= n {
                return Err(Error::data("edge references a missing node"));
            }
            counts[e.dst + 1] += 1;
        }
        for i in 0..n {
            if counts[i + 1] == 0 {
                return Err(Error::data(format!("node {i} has no in-edges")));
            }
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; edges.len()];
        for (k, e) in edges.iter().enumerate() {
            order[fill[e.dst]] = k;
            fill[e.dst] += 1;
        }
        Ok(EdgeGroups { order, offsets })
    }

    fn group(&self, i: usize) -> &[usize] {
        &self.order[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Concatenate `[recv_i | e | send_j]` (the self-loop uses `recv_i` twice).
fn concat(out: &mut [f64], recv: &[f64], send: &[f64], d: usize, e: &Edge, inv_len: f64) {
    out[..d].copy_from_slice(&recv[e.dst * d..(e.dst + 1) * d]);
    out[d] = e.rel.x * inv_len;
    out[d + 1] = e.rel.y * inv_len;
    let src = if e.src == e.dst { recv } else { send };
    out[d + 2..].copy_from_slice(&src[e.src * d..(e.src + 1) * d]);
}

struct LayerCache {
    /// Pre-activation logits per edge (input edge order).
    pre: Vec<f64>,
    alpha: Vec<f64>,
    /// Attention-weighted concat per node.
    zbar: Vec<f64>,
    /// Pre-ELU message per node.
    m: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    recv: &[f64],
    send: &[f64],
    edges: &[Edge],
    groups: &EdgeGroups,
    w: &[f64],
    a: &[f64],
    cfg: &ModelConfig,
    out: &mut [f64],
) -> LayerCache {
    let d = cfg.hidden;
    let c = cfg.cat_width();
    let n = groups.offsets.len() - 1;
    let inv_len = 1.0 / cfg.length_scale;
    let mut pre = vec![0.0; edges.len()];
    let mut alpha = vec![0.0; edges.len()];
    let mut zbar = vec![0.0; n * c];
    let mut m = vec![0.0; n * d];
    let mut z = vec![0.0; c];
    for i in 0..n {
        let g = groups.group(i);
        let mut max = f64::NEG_INFINITY;
        for &k in g {
            concat(&mut z, recv, send, d, &edges[k], inv_len);
            let p = dot(a, &z);
            pre[k] = p;
            let logit = if p > 0.0 { p } else { cfg.leaky_slope * p };
            alpha[k] = logit;
            max = max.max(logit);
        }
        let mut sum = 0.0;
        for &k in g {
            alpha[k] = (alpha[k] - max).exp();
            sum += alpha[k];
        }
        let zb = &mut zbar[i * c..(i + 1) * c];
        for &k in g {
            alpha[k] /= sum;
            concat(&mut z, recv, send, d, &edges[k], inv_len);
            for (acc, zv) in zb.iter_mut().zip(&z) {
                *acc += alpha[k] * zv;
            }
        }
        matvec(w, c, zb, None, &mut m[i * d..(i + 1) * d]);
        for (o, &mv) in out[i * d..(i + 1) * d].iter_mut().zip(&m[i * d..(i + 1) * d]) {
            *o = elu(mv);
        }
    }
    LayerCache { pre, alpha, zbar, m }
}

/// Reverse pass of one attention layer. Accumulates into `gw`, `ga`,
/// `d_recv` and `d_send` (which may alias the same buffer via `shared`).
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    recv: &[f64],
    send: &[f64],
    edges: &[Edge],
    groups: &EdgeGroups,
    w: &[f64],
    a: &[f64],
    cfg: &ModelConfig,
    cache: &LayerCache,
    d_out: &[f64],
    gw: &mut [f64],
    ga: &mut [f64],
    d_recv: &mut [f64],
    mut d_send: Option<&mut [f64]>,
) {
    let d = cfg.hidden;
    let c = cfg.cat_width();
    let n = groups.offsets.len() - 1;
    let inv_len = 1.0 / cfg.length_scale;
    let mut dm = vec![0.0; d];
    let mut dzbar = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut dalpha = Vec::new();
    for i in 0..n {
        for (k, v) in dm.iter_mut().enumerate() {
            *v = d_out[i * d + k] * elu_grad(cache.m[i * d + k]);
        }
        outer_acc(gw, c, &dm, &cache.zbar[i * c..(i + 1) * c]);
        dzbar.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(w, c, &dm, &mut dzbar);

        let g = groups.group(i);
        dalpha.clear();
        let mut weighted = 0.0;
        for &k in g {
            concat(&mut z, recv, send, d, &edges[k], inv_len);
            let da = dot(&dzbar, &z);
            weighted += cache.alpha[k] * da;
            dalpha.push(da);
        }
        // message path: dz_ij = alpha_ij * dzbar_i
        for (&k, &da) in g.iter().zip(&dalpha) {
            let e = &edges[k];
            let al = cache.alpha[k];
            let dlogit = al * (da - weighted);
            let dpre = if cache.pre[k] > 0.0 {
                dlogit
            } else {
                cfg.leaky_slope * dlogit
            };
            concat(&mut z, recv, send, d, e, inv_len);
            for (gv, zv) in ga.iter_mut().zip(&z) {
                *gv += dpre * zv;
            }
            // receiver half
            for q in 0..d {
                d_recv[i * d + q] += al * dzbar[q] + dpre * a[q];
            }
            // sender half
            let j = e.src;
            if j == i {
                for q in 0..d {
                    d_recv[i * d + q] += al * dzbar[d + 2 + q] + dpre * a[d + 2 + q];
                }
            } else {
                let target: &mut [f64] = match d_send.as_deref_mut() {
                    Some(s) => s,
                    None => d_recv,
                };
                for q in 0..d {
                    target[j * d + q] += al * dzbar[d + 2 + q] + dpre * a[d + 2 + q];
                }
            }
        }
    }
}

/// Attention weights for every edge (input order) of a single layer whose
/// receiver and sender states are both `h`.
pub fn attention_coefficients(
    h: &[f64],
    edges: &[Edge],
    attn: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let n = h.len() / cfg.hidden;
    let groups = EdgeGroups::new(edges, n)?;
    let w = vec![0.0; cfg.hidden * cfg.cat_width()];
    let mut out = vec![0.0; h.len()];
    Ok(layer_forward(h, h, edges, &groups, &w, attn, cfg, &mut out).alpha)
}

/// One attention layer applied to node states `h` (n x hidden).
pub fn egat_layer(
    h: &[f64],
    edges: &[Edge],
    w: &[f64],
    attn: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let n = h.len() / cfg.hidden;
    let groups = EdgeGroups::new(edges, n)?;
    let mut out = vec![0.0; h.len()];
    layer_forward(h, h, edges, &groups, w, attn, cfg, &mut out);
    Ok(out)
}

/// Log-diagonal head outputs are clamped to this range so the covariance
/// stays positive definite for every finite output.
pub const LOG_DIAG_RANGE: (f64, f64) = (-30.0, 30.0);

#[inline]
fn clamp_log(x: f64) -> f64 {
    x.clamp(LOG_DIAG_RANGE.0, LOG_DIAG_RANGE.1)
}

#[inline]
fn log_clamped(x: f64) -> bool {
    x < LOG_DIAG_RANGE.0 || x > LOG_DIAG_RANGE.1
}

/// Per-node, per-step Gaussian over future positions in the node frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub nodes: usize,
    pub horizon: usize,
    /// Raw head outputs, `nodes x horizon x 5`: mean x, mean y (scaled),
    /// log l11, l21 (scaled), log l22.
    pub raw: Vec<f64>,
    pub length_scale: f64,
}

impl GaussianPrediction {
    fn at(&self, m: usize, t: usize) -> &[f64] {
        let o = (m * self.horizon + t) * 5;
        &self.raw[o..o + 5]
    }

    pub fn mean(&self, m: usize, t: usize) -> Vec2 {
        let r = self.at(m, t);
        Vec2::new(r[0], r[1]) * self.length_scale
    }

    /// Lower Cholesky factor `(l11, l21, l22)` of the covariance.
    pub fn cholesky(&self, m: usize, t: usize) -> (f64, f64, f64) {
        let r = self.at(m, t);
        let s = self.length_scale;
        (s * clamp_log(r[2]).exp(), s * r[3], s * clamp_log(r[4]).exp())
    }

    /// Covariance `[[s11, s12], [s12, s22]]`.
    pub fn covariance(&self, m: usize, t: usize) -> [[f64; 2]; 2] {
        let (a, b, c) = self.cholesky(m, t);
        [[a * a, a * b], [a * b, b * b + c * c]]
    }
}

/// Negative log-density of residual `r` under N(0, L L^T).
pub fn step_nll(r: Vec2, l11: f64, l21: f64, l22: f64) -> f64 {
    let z1 = r.x / l11;
    let z2 = (r.y - l21 * z1) / l22;
    0.5 * (z1 * z1 + z2 * z2) + l11.ln() + l22.ln() + (2.0 * PI).ln()
}

/// Summed NLL over every present target.
pub fn nll_loss(pred: &GaussianPrediction, targets: &[Vec<Option<Vec2>>]) -> Result<f64> {
    check_targets(pred, targets)?;
    let mut total = 0.0;
    for (m, row) in targets.iter().enumerate() {
        for (t, tgt) in row.iter().enumerate().take(pred.horizon) {
            if let Some(p) = tgt {
                let (a, b, c) = pred.cholesky(m, t);
                total += step_nll(*p - pred.mean(m, t), a, b, c);
            }
        }
    }
    Ok(total)
}

fn check_targets(pred: &GaussianPrediction, targets: &[Vec<Option<Vec2>>]) -> Result<()> {
    if targets.len() != pred.nodes {
        return Err(Error::data("target count does not match node count"));
    }
    if targets.iter().flatten().flatten().any(|p| !p.is_finite()) {
        return Err(Error::data("non-finite target"));
    }
    Ok(())
}

struct ForwardCache {
    x_send: Vec<f64>,
    x_recv: Option<Vec<f64>>,
    emb_send: EmbedCache,
    emb_recv: Option<EmbedCache>,
    /// Node states entering each layer (layer 0: send embedding).
    states: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    raw: Vec<f64>,
}

struct EmbedCache {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    h: Vec<f64>,
}

fn scaled_inputs(feats: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    feats
        .chunks(cfg.input_width)
        .flat_map(|row| row.iter().zip(&cfg.input_scale).map(|(x, s)| x * s))
        .collect()
}

fn embed(x: &[f64], w: &Weights, cfg: &ModelConfig) -> EmbedCache {
    let d = cfg.hidden;
    let f = cfg.input_width;
    let n = x.len() / f;
    let mut z1 = vec![0.0; n * d];
    let mut z2 = vec![0.0; n * d];
    for i in 0..n {
        matvec(&w.embed0_w, f, &x[i * f..(i + 1) * f], Some(&w.embed0_b), &mut z1[i * d..(i + 1) * d]);
    }
    let a1: Vec<f64> = z1.iter().map(|&v| elu(v)).collect();
    for i in 0..n {
        matvec(&w.embed1_w, d, &a1[i * d..(i + 1) * d], Some(&w.embed1_b), &mut z2[i * d..(i + 1) * d]);
    }
    let h = z2.iter().map(|&v| elu(v)).collect();
    EmbedCache { z1, a1, z2, h }
}

fn embed_backward(x: &[f64], cache: &EmbedCache, dh: &[f64], w: &Weights, g: &mut Weights, cfg: &ModelConfig) {
    let d = cfg.hidden;
    let f = cfg.input_width;
    let n = x.len() / f;
    let mut dz2 = vec![0.0; d];
    let mut dz1 = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            dz2[k] = dh[i * d + k] * elu_grad(cache.z2[i * d + k]);
        }
        outer_acc(&mut g.embed1_w, d, &dz2, &cache.a1[i * d..(i + 1) * d]);
        for k in 0..d {
            g.embed1_b[k] += dz2[k];
        }
        dz1.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&w.embed1_w, d, &dz2, &mut dz1);
        for k in 0..d {
            dz1[k] *= elu_grad(cache.z1[i * d + k]);
            g.embed0_b[k] += dz1[k];
        }
        outer_acc(&mut g.embed0_w, f, &dz1, &x[i * f..(i + 1) * f]);
    }
}

fn run_forward(snap: &GraphSnapshot, params: &ModelParams) -> Result<(ForwardCache, EdgeGroups)> {
    let cfg = &params.config;
    let w = &params.weights;
    if snap.feature_width != cfg.input_width {
        return Err(Error::Config(format!(
            "feature-width mismatch: snapshot has {}, model expects {}",
            snap.feature_width, cfg.input_width
        )));
    }
    let n = snap.node_count();
    let groups = EdgeGroups::new(&snap.edges, n)?;
    let x_send = scaled_inputs(&snap.features, cfg);
    let x_recv = snap.ego_features.as_ref().map(|f| scaled_inputs(f, cfg));
    let emb_send = embed(&x_send, w, cfg);
    let emb_recv = x_recv.as_ref().map(|x| embed(x, w, cfg));
    let d = cfg.hidden;
    let mut states = vec![emb_send.h.clone()];
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut out = vec![0.0; n * d];
        let send = &states[l];
        let recv = match (l, &emb_recv) {
            (0, Some(e)) => &e.h,
            _ => send,
        };
        let cache = layer_forward(recv, send, &snap.edges, &groups, &w.layer_w[l], &w.layer_a[l], cfg, &mut out);
        layers.push(cache);
        states.push(out);
    }
    let hw = cfg.head_width();
    let mut raw = vec![0.0; n * hw];
    let last = &states[cfg.layers];
    for i in 0..n {
        matvec(&w.head_w, d, &last[i * d..(i + 1) * d], Some(&w.head_b), &mut raw[i * hw..(i + 1) * hw]);
    }
    Ok((
        ForwardCache {
            x_send,
            x_recv,
            emb_send,
            emb_recv,
            states,
            layers,
            raw,
        },
        groups,
    ))
}

/// Embedding, attention layers and Gaussian head for every node.
pub fn forward(snap: &GraphSnapshot, params: &ModelParams) -> Result<GaussianPrediction> {
    let (cache, _) = run_forward(snap, params)?;
    Ok(GaussianPrediction {
        nodes: snap.node_count(),
        horizon: params.config.horizon,
        raw: cache.raw,
        length_scale: params.config.length_scale,
    })
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Summed NLL over present targets.
    pub loss: f64,
    /// Number of (node, step) targets that contributed.
    pub count: usize,
    pub grads: TapeGradients,
}

/// Summed NLL of `targets` and its exact gradient.
pub fn backward(
    snap: &GraphSnapshot,
    params: &ModelParams,
    targets: &[Vec<Option<Vec2>>],
) -> Result<LossAndGrad> {
    let cfg = &params.config;
    let w = &params.weights;
    let (cache, groups) = run_forward(snap, params)?;
    let n = snap.node_count();
    let pred = GaussianPrediction {
        nodes: n,
        horizon: cfg.horizon,
        raw: cache.raw,
        length_scale: cfg.length_scale,
    };
    check_targets(&pred, targets)?;
    let s = cfg.length_scale;
    let hw = cfg.head_width();
    let mut d_raw = vec![0.0; n * hw];
    let mut loss = 0.0;
    let mut count = 0;
    for (m, row) in targets.iter().enumerate() {
        for (t, tgt) in row.iter().enumerate().take(cfg.horizon) {
            let Some(p) = tgt else { continue };
            let (l11, l21, l22) = pred.cholesky(m, t);
            let r = *p - pred.mean(m, t);
            let z1 = r.x / l11;
            let z2 = (r.y - l21 * z1) / l22;
            loss += 0.5 * (z1 * z1 + z2 * z2) + l11.ln() + l22.ln() + (2.0 * PI).ln();
            count += 1;
            let gz1 = z1 - z2 * l21 / l22;
            let o = m * hw + 5 * t;
            d_raw[o] = -s * gz1 / l11;
            d_raw[o + 1] = -s * z2 / l22;
            let raw = &pred.raw[o..o + 5];
            d_raw[o + 2] = if log_clamped(raw[2]) { 0.0 } else { 1.0 - gz1 * z1 };
            d_raw[o + 3] = -s * z1 * z2 / l22;
            d_raw[o + 4] = if log_clamped(raw[4]) { 0.0 } else { 1.0 - z2 * z2 };
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }

    let d = cfg.hidden;
    let mut g = Weights::zeros(cfg);
    let last = &cache.states[cfg.layers];
    let mut dh = vec![0.0; n * d];
    for i in 0..n {
        let dr = &d_raw[i * hw..(i + 1) * hw];
        outer_acc(&mut g.head_w, d, dr, &last[i * d..(i + 1) * d]);
        for (gb, v) in g.head_b.iter_mut().zip(dr) {
            *gb += v;
        }
        matvec_t_acc(&w.head_w, d, dr, &mut dh[i * d..(i + 1) * d]);
    }
    let mut d_recv_embed: Option<Vec<f64>> = None;
    for l in (0..cfg.layers).rev() {
        let send = &cache.states[l];
        let mut d_in = vec![0.0; n * d];
        let split = l == 0 && cache.emb_recv.is_some();
        if split {
            let recv = &cache.emb_recv.as_ref().expect("split").h;
            let mut d_r = vec![0.0; n * d];
            layer_backward(
                recv, send, &snap.edges, &groups, &w.layer_w[l], &w.layer_a[l], cfg, &cache.layers[l], &dh,
                &mut g.layer_w[l], &mut g.layer_a[l], &mut d_r, Some(&mut d_in),
            );
            d_recv_embed = Some(d_r);
        } else {
            layer_backward(
                send, send, &snap.edges, &groups, &w.layer_w[l], &w.layer_a[l], cfg, &cache.layers[l], &dh,
                &mut g.layer_w[l], &mut g.layer_a[l], &mut d_in, None,
            );
        }
        dh = d_in;
    }
    embed_backward(&cache.x_send, &cache.emb_send, &dh, w, &mut g, cfg);
    if let (Some(x), Some(e), Some(dr)) = (&cache.x_recv, &cache.emb_recv, &d_recv_embed) {
        embed_backward(x, e, dr, w, &mut g, cfg);
    }
    Ok(LossAndGrad {
        loss,
        count,
        grads: TapeGradients { weights: g },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Frame, GraphConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(d: usize) -> ModelConfig {
        ModelConfig {
            input_width: 3,
            hidden: d,
            layers: 2,
            horizon: 2,
            leaky_slope: 0.2,
            length_scale: 1.0,
            input_scale: vec![1.0; 3],
        }
    }

    fn self_loops(n: usize) -> Vec<Edge> {
        (0..n)
            .map(|i| Edge {
                src: i,
                dst: i,
                rel: Vec2::ZERO,
            })
            .collect()
    }

    #[test]
    fn equal_logits_split_evenly() {
        let cfg = small_cfg(2);
        let h = vec![1.0, 2.0, 1.0, 2.0];
        let mut edges = self_loops(2);
        edges.push(Edge {
            src: 1,
            dst: 0,
            rel: Vec2::ZERO,
        });
        let a = vec![0.3, -0.1, 0.0, 0.0, 0.5, 0.7];
        let alpha = attention_coefficients(&h, &edges, &a, &cfg).unwrap();
        assert!((alpha[0] - 0.5).abs() < 1e-15 && (alpha[2] - 0.5).abs() < 1e-15);
        assert_eq!(alpha[1], 1.0);
    }

    #[test]
    fn softmax_of_known_logits() {
        // logits a.z = 1, 2, 3 via the edge feature channel only
        let cfg = small_cfg(1);
        let h = vec![0.0; 4];
        let edges: Vec<Edge> = (1..=3)
            .map(|k| Edge {
                src: k,
                dst: 0,
                rel: Vec2::new(k as f64, 0.0),
            })
            .chain(self_loops(4).into_iter().skip(1))
            .collect();
        let a = vec![0.0, 1.0, 0.0, 0.0];
        let alpha = attention_coefficients(&h, &edges, &a, &cfg).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for k in 0..3 {
            assert!((alpha[k] - expect[k]).abs() < 1e-12, "{alpha:?}");
        }
    }

    #[test]
    fn zero_weight_layer_outputs_zero() {
        let cfg = small_cfg(3);
        let h = vec![0.4; 6];
        let w = vec![0.0; 3 * cfg.cat_width()];
        let a = vec![0.1; cfg.cat_width()];
        let out = egat_layer(&h, &self_loops(2), &w, &a, &cfg).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_in_edges_is_an_error() {
        let cfg = small_cfg(1);
        let r = egat_layer(&[0.0, 0.0], &self_loops(1), &[0.0; 4], &[0.0; 4], &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn nll_reference_values() {
        let ln2pi = (2.0 * PI).ln();
        assert!((step_nll(Vec2::ZERO, 1.0, 0.0, 1.0) - 1.8378770664093453).abs() < 1e-12);
        assert!((step_nll(Vec2::new(1.0, 0.0), 1.0, 0.0, 1.0) - (ln2pi + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_non_finite_targets() {
        let pred = GaussianPrediction {
            nodes: 1,
            horizon: 1,
            raw: vec![0.0; 5],
            length_scale: 1.0,
        };
        assert!(nll_loss(&pred, &[vec![Some(Vec2::new(f64::NAN, 0.0))]]).is_err());
        assert!((nll_loss(&pred, &[vec![Some(Vec2::ZERO)]]).unwrap() - (2.0 * PI).ln()).abs() < 1e-12);
        assert_eq!(nll_loss(&pred, &[vec![None]]).unwrap(), 0.0);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let g = GraphConfig::default();
        let cfg = ModelConfig::for_graph(&g, 4, 1);
        let params = ModelParams::zeros(cfg);
        let snap = GraphSnapshot {
            agent_ids: vec![0],
            feature_width: 7,
            features: vec![0.0; 7],
            ego_features: None,
            edges: self_loops(1),
            frames: vec![Frame::IDENTITY],
            targets: None,
        };
        assert!(matches!(forward(&snap, &params), Err(Error::Config(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg(4);
        let params = ModelParams::init(cfg, &mut rng);
        let n = 3;
        let mut edges = self_loops(n);
        edges.push(Edge {
            src: 2,
            dst: 0,
            rel: Vec2::new(1.0, -2.0),
        });
        let snap = GraphSnapshot {
            agent_ids: (0..n as u64).collect(),
            feature_width: 3,
            features: (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ego_features: None,
            edges,
            frames: vec![Frame::IDENTITY; n],
            targets: None,
        };
        let targets = vec![vec![Some(Vec2::new(1.0, 0.5)), None]; n];
        let a = backward(&snap, &params, &targets).unwrap();
        let b = backward(&snap, &params, &targets).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.count, 3);
    }
}
