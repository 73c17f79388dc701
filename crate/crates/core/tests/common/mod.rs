#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficsim::egat::{backward, forward, nll_loss, ModelConfig, ModelParams, Weights};
use trafficsim::graph::{Edge, Frame, GraphConfig, GraphSnapshot, HistoryMode};
use trafficsim::Vec2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random snapshot with self-loops first and up to `k` random in-neighbours.
pub fn random_snapshot<R: Rng>(rng: &mut R, n: usize, k: usize, graph: &GraphConfig) -> GraphSnapshot {
    let w = graph.feature_width();
    let features: Vec<f64> = (0..n * w).map(|_| rng.random_range(-20.0..20.0)).collect();
    let ego_features = (graph.history_mode == HistoryMode::ContextOnly).then(|| {
        let hist = 3 * graph.history_len;
        let mut e = features.clone();
        for i in 0..n {
            for v in &mut e[(i + 1) * w - hist..(i + 1) * w] {
                *v = 0.0;
            }
        }
        e
    });
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push(Edge {
            src: i,
            dst: i,
            rel: Vec2::ZERO,
        });
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for &j in others.iter().take(k) {
            edges.push(Edge {
                src: j,
                dst: i,
                rel: Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)),
            });
        }
    }
    let targets = (0..n)
        .map(|_| {
            (0..graph.horizon)
                .map(|t| {
                    (rng.random::<f64>() > 0.1)
                        .then(|| Vec2::new(rng.random_range(0.0..5.0) * (t + 1) as f64, rng.random_range(-2.0..2.0)))
                })
                .collect()
        })
        .collect();
    GraphSnapshot {
        agent_ids: (0..n as u64).collect(),
        feature_width: w,
        features,
        ego_features,
        edges,
        frames: vec![Frame::IDENTITY; n],
        targets: Some(targets),
    }
}

pub fn loss_of(snap: &GraphSnapshot, params: &ModelParams) -> f64 {
    nll_loss(&forward(snap, params).unwrap(), snap.targets.as_ref().unwrap()).unwrap()
}

/// Worst relative error per tensor group between analytic and central
/// finite-difference gradients, probing up to `probes` entries per group.
/// Relative error is `|g - fd| / max(|g|, |fd|, 1e-5 * max(1, |loss|))`;
/// the loss-scaled floor sits above the round-off noise of the difference
/// quotient so tiny gradients are compared absolutely.
pub fn gradient_check<R: Rng>(
    snap: &GraphSnapshot,
    params: &ModelParams,
    probes: usize,
    h: f64,
    rng: &mut R,
) -> Vec<(String, usize, f64)> {
    let lg = backward(snap, params, snap.targets.as_ref().unwrap()).unwrap();
    let floor = 1e-5 * lg.loss.abs().max(1.0);
    let analytic = lg.grads.weights;
    let layout = Weights::layout(&params.config);
    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (t, (name, _)) in layout.iter().enumerate() {
        let group = name.rsplit_once('.').map(|(g, _)| g.to_string()).unwrap();
        let len = analytic.slices()[t].len();
        let idx: Vec<(usize, usize)> = (0..len).map(|k| (t, k)).collect();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, v)) => v.extend(idx),
            None => groups.push((group, idx)),
        }
    }
    let a_slices = analytic.slices();
    let mut out = Vec::new();
    for (group, mut idx) in groups {
        idx.shuffle(rng);
        idx.truncate(probes);
        let mut worst: f64 = 0.0;
        for &(t, k) in &idx {
            let mut p = params.clone();
            let base = p.weights.slices()[t][k];
            p.weights.slices_mut()[t][k] = base + h;
            let up = loss_of(snap, &p);
            p.weights.slices_mut()[t][k] = base - h;
            let down = loss_of(snap, &p);
            let fd = (up - down) / (2.0 * h);
            let g = a_slices[t][k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((group, idx.len(), worst));
    }
    out
}

pub fn model_for(graph: &GraphConfig, hidden: usize, layers: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig::for_graph(graph, hidden, layers);
    ModelParams::init(cfg, &mut rng(seed))
}

/// Tracking problem solved as one dense regularized least-squares system in
/// the stacked controls: p_t = p0 + t dt v0 + sum_{s<t} dt^2 (t - s) a_s.
pub fn dense_lqr(prob: &trafficsim::sim::LqrProblem) -> (Vec<Vec2>, f64) {
    use nalgebra::{DMatrix, DVector};
    let n = prob.targets.len();
    let dt = prob.dt;
    let g = DMatrix::from_fn(n, n, |t, s| if s <= t { dt * dt * (t + 1 - s) as f64 } else { 0.0 });
    let lhs = g.transpose() * &g + DMatrix::identity(n, n) * prob.eta;
    let solve = |p0: f64, v0: f64, r: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let rhs = DVector::from_fn(n, |t, _| r(t) - p0 - (t + 1) as f64 * dt * v0);
        let a = lhs.clone().cholesky().expect("SPD").solve(&(g.transpose() * rhs));
        a.iter().copied().collect()
    };
    let ax = solve(prob.p0.x, prob.v0.x, &|t| prob.targets[t].x);
    let ay = solve(prob.p0.y, prob.v0.y, &|t| prob.targets[t].y);
    let controls: Vec<Vec2> = ax.into_iter().zip(ay).map(|(x, y)| Vec2::new(x, y)).collect();
    // cost from the closed form, independent of the library rollout
    let mut cost = prob.eta * controls.iter().map(|a| a.norm_sq()).sum::<f64>();
    for t in 0..n {
        let mut p = prob.p0 + prob.v0 * ((t + 1) as f64 * dt);
        for (s, a) in controls.iter().enumerate().take(t + 1) {
            p = p + *a * (dt * dt * (t + 1 - s) as f64);
        }
        cost += (p - prob.targets[t]).norm_sq();
    }
    (controls, cost)
}

pub fn random_lqr<R: Rng>(rng: &mut R, horizon: usize, eta: f64) -> trafficsim::sim::LqrProblem {
    let p0 = Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    let v0 = Vec2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
    let targets = (1..=horizon)
        .map(|t| p0 + Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)) * t as f64)
        .collect();
    trafficsim::sim::LqrProblem {
        p0,
        v0,
        targets,
        dt: 0.4,
        eta,
    }
}

/// Largest violation of the planned dynamics recurrences.
pub fn dynamics_residual(prob: &trafficsim::sim::LqrProblem, plan: &trafficsim::sim::LqrPlan) -> f64 {
    let dt = prob.dt;
    let mut p = prob.p0;
    let mut v = prob.v0;
    let mut worst: f64 = 0.0;
    for t in 0..plan.accelerations.len() {
        let a = plan.accelerations[t];
        let pe = p + v * dt + a * (dt * dt);
        let ve = v + a * dt;
        worst = worst.max(pe.dist(plan.positions[t])).max(ve.dist(plan.velocities[t]));
        p = plan.positions[t];
        v = plan.velocities[t];
    }
    worst
}

pub fn layer_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        input_width: 1,
        hidden: d,
        layers: 1,
        horizon: 1,
        leaky_slope: 0.2,
        length_scale: 20.0,
        input_scale: vec![1.0],
    }
}

/// Independent dense evaluation of one attention layer.
pub fn dense_layer(h: &[f64], edges: &[Edge], w: &[f64], a: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.hidden;
    let c = 2 * d + 2;
    let n = h.len() / d;
    let wm = DMatrix::from_row_slice(d, c, w);
    let av = DVector::from_row_slice(a);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mine: Vec<&Edge> = edges.iter().filter(|e| e.dst == i).collect();
        let mut z = DMatrix::zeros(mine.len(), c);
        for (r, e) in mine.iter().enumerate() {
            for q in 0..d {
                z[(r, q)] = h[i * d + q];
                z[(r, d + 2 + q)] = h[e.src * d + q];
            }
            z[(r, d)] = e.rel.x / cfg.length_scale;
            z[(r, d + 1)] = e.rel.y / cfg.length_scale;
        }
        let logits = (&z * &av).map(|x| if x > 0.0 { x } else { 0.2 * x });
        let ex = logits.map(|x| x.exp());
        let alpha = &ex / ex.sum();
        let m = &wm * (z.transpose() * alpha);
        for q in 0..d {
            out[i * d + q] = if m[q] > 0.0 { m[q] } else { m[q].exp() - 1.0 };
        }
    }
    out
}

pub fn random_edges<R: Rng>(rng: &mut R, n: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push(Edge {
            src: i,
            dst: i,
            rel: Vec2::ZERO,
        });
        for j in 0..n {
            if j != i && rng.random::<f64>() < 0.6 {
                edges.push(Edge {
                    src: j,
                    dst: i,
                    rel: Vec2::new(rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0)),
                });
            }
        }
    }
    edges
}

/// Relabel nodes so that new node `k` is old node `perm[k]`; optionally
/// reverse the edge list as well.
pub fn permuted(snap: &GraphSnapshot, perm: &[usize], shuffle_within: bool) -> GraphSnapshot {
    // perm[new] = old
    let n = perm.len();
    let w = snap.feature_width;
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let remap = |f: &Vec<f64>| -> Vec<f64> { perm.iter().flat_map(|&o| f[o * w..(o + 1) * w].to_vec()).collect() };
    let mut edges: Vec<Edge> = snap
        .edges
        .iter()
        .map(|e| Edge {
            src: inv[e.src],
            dst: inv[e.dst],
            rel: e.rel,
        })
        .collect();
    if shuffle_within {
        edges.reverse();
    }
    GraphSnapshot {
        agent_ids: perm.iter().map(|&o| snap.agent_ids[o]).collect(),
        feature_width: w,
        features: remap(&snap.features),
        ego_features: snap.ego_features.as_ref().map(remap),
        edges,
        frames: perm.iter().map(|&o| snap.frames[o]).collect(),
        targets: snap.targets.as_ref().map(|t| perm.iter().map(|&o| t[o].clone()).collect()),
    }
}
