//! Test-side oracles, written without reference to the library's algorithms.
#![allow(dead_code)]

use floss_core::mdag::{EdgeSpec, MDag, VariableNode};
use floss_core::model::Dataset;
use floss_core::synth::{LatencyProfile, UserRecord};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

/// DAG over at most 16 vertices as parent bitmasks.
#[derive(Debug, Clone)]
pub struct SmallDag {
    pub n: usize,
    pub parents: Vec<u16>,
}

pub fn vname(i: usize) -> String {
    format!("V{i}")
}

impl SmallDag {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut parents = vec![0u16; n];
        for &(p, c) in edges {
            parents[c] |= 1 << p;
        }
        Self { n, parents }
    }

    /// Random DAG: shuffle an order, keep each forward pair with probability `p`.
    pub fn random<R: Rng>(n: usize, p: f64, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((order[i], order[j]));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for c in 0..self.n {
            for p in 0..self.n {
                if self.parents[c] >> p & 1 == 1 {
                    out.push((p, c));
                }
            }
        }
        out
    }

    pub fn to_mdag(&self) -> MDag {
        let vertices = (0..self.n).map(|i| VariableNode::observed(vname(i))).collect();
        let edges = self.edges().into_iter().map(|(p, c)| EdgeSpec::new(vname(p), vname(c))).collect();
        MDag::new(vertices, edges).expect("acyclic by construction")
    }

    /// Repeatedly strip vertices with no remaining parents.
    pub fn has_cycle(&self) -> bool {
        let mut alive: u16 = if self.n == 16 { u16::MAX } else { (1 << self.n) - 1 };
        loop {
            let free = (0..self.n).find(|&v| alive >> v & 1 == 1 && self.parents[v] & alive == 0);
            match free {
                Some(v) => alive &= !(1 << v),
                None => return alive != 0,
            }
        }
    }

    /// Bitmask of `v` and everything reachable from it along directed edges.
    pub fn descendants(&self, v: usize) -> u16 {
        let mut seen = 1u16 << v;
        let mut frontier = vec![v];
        while let Some(u) = frontier.pop() {
            for c in 0..self.n {
                if self.parents[c] >> u & 1 == 1 && seen >> c & 1 == 0 {
                    seen |= 1 << c;
                    frontier.push(c);
                }
            }
        }
        seen
    }

    fn adjacent(&self, u: usize, v: usize) -> bool {
        self.parents[u] >> v & 1 == 1 || self.parents[v] >> u & 1 == 1
    }
}

/// Separation by listing every simple undirected path from `a` to `b` and
/// checking each interior vertex: colliders must have a descendant in `c`,
/// non-colliders must lie outside `c`.
pub fn brute_dsep(g: &SmallDag, a: usize, b: usize, c: u16) -> bool {
    let desc: Vec<u16> = (0..g.n).map(|v| g.descendants(v)).collect();
    let mut path = vec![a];
    !any_open_path(g, b, c, &desc, &mut path)
}

fn any_open_path(g: &SmallDag, b: usize, c: u16, desc: &[u16], path: &mut Vec<usize>) -> bool {
    let last = *path.last().unwrap();
    if last == b {
        return path_open(g, c, desc, path);
    }
    for next in 0..g.n {
        if g.adjacent(last, next) && !path.contains(&next) {
            path.push(next);
            let open = any_open_path(g, b, c, desc, path);
            path.pop();
            if open {
                return true;
            }
        }
    }
    false
}

fn path_open(g: &SmallDag, c: u16, desc: &[u16], path: &[usize]) -> bool {
    path.windows(3).all(|w| {
        let (u, v, x) = (w[0], w[1], w[2]);
        let collider = g.parents[v] >> u & 1 == 1 && g.parents[v] >> x & 1 == 1;
        if collider {
            desc[v] & c != 0
        } else {
            c >> v & 1 == 0
        }
    })
}

/// Separation via the moralized ancestral graph: restrict to ancestors of
/// `a | b | c`, marry co-parents, drop directions, delete `c`, and test
/// connectivity.
pub fn moral_dsep(g: &SmallDag, a: u16, b: u16, c: u16) -> bool {
    let n = g.n;
    let mut anc = a | b | c;
    loop {
        let mut next = anc;
        for v in 0..n {
            if anc >> v & 1 == 1 {
                next |= g.parents[v];
            }
        }
        if next == anc {
            break;
        }
        anc = next;
    }
    let mut adj = vec![0u16; n];
    for v in 0..n {
        if anc >> v & 1 == 0 {
            continue;
        }
        let ps = g.parents[v];
        for p in 0..n {
            if ps >> p & 1 == 1 {
                adj[v] |= 1 << p;
                adj[p] |= 1 << v;
                adj[p] |= ps & !(1 << p);
            }
        }
    }
    let mut seen = a & !c;
    let mut frontier: Vec<usize> = (0..n).filter(|&v| seen >> v & 1 == 1).collect();
    while let Some(u) = frontier.pop() {
        for v in 0..n {
            if adj[u] >> v & 1 == 1 && anc >> v & 1 == 1 && c >> v & 1 == 0 && seen >> v & 1 == 0 {
                seen |= 1 << v;
                frontier.push(v);
            }
        }
    }
    seen & b == 0
}

pub fn names(mask: u16, n: usize) -> Vec<String> {
    (0..n).filter(|&v| mask >> v & 1 == 1).map(vname).collect()
}

pub fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean.
pub fn sem(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Logistic regression by iteratively reweighted least squares. Returns
/// coefficients and their asymptotic standard errors.
pub fn logistic_fit(rows: &[Vec<f64>], y: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let p = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let yv = DVector::from_iterator(y.len(), y.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for _ in 0..50 {
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let xtw = DMatrix::from_fn(p, rows.len(), |j, i| x[(i, j)] * w[i]);
        info = &xtw * &x;
        let score = x.transpose() * (&yv - &mu);
        let step = info.clone().lu().solve(&score).expect("information matrix is invertible");
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    let cov = info.try_inverse().expect("information matrix is invertible");
    let se = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    (beta.iter().copied().collect(), se)
}

/// Cell `(d, z, s, users, responders)` of the binary micro-population.
/// Response probabilities are `expit(-ln 3 d + ln 3 s)`: 1/2, 3/4, 1/4, 1/2
/// for `(d, s)` = 00, 01, 10, 11, and each cell's responder count is exactly
/// its expected value, so the moment equations vanish at that `beta`.
pub const MICRO_CELLS: [(u8, u8, u8, usize, usize); 8] = [
    (0, 0, 0, 40, 20),
    (0, 0, 1, 8, 6),
    (0, 1, 0, 8, 4),
    (0, 1, 1, 40, 30),
    (1, 0, 0, 32, 8),
    (1, 0, 1, 12, 6),
    (1, 1, 0, 12, 3),
    (1, 1, 1, 32, 16),
];

pub fn micro_beta() -> [f64; 3] {
    let l3 = 3f64.ln();
    [0.0, -l3, l3]
}

pub fn micro_population() -> Vec<UserRecord> {
    let mut users = Vec::new();
    for &(d, z, s, total, responders) in &MICRO_CELLS {
        for i in 0..total {
            let r = i < responders;
            let id = users.len();
            users.push(UserRecord {
                id,
                d_rest: vec![d as f64],
                z: z as f64,
                dataset: Dataset::new(1),
                s_latent: s as f64,
                s: r.then_some(s as f64),
                s_responded: r,
                r,
                latency: LatencyProfile { location: 0.0, scale: 0.0 },
                true_pi: 0.0,
            });
        }
    }
    users
}

/// Moment residuals of the micro-population computed from cell counts.
pub fn micro_residuals(beta: &[f64; 3]) -> [f64; 3] {
    let n: usize = MICRO_CELLS.iter().map(|c| c.3).sum();
    let mut m = [0.0; 3];
    for &(d, z, s, total, responders) in &MICRO_CELLS {
        let p = sigmoid(beta[0] + beta[1] * d as f64 + beta[2] * s as f64);
        let term = responders as f64 / p - total as f64;
        let f = [1.0, d as f64, z as f64];
        for i in 0..3 {
            m[i] += term * f[i];
        }
    }
    m.map(|v| v / n as f64)
}

/// Coarse-to-fine grid search for the root of [`micro_residuals`]: a 9^3
/// grid around the incumbent, halving the spacing after each pass.
pub fn micro_grid_root() -> ([f64; 3], f64) {
    let norm = |b: &[f64; 3]| micro_residuals(b).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut best = [0.0; 3];
    let mut best_val = norm(&best);
    let mut h = 0.5;
    while h > 1e-13 {
        let centre = best;
        for i in -4i32..=4 {
            for j in -4i32..=4 {
                for k in -4i32..=4 {
                    let b = [centre[0] + i as f64 * h, centre[1] + j as f64 * h, centre[2] + k as f64 * h];
                    let v = norm(&b);
                    if v < best_val {
                        best = b;
                        best_val = v;
                    }
                }
            }
        }
        if best == centre {
            h *= 0.5;
        }
    }
    (best, best_val)
}
