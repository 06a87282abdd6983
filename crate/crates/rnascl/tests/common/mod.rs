//! Shared fixtures: plain-f64 scalar re-implementations of the losses,
//! written from their definitions without touching the graph, plus a
//! central-difference gradient checker. The oracle constants are frozen
//! here on purpose; they must not be imported from the library.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnascl::graph::{Graph, Var};
use rnascl::tensor::Tensor;

pub const ORACLE_NORM_EPS: f64 = 1e-12;
pub const ORACLE_KL_EPS: f64 = 1e-12;
pub const ORACLE_MIN_DIM: usize = 4;

/// One activation block (n, c, h, w) in row-major order.
#[derive(Clone, Debug)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w);
        Act { n, c, h, w, data }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.n, self.c, self.h, self.w], self.data.clone()).unwrap()
    }
}

/// Channel-wise square sum, one (h*w) plane per sample.
pub fn oracle_attention_map(a: &Act) -> Vec<Vec<f64>> {
    let hw = a.h * a.w;
    (0..a.n)
        .map(|ni| {
            let mut plane = vec![0.0; hw];
            for ci in 0..a.c {
                let src = &a.data[(ni * a.c + ci) * hw..][..hw];
                for (o, &v) in plane.iter_mut().zip(src) {
                    *o += v * v;
                }
            }
            plane
        })
        .collect()
}

/// Corner-aligned bilinear resize of one (h, w) plane.
pub fn oracle_bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pos = |oi: usize, olen: usize, ilen: usize| -> (usize, usize, f64) {
        if olen == 1 || ilen == 1 {
            return (0, 0, 0.0);
        }
        let src = oi as f64 * (ilen - 1) as f64 / (olen - 1) as f64;
        let lo = (src.floor() as usize).min(ilen - 1);
        (lo, (lo + 1).min(ilen - 1), src - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = pos(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = pos(ox, ow, w);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

pub fn oracle_unit_row(v: &[f64]) -> Vec<f64> {
    let norm = (v.iter().map(|x| x * x).sum::<f64>() + ORACLE_NORM_EPS).sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Attention rows per sample: square-sum map, resize to the common extent,
/// flatten, normalize to unit length.
pub fn oracle_normalized_rows(a: &Act, dh: usize, dw: usize) -> Vec<Vec<f64>> {
    oracle_attention_map(a)
        .iter()
        .map(|plane| oracle_unit_row(&oracle_bilinear(plane, a.h, a.w, dh, dw)))
        .collect()
}

pub fn oracle_common_dim(acts: &[&Act]) -> (usize, usize) {
    let h = acts.iter().map(|a| a.h).min().unwrap().max(ORACLE_MIN_DIM);
    let w = acts.iter().map(|a| a.w).min().unwrap().max(ORACLE_MIN_DIM);
    (h, w)
}

/// Weighted cross-layer attention distance:
/// (1/(n_s*n_t)) * sum_ij rows[i][j] * mean_b ||s_i(b) - t_j(b)||_2.
pub fn oracle_attention_loss(students: &[Act], teachers: &[Act], rows: &[Vec<f64>]) -> f64 {
    let all: Vec<&Act> = students.iter().chain(teachers).collect();
    let (dh, dw) = oracle_common_dim(&all);
    let s_rows: Vec<Vec<Vec<f64>>> = students
        .iter()
        .map(|a| oracle_normalized_rows(a, dh, dw))
        .collect();
    let t_rows: Vec<Vec<Vec<f64>>> = teachers
        .iter()
        .map(|a| oracle_normalized_rows(a, dh, dw))
        .collect();
    let batch = students[0].n;
    let mut total = 0.0;
    for (i, s) in s_rows.iter().enumerate() {
        for (j, t) in t_rows.iter().enumerate() {
            let mut mean = 0.0;
            for b in 0..batch {
                let sq: f64 = s[b].iter().zip(&t[b]).map(|(a, b)| (a - b) * (a - b)).sum();
                mean += (sq + ORACLE_NORM_EPS).sqrt();
            }
            total += rows[i][j] * mean / batch as f64;
        }
    }
    total / (students.len() * teachers.len()) as f64
}

pub fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Batch-mean cross entropy from raw logit rows.
pub fn oracle_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        total -= row[y] - m - z.ln();
    }
    total / logits.len() as f64
}

/// Batch-mean KL divergence sum_k p_k (ln(p_k + eps) - ln(q_k + eps)).
pub fn oracle_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&a, &b) in pr.iter().zip(qr) {
            total += a * ((a + ORACLE_KL_EPS).ln() - (b + ORACLE_KL_EPS).ln());
        }
    }
    total / p.len() as f64
}

pub fn oracle_gumbel_rows(logits: &[Vec<f64>], noise: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .zip(noise)
        .map(|(l, n)| {
            let shifted: Vec<f64> = l.iter().zip(n).map(|(&a, &b)| (a + b) / tau).collect();
            oracle_softmax(&shifted)
        })
        .collect()
}

pub fn oracle_search_loss(
    ce: f64,
    kl: Option<f64>,
    attn: Option<f64>,
    gamma_s: f64,
    n_f: f64,
) -> f64 {
    (ce + kl.unwrap_or(0.0) + gamma_s * attn.unwrap_or(0.0)) * n_f
}

pub fn oracle_train_loss(ce: f64, kl: Option<f64>, attn: Option<f64>, gamma_t: f64) -> f64 {
    ce + kl.unwrap_or(0.0) + gamma_t * attn.unwrap_or(0.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi).
pub fn rand_tensor<R: Rng>(r: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * r.random::<f64>())
}

/// Magnitudes in [lo, hi) with independent random signs; keeps values away
/// from zero so square roots and maxima in the ops under test stay smooth
/// at the probe scale.
pub fn rand_signed<R: Rng>(r: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = lo + (hi - lo) * r.random::<f64>();
        if r.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Reduce a tensor-valued op output to a scalar with fixed random weights
/// so every output element influences the loss.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut r = rng(seed ^ 0x77ee_d5ee_d000_0000);
    let w = g.leaf(rand_signed(&mut r, shape, 0.3, 1.0), false);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

pub struct CheckReport {
    pub max_rel: f64,
    pub elements: usize,
}

/// Compare reverse-mode gradients against central differences. Every input
/// becomes a gradient-enabled leaf; the builder maps the leaves to a scalar
/// loss. Relative error uses the larger of the two magnitudes, floored at
/// 1e-2 so near-zero pairs compare absolutely.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> CheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    assert!(g.value(loss).is_scalar(), "loss must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for (k, input) in inputs.iter().enumerate() {
        let shape = input.shape().to_vec();
        for i in 0..input.numel() {
            let mut plus = input.data().to_vec();
            plus[i] += h;
            work[k] = Tensor::new(shape.clone(), plus).unwrap();
            let lp = eval(&work);
            let mut minus = input.data().to_vec();
            minus[i] -= h;
            work[k] = Tensor::new(shape.clone(), minus).unwrap();
            let lm = eval(&work);
            work[k] = input.clone();
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[k][i];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            elements += 1;
        }
    }
    CheckReport { max_rel, elements }
}
