//! Cross-layer distillation: attention-map normalization, the learned
//! student-to-teacher connection weights, and the search/train losses.
//!
//! Activations enter as graph variables so the losses stay differentiable
//! end to end; teacher activations are expected to come from a frozen
//! binding and therefore receive no gradient.

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gumbel;
use crate::tensor::Tensor;

/// Floor applied inside logs so degenerate distributions stay finite.
pub const KL_EPS: f64 = 1e-12;

/// Smallest common attention extent; tiny late-stage maps are upsampled
/// rather than collapsing every map to their size.
pub const MIN_COMMON_DIM: usize = 4;

/// Trainable student-layer to teacher-layer association logits.
#[derive(Clone, Debug)]
pub struct ConnectionMatrix<E: Real> {
    pub logits: Tensor<E>,
}

impl<E: Real> ConnectionMatrix<E> {
    pub fn new(n_s: usize, n_t: usize) -> Self {
        ConnectionMatrix {
            logits: Tensor::zeros(vec![n_s, n_t]),
        }
    }

    pub fn n_s(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn n_t(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Per student layer, the teacher layer with the largest logit; ties
    /// resolve to the lowest index.
    pub fn derive_tutors(&self) -> Vec<usize> {
        let n_t = self.n_t();
        (0..self.n_s())
            .map(|i| gumbel::argmax(&self.logits.data()[i * n_t..][..n_t]))
            .collect()
    }
}

/// How many student layers connect to each teacher layer.
pub fn connection_histogram(tutors: &[usize], n_t: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_t];
    for &t in tutors {
        counts[t] += 1;
    }
    counts
}

/// Common target extent for attention comparison: the smallest height and
/// width over all maps, floored at [`MIN_COMMON_DIM`].
pub fn common_dim(shapes: &[(usize, usize)]) -> (usize, usize) {
    let min_h = shapes.iter().map(|s| s.0).min().unwrap_or(MIN_COMMON_DIM);
    let min_w = shapes.iter().map(|s| s.1).min().unwrap_or(MIN_COMMON_DIM);
    (min_h.max(MIN_COMMON_DIM), min_w.max(MIN_COMMON_DIM))
}

/// One-hot connection rows for the training phase.
pub fn one_hot_rows<E: Real>(n_s: usize, n_t: usize, tutors: &[usize]) -> Tensor<E> {
    debug_assert_eq!(tutors.len(), n_s);
    Tensor::from_fn(vec![n_s, n_t], |idx| {
        let (i, j) = (idx / n_t, idx % n_t);
        if tutors[i] == j {
            E::one()
        } else {
            E::zero()
        }
    })
}

/// One-hot label matrix (n, classes).
pub fn one_hot_batch<E: Real>(labels: &[usize], classes: usize) -> Tensor<E> {
    Tensor::from_fn(vec![labels.len(), classes], |idx| {
        let (i, k) = (idx / classes, idx % classes);
        if labels[i] == k {
            E::one()
        } else {
            E::zero()
        }
    })
}

/// Flattened, l2-normalized attention map per sample: (n, c, h, w)
/// activations to (n, dh*dw) unit rows.
fn normalized_map<E: Real>(g: &mut Graph<E>, act: Var, dh: usize, dw: usize) -> Result<Var> {
    let map = g.attention_map_batched(act)?;
    let resized = g.resize_bilinear(map, dh, dw)?;
    let n = g.value(resized).shape()[0];
    let flat = g.reshape(resized, vec![n, dh * dw])?;
    g.row_normalize(flat)
}

/// Batch-averaged distance matrix weighted by connection rows:
///
/// ```text
/// (1/(n_s*n_t)) * sum_ij rows[i][j] * mean_b || s_hat_i(b) - t_hat_j(b) ||_2
/// ```
///
/// `rows` is an (n_s, n_t) variable whose rows lie on the simplex, either
/// Gumbel-Softmax samples (search) or one-hot constants (training).
pub fn attention_loss_with_rows<E: Real>(
    g: &mut Graph<E>,
    student_acts: &[Var],
    teacher_acts: &[Var],
    rows: Var,
) -> Result<Var> {
    let n_s = student_acts.len();
    let n_t = teacher_acts.len();
    if n_s == 0 || n_t == 0 {
        return Err(Error::InvalidShape {
            op: "attention_loss",
            shape: vec![n_s, n_t],
            reason: "need at least one student and one teacher layer".into(),
        });
    }
    if g.value(rows).shape() != [n_s, n_t] {
        return Err(Error::ShapeMismatch {
            op: "attention_loss",
            lhs: g.value(rows).shape().to_vec(),
            rhs: vec![n_s, n_t],
        });
    }
    let mut shapes = Vec::new();
    let batch = g.value(student_acts[0]).shape()[0];
    for &a in student_acts.iter().chain(teacher_acts) {
        let s = g.value(a).shape();
        if s.len() != 4 || s[0] != batch {
            return Err(Error::InvalidShape {
                op: "attention_loss",
                shape: s.to_vec(),
                reason: "activations must be (n, c, h, w) with one batch size".into(),
            });
        }
        shapes.push((s[2], s[3]));
    }
    let (dh, dw) = common_dim(&shapes);
    let students: Vec<Var> = student_acts
        .iter()
        .map(|&a| normalized_map(g, a, dh, dw))
        .collect::<Result<_>>()?;
    let teachers: Vec<Var> = teacher_acts
        .iter()
        .map(|&a| normalized_map(g, a, dh, dw))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for (i, &s) in students.iter().enumerate() {
        for (j, &t) in teachers.iter().enumerate() {
            let diff = g.sub(s, t)?;
            let dist = g.row_norm(diff)?;
            let avg = g.mean(dist);
            let w_ij = g.pick(rows, i * n_t + j)?;
            let term = g.mul(w_ij, avg)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let scale = g.constant(real::<E>(1.0 / (n_s * n_t) as f64));
    g.mul(total.expect("n_s, n_t >= 1"), scale)
}

/// Search-phase attention loss: connection rows drawn by Gumbel-Softmax
/// over the matrix logits at temperature `tau` with the supplied noise.
pub fn attention_loss<E: Real>(
    g: &mut Graph<E>,
    student_acts: &[Var],
    teacher_acts: &[Var],
    conn_logits: Var,
    tau: f64,
    noise: Var,
) -> Result<Var> {
    let rows = gumbel::gumbel_softmax(g, conn_logits, tau, noise)?;
    attention_loss_with_rows(g, student_acts, teacher_acts, rows)
}

/// Training-phase attention loss with hard tutor assignments. The
/// 1/(n_s*n_t) scale is retained so search and train magnitudes match.
pub fn attention_loss_hard<E: Real>(
    g: &mut Graph<E>,
    student_acts: &[Var],
    teacher_acts: &[Var],
    tutors: &[usize],
) -> Result<Var> {
    let rows = g.leaf(
        one_hot_rows(student_acts.len(), teacher_acts.len(), tutors),
        false,
    );
    attention_loss_with_rows(g, student_acts, teacher_acts, rows)
}

/// Batch-mean KL divergence, student first: sum_i p_i log(p_i / q_i).
/// Both arguments are probability rows; logs are floored by [`KL_EPS`].
pub fn kl_term<E: Real>(g: &mut Graph<E>, p: Var, q: Var) -> Result<Var> {
    let ps = g.value(p).shape().to_vec();
    if ps.len() != 2 || g.value(q).shape() != ps {
        return Err(Error::ShapeMismatch {
            op: "kl_term",
            lhs: ps,
            rhs: g.value(q).shape().to_vec(),
        });
    }
    let batch = ps[0];
    let eps = g.constant(real::<E>(KL_EPS));
    let pe = g.add(p, eps)?;
    let qe = g.add(q, eps)?;
    let lp = g.log(pe)?;
    let lq = g.log(qe)?;
    let diff = g.sub(lp, lq)?;
    let weighted = g.mul(p, diff)?;
    let total = g.sum(weighted);
    let inv_batch = g.constant(real::<E>(1.0 / batch as f64));
    g.mul(total, inv_batch)
}

/// Batch-mean cross entropy from raw logits and one-hot labels.
pub fn cross_entropy<E: Real>(g: &mut Graph<E>, logits: Var, labels_one_hot: Var) -> Result<Var> {
    let ls = g.value(logits).shape().to_vec();
    if ls.len() != 2 || g.value(labels_one_hot).shape() != ls {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: ls,
            rhs: g.value(labels_one_hot).shape().to_vec(),
        });
    }
    let batch = ls[0];
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(labels_one_hot, logp)?;
    let total = g.sum(picked);
    let scale = g.constant(real::<E>(-1.0 / batch as f64));
    g.mul(total, scale)
}

/// Search objective: `(ce + kl + gamma_s * attn) * n_f`. The optional
/// terms drop out for the ablation arms that exclude them.
pub fn search_loss<E: Real>(
    g: &mut Graph<E>,
    ce: Var,
    kl: Option<Var>,
    attn: Option<Var>,
    gamma_s: f64,
    n_f: Var,
) -> Result<Var> {
    let bracket = bracket_sum(g, ce, kl, attn, gamma_s)?;
    g.mul(bracket, n_f)
}

/// Training objective: `ce + kl + gamma_t * attn`, no cost multiplier.
pub fn train_loss<E: Real>(
    g: &mut Graph<E>,
    ce: Var,
    kl: Option<Var>,
    attn: Option<Var>,
    gamma_t: f64,
) -> Result<Var> {
    bracket_sum(g, ce, kl, attn, gamma_t)
}

fn bracket_sum<E: Real>(
    g: &mut Graph<E>,
    ce: Var,
    kl: Option<Var>,
    attn: Option<Var>,
    gamma: f64,
) -> Result<Var> {
    let mut acc = ce;
    if let Some(kl) = kl {
        acc = g.add(acc, kl)?;
    }
    if let Some(attn) = attn {
        let gamma = g.constant(real::<E>(gamma));
        let weighted = g.mul(attn, gamma)?;
        acc = g.add(acc, weighted)?;
    }
    Ok(acc)
}
