//! White-box l-infinity attacks and robustness evaluation.
//!
//! All three attacks share one projected sign-step loop, which makes the
//! documented equivalences (single-step PGD vs FGSM, zero-momentum
//! MI-FGSM vs iterative FGSM) exact at the bit level. Model weights are
//! read-only throughout; only the input carries gradient.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::distill::{cross_entropy, one_hot_batch};
use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gumbel::argmax;
use crate::nn::Network;
use crate::tensor::Tensor;

/// Anything that maps a batched input variable to logits.
pub trait Model<E: Real> {
    fn logits(&self, g: &mut Graph<E>, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;
}

impl<E: Real> Model<E> for Network<E> {
    fn logits(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let vars = self.bind(g, false);
        Ok(self.forward(g, &vars, x, false)?.0)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// l-infinity attack parameters on the [0,1] pixel scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum_mu: f64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            steps: 1,
            step_size: epsilon,
            momentum_mu: 0.0,
            random_start: false,
        }
    }

    /// Paper-style PGD: random start, step size epsilon/4.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            momentum_mu: 0.0,
            random_start: true,
        }
    }

    pub fn mi_fgsm(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            momentum_mu: 1.0,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.epsilon)
            && self.steps >= 1
            && self.momentum_mu >= 0.0
            && (self.epsilon == 0.0 || self.step_size > 0.0);
        if !ok {
            return Err(Error::Config {
                message: format!("invalid attack parameters {self:?}"),
            });
        }
        Ok(())
    }

    /// Multi-step budgets smaller than epsilon cannot reach the ball edge.
    pub fn reachable(&self) -> bool {
        self.steps == 1 || self.steps as f64 * self.step_size >= self.epsilon
    }
}

/// Gradient of the batch cross entropy w.r.t. the input pixels.
fn input_grad<E: Real, M: Model<E>>(
    model: &M,
    x: &Tensor<E>,
    y_one_hot: &Tensor<E>,
) -> Result<Vec<E>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let logits = model.logits(&mut g, xv)?;
    let yv = g.leaf(y_one_hot.clone(), false);
    let ce = cross_entropy(&mut g, logits, yv)?;
    g.backward(ce)?;
    Ok(g.grad(xv).expect("input carries gradient").to_vec())
}

fn sign<E: Real>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

/// MI-FGSM accumulator: `g <- mu * g + grad / ||grad||_1`, with a zero
/// gradient contributing nothing that step.
fn momentum_accumulate<E: Real>(g_acc: &mut [E], grad: &[E], mu: E) {
    let mut l1 = E::zero();
    for &v in grad {
        l1 += v.abs();
    }
    if l1 > E::zero() {
        for (a, &v) in g_acc.iter_mut().zip(grad) {
            *a = mu * *a + v / l1;
        }
    } else {
        for a in g_acc.iter_mut() {
            *a = mu * *a;
        }
    }
}

/// Clamp into the epsilon ball around `orig` intersected with [0,1]. The
/// ball bounds are computed in working precision, so a final ulp walk
/// repairs any rounding that left `|adv - orig| > eps` as evaluated in E.
fn project<E: Real>(adv: &mut [E], orig: &[E], eps: E) {
    let (zero, one) = (E::zero(), E::one());
    for (a, &o) in adv.iter_mut().zip(orig) {
        let lo = o - eps;
        let hi = o + eps;
        if *a < lo {
            *a = lo;
        }
        if *a > hi {
            *a = hi;
        }
        if *a < zero {
            *a = zero;
        }
        if *a > one {
            *a = one;
        }
        while *a - o > eps || o - *a > eps {
            *a = a.step_toward(o);
        }
    }
}

fn run_attack<E: Real, M: Model<E>, R: Rng>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: Option<&mut R>,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if x.shape()[0] != y.len() {
        return Err(Error::ShapeMismatch {
            op: "attack",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = real::<E>(cfg.epsilon);
    let alpha = real::<E>(cfg.step_size);
    let y_one_hot = one_hot_batch::<E>(y, model.num_classes());
    let orig = x.data();
    let mut adv = orig.to_vec();
    if cfg.random_start {
        let rng = rng.expect("random start requires a generator");
        for a in adv.iter_mut() {
            let u: f64 = rng.random();
            *a += real::<E>(cfg.epsilon * (2.0 * u - 1.0));
        }
        project(&mut adv, orig, eps);
    }
    let mut g_acc = if cfg.momentum_mu != 0.0 {
        vec![E::zero(); adv.len()]
    } else {
        Vec::new()
    };
    let mu = real::<E>(cfg.momentum_mu);
    for _ in 0..cfg.steps {
        let cur = Tensor::new(x.shape().to_vec(), adv.clone())?;
        let grad = input_grad(model, &cur, &y_one_hot)?;
        if cfg.momentum_mu != 0.0 {
            // With mu = 0 the raw sign is used directly: the l1-normalized
            // direction has the same signs, and skipping the division
            // keeps the documented FGSM equivalences exact.
            momentum_accumulate(&mut g_acc, &grad, mu);
        }
        let dir = if cfg.momentum_mu != 0.0 {
            &g_acc
        } else {
            &grad
        };
        for (a, &d) in adv.iter_mut().zip(dir) {
            *a += alpha * sign(d);
        }
        project(&mut adv, orig, eps);
    }
    if cfg!(debug_assertions) {
        for (a, &o) in adv.iter().zip(orig) {
            debug_assert!(*a >= E::zero() && *a <= E::one());
            debug_assert!(*a - o <= eps && o - *a <= eps);
        }
    }
    Tensor::new(x.shape().to_vec(), adv)
}

/// Single sign step of size epsilon.
pub fn fgsm<E: Real, M: Model<E>>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    epsilon: f64,
) -> Result<Tensor<E>> {
    run_attack::<E, M, ChaCha8Rng>(model, x, y, &AttackConfig::fgsm(epsilon), None)
}

pub fn pgd<E: Real, M: Model<E>, R: Rng>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<E>> {
    run_attack(model, x, y, cfg, Some(rng))
}

pub fn mi_fgsm<E: Real, M: Model<E>, R: Rng>(
    model: &M,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<E>> {
    run_attack(model, x, y, cfg, Some(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Clean,
    Fgsm,
    Pgd,
    MiFgsm,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::MiFgsm => "mi_fgsm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl EvalSpec {
    pub fn clean() -> Self {
        EvalSpec {
            kind: AttackKind::Clean,
            config: AttackConfig::fgsm(0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub attack: &'static str,
    pub epsilon: f64,
    pub steps: usize,
    pub accuracy: f64,
    pub n: usize,
}

fn count_correct<E: Real, M: Model<E>>(
    model: &M,
    images: &Tensor<E>,
    labels: &[usize],
) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let logits = model.logits(&mut g, x)?;
    let v = g.value(logits);
    let classes = v.shape()[1];
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(&v.data()[i * classes..][..classes]) == label)
        .count())
}

/// Top-1 accuracy on clean inputs.
pub fn accuracy<E: Real, M: Model<E>>(model: &M, ds: &Dataset<E>, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = ds.gather(chunk);
        correct += count_correct(model, &images, &labels)?;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy under each attack spec. Random-start draws come from a
/// generator derived from (seed, spec index, batch index), so rows are
/// independent of evaluation order.
pub fn evaluate<E: Real, M: Model<E>>(
    model: &M,
    ds: &Dataset<E>,
    specs: &[EvalSpec],
    batch: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        let mut correct = 0;
        for (bi, chunk) in idx.chunks(batch.max(1)).enumerate() {
            let (images, labels) = ds.gather(chunk);
            let attacked = match spec.kind {
                AttackKind::Clean => images,
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((si as u64) << 32) | bi as u64);
                    run_attack(model, &images, &labels, &spec.config, Some(&mut rng))?
                }
            };
            correct += count_correct(model, &attacked, &labels)?;
        }
        rows.push(EvalRow {
            attack: spec.kind.name(),
            epsilon: if spec.kind == AttackKind::Clean {
                0.0
            } else {
                spec.config.epsilon
            },
            steps: if spec.kind == AttackKind::Clean {
                0
            } else {
                spec.config.steps
            },
            accuracy: correct as f64 / ds.len() as f64,
            n: ds.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nn::BlockSpec;

    fn small_net(seed: u64) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::build(
            3,
            2,
            &[BlockSpec {
                channels: 4,
                pool_after: true,
            }],
            &mut rng,
        )
    }

    fn batch() -> (Tensor<f64>, Vec<usize>) {
        let ds = synth_dataset::<f64>(2, 4, 8, 123).unwrap();
        ds.gather(&[0, 1, 2, 3])
    }

    #[test]
    fn zero_epsilon_returns_input_unchanged() {
        let net = small_net(1);
        let (x, y) = batch();
        let adv = fgsm(&net, &x, &y, 0.0).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn fgsm_stays_in_ball_and_range() {
        let net = small_net(2);
        let (x, y) = batch();
        let eps = 8.0 / 255.0;
        let adv = fgsm(&net, &x, &y, eps).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - o).abs() <= eps);
        }
        assert_ne!(adv.data(), x.data());
    }

    #[test]
    fn single_step_pgd_equals_fgsm_bitwise() {
        let net = small_net(3);
        let (x, y) = batch();
        let eps = 4.0 / 255.0;
        let cfg = AttackConfig {
            epsilon: eps,
            steps: 1,
            step_size: eps,
            momentum_mu: 0.0,
            random_start: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = pgd(&net, &x, &y, &cfg, &mut rng).unwrap();
        let b = fgsm(&net, &x, &y, eps).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_momentum_mi_fgsm_equals_iterative_fgsm_bitwise() {
        let net = small_net(4);
        let (x, y) = batch();
        let eps = 8.0 / 255.0;
        let base = AttackConfig {
            epsilon: eps,
            steps: 5,
            step_size: eps / 4.0,
            momentum_mu: 0.0,
            random_start: false,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let a = mi_fgsm(&net, &x, &y, &base, &mut r1).unwrap();
        let b = pgd(&net, &x, &y, &base, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn random_start_respects_the_ball() {
        let net = small_net(5);
        let (x, y) = batch();
        let eps = 6.0 / 255.0;
        let cfg = AttackConfig::pgd(eps, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let adv = pgd(&net, &x, &y, &cfg, &mut rng).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - o).abs() <= eps);
        }
    }

    #[test]
    fn projection_repair_holds_in_f32() {
        // f32 rounding of orig + eps regularly exceeds eps; the ulp repair
        // must bring every coordinate back inside the ball as measured in
        // f32 arithmetic.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let eps = 8.0f32 / 255.0;
        for _ in 0..2000 {
            let o: f32 = rng.random();
            let mut adv = [o + eps * 1.5];
            project(&mut adv, &[o], eps);
            assert!(adv[0] - o <= eps && o - adv[0] <= eps);
            assert!((0.0..=1.0).contains(&adv[0]));
        }
    }

    #[test]
    fn momentum_accumulates_normalized_gradients() {
        let mut acc = vec![0.0f64; 2];
        let grad = [3.0, -1.0];
        momentum_accumulate(&mut acc, &grad, 0.5);
        assert_eq!(acc, vec![0.75, -0.25]);
        momentum_accumulate(&mut acc, &grad, 0.5);
        // Same normalized direction twice: (1 + mu) * u.
        assert_eq!(acc, vec![1.5 * 0.75, 1.5 * -0.25]);
        momentum_accumulate(&mut acc, &[0.0, 0.0], 0.5);
        assert_eq!(acc, vec![0.75 * 0.75, 0.75 * -0.25]);
    }

    #[test]
    fn zero_epsilon_evaluation_matches_clean_exactly() {
        let net = small_net(6);
        let ds = synth_dataset::<f64>(2, 6, 8, 9).unwrap();
        let specs = vec![
            EvalSpec::clean(),
            EvalSpec {
                kind: AttackKind::Pgd,
                config: AttackConfig::pgd(0.0, 5),
            },
        ];
        let rows = evaluate(&net, &ds, &specs, 4, 11).unwrap();
        assert_eq!(rows[0].accuracy, rows[1].accuracy);
    }

    #[test]
    fn reachability_flag() {
        assert!(AttackConfig::fgsm(8.0 / 255.0).reachable());
        assert!(AttackConfig::pgd(8.0 / 255.0, 20).reachable());
        let starved = AttackConfig {
            epsilon: 0.5,
            steps: 2,
            step_size: 0.01,
            momentum_mu: 0.0,
            random_start: false,
        };
        assert!(!starved.reachable());
    }

    #[test]
    fn weights_untouched_by_attack() {
        let net = small_net(7);
        let before: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect();
        let (x, y) = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        pgd(&net, &x, &y, &AttackConfig::pgd(8.0 / 255.0, 4), &mut rng).unwrap();
        let after: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }
}
