//! The two-phase pipeline: search the supernet (channel choices and tutor
//! assignments), derive a concrete architecture, then train it from fresh
//! weights. Also hosts the ablation arm definitions and adversarial
//! training for the desk-scale teacher.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, Model};
use crate::data::{epoch_order, Dataset};
use crate::distill::{
    attention_loss_hard, attention_loss_with_rows, cross_entropy, kl_term, one_hot_batch,
    search_loss, train_loss, ConnectionMatrix,
};
use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gumbel::{gumbel_noise, gumbel_softmax, TauSchedule};
use crate::nn::{Network, SuperNet};
use crate::optim::{lr_at, LrSchedule, Sgd};
use crate::tensor::Tensor;

/// The four training paradigms compared in the ablation. Every arm
/// searches and trains the same supernet; they differ only in which loss
/// terms couple the student to the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmKind {
    /// Cross entropy only, no teacher.
    Standard,
    /// Cross entropy plus output KL against the robust teacher.
    Kl,
    /// Cross entropy plus intermediate cross-connections, no output KL.
    Icc,
    /// All three terms.
    RnasCl,
}

impl ArmKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArmKind::Standard => "standard",
            ArmKind::Kl => "kl",
            ArmKind::Icc => "icc",
            ArmKind::RnasCl => "rnas_cl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ArmKind::Standard),
            "kl" => Ok(ArmKind::Kl),
            "icc" => Ok(ArmKind::Icc),
            "rnas_cl" => Ok(ArmKind::RnasCl),
            _ => Err(Error::Config {
                message: format!("unknown arm '{s}' (standard|kl|icc|rnas_cl)"),
            }),
        }
    }

    pub fn uses_teacher(&self) -> bool {
        !matches!(self, ArmKind::Standard)
    }

    pub fn uses_kl(&self) -> bool {
        matches!(self, ArmKind::Kl | ArmKind::RnasCl)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, ArmKind::Icc | ArmKind::RnasCl)
    }

    pub fn all() -> [ArmKind; 4] {
        [
            ArmKind::Standard,
            ArmKind::Kl,
            ArmKind::Icc,
            ArmKind::RnasCl,
        ]
    }
}

/// Model batches take the first 80% of each batch (rounded down), the
/// architecture step takes the rest; batch sizes below 5 would starve one
/// side and are rejected at validation.
pub fn split_sizes(batch: usize) -> (usize, usize) {
    let model = batch * 8 / 10;
    (model, batch - model)
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub arm: ArmKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma_s: f64,
    pub tau: TauSchedule,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 5 {
            return Err(Error::Config {
                message: format!(
                    "search batch size {} leaves an empty 20% split; need >= 5",
                    self.batch_size
                ),
            });
        }
        if self.epochs == 0 {
            return Err(Error::Config {
                message: "search needs at least one epoch".into(),
            });
        }
        Ok(())
    }
}

/// Per-epoch search metrics; loss terms are means over the model-weight
/// steps of the epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tau: f64,
    pub ce: f64,
    pub kl: f64,
    pub attn: f64,
    pub n_f: f64,
    pub loss: f64,
    pub clean_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StepKind {
    Weights,
    Arch,
}

struct StepOutcome {
    ce: f64,
    kl: f64,
    attn: f64,
    n_f: f64,
    loss: f64,
}

/// Supernet frozen at hard argmax choices; used for mid-search accuracy.
pub struct MaskedStudent<'a, E: Real> {
    pub supernet: &'a SuperNet<E>,
}

impl<E: Real> Model<E> for MaskedStudent<'_, E> {
    fn logits(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let vars = self.supernet.bind(g, false);
        let rows: Vec<Var> = self
            .supernet
            .blocks
            .iter()
            .map(|b| {
                let pick = crate::gumbel::argmax(b.logits.data());
                g.leaf(crate::gumbel::one_hot(b.choices.len(), pick), false)
            })
            .collect();
        Ok(self.supernet.forward(g, &vars, x, &rows, false)?.0)
    }

    fn num_classes(&self) -> usize {
        self.supernet.num_classes
    }
}

pub struct SearchState<E: Real> {
    pub supernet: SuperNet<E>,
    pub teacher: Option<Network<E>>,
    pub conn: Option<ConnectionMatrix<E>>,
    pub config: SearchConfig,
    pub epoch: usize,
    pub input_hw: (usize, usize),
    pub max_macs: u64,
    pub data_seed: u64,
    weight_opt: Sgd<E>,
    arch_opt: Sgd<E>,
    noise_rng: ChaCha8Rng,
}

impl<E: Real> SearchState<E> {
    /// `noise_rng` drives all Gumbel draws of the search; batch order is a
    /// pure function of `data_seed` and the epoch counter.
    pub fn new(
        supernet: SuperNet<E>,
        teacher: Option<Network<E>>,
        config: SearchConfig,
        input_hw: (usize, usize),
        data_seed: u64,
        noise_rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.arm.uses_teacher() && teacher.is_none() {
            return Err(Error::Config {
                message: format!("arm '{}' needs a teacher network", config.arm.name()),
            });
        }
        let conn = match (&teacher, config.arm.uses_attention()) {
            (Some(t), true) => Some(ConnectionMatrix::new(supernet.n_layers(), t.n_layers())),
            _ => None,
        };
        let max_macs = supernet.max_macs(input_hw);
        let weight_opt = Sgd::new(config.weight_lr, config.momentum, config.weight_decay);
        // No weight decay on architecture logits: shrinking them toward
        // zero erases the search signal rather than regularizing it.
        let arch_opt = Sgd::new(config.arch_lr, config.momentum, 0.0);
        Ok(SearchState {
            supernet,
            teacher,
            conn,
            config,
            epoch: 0,
            input_hw,
            max_macs,
            data_seed,
            weight_opt,
            arch_opt,
            noise_rng,
        })
    }

    pub fn tau(&self) -> f64 {
        self.config.tau.at(self.epoch)
    }

    /// One pass over the training set: per full batch, a model-weight step
    /// on the 80% slice and an architecture step on the 20% slice, both on
    /// the search objective with shared per-batch Gumbel noise. Ragged
    /// trailing batches are dropped so the split never collapses.
    pub fn run_epoch(&mut self, train: &Dataset<E>, eval: &Dataset<E>) -> Result<EpochMetrics> {
        let bs = self.config.batch_size;
        if train.len() < bs {
            return Err(Error::Config {
                message: format!(
                    "training set ({}) smaller than one batch ({bs})",
                    train.len()
                ),
            });
        }
        let tau = self.tau();
        let order = epoch_order(train.len(), self.data_seed, self.epoch);
        let (n_model, _) = split_sizes(bs);
        let mut sums = StepOutcome {
            ce: 0.0,
            kl: 0.0,
            attn: 0.0,
            n_f: 0.0,
            loss: 0.0,
        };
        let mut steps = 0usize;
        for chunk in order.chunks(bs) {
            if chunk.len() < bs {
                break;
            }
            let (images, labels) = train.gather(chunk);
            let conn_noise: Option<Tensor<E>> = self
                .conn
                .as_ref()
                .map(|c| gumbel_noise(&mut self.noise_rng, vec![c.n_s(), c.n_t()]));
            let mask_noise: Vec<Tensor<E>> = self
                .supernet
                .blocks
                .iter()
                .map(|b| gumbel_noise(&mut self.noise_rng, vec![b.n_choices()]))
                .collect();
            let out = self.step(
                &images,
                &labels,
                0..n_model,
                tau,
                conn_noise.as_ref(),
                &mask_noise,
                StepKind::Weights,
            )?;
            self.step(
                &images,
                &labels,
                n_model..bs,
                tau,
                conn_noise.as_ref(),
                &mask_noise,
                StepKind::Arch,
            )?;
            sums.ce += out.ce;
            sums.kl += out.kl;
            sums.attn += out.attn;
            sums.n_f += out.n_f;
            sums.loss += out.loss;
            steps += 1;
        }
        let snapshot = MaskedStudent {
            supernet: &self.supernet,
        };
        let clean_acc = attack::accuracy(&snapshot, eval, bs)?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            tau,
            ce: sums.ce / steps as f64,
            kl: sums.kl / steps as f64,
            attn: sums.attn / steps as f64,
            n_f: sums.n_f / steps as f64,
            loss: sums.loss / steps as f64,
            clean_acc,
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Build the search graph on one batch slice, backprop Eq-style loss,
    /// and apply SGD to whichever parameter set this step trains.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        images: &Tensor<E>,
        labels: &[usize],
        range: std::ops::Range<usize>,
        tau: f64,
        conn_noise: Option<&Tensor<E>>,
        mask_noise: &[Tensor<E>],
        kind: StepKind,
    ) -> Result<StepOutcome> {
        let s = images.shape();
        let sample = s[1] * s[2] * s[3];
        let slice = Tensor::new(
            vec![range.len(), s[1], s[2], s[3]],
            images.data()[range.start * sample..range.end * sample].to_vec(),
        )?;
        let labels = &labels[range];
        let train_weights = kind == StepKind::Weights;
        let train_arch = kind == StepKind::Arch;

        let mut g = Graph::new();
        let x = g.leaf(slice, false);
        let y = g.leaf(one_hot_batch(labels, self.supernet.num_classes), false);
        let vars = self.supernet.bind(&mut g, train_weights);
        let mut mask_logit_vars = Vec::with_capacity(self.supernet.blocks.len());
        let mut mask_rows = Vec::with_capacity(self.supernet.blocks.len());
        for (block, noise) in self.supernet.blocks.iter().zip(mask_noise) {
            let logits = g.leaf(block.logits.clone(), train_arch);
            let noise = g.leaf(noise.clone(), false);
            mask_logit_vars.push(logits);
            mask_rows.push(gumbel_softmax(&mut g, logits, tau, noise)?);
        }
        let capture = self.config.arm.uses_attention();
        let (logits, student_acts) = self
            .supernet
            .forward(&mut g, &vars, x, &mask_rows, capture)?;
        let ce = cross_entropy(&mut g, logits, y)?;

        let teacher_out = match &self.teacher {
            Some(t) => {
                let tv = t.bind(&mut g, false);
                Some(t.forward(&mut g, &tv, x, capture)?)
            }
            None => None,
        };
        let kl = match (&teacher_out, self.config.arm.uses_kl()) {
            (Some((t_logits, _)), true) => {
                let p = g.softmax(logits, 1)?;
                let q = g.softmax(*t_logits, 1)?;
                Some(kl_term(&mut g, p, q)?)
            }
            _ => None,
        };
        let conn_logit_var = match (&self.conn, conn_noise) {
            (Some(c), Some(noise)) => {
                let logits = g.leaf(c.logits.clone(), train_arch);
                let noise = g.leaf(noise.clone(), false);
                let rows = gumbel_softmax(&mut g, logits, tau, noise)?;
                Some((logits, rows))
            }
            _ => None,
        };
        let attn = match (&teacher_out, &conn_logit_var) {
            (Some((_, t_acts)), Some((_, rows))) => Some(attention_loss_with_rows(
                &mut g,
                &student_acts,
                t_acts,
                *rows,
            )?),
            _ => None,
        };
        let expected = self
            .supernet
            .expected_macs(&mut g, &mask_rows, self.input_hw)?;
        let inv_max = g.constant(real::<E>(1.0 / self.max_macs as f64));
        let n_f = g.mul(expected, inv_max)?;
        let loss = search_loss(&mut g, ce, kl, attn, self.config.gamma_s, n_f)?;
        g.backward(loss)?;

        let outcome = StepOutcome {
            ce: g.value(ce).item().as_f64(),
            kl: kl.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0),
            attn: attn.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0),
            n_f: g.value(n_f).item().as_f64(),
            loss: g.value(loss).item().as_f64(),
        };

        match kind {
            StepKind::Weights => {
                let mut grads: Vec<Option<Vec<E>>> = vars
                    .weights
                    .iter()
                    .map(|&v| g.grad(v).map(<[E]>::to_vec))
                    .collect();
                grads.push(g.grad(vars.fc_w).map(<[E]>::to_vec));
                grads.push(g.grad(vars.fc_b).map(<[E]>::to_vec));
                let grad_refs: Vec<Option<&[E]>> = grads.iter().map(|o| o.as_deref()).collect();
                let mut params = self.supernet.params_mut();
                self.weight_opt.step(&mut params, &grad_refs)?;
            }
            StepKind::Arch => {
                let mut grads: Vec<Option<Vec<E>>> = mask_logit_vars
                    .iter()
                    .map(|&v| g.grad(v).map(<[E]>::to_vec))
                    .collect();
                if let Some((conn_var, _)) = conn_logit_var {
                    grads.push(g.grad(conn_var).map(<[E]>::to_vec));
                }
                let grad_refs: Vec<Option<&[E]>> = grads.iter().map(|o| o.as_deref()).collect();
                let mut params = self.supernet.mask_logits_mut();
                if let Some(c) = self.conn.as_mut() {
                    params.push(&mut c.logits);
                }
                self.arch_opt.step(&mut params, &grad_refs)?;
            }
        }
        Ok(outcome)
    }
}

/// The decided architecture: chosen widths, tutor per student layer (empty
/// for arms without cross-connections), and its exact MAC count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub channels: Vec<usize>,
    pub tutors: Vec<usize>,
    pub macs: u64,
}

impl ArchDescription {
    /// Check membership of every choice and tutor index, and that the
    /// recorded MAC count matches a recomputation.
    pub fn validate<E: Real>(
        &self,
        supernet: &SuperNet<E>,
        n_t: Option<usize>,
        input_hw: (usize, usize),
    ) -> Result<()> {
        if self.channels.len() != supernet.blocks.len() {
            return Err(Error::Config {
                message: format!(
                    "architecture has {} blocks, supernet has {}",
                    self.channels.len(),
                    supernet.blocks.len()
                ),
            });
        }
        for (b, (&c, block)) in self.channels.iter().zip(&supernet.blocks).enumerate() {
            if !block.choices.contains(&c) {
                return Err(Error::Config {
                    message: format!("block {b} width {c} not among {:?}", block.choices),
                });
            }
        }
        if let Some(n_t) = n_t {
            if self.tutors.len() != supernet.blocks.len() {
                return Err(Error::Config {
                    message: format!(
                        "expected {} tutors, got {}",
                        supernet.blocks.len(),
                        self.tutors.len()
                    ),
                });
            }
            if let Some(&bad) = self.tutors.iter().find(|&&t| t >= n_t) {
                return Err(Error::Config {
                    message: format!("tutor index {bad} outside {n_t} teacher layers"),
                });
            }
        } else if !self.tutors.is_empty() {
            return Err(Error::Config {
                message: "tutors recorded without a teacher".into(),
            });
        }
        let macs = supernet.macs_for_channels(&self.channels, input_hw);
        if macs != self.macs {
            return Err(Error::Config {
                message: format!("recorded {} MACs, recomputed {macs}", self.macs),
            });
        }
        Ok(())
    }
}

/// Argmax over channel logits and connection rows (ties to the lowest
/// index), plus a freshly initialized network of the chosen widths.
pub fn derive<E: Real>(
    supernet: &SuperNet<E>,
    conn: Option<&ConnectionMatrix<E>>,
    input_hw: (usize, usize),
    init_rng: &mut ChaCha8Rng,
) -> (ArchDescription, Network<E>) {
    let channels = supernet.derive_channels();
    let tutors = conn.map(|c| c.derive_tutors()).unwrap_or_default();
    let macs = supernet.macs_for_channels(&channels, input_hw);
    let student = supernet.materialize(&channels, init_rng);
    (
        ArchDescription {
            channels,
            tutors,
            macs,
        },
        student,
    )
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma_t: f64,
}

impl TrainConfig {
    /// Step-decay profile (matches small-image training defaults).
    pub fn cifar_profile(epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            schedule: LrSchedule::Step,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size,
            epochs,
            gamma_t: 1.0,
        }
    }

    /// Cosine profile (large-image defaults).
    pub fn imagenet_profile(epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            schedule: LrSchedule::Cosine,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
            batch_size,
            epochs,
            gamma_t: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    pub attn: f64,
    pub loss: f64,
    pub clean_acc: f64,
}

/// Trains a derived student with the arm's loss; tutors index teacher
/// layers for the hard attention term.
pub struct TrainState<E: Real> {
    pub student: Network<E>,
    pub teacher: Option<Network<E>>,
    pub tutors: Vec<usize>,
    pub arm: ArmKind,
    pub config: TrainConfig,
    pub epoch: usize,
    pub data_seed: u64,
    opt: Sgd<E>,
}

impl<E: Real> TrainState<E> {
    pub fn new(
        student: Network<E>,
        teacher: Option<Network<E>>,
        tutors: Vec<usize>,
        arm: ArmKind,
        config: TrainConfig,
        data_seed: u64,
    ) -> Result<Self> {
        if arm.uses_teacher() && teacher.is_none() {
            return Err(Error::Config {
                message: format!("arm '{}' needs a teacher network", arm.name()),
            });
        }
        if arm.uses_attention() && tutors.len() != student.n_layers() {
            return Err(Error::Config {
                message: format!(
                    "need one tutor per student layer ({}), got {}",
                    student.n_layers(),
                    tutors.len()
                ),
            });
        }
        let opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
        Ok(TrainState {
            student,
            teacher,
            tutors,
            arm,
            config,
            epoch: 0,
            data_seed,
            opt,
        })
    }

    pub fn run_epoch(&mut self, train: &Dataset<E>, eval: &Dataset<E>) -> Result<TrainMetrics> {
        let bs = self.config.batch_size.min(train.len());
        let lr = lr_at(
            self.config.schedule,
            self.config.lr,
            self.epoch,
            self.config.epochs,
        );
        self.opt.lr = lr;
        let order = epoch_order(train.len(), self.data_seed, self.epoch);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut steps = 0usize;
        for chunk in order.chunks(bs) {
            let (images, labels) = train.gather(chunk);
            let out = self.step(&images, &labels)?;
            sums.0 += out.ce;
            sums.1 += out.kl;
            sums.2 += out.attn;
            sums.3 += out.loss;
            steps += 1;
        }
        let clean_acc = attack::accuracy(&self.student, eval, bs)?;
        let metrics = TrainMetrics {
            epoch: self.epoch,
            lr,
            ce: sums.0 / steps as f64,
            kl: sums.1 / steps as f64,
            attn: sums.2 / steps as f64,
            loss: sums.3 / steps as f64,
            clean_acc,
        };
        self.epoch += 1;
        Ok(metrics)
    }

    fn step(&mut self, images: &Tensor<E>, labels: &[usize]) -> Result<StepOutcome> {
        let capture = self.arm.uses_attention();
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let y = g.leaf(one_hot_batch(labels, self.student.num_classes), false);
        let vars = self.student.bind(&mut g, true);
        let (logits, student_acts) = self.student.forward(&mut g, &vars, x, capture)?;
        let ce = cross_entropy(&mut g, logits, y)?;
        let teacher_out = match &self.teacher {
            Some(t) => {
                let tv = t.bind(&mut g, false);
                Some(t.forward(&mut g, &tv, x, capture)?)
            }
            None => None,
        };
        let kl = match (&teacher_out, self.arm.uses_kl()) {
            (Some((t_logits, _)), true) => {
                let p = g.softmax(logits, 1)?;
                let q = g.softmax(*t_logits, 1)?;
                Some(kl_term(&mut g, p, q)?)
            }
            _ => None,
        };
        let attn = match (&teacher_out, capture) {
            (Some((_, t_acts)), true) => Some(attention_loss_hard(
                &mut g,
                &student_acts,
                t_acts,
                &self.tutors,
            )?),
            _ => None,
        };
        let loss = train_loss(&mut g, ce, kl, attn, self.config.gamma_t)?;
        g.backward(loss)?;
        let outcome = StepOutcome {
            ce: g.value(ce).item().as_f64(),
            kl: kl.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0),
            attn: attn.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0),
            n_f: 1.0,
            loss: g.value(loss).item().as_f64(),
        };
        let mut grads: Vec<Option<Vec<E>>> = vars
            .weights
            .iter()
            .map(|&v| g.grad(v).map(<[E]>::to_vec))
            .collect();
        grads.push(g.grad(vars.fc_w).map(<[E]>::to_vec));
        grads.push(g.grad(vars.fc_b).map(<[E]>::to_vec));
        let grad_refs: Vec<Option<&[E]>> = grads.iter().map(|o| o.as_deref()).collect();
        let mut params = self.student.params_mut();
        self.opt.step(&mut params, &grad_refs)?;
        Ok(outcome)
    }
}

/// Standard adversarial training: every batch is replaced by its PGD
/// perturbation against the current weights before the CE step. Returns
/// the per-epoch mean loss trace; with epsilon = 0 this is exactly clean
/// training, including the generator state.
pub fn adversarial_train_teacher<E: Real>(
    net: &mut Network<E>,
    train: &Dataset<E>,
    attack_cfg: &AttackConfig,
    config: &TrainConfig,
    data_seed: u64,
    attack_rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    attack_cfg.validate()?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.lr = lr_at(config.schedule, config.lr, epoch, config.epochs);
        let order = epoch_order(train.len(), data_seed, epoch);
        let bs = config.batch_size.min(train.len());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(bs) {
            let (images, labels) = train.gather(chunk);
            let adv = attack::pgd(&*net, &images, &labels, attack_cfg, attack_rng)?;
            let mut g = Graph::new();
            let x = g.leaf(adv, false);
            let y = g.leaf(one_hot_batch(&labels, net.num_classes), false);
            let vars = net.bind(&mut g, true);
            let (logits, _) = net.forward(&mut g, &vars, x, false)?;
            let loss = cross_entropy(&mut g, logits, y)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).item().as_f64();
            steps += 1;
            let mut grads: Vec<Option<Vec<E>>> = vars
                .weights
                .iter()
                .map(|&v| g.grad(v).map(<[E]>::to_vec))
                .collect();
            grads.push(g.grad(vars.fc_w).map(<[E]>::to_vec));
            grads.push(g.grad(vars.fc_b).map(<[E]>::to_vec));
            let grad_refs: Vec<Option<&[E]>> = grads.iter().map(|o| o.as_deref()).collect();
            let mut params = net.params_mut();
            opt.step(&mut params, &grad_refs)?;
        }
        trace.push(loss_sum / steps as f64);
    }
    Ok(trace)
}
