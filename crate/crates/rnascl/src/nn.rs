//! Convolutional networks: plain blocks for teachers and derived students,
//! channel-maskable blocks for the searched supernet, and MAC accounting.
//!
//! All convolutions are 3x3, stride 1, same padding; downsampling happens
//! through 2x2 max pooling after designated blocks. Kernel sizes and
//! strides are not searched, only channel counts and tutor assignments.

use rand::Rng;

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::graph::{Graph, PoolKind, Var};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

/// Uniform Kaiming fan-in initialization for a conv weight (co, ci, k, k).
fn conv_init<E: Real, R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Tensor<E> {
    let bound = (6.0 / (ci * k * k) as f64).sqrt();
    Tensor::from_fn(vec![co, ci, k, k], |_| {
        real(rng.random::<f64>() * 2.0 * bound - bound)
    })
}

fn linear_init<E: Real, R: Rng>(rng: &mut R, d: usize, m: usize) -> (Tensor<E>, Tensor<E>) {
    let bound = 1.0 / (d as f64).sqrt();
    let w = Tensor::from_fn(vec![d, m], |_| {
        real(rng.random::<f64>() * 2.0 * bound - bound)
    });
    let b = Tensor::from_fn(vec![m], |_| real(rng.random::<f64>() * 2.0 * bound - bound));
    (w, b)
}

/// One plain conv layer; `pool_after` applies 2x2/2 max pooling to its
/// output before the next block.
#[derive(Clone, Debug)]
pub struct ConvBlock<E: Real> {
    pub weight: Tensor<E>,
    pub pool_after: bool,
}

impl<E: Real> ConvBlock<E> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Width and pooling of one block when building a plain network.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub channels: usize,
    pub pool_after: bool,
}

/// Plain feed-forward convnet: conv blocks, global average pooling, one
/// linear classifier.
#[derive(Clone, Debug)]
pub struct Network<E: Real> {
    pub input_channels: usize,
    pub num_classes: usize,
    pub blocks: Vec<ConvBlock<E>>,
    pub fc_w: Tensor<E>,
    pub fc_b: Tensor<E>,
}

/// Graph handles for one bound copy of a network's parameters.
pub struct NetVars {
    pub weights: Vec<Var>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl<E: Real> Network<E> {
    pub fn build<R: Rng>(
        input_channels: usize,
        num_classes: usize,
        specs: &[BlockSpec],
        rng: &mut R,
    ) -> Self {
        assert!(!specs.is_empty(), "network needs at least one block");
        let mut blocks = Vec::with_capacity(specs.len());
        let mut ci = input_channels;
        for spec in specs {
            blocks.push(ConvBlock {
                weight: conv_init(rng, spec.channels, ci, KERNEL),
                pool_after: spec.pool_after,
            });
            ci = spec.channels;
        }
        let (fc_w, fc_b) = linear_init(rng, ci, num_classes);
        Network {
            input_channels,
            num_classes,
            blocks,
            fc_w,
            fc_b,
        }
    }

    /// Number of convolution blocks (the layer count for distillation).
    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters in declaration order: block weights, then classifier.
    pub fn params(&self) -> Vec<&Tensor<E>> {
        let mut out: Vec<&Tensor<E>> = self.blocks.iter().map(|b| &b.weight).collect();
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = self.blocks.iter_mut().map(|b| &mut b.weight).collect();
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Insert parameter leaves into a graph. Frozen teachers bind with
    /// `trainable = false`, which blocks gradient flow into them entirely.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> NetVars {
        NetVars {
            weights: self
                .blocks
                .iter()
                .map(|b| g.leaf(b.weight.clone(), trainable))
                .collect(),
            fc_w: g.leaf(self.fc_w.clone(), trainable),
            fc_b: g.leaf(self.fc_b.clone(), trainable),
        }
    }

    /// Forward pass over bound parameters. With `capture` the post-relu
    /// activation of every conv block is returned alongside the logits;
    /// capture never changes the logits themselves.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        vars: &NetVars,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != self.input_channels {
            return Err(Error::InvalidShape {
                op: "network::forward",
                shape: shape.to_vec(),
                reason: format!("expected (n, {}, h, w) input", self.input_channels),
            });
        }
        let mut cur = x;
        let mut activations = Vec::new();
        for (block, &w) in self.blocks.iter().zip(&vars.weights) {
            let conv = g.conv2d(cur, w, 1, PADDING)?;
            let act = g.relu(conv);
            if capture {
                activations.push(act);
            }
            cur = if block.pool_after {
                g.pool2d(act, PoolKind::Max, 2, 2)?
            } else {
                act
            };
        }
        let pooled = g.global_avg_pool(cur)?;
        let logits = g.linear(pooled, vars.fc_w, vars.fc_b)?;
        Ok((logits, activations))
    }

    /// Logits without keeping a caller-visible graph; used for evaluation.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone(), false);
        let vars = self.bind(&mut g, false);
        let (logits, _) = self.forward(&mut g, &vars, input, false)?;
        Ok(g.value(logits).clone())
    }

    /// Spatial extent of each block's output given the input extent.
    pub fn spatial_trace(&self, input_hw: (usize, usize)) -> Vec<(usize, usize)> {
        spatial_trace(
            input_hw,
            &self.blocks.iter().map(|b| b.pool_after).collect::<Vec<_>>(),
        )
    }
}

fn spatial_trace(input_hw: (usize, usize), pool_after: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pool_after.len());
    let (mut h, mut w) = input_hw;
    for &pool in pool_after {
        out.push((h, w));
        if pool {
            h = crate::graph::kernels::pool2d_out_dim(h, 2, 2);
            w = crate::graph::kernels::pool2d_out_dim(w, 2, 2);
        }
    }
    out
}

/// Multiply-accumulates of one convolution producing an out_hw plane.
pub fn conv_macs(ci: usize, co: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    (ci * co * k * k * out_hw.0 * out_hw.1) as u64
}

pub fn linear_macs(d: usize, m: usize) -> u64 {
    (d * m) as u64
}

/// Exact MAC count of a fully decided network at the given input extent.
pub fn count_macs<E: Real>(net: &Network<E>, input_hw: (usize, usize)) -> u64 {
    let trace = net.spatial_trace(input_hw);
    let mut total = 0u64;
    for (block, out_hw) in net.blocks.iter().zip(&trace) {
        total += conv_macs(block.in_channels(), block.out_channels(), KERNEL, *out_hw);
    }
    total + linear_macs(net.blocks.last().unwrap().out_channels(), net.num_classes)
}

/// One searchable conv layer: shared weights at the widest choice plus a
/// logit per channel option.
#[derive(Clone, Debug)]
pub struct MaskedConvBlock<E: Real> {
    pub weight: Tensor<E>,
    pub choices: Vec<usize>,
    pub logits: Tensor<E>,
    pub pool_after: bool,
}

impl<E: Real> MaskedConvBlock<E> {
    pub fn n_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn max_channels(&self) -> usize {
        *self.choices.iter().max().unwrap()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// 0/1 membership matrix M[i][c] = 1 iff channel c survives choice i.
    fn indicator<F: Real>(&self) -> Tensor<F> {
        let n = self.choices.len();
        let cmax = self.max_channels();
        Tensor::from_fn(vec![n, cmax], |idx| {
            let (i, c) = (idx / cmax, idx % cmax);
            if c < self.choices[i] {
                F::one()
            } else {
                F::zero()
            }
        })
    }

    /// Weighted sum of the masked outputs, computed as one convolution
    /// followed by relu and a per-channel gate `gate[c] = sum_i g_i 1[c <
    /// choices[i]]`. The gate is nonnegative, so it commutes with relu and
    /// the result equals the sum over per-choice masked branches.
    pub fn masked_forward(
        &self,
        g: &mut Graph<E>,
        weight_var: Var,
        x: Var,
        g_w: Var,
    ) -> Result<Var> {
        let weights = g.value(g_w);
        if weights.numel() != self.choices.len() {
            return Err(Error::WeightCountMismatch {
                expected: self.choices.len(),
                got: weights.numel(),
            });
        }
        let mut sum = 0.0f64;
        for &v in weights.data() {
            let v = v.as_f64();
            if v < 0.0 {
                return Err(Error::SimplexViolation { sum: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::SimplexViolation { sum });
        }
        let n = self.choices.len();
        let conv = g.conv2d(x, weight_var, 1, PADDING)?;
        let act = g.relu(conv);
        let row = g.reshape(g_w, vec![1, n])?;
        let indicator = g.leaf(self.indicator(), false);
        let zero_bias = g.leaf(Tensor::zeros(vec![self.max_channels()]), false);
        let gate = g.linear(row, indicator, zero_bias)?;
        let gate = g.reshape(gate, vec![self.max_channels()])?;
        g.channel_scale(act, gate)
    }
}

/// Channel options for the blocks of one stage.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub depth: usize,
    pub choices: Vec<usize>,
}

/// Searchable student: masked blocks whose input widths are sized to the
/// previous block's widest choice, pooling between stages.
#[derive(Clone, Debug)]
pub struct SuperNet<E: Real> {
    pub input_channels: usize,
    pub num_classes: usize,
    pub blocks: Vec<MaskedConvBlock<E>>,
    pub fc_w: Tensor<E>,
    pub fc_b: Tensor<E>,
}

pub struct SuperVars {
    pub weights: Vec<Var>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl<E: Real> SuperNet<E> {
    /// Choice lists must be sorted, unique and positive.
    pub fn build<R: Rng>(
        input_channels: usize,
        num_classes: usize,
        stages: &[StageSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut ci = input_channels;
        for (si, stage) in stages.iter().enumerate() {
            if stage.depth == 0 || stage.choices.is_empty() {
                return Err(Error::Config {
                    message: format!("stage {si} needs depth >= 1 and at least one choice"),
                });
            }
            let mut sorted = stage.choices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != stage.choices.len() || sorted[0] == 0 {
                return Err(Error::Config {
                    message: format!("stage {si} choices must be unique positive channel counts"),
                });
            }
            let cmax = *sorted.last().unwrap();
            let last_stage = si + 1 == stages.len();
            for d in 0..stage.depth {
                let pool_after = !last_stage && d + 1 == stage.depth;
                blocks.push(MaskedConvBlock {
                    weight: conv_init(rng, cmax, ci, KERNEL),
                    choices: sorted.clone(),
                    logits: Tensor::zeros(vec![sorted.len()]),
                    pool_after,
                });
                ci = cmax;
            }
        }
        let (fc_w, fc_b) = linear_init(rng, ci, num_classes);
        Ok(SuperNet {
            input_channels,
            num_classes,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Model weights only; mask logits are architecture parameters.
    pub fn params(&self) -> Vec<&Tensor<E>> {
        let mut out: Vec<&Tensor<E>> = self.blocks.iter().map(|b| &b.weight).collect();
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = self.blocks.iter_mut().map(|b| &mut b.weight).collect();
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn mask_logits(&self) -> Vec<&Tensor<E>> {
        self.blocks.iter().map(|b| &b.logits).collect()
    }

    pub fn mask_logits_mut(&mut self) -> Vec<&mut Tensor<E>> {
        self.blocks.iter_mut().map(|b| &mut b.logits).collect()
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> SuperVars {
        SuperVars {
            weights: self
                .blocks
                .iter()
                .map(|b| g.leaf(b.weight.clone(), trainable))
                .collect(),
            fc_w: g.leaf(self.fc_w.clone(), trainable),
            fc_b: g.leaf(self.fc_b.clone(), trainable),
        }
    }

    /// Forward under per-block simplex weights (one row per block).
    /// Captured activations are post-gate, so attention maps reflect the
    /// currently weighted architecture.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        vars: &SuperVars,
        x: Var,
        mask_rows: &[Var],
        capture: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if mask_rows.len() != self.blocks.len() {
            return Err(Error::WeightCountMismatch {
                expected: self.blocks.len(),
                got: mask_rows.len(),
            });
        }
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != self.input_channels {
            return Err(Error::InvalidShape {
                op: "supernet::forward",
                shape: shape.to_vec(),
                reason: format!("expected (n, {}, h, w) input", self.input_channels),
            });
        }
        let mut cur = x;
        let mut activations = Vec::new();
        for ((block, &w), &row) in self.blocks.iter().zip(&vars.weights).zip(mask_rows) {
            let gated = block.masked_forward(g, w, cur, row)?;
            if capture {
                activations.push(gated);
            }
            cur = if block.pool_after {
                g.pool2d(gated, PoolKind::Max, 2, 2)?
            } else {
                gated
            };
        }
        let pooled = g.global_avg_pool(cur)?;
        let logits = g.linear(pooled, vars.fc_w, vars.fc_b)?;
        Ok((logits, activations))
    }

    pub fn spatial_trace(&self, input_hw: (usize, usize)) -> Vec<(usize, usize)> {
        spatial_trace(
            input_hw,
            &self.blocks.iter().map(|b| b.pool_after).collect::<Vec<_>>(),
        )
    }

    /// MACs when every block takes its widest choice; the n_f denominator.
    pub fn max_macs(&self, input_hw: (usize, usize)) -> u64 {
        let trace = self.spatial_trace(input_hw);
        let mut total = 0u64;
        let mut ci = self.input_channels;
        for (block, out_hw) in self.blocks.iter().zip(&trace) {
            let co = block.max_channels();
            total += conv_macs(ci, co, KERNEL, *out_hw);
            ci = co;
        }
        total + linear_macs(ci, self.num_classes)
    }

    /// Exact MACs are only defined once every block is decided; a supernet
    /// with real choices left must go through derivation first.
    pub fn count_macs(&self, input_hw: (usize, usize)) -> Result<u64> {
        if self.blocks.iter().any(|b| b.choices.len() > 1) {
            return Err(Error::UndecidedSupernet);
        }
        Ok(self.max_macs(input_hw))
    }

    /// MACs of a decided width assignment (used after derivation).
    pub fn macs_for_channels(&self, channels: &[usize], input_hw: (usize, usize)) -> u64 {
        debug_assert_eq!(channels.len(), self.blocks.len());
        let trace = self.spatial_trace(input_hw);
        let mut total = 0u64;
        let mut ci = self.input_channels;
        for (&co, out_hw) in channels.iter().zip(&trace) {
            total += conv_macs(ci, co, KERNEL, *out_hw);
            ci = co;
        }
        total + linear_macs(ci, self.num_classes)
    }

    /// Differentiable expected MAC count under the given weight rows.
    /// Expected widths propagate downstream: block b's input width is
    /// block b-1's expected output width.
    pub fn expected_macs(
        &self,
        g: &mut Graph<E>,
        mask_rows: &[Var],
        input_hw: (usize, usize),
    ) -> Result<Var> {
        if mask_rows.len() != self.blocks.len() {
            return Err(Error::WeightCountMismatch {
                expected: self.blocks.len(),
                got: mask_rows.len(),
            });
        }
        let trace = self.spatial_trace(input_hw);
        let mut e_in = g.constant(real::<E>(self.input_channels as f64));
        let mut total = g.constant(E::zero());
        for ((block, &row), out_hw) in self.blocks.iter().zip(mask_rows).zip(&trace) {
            if g.value(row).numel() != block.choices.len() {
                return Err(Error::WeightCountMismatch {
                    expected: block.choices.len(),
                    got: g.value(row).numel(),
                });
            }
            let choice_values = g.leaf(
                Tensor::from_fn(vec![block.choices.len()], |i| {
                    real::<E>(block.choices[i] as f64)
                }),
                false,
            );
            let weighted = g.mul(row, choice_values)?;
            let e_out = g.sum(weighted);
            let pair = g.mul(e_in, e_out)?;
            let scale = g.constant(real::<E>((KERNEL * KERNEL * out_hw.0 * out_hw.1) as f64));
            let term = g.mul(pair, scale)?;
            total = g.add(total, term)?;
            e_in = e_out;
        }
        let classes = g.constant(real::<E>(self.num_classes as f64));
        let fc = g.mul(e_in, classes)?;
        g.add(total, fc)
    }

    /// Plain-number version of [`SuperNet::expected_macs`] for oracles and
    /// reporting; `rows[b]` are block b's weights as f64.
    pub fn expected_macs_value(&self, rows: &[Vec<f64>], input_hw: (usize, usize)) -> f64 {
        debug_assert_eq!(rows.len(), self.blocks.len());
        let trace = self.spatial_trace(input_hw);
        let mut e_in = self.input_channels as f64;
        let mut total = 0.0;
        for ((block, row), out_hw) in self.blocks.iter().zip(rows).zip(&trace) {
            let e_out: f64 = row
                .iter()
                .zip(&block.choices)
                .map(|(&w, &c)| w * c as f64)
                .sum();
            total += e_in * e_out * (KERNEL * KERNEL * out_hw.0 * out_hw.1) as f64;
            e_in = e_out;
        }
        total + e_in * self.num_classes as f64
    }

    /// Per-block argmax channel choice; ties take the lowest index.
    pub fn derive_channels(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.choices[crate::gumbel::argmax(b.logits.data())])
            .collect()
    }

    /// Fresh plain network with the given widths; weights are newly
    /// initialized, never inherited from the supernet.
    pub fn materialize<R: Rng>(&self, channels: &[usize], rng: &mut R) -> Network<E> {
        debug_assert_eq!(channels.len(), self.blocks.len());
        let specs: Vec<BlockSpec> = channels
            .iter()
            .zip(&self.blocks)
            .map(|(&c, b)| BlockSpec {
                channels: c,
                pool_after: b.pool_after,
            })
            .collect();
        let mut rng_net = rng;
        Network::build(self.input_channels, self.num_classes, &specs, &mut rng_net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn tiny_net() -> Network<f64> {
        Network::build(
            3,
            2,
            &[
                BlockSpec {
                    channels: 4,
                    pool_after: true,
                },
                BlockSpec {
                    channels: 6,
                    pool_after: false,
                },
            ],
            &mut rng(),
        )
    }

    #[test]
    fn forward_shapes_and_capture_count() {
        let net = tiny_net();
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i as f64 * 0.01).sin());
        let mut g = Graph::new();
        let input = g.leaf(x, false);
        let vars = net.bind(&mut g, true);
        let (logits, acts) = net.forward(&mut g, &vars, input, true).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 2]);
        assert_eq!(acts.len(), 2);
        assert_eq!(g.value(acts[0]).shape(), &[2, 4, 8, 8]);
        assert_eq!(g.value(acts[1]).shape(), &[2, 6, 4, 4]);
    }

    #[test]
    fn capture_does_not_change_logits() {
        let net = tiny_net();
        let x = Tensor::from_fn(vec![1, 3, 8, 8], |i| (i as f64 * 0.03).cos());
        let mut ga = Graph::new();
        let xa = ga.leaf(x.clone(), false);
        let va = net.bind(&mut ga, false);
        let (la, _) = net.forward(&mut ga, &va, xa, false).unwrap();
        let mut gb = Graph::new();
        let xb = gb.leaf(x, false);
        let vb = net.bind(&mut gb, false);
        let (lb, _) = net.forward(&mut gb, &vb, xb, true).unwrap();
        assert_eq!(ga.value(la).data(), gb.value(lb).data());
    }

    #[test]
    fn forward_rejects_wrong_input_channels() {
        let net = tiny_net();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 4, 8, 8]), false);
        let vars = net.bind(&mut g, false);
        assert!(net.forward(&mut g, &vars, x, false).is_err());
    }

    #[test]
    fn macs_hand_counts() {
        assert_eq!(conv_macs(3, 16, 3, (8, 8)), 27_648);
        assert_eq!(linear_macs(10, 2), 20);
        // Doubling output channels doubles the block's MACs.
        assert_eq!(conv_macs(3, 32, 3, (8, 8)), 2 * 27_648);
    }

    #[test]
    fn count_macs_sums_blocks_and_classifier() {
        let net = tiny_net();
        // Block 1: 3*4*9 on 8x8 = 6912; pool to 4x4. Block 2: 4*6*9 on 4x4
        // = 3456. Classifier: 6*2 = 12.
        assert_eq!(count_macs(&net, (8, 8)), 6912 + 3456 + 12);
    }

    fn tiny_supernet() -> SuperNet<f64> {
        SuperNet::build(
            3,
            2,
            &[
                StageSpec {
                    depth: 1,
                    choices: vec![2, 4],
                },
                StageSpec {
                    depth: 1,
                    choices: vec![4, 6],
                },
            ],
            &mut rng(),
        )
        .unwrap()
    }

    #[test]
    fn masked_forward_one_hot_zeroes_trailing_channels() {
        let sn = tiny_supernet();
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_fn(vec![1, 3, 6, 6], |i| (i as f64 * 0.1).sin()),
            false,
        );
        let vars = sn.bind(&mut g, false);
        let row = g.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), false);
        let out = sn.blocks[0]
            .masked_forward(&mut g, vars.weights[0], x, row)
            .unwrap();
        let v = g.value(out);
        assert_eq!(v.shape()[1], 4);
        let plane = v.shape()[2] * v.shape()[3];
        // Choice 2 of max 4: channels 2 and 3 are fully gated off.
        assert!(v.data()[2 * plane..].iter().all(|&e| e == 0.0));
        assert!(v.data()[..2 * plane].iter().any(|&e| e != 0.0));
    }

    #[test]
    fn masked_forward_half_weights_scale_trailing_channels() {
        let sn = tiny_supernet();
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_fn(vec![1, 3, 6, 6], |i| (i as f64 * 0.07).cos()),
            false,
        );
        let vars = sn.bind(&mut g, false);
        let half = g.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), false);
        let gated = sn.blocks[0]
            .masked_forward(&mut g, vars.weights[0], x, half)
            .unwrap();
        let full = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), false);
        let ungated = sn.blocks[0]
            .masked_forward(&mut g, vars.weights[0], x, full)
            .unwrap();
        let plane = g.value(gated).shape()[2] * g.value(gated).shape()[3];
        let gv = g.value(gated).data();
        let uv = g.value(ungated).data();
        // Leading 2 channels unscaled, trailing 2 at weight 0.5.
        for p in 0..2 * plane {
            assert!((gv[p] - uv[p]).abs() < 1e-12);
        }
        for p in 2 * plane..4 * plane {
            assert!((gv[p] - 0.5 * uv[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_forward_rejects_bad_weights() {
        let sn = tiny_supernet();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 3, 6, 6]), false);
        let vars = sn.bind(&mut g, false);
        let short = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        assert!(matches!(
            sn.blocks[0].masked_forward(&mut g, vars.weights[0], x, short),
            Err(Error::WeightCountMismatch { .. })
        ));
        let off_simplex = g.leaf(Tensor::new(vec![2], vec![0.9, 0.9]).unwrap(), false);
        assert!(matches!(
            sn.blocks[0].masked_forward(&mut g, vars.weights[0], x, off_simplex),
            Err(Error::SimplexViolation { .. })
        ));
    }

    #[test]
    fn one_hot_masked_forward_matches_truncated_plain_conv() {
        let sn = tiny_supernet();
        let mut g = Graph::new();
        let x_t = Tensor::from_fn(vec![1, 3, 6, 6], |i| (i as f64 * 0.05).sin());
        let x = g.leaf(x_t.clone(), false);
        let vars = sn.bind(&mut g, false);
        let one_hot = g.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), false);
        let masked = sn.blocks[0]
            .masked_forward(&mut g, vars.weights[0], x, one_hot)
            .unwrap();
        // Plain conv with the first 2 output channels of the shared weight.
        let w = &sn.blocks[0].weight;
        let narrow = Tensor::new(vec![2, 3, 3, 3], w.data()[..2 * 3 * 9].to_vec()).unwrap();
        let wn = g.leaf(narrow, false);
        let x2 = g.leaf(x_t, false);
        let conv = g.conv2d(x2, wn, 1, PADDING).unwrap();
        let plain = g.relu(conv);
        let plane = 6 * 6;
        for p in 0..2 * plane {
            let diff = (g.value(masked).data()[p] - g.value(plain).data()[p]).abs();
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn expected_macs_one_hot_equals_exact_count() {
        let sn = tiny_supernet();
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let expected = sn.expected_macs_value(&rows, (8, 8));
        let exact = sn.macs_for_channels(&[4, 4], (8, 8));
        assert_eq!(expected, exact as f64);
    }

    #[test]
    fn expected_macs_uniform_weights_hand_case() {
        // Single block, choices {2,4}, uniform weights -> expected 3
        // channels; 4x4 input: 3*3*9*16 + 3*2 = 1302.
        let sn = SuperNet::<f64>::build(
            3,
            2,
            &[StageSpec {
                depth: 1,
                choices: vec![2, 4],
            }],
            &mut rng(),
        )
        .unwrap();
        let got = sn.expected_macs_value(&[vec![0.5, 0.5]], (4, 4));
        assert_eq!(got, (3 * 3 * 9 * 16 + 3 * 2) as f64);
    }

    #[test]
    fn expected_macs_graph_matches_value_form() {
        let sn = tiny_supernet();
        let rows_f = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        let mut g = Graph::new();
        let rows: Vec<Var> = rows_f
            .iter()
            .map(|r| g.leaf(Tensor::new(vec![2], r.clone()).unwrap(), true))
            .collect();
        let macs = sn.expected_macs(&mut g, &rows, (8, 8)).unwrap();
        let want = sn.expected_macs_value(&rows_f, (8, 8));
        assert!((g.value(macs).item() - want).abs() < 1e-9);
    }

    #[test]
    fn undecided_supernet_has_no_exact_macs() {
        let sn = tiny_supernet();
        assert!(matches!(
            sn.count_macs((8, 8)),
            Err(Error::UndecidedSupernet)
        ));
    }

    #[test]
    fn derived_macs_bounded_by_max() {
        let sn = tiny_supernet();
        for channels in [[2, 4], [4, 6], [2, 6], [4, 4]] {
            assert!(sn.macs_for_channels(&channels, (8, 8)) <= sn.max_macs((8, 8)));
        }
    }

    #[test]
    fn derive_channels_takes_argmax_with_low_tie() {
        let mut sn = tiny_supernet();
        sn.blocks[0].logits = Tensor::new(vec![2], vec![0.1, 2.0]).unwrap();
        sn.blocks[1].logits = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(sn.derive_channels(), vec![4, 4]);
    }

    #[test]
    fn materialize_uses_fresh_weights() {
        let sn = tiny_supernet();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let net = sn.materialize(&[2, 4], &mut r);
        assert_eq!(net.blocks[0].out_channels(), 2);
        assert_eq!(net.blocks[1].in_channels(), 2);
        // Fresh init: no overlap with the supernet's shared weights.
        assert_ne!(
            net.blocks[0].weight.data()[0],
            sn.blocks[0].weight.data()[0]
        );
    }
}
