//! The gradient descent unit and its recurrent unrolling.
//!
//! One step computes
//!
//! ```text
//! x_next = x + D( R(x) + H(A^T A x - A^T y) )
//! ```
//!
//! where `R`, `H` and `D` are three encoder-decoder CNNs with identical
//! topology and independent weights. The same parameters serve every step.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::batchnorm::{BatchNormState, BatchStats, Mode};
use crate::conv::ConvSpec;
use crate::degrade::Degradation;
use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Layer count of every sub-network.
pub const LAYERS: usize = 6;

/// Shape of the sub-networks: `channels` image channels, `features`
/// intermediate channels, square kernels of side `kernel_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Topology {
    pub channels: usize,
    pub features: usize,
    pub kernel_size: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            channels: 3,
            features: 64,
            kernel_size: 5,
        }
    }
}

impl Topology {
    /// conv(C->F)+ReLU, 2x conv(F->F)+BN+ReLU, 2x tconv(F->F)+BN+ReLU, tconv(F->C).
    pub fn layer_specs(&self) -> [ConvSpec; LAYERS] {
        let (c, f, k) = (self.channels, self.features, self.kernel_size);
        [
            ConvSpec::same(c, f, k),
            ConvSpec::same(f, f, k),
            ConvSpec::same(f, f, k),
            ConvSpec::same_transposed(f, f, k),
            ConvSpec::same_transposed(f, f, k),
            ConvSpec::same_transposed(f, c, k),
        ]
    }

    pub fn has_bn(layer: usize) -> bool {
        (1..LAYERS - 1).contains(&layer)
    }

    pub fn has_relu(layer: usize) -> bool {
        layer < LAYERS - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.features == 0 {
            return Err(Error::invalid("topology needs positive channel counts"));
        }
        for s in self.layer_specs() {
            s.validate()?;
        }
        Ok(())
    }

    /// Canonical description hashed into checkpoints.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (i, s) in self.layer_specs().iter().enumerate() {
            parts.push(format!(
                "{}{}x{}k{}{}{}",
                if s.transposed { "tconv" } else { "conv" },
                s.in_channels,
                s.out_channels,
                s.kernel_size,
                if Self::has_bn(i) { "+bn" } else { "+bias" },
                if Self::has_relu(i) { "+relu" } else { "" },
            ));
        }
        format!("gdu;subnets=r,h,d;stride=1;pad=same;{}", parts.join(","))
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Which sub-networks take part in the update.
///
/// A disabled `R` contributes nothing; a disabled `H` or `D` passes its
/// input through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Subnets {
    pub r: bool,
    pub h: bool,
    pub d: bool,
}

impl Default for Subnets {
    fn default() -> Self {
        Subnets {
            r: true,
            h: true,
            d: true,
        }
    }
}

/// Identifies one of the three sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubnetId {
    R,
    H,
    D,
}

impl SubnetId {
    pub const ALL: [SubnetId; 3] = [SubnetId::R, SubnetId::H, SubnetId::D];

    pub fn name(self) -> &'static str {
        match self {
            SubnetId::R => "r",
            SubnetId::H => "h",
            SubnetId::D => "d",
        }
    }
}

/// One convolution layer with its bias or normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    /// Present on layers without normalization.
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
}

/// Parameters of one sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetParams<T> {
    pub layers: Vec<Layer<T>>,
}

/// Graph handles for one layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SubnetVars {
    pub layers: Vec<LayerVars>,
}

/// Batch statistics recorded by training-mode forwards, in call order.
#[derive(Clone, Debug, Default)]
pub struct StatsLog<T> {
    pub entries: Vec<(SubnetId, usize, BatchStats<T>)>,
}

impl<T: Scalar> SubnetParams<T> {
    fn init(topo: &Topology, rng: &mut impl Rng) -> Self {
        let layers = topo
            .layer_specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = Tensor::uniform(spec.weight_shape(), -bound, bound, rng);
                let (bias, bn) = if Topology::has_bn(i) {
                    (None, Some(BatchNormState::new(spec.out_channels)))
                } else {
                    (Some(Tensor::zeros(spec.bias_shape())), None)
                };
                Layer {
                    spec: *spec,
                    weight,
                    bias,
                    bn,
                }
            })
            .collect();
        SubnetParams { layers }
    }

    /// Registers the layer tensors as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> SubnetVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: g.leaf(l.weight.clone(), trainable),
                bias: l.bias.as_ref().map(|b| g.leaf(b.clone(), trainable)),
                gamma: l.bn.as_ref().map(|bn| g.leaf(bn.gamma.clone(), trainable)),
                beta: l.bn.as_ref().map(|bn| g.leaf(bn.beta.clone(), trainable)),
            })
            .collect();
        SubnetVars { layers }
    }

    /// Records the sub-network on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &SubnetVars,
        input: Var,
        mode: Mode,
        id: SubnetId,
        log: &mut StatsLog<T>,
    ) -> Result<Var> {
        let c = self.layers[0].spec.in_channels;
        ensure_dim("subnet_forward", "input channels", g.value(input).shape().c, c)?;
        let mut h = input;
        for (i, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            h = g.conv2d(h, lv.weight, lv.bias, layer.spec)?;
            if let (Some(bn), Some(gamma), Some(beta)) = (&layer.bn, lv.gamma, lv.beta) {
                h = match mode {
                    Mode::Train => {
                        let (out, stats) = g.batch_norm_train(h, gamma, beta, bn.eps)?;
                        log.entries.push((id, i, stats));
                        out
                    }
                    Mode::Eval => g.batch_norm_eval(h, gamma, beta, &bn.running_mean, &bn.running_var, bn.eps)?,
                };
            }
            if Topology::has_relu(i) {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Stand-alone forward pass. Training mode uses batch statistics but
    /// leaves the running estimates untouched.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward_graph(&mut g, &vars, x, mode, SubnetId::R, &mut StatsLog::default())?;
        Ok(g.value(out).clone())
    }

    /// Zeroes the last layer's weights and bias, making the output zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(T::zero());
        if let Some(b) = &mut last.bias {
            b.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> SubnetParams<U> {
        SubnetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(Tensor::cast),
                    bn: l.bn.as_ref().map(BatchNormState::cast),
                })
                .collect(),
        }
    }

    /// Trainable tensors in canonical order: per layer weight, bias, gamma, beta.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }
}

impl SubnetVars {
    /// Handles in the same order as [`SubnetParams::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            out.extend(l.bias);
            out.extend(l.gamma);
            out.extend(l.beta);
        }
        out
    }
}

/// Full parameter set of the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct GduParams<T> {
    pub topology: Topology,
    pub subnets: Subnets,
    pub r: SubnetParams<T>,
    pub h: SubnetParams<T>,
    pub d: SubnetParams<T>,
}

/// Graph handles of the active sub-networks.
#[derive(Clone, Debug)]
pub struct GduVars {
    pub r: Option<SubnetVars>,
    pub h: Option<SubnetVars>,
    pub d: Option<SubnetVars>,
}

impl GduVars {
    pub fn get(&self, id: SubnetId) -> Option<&SubnetVars> {
        match id {
            SubnetId::R => self.r.as_ref(),
            SubnetId::H => self.h.as_ref(),
            SubnetId::D => self.d.as_ref(),
        }
    }
}

/// Random initialization: weights uniform in `+-sqrt(1/fan_in)`, zero
/// biases, unit BN scale and zero shift. Deterministic per seed.
pub fn init_params<T: Scalar>(topology: Topology, subnets: Subnets, seed: u64) -> Result<GduParams<T>> {
    topology.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GduParams {
        topology,
        subnets,
        r: SubnetParams::init(&topology, &mut rng),
        h: SubnetParams::init(&topology, &mut rng),
        d: SubnetParams::init(&topology, &mut rng),
    })
}

impl<T: Scalar> GduParams<T> {
    pub fn subnet(&self, id: SubnetId) -> &SubnetParams<T> {
        match id {
            SubnetId::R => &self.r,
            SubnetId::H => &self.h,
            SubnetId::D => &self.d,
        }
    }

    pub fn subnet_mut(&mut self, id: SubnetId) -> &mut SubnetParams<T> {
        match id {
            SubnetId::R => &mut self.r,
            SubnetId::H => &mut self.h,
            SubnetId::D => &mut self.d,
        }
    }

    pub fn is_active(&self, id: SubnetId) -> bool {
        match id {
            SubnetId::R => self.subnets.r,
            SubnetId::H => self.subnets.h,
            SubnetId::D => self.subnets.d,
        }
    }

    /// Binds every active sub-network; disabled ones stay out of the graph.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> GduVars {
        let mut bind = |id| self.is_active(id).then(|| self.subnet(id).bind(g, trainable));
        GduVars {
            r: bind(SubnetId::R),
            h: bind(SubnetId::H),
            d: bind(SubnetId::D),
        }
    }

    /// Reassembles vars for leaves already on a graph, given in the order of
    /// [`GduParams::trainable`].
    pub fn vars_from_leaves(&self, leaves: &[Var]) -> Result<GduVars> {
        let expected = self.trainable().len();
        if leaves.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} leaves, got {}",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut take = |id: SubnetId| {
            self.is_active(id).then(|| SubnetVars {
                layers: self
                    .subnet(id)
                    .layers
                    .iter()
                    .map(|l| LayerVars {
                        weight: it.next().unwrap(),
                        bias: l.bias.as_ref().and_then(|_| it.next()),
                        gamma: l.bn.as_ref().and_then(|_| it.next()),
                        beta: l.bn.as_ref().and_then(|_| it.next()),
                    })
                    .collect(),
            })
        };
        Ok(GduVars {
            r: take(SubnetId::R),
            h: take(SubnetId::H),
            d: take(SubnetId::D),
        })
    }

    /// Folds recorded batch statistics into the running estimates, in order.
    pub fn absorb_stats(&mut self, log: &StatsLog<T>) {
        for (id, layer, stats) in &log.entries {
            if let Some(bn) = &mut self.subnet_mut(*id).layers[*layer].bn {
                bn.absorb(stats);
            }
        }
    }

    /// Records one update `x + D(R(x) + H(A^T A x - A^T y))` on `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_graph(
        &self,
        g: &mut Graph<T>,
        vars: &GduVars,
        x: Var,
        y: Var,
        ops: &Arc<[Degradation]>,
        mode: Mode,
        log: &mut StatsLog<T>,
    ) -> Result<Var> {
        ensure_dim("gdu_step", "channels", g.value(x).shape().c, self.topology.channels)?;
        let grad = g.fidelity_gradient(x, y, ops.clone())?;
        let h = match &vars.h {
            Some(v) => self.h.forward_graph(g, v, grad, mode, SubnetId::H, log)?,
            None => grad,
        };
        let dir = match &vars.r {
            Some(v) => {
                let r = self.r.forward_graph(g, v, x, mode, SubnetId::R, log)?;
                g.add(r, h)?
            }
            None => h,
        };
        let update = match &vars.d {
            Some(v) => self.d.forward_graph(g, v, dir, mode, SubnetId::D, log)?,
            None => dir,
        };
        g.add(x, update)
    }

    /// Records `steps` recurrent updates from `x0`; returns every estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn unroll_graph(
        &self,
        g: &mut Graph<T>,
        vars: &GduVars,
        x0: Var,
        y: Var,
        ops: &Arc<[Degradation]>,
        steps: usize,
        mode: Mode,
        log: &mut StatsLog<T>,
    ) -> Result<Vec<Var>> {
        if steps == 0 {
            return Err(Error::invalid("unroll needs at least one step"));
        }
        let mut out = Vec::with_capacity(steps);
        let mut x = x0;
        for _ in 0..steps {
            x = self.step_graph(g, vars, x, y, ops, mode, log)?;
            out.push(x);
        }
        Ok(out)
    }

    /// One update evaluated outside any training graph.
    pub fn step(&self, x: &Tensor<T>, y: &Tensor<T>, ops: &Arc<[Degradation]>, mode: Mode) -> Result<Tensor<T>> {
        x.shape().ensure_eq("gdu_step", &y.shape())?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = self.step_graph(&mut g, &vars, xv, yv, ops, mode, &mut StatsLog::default())?;
        Ok(g.value(out).clone())
    }

    /// Runs `steps` updates from `x0` and returns `[x1, ..., x_steps]`.
    ///
    /// Eval mode builds a fresh graph per step so memory stays flat; training
    /// mode uses batch statistics without touching the running estimates.
    pub fn unroll(
        &self,
        x0: &Tensor<T>,
        y: &Tensor<T>,
        ops: &Arc<[Degradation]>,
        steps: usize,
        mode: Mode,
    ) -> Result<Vec<Tensor<T>>> {
        if steps == 0 {
            return Err(Error::invalid("unroll needs at least one step"));
        }
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let prev = out.last().unwrap_or(x0);
            let next = self.step(prev, y, ops, mode)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> GduParams<U> {
        GduParams {
            topology: self.topology,
            subnets: self.subnets,
            r: self.r.cast(),
            h: self.h.cast(),
            d: self.d.cast(),
        }
    }

    /// Trainable tensors of the active sub-networks, in canonical order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let subnets = self.subnets;
        let mut out = Vec::new();
        if subnets.r {
            out.extend(self.r.trainable_mut());
        }
        if subnets.h {
            out.extend(self.h.trainable_mut());
        }
        if subnets.d {
            out.extend(self.d.trainable_mut());
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        SubnetId::ALL
            .iter()
            .filter(|id| self.is_active(**id))
            .flat_map(|id| self.subnet(*id).trainable())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

impl GduVars {
    /// Handles in the same order as [`GduParams::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        SubnetId::ALL
            .iter()
            .filter_map(|id| self.get(*id))
            .flat_map(SubnetVars::trainable)
            .collect()
    }
}

/// Wraps one degradation for use with a whole batch.
pub fn shared_ops(op: Degradation) -> Arc<[Degradation]> {
    Arc::from(vec![op])
}

/// Convenience shape for a single image.
pub fn image_shape(channels: usize, h: usize, w: usize) -> Shape {
    Shape::new(1, channels, h, w)
}
