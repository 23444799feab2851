//! Capsule network: two convolutions, a primary capsule layer and a
//! class-capsule layer computed by dynamic routing-by-agreement.
//!
//! Routing follows the classic procedure. Votes are `v[i,j] = W[i,j]·u[i]`
//! and logits start at zero. Each iteration takes `c[i,·] = softmax(b[i,·])`,
//! forms `s[j] = Σ_i c[i,j]·v[i,j]` and `u[j] = squash(s[j])`. Every
//! iteration except the last then adds the agreement `v[i,j]·u[j]` to
//! `b[i,j]`. All iterations are unrolled on the tape, so gradients flow
//! through the coefficients as well as the votes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationFn;
use crate::autodiff::{Gradients, MarginLossParams, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

/// Layer sizes. Convolutions use square kernels and cross-correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    /// Zero padding of the first convolution. 0 everywhere except the
    /// CIFAR-10 presets, which pad by 4 to reach a 12×12 capsule grid.
    pub conv1_padding: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    pub prim_channels: usize,
    pub prim_dim: usize,
    pub num_classes: usize,
    pub digit_dim: usize,
    pub routing_iters: usize,
}

impl ArchConfig {
    /// Full-size MNIST network: 256 conv channels, 32 capsule channels.
    pub fn mnist() -> Self {
        ArchConfig {
            input_channels: 1,
            input_size: 28,
            conv1_channels: 256,
            conv1_kernel: 9,
            conv1_padding: 0,
            conv2_kernel: 9,
            conv2_stride: 2,
            prim_channels: 32,
            prim_dim: 8,
            num_classes: 10,
            digit_dim: 16,
            routing_iters: DEFAULT_ROUTING_ITERATIONS,
        }
    }

    /// CIFAR-10 network with `prim_channels` capsule channels on a 12×12
    /// grid (8 and 64 are the usual variants).
    pub fn cifar10(prim_channels: usize) -> Self {
        ArchConfig {
            input_channels: 3,
            input_size: 32,
            conv1_padding: 4,
            prim_channels,
            ..Self::mnist()
        }
    }

    pub fn multimnist() -> Self {
        ArchConfig {
            input_size: 36,
            ..Self::mnist()
        }
    }

    /// Reduced MNIST network that trains in minutes on one core.
    pub fn desk_mnist() -> Self {
        ArchConfig {
            conv1_channels: 32,
            prim_channels: 2,
            ..Self::mnist()
        }
    }

    /// Reduced CIFAR-10 network: unpadded, 8×8 capsule grid.
    pub fn desk_cifar10() -> Self {
        ArchConfig {
            input_channels: 3,
            input_size: 32,
            conv1_channels: 32,
            prim_channels: 4,
            ..Self::mnist()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "multimnist" => Ok(Self::multimnist()),
            "cifar10" | "cifar10-primcaps8" => Ok(Self::cifar10(8)),
            "cifar10-primcaps64" => Ok(Self::cifar10(64)),
            "desk-mnist" => Ok(Self::desk_mnist()),
            "desk-cifar10" => Ok(Self::desk_cifar10()),
            other => Err(Error::Config(format!(
                "unknown architecture preset '{other}' (mnist, multimnist, cifar10-primcaps8, \
                 cifar10-primcaps64, desk-mnist, desk-cifar10)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("conv1_channels", self.conv1_channels),
            ("conv1_kernel", self.conv1_kernel),
            ("conv2_kernel", self.conv2_kernel),
            ("conv2_stride", self.conv2_stride),
            ("prim_channels", self.prim_channels),
            ("prim_dim", self.prim_dim),
            ("num_classes", self.num_classes),
            ("digit_dim", self.digit_dim),
            ("routing_iters", self.routing_iters),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let conv1 = self.input_size + 2 * self.conv1_padding;
        if conv1 < self.conv1_kernel || self.conv1_out() < self.conv2_kernel {
            return Err(Error::Config(format!(
                "input size {} too small for two {}x{} convolutions",
                self.input_size, self.conv1_kernel, self.conv2_kernel
            )));
        }
        Ok(())
    }

    fn conv1_out(&self) -> usize {
        (self.input_size + 2 * self.conv1_padding).saturating_sub(self.conv1_kernel) + 1
    }

    /// Side of the square primary-capsule grid.
    pub fn primary_grid(&self) -> usize {
        (self.conv1_out() - self.conv2_kernel) / self.conv2_stride + 1
    }

    pub fn num_primary_caps(&self) -> usize {
        self.prim_channels * self.primary_grid() * self.primary_grid()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }
}

/// Trainable tensors, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// `N_in × N_out × digit_dim × prim_dim` transformation matrices.
    pub routing_w: Tensor,
}

impl Params {
    pub const NAMES: [&'static str; 5] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "routing_w"];

    pub fn zeros(arch: &ArchConfig) -> Self {
        let conv2_out = arch.prim_channels * arch.prim_dim;
        Params {
            conv1_w: Tensor::zeros(&[arch.conv1_channels, arch.input_channels, arch.conv1_kernel, arch.conv1_kernel]),
            conv1_b: Tensor::zeros(&[arch.conv1_channels]),
            conv2_w: Tensor::zeros(&[conv2_out, arch.conv1_channels, arch.conv2_kernel, arch.conv2_kernel]),
            conv2_b: Tensor::zeros(&[conv2_out]),
            routing_w: Tensor::zeros(&[arch.num_primary_caps(), arch.num_classes, arch.digit_dim, arch.prim_dim]),
        }
    }

    /// He-normal convolutions, zero biases, `N(0, routing_std²)` routing weights.
    pub fn init(arch: &ArchConfig, routing_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        let fan1 = (arch.input_channels * arch.conv1_kernel * arch.conv1_kernel) as f64;
        let fan2 = (arch.conv1_channels * arch.conv2_kernel * arch.conv2_kernel) as f64;
        p.conv1_w = Tensor::random_normal(p.conv1_w.shape(), (2.0 / fan1).sqrt(), &mut rng);
        p.conv2_w = Tensor::random_normal(p.conv2_w.shape(), (2.0 / fan2).sqrt(), &mut rng);
        p.routing_w = Tensor::random_normal(p.routing_w.shape(), routing_std, &mut rng);
        p
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.routing_w]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.routing_w,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data()).map(|v| v * v).sum()
    }

    pub fn shapes_match(&self, other: &Params) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Shape summary of the primary capsule layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimaryCapsuleLayer {
    pub num_capsule_channels: usize,
    pub capsule_dim: usize,
    pub grid: (usize, usize),
    pub activation: ActivationFn,
}

impl PrimaryCapsuleLayer {
    pub fn num_capsules(&self) -> usize {
        self.num_capsule_channels * self.grid.0 * self.grid.1
    }
}

/// The routed layer: transformation matrices plus the iteration count.
#[derive(Debug, Clone, Copy)]
pub struct RoutingLayer<'a> {
    pub num_in: usize,
    pub num_out: usize,
    pub w: &'a Tensor,
    pub iterations: usize,
}

/// Everything routing computed for one input.
///
/// `logits` and `coefficients` are `N_in × N_out` (row `i` sums to one),
/// `votes` is `N_in × N_out × d_out`, `sums` and `outputs` are
/// `N_out × d_out`. `coefficient_history[t]` holds the coefficients used
/// in iteration `t`; the last entry equals `coefficients`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleLayerState {
    pub votes: Tensor,
    pub logits: Tensor,
    pub coefficients: Tensor,
    pub sums: Tensor,
    pub outputs: Tensor,
    pub coefficient_history: Vec<Tensor>,
}

impl CapsuleLayerState {
    pub fn num_in(&self) -> usize {
        self.coefficients.shape()[0]
    }

    pub fn num_out(&self) -> usize {
        self.coefficients.shape()[1]
    }

    /// Largest `|Σ_j c[i,j] − 1|` over all inputs and iterations.
    pub fn max_normalization_error(&self) -> f64 {
        self.coefficient_history
            .iter()
            .flat_map(|c| {
                let n_out = c.shape()[1];
                c.data().chunks(n_out).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

/// Tape handles for one routing pass.
#[derive(Debug, Clone)]
pub struct RoutingVars {
    pub votes: Var,
    pub logits: Vec<Var>,
    pub coefficients: Vec<Var>,
    pub sums: Vec<Var>,
    pub outputs: Vec<Var>,
}

impl RoutingVars {
    pub fn output(&self) -> Var {
        *self.outputs.last().expect("at least one iteration")
    }

    pub fn state(&self, tape: &Tape) -> CapsuleLayerState {
        let last = |vs: &[Var]| tape.value(*vs.last().expect("at least one iteration")).clone();
        CapsuleLayerState {
            votes: tape.value(self.votes).clone(),
            logits: last(&self.logits),
            coefficients: last(&self.coefficients),
            sums: last(&self.sums),
            outputs: last(&self.outputs),
            coefficient_history: self.coefficients.iter().map(|&c| tape.value(c).clone()).collect(),
        }
    }
}

fn ensure_finite(tape: &Tape, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Records dynamic routing from capsules `u` (`N_in × d_in`) through
/// transformation matrices `w` (`N_in × N_out × d_out × d_in`).
pub fn route_on_tape(tape: &mut Tape, u: Var, w: Var, iterations: usize) -> Result<RoutingVars> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let votes = tape.capsule_votes(u, w)?;
    ensure_finite(tape, votes, || "routing votes".into())?;
    let n_in = tape.value(votes).shape()[0];
    let n_out = tape.value(votes).shape()[1];
    let mut b = tape.constant(Tensor::zeros(&[n_in, n_out]));
    let mut vars = RoutingVars {
        votes,
        logits: Vec::with_capacity(iterations),
        coefficients: Vec::with_capacity(iterations),
        sums: Vec::with_capacity(iterations),
        outputs: Vec::with_capacity(iterations),
    };
    for iter in 0..iterations {
        let c = tape.softmax(b, 1)?;
        let s = tape.weighted_vote_sum(c, votes)?;
        let out = tape.squash(s)?;
        for (v, name) in [(c, "coefficients"), (s, "sums"), (out, "outputs")] {
            ensure_finite(tape, v, || format!("routing iteration {} {name}", iter + 1))?;
        }
        vars.logits.push(b);
        vars.coefficients.push(c);
        vars.sums.push(s);
        vars.outputs.push(out);
        if iter + 1 < iterations {
            let agree = tape.agreement(votes, out)?;
            b = tape.add(b, agree)?;
        }
    }
    Ok(vars)
}

/// Routes `capsules_in` through `w` and returns the output capsules with
/// the full routing state.
pub fn dynamic_routing(capsules_in: &Tensor, w: &Tensor, iterations: usize) -> Result<(Tensor, CapsuleLayerState)> {
    let mut tape = Tape::new();
    let u = tape.constant(capsules_in.clone());
    let wv = tape.constant(w.clone());
    let vars = route_on_tape(&mut tape, u, wv, iterations)?;
    let state = vars.state(&tape);
    Ok((state.outputs.clone(), state))
}

/// Parameters bound to a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub vars: [Var; 5],
}

/// Tape handles produced by [`CapsNet::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: ParamVars,
    /// Sliced conv features before the activation, `N_caps × prim_dim`.
    pub primary_sums: Var,
    /// Primary capsules after the activation (and dropout, if any).
    pub primary: Var,
    pub routing: RoutingVars,
    /// Class activations `‖u_j‖`, length `num_classes`.
    pub class_activations: Var,
}

/// Primary-layer artifacts of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryState {
    pub sums: Tensor,
    pub capsules: Tensor,
}

impl PrimaryState {
    /// Activation value `‖u_i‖` of every primary capsule.
    pub fn activations(&self) -> Vec<f64> {
        let d = self.capsules.shape()[1];
        self.capsules
            .data()
            .chunks(d)
            .map(crate::activations::norm)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub class_activations: Tensor,
    pub primary: PrimaryState,
    pub routing: CapsuleLayerState,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(self.class_activations.data())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsNet {
    pub arch: ArchConfig,
    pub activation: ActivationFn,
    pub params: Params,
}

impl CapsNet {
    pub fn new(arch: ArchConfig, activation: ActivationFn, params: Params) -> Result<Self> {
        arch.validate()?;
        activation.validate()?;
        if !params.shapes_match(&Params::zeros(&arch)) {
            return Err(Error::shape(
                "capsnet",
                "parameter shapes implied by the architecture",
                format!("{:?}", params.tensors().map(|t| t.shape().to_vec())),
            ));
        }
        Ok(CapsNet {
            arch,
            activation,
            params,
        })
    }

    pub fn init(arch: ArchConfig, activation: ActivationFn, routing_std: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = Params::init(&arch, routing_std, seed);
        Self::new(arch, activation, params)
    }

    pub fn primary_layer(&self) -> PrimaryCapsuleLayer {
        let g = self.arch.primary_grid();
        PrimaryCapsuleLayer {
            num_capsule_channels: self.arch.prim_channels,
            capsule_dim: self.arch.prim_dim,
            grid: (g, g),
            activation: self.activation,
        }
    }

    pub fn routing_layer(&self) -> RoutingLayer<'_> {
        RoutingLayer {
            num_in: self.arch.num_primary_caps(),
            num_out: self.arch.num_classes,
            w: &self.params.routing_w,
            iterations: self.arch.routing_iters,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self.params.tensors().map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        ParamVars { vars }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.arch.input_shape() {
            return Err(Error::shape(
                "capsnet input",
                format!("{:?}", self.arch.input_shape()),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Convolutions and primary capsules. `dropout_mask`, if given, has the
    /// primary capsules' shape and multiplies them elementwise.
    fn primary_on_tape(&self, tape: &mut Tape, params: ParamVars, image: Var, dropout_mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let [c1w, c1b, c2w, c2b, _] = params.vars;
        let x = tape.conv2d_padded(image, c1w, 1, self.arch.conv1_padding)?;
        let x = tape.channel_bias(x, c1b)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, c2w, self.arch.conv2_stride)?;
        let x = tape.channel_bias(x, c2b)?;
        let sums = tape.slice_capsules(x, self.arch.prim_dim)?;
        let mut caps = match self.activation {
            ActivationFn::PoweredActivation { n } => {
                let u = tape.squash(sums)?;
                tape.power(u, n)?
            }
            act => tape.activation(sums, act)?,
        };
        ensure_finite(tape, caps, || "primary capsules".into())?;
        if let Some(mask) = dropout_mask {
            let m = tape.constant(mask.clone());
            caps = tape.mul(caps, m)?;
        }
        Ok((sums, caps))
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, params: ParamVars, image: &Tensor, dropout_mask: Option<&Tensor>) -> Result<ForwardVars> {
        self.check_image(image)?;
        let img = tape.constant(image.clone());
        let (primary_sums, primary) = self.primary_on_tape(tape, params, img, dropout_mask)?;
        let routing = route_on_tape(tape, primary, params.vars[4], self.arch.routing_iters)?;
        let class_activations = tape.vector_norm(routing.output(), 1)?;
        Ok(ForwardVars {
            params,
            primary_sums,
            primary,
            routing,
            class_activations,
        })
    }

    /// Inference pass returning class activations and all routing state.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let fv = self.forward_on_tape(&mut tape, params, image, None)?;
        Ok(ForwardOutput {
            class_activations: tape.value(fv.class_activations).clone(),
            primary: PrimaryState {
                sums: tape.value(fv.primary_sums).clone(),
                capsules: tape.value(fv.primary).clone(),
            },
            routing: fv.routing.state(&tape),
        })
    }

    /// Primary capsules only; skips routing.
    pub fn primary_forward(&self, image: &Tensor) -> Result<PrimaryState> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let (sums, caps) = self.primary_on_tape(&mut tape, params, img, None)?;
        Ok(PrimaryState {
            sums: tape.value(sums).clone(),
            capsules: tape.value(caps).clone(),
        })
    }

    /// Margin loss of one example and its gradient wrt every parameter.
    pub fn loss_and_grad(
        &self,
        image: &Tensor,
        targets: &[bool],
        loss: MarginLossParams,
        dropout_mask: Option<&Tensor>,
    ) -> Result<(f64, Tensor, Params)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, true);
        let fv = self.forward_on_tape(&mut tape, params, image, dropout_mask)?;
        let l = tape.margin_loss(fv.class_activations, targets, loss)?;
        let mut grads = tape.backward(l);
        let value = tape.value(l).item();
        let acts = tape.value(fv.class_activations).clone();
        Ok((value, acts, collect_grads(&mut grads, params, &self.params)))
    }
}

fn collect_grads(grads: &mut Gradients, params: ParamVars, like: &Params) -> Params {
    let mut take = |k: usize, t: &Tensor| grads.take(params.vars[k]).unwrap_or_else(|| Tensor::zeros(t.shape()));
    Params {
        conv1_w: take(0, &like.conv1_w),
        conv1_b: take(1, &like.conv1_b),
        conv2_w: take(2, &like.conv2_w),
        conv2_b: take(3, &like.conv2_b),
        routing_w: take(4, &like.routing_w),
    }
}
