//! Position and channel self-attention over `C×H×W` feature maps, and the
//! three ways of combining them.
//!
//! The position attention module (PAM) projects the input with three 1×1
//! convolutions: two reduce `C` to `C/r` channels and produce the key and
//! query maps, the third keeps `C` channels and produces the value map. The
//! `N×N` attention map (`N = H·W`) is a column softmax of `Cfᵀ·B`, so every
//! column sums to one; the refined map is `α·(D·P) + A`.
//!
//! The channel attention module (CAM) has no convolutions: its `C×C` map is
//! a column softmax of the Gram matrix `A·Aᵀ` and the output is
//! `β·(Q·A) + A`.
//!
//! Both scalars start at zero, so freshly built modules are the identity.
//!
//! Every operation exists twice: a tape-level builder (`*_on`) used by the
//! model and the gradient checks, and a value-level wrapper that evaluates
//! it on plain tensors.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Which index the attention softmax normalises over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Normalise over the first index: every column sums to one.
    #[default]
    Columns,
    /// Normalise over the second index (rows sum to one).
    Rows,
}

impl SoftmaxAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "columns" | "cols" => Some(SoftmaxAxis::Columns),
            "rows" => Some(SoftmaxAxis::Rows),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SoftmaxAxis::Columns => "columns",
            SoftmaxAxis::Rows => "rows",
        }
    }
}

fn softmax_on<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: SoftmaxAxis) -> Result<Var> {
    match axis {
        SoftmaxAxis::Columns => tape.softmax_cols(x),
        SoftmaxAxis::Rows => {
            let t = tape.transpose(x)?;
            let s = tape.softmax_cols(t)?;
            tape.transpose(s)
        }
    }
}

/// Weight and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// He-normal weights (fan-in scaling), zero bias.
    pub fn he(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        ConvParams {
            weight: Tensor::from_fn([c_out, c_in, k, k], |_| T::of(normal.sample(rng))),
            bias: Tensor::zeros([c_out]),
        }
    }

    /// Channel-preserving kernel with a single 1 at the centre tap of the
    /// matching channel, i.e. the identity map under "same" padding.
    pub fn delta(channels: usize, k: usize) -> Self {
        let mut weight = Tensor::zeros([channels, channels, k, k]);
        let centre = (k / 2) * k + k / 2;
        for c in 0..channels {
            weight.data_mut()[(c * channels + c) * k * k + centre] = T::one();
        }
        ConvParams {
            weight,
            bias: Tensor::zeros([channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> ConvVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ConvVars {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, pad: usize) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, 1, pad)
    }
}

fn scalar_leaf<T: Scalar>(tape: &mut Tape<T>, v: T, trainable: bool) -> Var {
    if trainable {
        tape.param(Tensor::scalar(v))
    } else {
        tape.constant(Tensor::scalar(v))
    }
}

/// Learned weights of the position attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct PamParams<T = f32> {
    /// `C → C/r` key projection.
    pub conv_b: ConvParams<T>,
    /// `C → C/r` query projection.
    pub conv_c: ConvParams<T>,
    /// `C → C` value projection.
    pub conv_d: ConvParams<T>,
    pub alpha: T,
    pub reduction: usize,
    pub axis: SoftmaxAxis,
}

pub fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::InvalidArgument(format!(
            "reduction ratio {reduction} does not divide {channels} channels"
        )));
    }
    Ok(())
}

impl<T: Scalar> PamParams<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let reduced = channels / reduction;
        Ok(PamParams {
            conv_b: ConvParams::he(reduced, channels, 1, rng),
            conv_c: ConvParams::he(reduced, channels, 1, rng),
            conv_d: ConvParams::he(channels, channels, 1, rng),
            alpha: T::zero(),
            reduction,
            axis: SoftmaxAxis::Columns,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv_d.out_channels()
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> PamVars {
        PamVars {
            conv_b: self.conv_b.on_tape(tape, trainable),
            conv_c: self.conv_c.on_tape(tape, trainable),
            conv_d: self.conv_d.on_tape(tape, trainable),
            alpha: scalar_leaf(tape, self.alpha, trainable),
            axis: self.axis,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PamVars {
    pub conv_b: ConvVars,
    pub conv_c: ConvVars,
    pub conv_d: ConvVars,
    pub alpha: Var,
    pub axis: SoftmaxAxis,
}

/// Channel attention carries only its residual scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamParams<T = f32> {
    pub beta: T,
    pub axis: SoftmaxAxis,
}

impl<T: Scalar> Default for CamParams<T> {
    fn default() -> Self {
        CamParams {
            beta: T::zero(),
            axis: SoftmaxAxis::Columns,
        }
    }
}

impl<T: Scalar> CamParams<T> {
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> CamVars {
        CamVars {
            beta: scalar_leaf(tape, self.beta, trainable),
            axis: self.axis,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    pub beta: Var,
    pub axis: SoftmaxAxis,
}

/// Two channel-preserving 3×3 convolutions with a ReLU between them,
/// applied to an attention output before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct PostConv<T = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

pub const POST_CONV_KERNEL: usize = 3;

impl<T: Scalar> PostConv<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        PostConv {
            conv1: ConvParams::he(channels, channels, POST_CONV_KERNEL, rng),
            conv2: ConvParams::he(channels, channels, POST_CONV_KERNEL, rng),
        }
    }

    /// Identity on non-negative inputs (delta kernels around a ReLU).
    pub fn identity(channels: usize) -> Self {
        PostConv {
            conv1: ConvParams::delta(channels, POST_CONV_KERNEL),
            conv2: ConvParams::delta(channels, POST_CONV_KERNEL),
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> PostConvVars {
        PostConvVars {
            conv1: self.conv1.on_tape(tape, trainable),
            conv2: self.conv2.on_tape(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PostConvVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

/// PAM and CAM side by side, each followed by its post-conv stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelParams<T = f32> {
    pub pam: PamParams<T>,
    pub cam: CamParams<T>,
    pub post_pam: PostConv<T>,
    pub post_cam: PostConv<T>,
}

impl<T: Scalar> ParallelParams<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ParallelParams {
            pam: PamParams::new(channels, reduction, rng)?,
            cam: CamParams::default(),
            post_pam: PostConv::new(channels, rng),
            post_cam: PostConv::new(channels, rng),
        })
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> ParallelVars {
        ParallelVars {
            pam: self.pam.on_tape(tape, trainable),
            cam: self.cam.on_tape(tape, trainable),
            post_pam: self.post_pam.on_tape(tape, trainable),
            post_cam: self.post_cam.on_tape(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParallelVars {
    pub pam: PamVars,
    pub cam: CamVars,
    pub post_pam: PostConvVars,
    pub post_cam: PostConvVars,
}

/// Parallel fusion on the two mid-level taps, CAM alone on the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalParams<T = f32> {
    pub tap3: ParallelParams<T>,
    pub tap4: ParallelParams<T>,
    pub tap5: CamParams<T>,
}

impl<T: Scalar> HierarchicalParams<T> {
    pub fn new(channels: [usize; 3], reduction: usize, rng: &mut Rng) -> Result<Self> {
        Ok(HierarchicalParams {
            tap3: ParallelParams::new(channels[0], reduction, rng)?,
            tap4: ParallelParams::new(channels[1], reduction, rng)?,
            tap5: CamParams::default(),
        })
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> HierarchicalVars {
        HierarchicalVars {
            tap3: self.tap3.on_tape(tape, trainable),
            tap4: self.tap4.on_tape(tape, trainable),
            tap5: self.tap5.on_tape(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HierarchicalVars {
    pub tap3: ParallelVars,
    pub tap4: ParallelVars,
    pub tap5: CamVars,
}

// ---------------------------------------------------------------------------
// Tape-level builders
// ---------------------------------------------------------------------------

/// Position attention map `P` (`N×N`).
pub fn pam_attention_map_on<T: Scalar>(tape: &mut Tape<T>, a: Var, p: &PamVars) -> Result<Var> {
    let (c, h, w) = tape.value(a).dims3("pam")?;
    let n = h * w;
    let reduced = tape.shape(p.conv_b.weight)[0];
    if reduced == 0 || c % reduced != 0 || tape.shape(p.conv_c.weight)[0] != reduced {
        return Err(Error::InvalidArgument(format!(
            "reduction ratio does not divide {c} channels"
        )));
    }
    let b = p.conv_b.apply(tape, a, 0)?;
    let b = tape.reshape(b, [reduced, n])?;
    let cf = p.conv_c.apply(tape, a, 0)?;
    let cf = tape.reshape(cf, [reduced, n])?;
    let cf_t = tape.transpose(cf)?;
    let raw = tape.matmul(cf_t, b)?;
    softmax_on(tape, raw, p.axis)
}

/// Refined map and its attention map.
pub struct Attended {
    pub output: Var,
    pub map: Var,
}

pub fn pam_on<T: Scalar>(tape: &mut Tape<T>, a: Var, p: &PamVars) -> Result<Attended> {
    let shape = tape.shape(a).to_vec();
    let (c, h, w) = tape.value(a).dims3("pam")?;
    let map = pam_attention_map_on(tape, a, p)?;
    let d = p.conv_d.apply(tape, a, 0)?;
    let d = tape.reshape(d, [c, h * w])?;
    let dp = tape.matmul(d, map)?;
    let scaled = tape.scale_by_scalar_param(dp, p.alpha)?;
    let scaled = tape.reshape(scaled, shape)?;
    let output = tape.add(scaled, a)?;
    Ok(Attended { output, map })
}

/// Channel attention map `Q` (`C×C`).
pub fn cam_attention_map_on<T: Scalar>(tape: &mut Tape<T>, a: Var, axis: SoftmaxAxis) -> Result<Var> {
    let (c, h, w) = tape.value(a).dims3("cam")?;
    let flat = tape.reshape(a, [c, h * w])?;
    let flat_t = tape.transpose(flat)?;
    let gram = tape.matmul(flat, flat_t)?;
    softmax_on(tape, gram, axis)
}

pub fn cam_on<T: Scalar>(tape: &mut Tape<T>, a: Var, p: &CamVars) -> Result<Attended> {
    let shape = tape.shape(a).to_vec();
    let (c, h, w) = tape.value(a).dims3("cam")?;
    let map = cam_attention_map_on(tape, a, p.axis)?;
    let flat = tape.reshape(a, [c, h * w])?;
    let qa = tape.matmul(map, flat)?;
    let scaled = tape.scale_by_scalar_param(qa, p.beta)?;
    let scaled = tape.reshape(scaled, shape)?;
    let output = tape.add(scaled, a)?;
    Ok(Attended { output, map })
}

pub fn post_conv_on<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &PostConvVars) -> Result<Var> {
    let pad = POST_CONV_KERNEL / 2;
    let y = p.conv1.apply(tape, x, pad)?;
    let y = tape.relu(y)?;
    p.conv2.apply(tape, y, pad)
}

/// Intermediate values of a parallel fusion, kept for inspection.
pub struct ParallelOut {
    pub output: Var,
    pub pam_map: Var,
    pub cam_map: Var,
}

pub fn fuse_parallel_on<T: Scalar>(tape: &mut Tape<T>, a: Var, p: &ParallelVars) -> Result<ParallelOut> {
    let pam = pam_on(tape, a, &p.pam)?;
    let pam_branch = post_conv_on(tape, pam.output, &p.post_pam)?;
    let cam = cam_on(tape, a, &p.cam)?;
    let cam_branch = post_conv_on(tape, cam.output, &p.post_cam)?;
    Ok(ParallelOut {
        output: tape.add(pam_branch, cam_branch)?,
        pam_map: pam.map,
        cam_map: cam.map,
    })
}

/// CAM first, then PAM on its output.
pub fn fuse_sequential_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    cam: &CamVars,
    pam: &PamVars,
) -> Result<ParallelOut> {
    let first = cam_on(tape, a, cam)?;
    let second = pam_on(tape, first.output, pam)?;
    Ok(ParallelOut {
        output: second.output,
        pam_map: second.map,
        cam_map: first.map,
    })
}

/// Output and the attention maps of every site.
pub struct HierarchicalOut {
    pub output: Var,
    pub tap3: ParallelOut,
    pub tap4: ParallelOut,
    pub tap5_cam_map: Var,
}

/// Checks the 4:2:1 spatial ratio and returns the coarsest side length.
pub fn check_tap_ratio(t3: &[usize], t4: &[usize], t5: &[usize]) -> Result<(usize, usize)> {
    let spatial = |s: &[usize]| match *s {
        [_, h, w] => Ok((h, w)),
        _ => Err(Error::dim("hierarchical", format!("expected rank 3, got {s:?}"))),
    };
    let (h3, w3) = spatial(t3)?;
    let (h4, w4) = spatial(t4)?;
    let (h5, w5) = spatial(t5)?;
    if h3 != 4 * h5 || w3 != 4 * w5 || h4 != 2 * h5 || w4 != 2 * w5 {
        return Err(Error::dim(
            "hierarchical",
            format!("tap sizes {h3}×{w3}, {h4}×{w4}, {h5}×{w5} are not in 4:2:1 ratio"),
        ));
    }
    Ok((h5, w5))
}

pub fn fuse_hierarchical_on<T: Scalar>(
    tape: &mut Tape<T>,
    taps: [Var; 3],
    p: &HierarchicalVars,
) -> Result<HierarchicalOut> {
    let [t3, t4, t5] = taps;
    check_tap_ratio(tape.shape(t3), tape.shape(t4), tape.shape(t5))?;
    let f3 = fuse_parallel_on(tape, t3, &p.tap3)?;
    let pooled3 = tape.maxpool2d(f3.output, 4, 4)?;
    let f4 = fuse_parallel_on(tape, t4, &p.tap4)?;
    let pooled4 = tape.maxpool2d(f4.output, 2, 2)?;
    let c5 = cam_on(tape, t5, &p.tap5)?;
    let output = tape.concat(&[pooled3, pooled4, c5.output])?;
    Ok(HierarchicalOut {
        output,
        tap3: f3,
        tap4: f4,
        tap5_cam_map: c5.map,
    })
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

fn eval<T: Scalar>(build: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}

pub fn pam_attention_map<T: Scalar>(a: &Tensor<T>, p: &PamParams<T>) -> Result<Tensor<T>> {
    check_reduction(a.dims3("pam")?.0, p.reduction)?;
    eval(|t| {
        let a = t.constant(a.clone());
        let vars = p.on_tape(t, false);
        pam_attention_map_on(t, a, &vars)
    })
}

pub fn pam_forward<T: Scalar>(a: &Tensor<T>, p: &PamParams<T>) -> Result<Tensor<T>> {
    check_reduction(a.dims3("pam")?.0, p.reduction)?;
    eval(|t| {
        let a = t.constant(a.clone());
        let vars = p.on_tape(t, false);
        Ok(pam_on(t, a, &vars)?.output)
    })
}

pub fn cam_attention_map<T: Scalar>(a: &Tensor<T>, axis: SoftmaxAxis) -> Result<Tensor<T>> {
    eval(|t| {
        let a = t.constant(a.clone());
        cam_attention_map_on(t, a, axis)
    })
}

pub fn cam_forward<T: Scalar>(a: &Tensor<T>, p: &CamParams<T>) -> Result<Tensor<T>> {
    eval(|t| {
        let a = t.constant(a.clone());
        let vars = p.on_tape(t, false);
        Ok(cam_on(t, a, &vars)?.output)
    })
}

pub fn post_conv<T: Scalar>(x: &Tensor<T>, p: &PostConv<T>) -> Result<Tensor<T>> {
    eval(|t| {
        let x = t.constant(x.clone());
        let vars = p.on_tape(t, false);
        post_conv_on(t, x, &vars)
    })
}

pub fn fuse_parallel<T: Scalar>(a: &Tensor<T>, p: &ParallelParams<T>) -> Result<Tensor<T>> {
    eval(|t| {
        let a = t.constant(a.clone());
        let vars = p.on_tape(t, false);
        Ok(fuse_parallel_on(t, a, &vars)?.output)
    })
}

pub fn fuse_sequential<T: Scalar>(a: &Tensor<T>, cam: &CamParams<T>, pam: &PamParams<T>) -> Result<Tensor<T>> {
    eval(|t| {
        let a = t.constant(a.clone());
        let c = cam.on_tape(t, false);
        let p = pam.on_tape(t, false);
        Ok(fuse_sequential_on(t, a, &c, &p)?.output)
    })
}

pub fn fuse_hierarchical<T: Scalar>(
    tap3: &Tensor<T>,
    tap4: &Tensor<T>,
    tap5: &Tensor<T>,
    p: &HierarchicalParams<T>,
) -> Result<Tensor<T>> {
    check_tap_ratio(tap3.shape(), tap4.shape(), tap5.shape())?;
    eval(|t| {
        let taps = [
            t.constant(tap3.clone()),
            t.constant(tap4.clone()),
            t.constant(tap5.clone()),
        ];
        let vars = p.on_tape(t, false);
        Ok(fuse_hierarchical_on(t, taps, &vars)?.output)
    })
}

/// Standard-normal test inputs; shared by unit tests and benches.
pub fn random_feature_map<T: Scalar>(shape: [usize; 3], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}
