//! Two-class PAD network: a five-stage convolutional backbone, an attention
//! block selected by [`FusionMode`], global average pooling and one fully
//! connected layer producing `[live, pa]` logits.

pub mod checkpoint;
mod params;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::attention::{
    self, check_reduction, ConvParams, ConvVars, PamVars, ParallelVars, PostConv, PostConvVars,
    SoftmaxAxis,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

pub use params::ParamStore;

pub const LIVE: usize = 0;
pub const PA: usize = 1;
pub const STAGES: usize = 5;

/// How the attention modules are assembled on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// No attention: the last backbone map goes straight to pooling.
    None,
    PamOnly,
    CamOnly,
    /// PAM and CAM side by side, each with a post-conv stack, summed.
    Parallel,
    /// CAM followed by PAM.
    Sequential,
    /// Parallel fusion on taps 3 and 4, CAM on tap 5, pooled and concatenated.
    Hierarchical,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::None,
        FusionMode::PamOnly,
        FusionMode::CamOnly,
        FusionMode::Parallel,
        FusionMode::Sequential,
        FusionMode::Hierarchical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::PamOnly => "pam",
            FusionMode::CamOnly => "cam",
            FusionMode::Parallel => "parallel",
            FusionMode::Sequential => "sequential",
            FusionMode::Hierarchical => "hierarchical",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::None => "w/o Attention",
            FusionMode::PamOnly => "w/ PAM",
            FusionMode::CamOnly => "w/ CAM",
            FusionMode::Parallel => "w/ PAM-CAM (parallel)",
            FusionMode::Sequential => "w/ CAM->PAM (sequential)",
            FusionMode::Hierarchical => "hierarchical",
        }
    }

    pub fn uses_pam(self) -> bool {
        matches!(
            self,
            FusionMode::PamOnly | FusionMode::Parallel | FusionMode::Sequential | FusionMode::Hierarchical
        )
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => FusionMode::None,
            "pam" | "pam_only" => FusionMode::PamOnly,
            "cam" | "cam_only" => FusionMode::CamOnly,
            "parallel" => FusionMode::Parallel,
            "sequential" => FusionMode::Sequential,
            "hierarchical" => FusionMode::Hierarchical,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown fusion mode {other:?} (expected none, pam, cam, parallel, sequential, hierarchical)"
                )))
            }
        })
    }
}

/// Each stage is conv3×3 → ReLU → conv3×3 → ReLU → maxpool 2×2, so the
/// taps after stages 3, 4 and 5 sit at 1/8, 1/16 and 1/32 of the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: [usize; STAGES],
    pub in_channels: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [4, 8, 16, 32, 32],
            in_channels: 1,
            input_size: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::InvalidArgument(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        [self.channels[2], self.channels[3], self.channels[4]]
    }

    pub fn tap_sizes(&self) -> [usize; 3] {
        [self.input_size / 8, self.input_size / 16, self.input_size / 32]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionMode,
    pub reduction: usize,
    pub axis: SoftmaxAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionMode::Parallel,
            reduction: 8,
            axis: SoftmaxAxis::Columns,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.fusion.uses_pam() {
            let [c3, c4, c5] = self.backbone.tap_channels();
            if self.fusion == FusionMode::Hierarchical {
                check_reduction(c3, self.reduction)?;
                check_reduction(c4, self.reduction)?;
            } else {
                check_reduction(c5, self.reduction)?;
            }
        }
        Ok(())
    }

    /// Channels of the map fed to global average pooling.
    pub fn head_features(&self) -> usize {
        match self.fusion {
            FusionMode::Hierarchical => self.backbone.tap_channels().iter().sum(),
            _ => self.backbone.channels[STAGES - 1],
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

fn insert_conv<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, conv: ConvParams<T>) {
    store.insert(format!("{prefix}.weight"), conv.weight);
    store.insert(format!("{prefix}.bias"), conv.bias);
}

fn insert_pam<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, reduction: usize, rng: &mut Rng) {
    let reduced = channels / reduction;
    insert_conv(store, &format!("{prefix}.conv_b"), ConvParams::he(reduced, channels, 1, rng));
    insert_conv(store, &format!("{prefix}.conv_c"), ConvParams::he(reduced, channels, 1, rng));
    insert_conv(store, &format!("{prefix}.conv_d"), ConvParams::he(channels, channels, 1, rng));
    store.insert(format!("{prefix}.alpha"), Tensor::scalar(T::zero()));
}

fn insert_post<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut Rng) {
    let post = PostConv::new(channels, rng);
    insert_conv(store, &format!("{prefix}.conv1"), post.conv1);
    insert_conv(store, &format!("{prefix}.conv2"), post.conv2);
}

fn insert_parallel<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, reduction: usize, rng: &mut Rng) {
    insert_pam(store, &format!("{prefix}.pam"), channels, reduction, rng);
    store.insert(format!("{prefix}.cam.beta"), Tensor::scalar(T::zero()));
    insert_post(store, &format!("{prefix}.post_pam"), channels, rng);
    insert_post(store, &format!("{prefix}.post_cam"), channels, rng);
}

fn backbone_params<T: Scalar>(cfg: &BackboneConfig, rng: &mut Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut c_in = cfg.in_channels;
    for (s, &c) in cfg.channels.iter().enumerate() {
        insert_conv(&mut store, &format!("backbone.stage{}.conv1", s + 1), ConvParams::he(c, c_in, 3, rng));
        insert_conv(&mut store, &format!("backbone.stage{}.conv2", s + 1), ConvParams::he(c, c, 3, rng));
        c_in = c;
    }
    store
}

fn attention_and_head_params<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) {
    let [c3, c4, c5] = cfg.backbone.tap_channels();
    let r = cfg.reduction;
    match cfg.fusion {
        FusionMode::None => {}
        FusionMode::PamOnly => insert_pam(store, "attn.pam", c5, r, rng),
        FusionMode::CamOnly => store.insert("attn.cam.beta".into(), Tensor::scalar(T::zero())),
        FusionMode::Parallel => insert_parallel(store, "attn", c5, r, rng),
        FusionMode::Sequential => {
            store.insert("attn.cam.beta".into(), Tensor::scalar(T::zero()));
            insert_pam(store, "attn.pam", c5, r, rng);
        }
        FusionMode::Hierarchical => {
            insert_parallel(store, "attn.tap3", c3, r, rng);
            insert_parallel(store, "attn.tap4", c4, r, rng);
            store.insert("attn.tap5.cam.beta".into(), Tensor::scalar(T::zero()));
        }
    }
    let features = cfg.head_features();
    let normal = Normal::new(0.0, (1.0 / features as f64).sqrt()).expect("positive std");
    store.insert(
        "head.fc.weight".into(),
        Tensor::from_fn([2, features], |_| T::of(normal.sample(rng))),
    );
    store.insert("head.fc.bias".into(), Tensor::zeros([2]));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Values recorded by one forward pass.
pub struct ForwardTrace {
    pub logits: Var,
    /// Backbone outputs after stages 3, 4 and 5 (pre-attention).
    pub taps: [Var; 3],
    /// Map fed to global average pooling (post-attention).
    pub attended: Var,
    /// Attention maps by site name, e.g. `pam` or `tap3.cam`.
    pub attention_maps: Vec<(String, Var)>,
    /// Tape handles of every parameter, in registry order.
    pub params: Vec<Var>,
}

/// Names accepted wherever a feature map is chosen by name.
pub const LAYER_NAMES: [&str; 4] = ["tap3", "tap4", "tap5", "attention"];

impl ForwardTrace {
    pub fn layer(&self, name: &str) -> Option<Var> {
        match name {
            "tap3" => Some(self.taps[0]),
            "tap4" => Some(self.taps[1]),
            "tap5" | "pre_attention" => Some(self.taps[2]),
            "attention" | "post_attention" => Some(self.attended),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Fresh model with He-initialised convolutions and zero attention scalars.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive_seed(seed, "init.backbone"));
        let mut params = backbone_params(&config.backbone, &mut rng);
        let mut rng = rng_from(derive_seed(seed, "init.attention"));
        attention_and_head_params(&config, &mut params, &mut rng);
        Ok(ModelGraph { config, params })
    }

    /// Rebuilds a model around an existing registry, checking that every
    /// name and shape matches the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = ModelGraph::<T>::new(config.clone(), 0)?;
        let same_layout = expected.params.len() == params.len()
            && expected
                .params
                .iter()
                .zip(params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same_layout {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("parameters do not match a {} model layout", config.fusion),
            });
        }
        Ok(ModelGraph { config, params })
    }

    /// Same backbone weights, fresh attention and head for another fusion mode.
    pub fn ablation_variant(&self, fusion: FusionMode, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            fusion,
            ..self.config.clone()
        };
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("backbone.") {
                params.insert(name.clone(), t.clone());
            }
        }
        let mut rng = rng_from(derive_seed(seed, "init.attention"));
        attention_and_head_params(&config, &mut params, &mut rng);
        Ok(ModelGraph { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let b = &self.config.backbone;
        let want = [b.in_channels, b.input_size, b.input_size];
        if image.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: want.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the full network on `tape`. Parameters become trainable
    /// leaves when `trainable` is set.
    pub fn forward_on(&self, tape: &mut Tape<T>, image: Var, trainable: bool) -> Result<ForwardTrace> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let get = |name: &str| -> Var {
            params[self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("parameter {name} missing from registry"))]
        };
        let conv = |prefix: &str| ConvVars {
            weight: get(&format!("{prefix}.weight")),
            bias: get(&format!("{prefix}.bias")),
        };
        let axis = self.config.axis;
        let pam = |prefix: &str| PamVars {
            conv_b: conv(&format!("{prefix}.conv_b")),
            conv_c: conv(&format!("{prefix}.conv_c")),
            conv_d: conv(&format!("{prefix}.conv_d")),
            alpha: get(&format!("{prefix}.alpha")),
            axis,
        };
        let cam = |prefix: &str| attention::CamVars {
            beta: get(&format!("{prefix}.beta")),
            axis,
        };
        let post = |prefix: &str| PostConvVars {
            conv1: conv(&format!("{prefix}.conv1")),
            conv2: conv(&format!("{prefix}.conv2")),
        };
        let parallel = |prefix: &str| ParallelVars {
            pam: pam(&format!("{prefix}.pam")),
            cam: cam(&format!("{prefix}.cam")),
            post_pam: post(&format!("{prefix}.post_pam")),
            post_cam: post(&format!("{prefix}.post_cam")),
        };

        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for s in 1..=STAGES {
            for layer in ["conv1", "conv2"] {
                let c = conv(&format!("backbone.stage{s}.{layer}"));
                x = c.apply(tape, x, 1)?;
                x = tape.relu(x)?;
            }
            x = tape.maxpool2d(x, 2, 2)?;
            if s >= 3 {
                taps.push(x);
            }
        }
        let taps = [taps[0], taps[1], taps[2]];
        let last = taps[2];

        let mut maps = Vec::new();
        let attended = match self.config.fusion {
            FusionMode::None => last,
            FusionMode::PamOnly => {
                let out = attention::pam_on(tape, last, &pam("attn.pam"))?;
                maps.push(("pam".to_string(), out.map));
                out.output
            }
            FusionMode::CamOnly => {
                let out = attention::cam_on(tape, last, &cam("attn.cam"))?;
                maps.push(("cam".to_string(), out.map));
                out.output
            }
            FusionMode::Parallel => {
                let out = attention::fuse_parallel_on(tape, last, &parallel("attn"))?;
                maps.push(("pam".to_string(), out.pam_map));
                maps.push(("cam".to_string(), out.cam_map));
                out.output
            }
            FusionMode::Sequential => {
                let out = attention::fuse_sequential_on(tape, last, &cam("attn.cam"), &pam("attn.pam"))?;
                maps.push(("cam".to_string(), out.cam_map));
                maps.push(("pam".to_string(), out.pam_map));
                out.output
            }
            FusionMode::Hierarchical => {
                let vars = attention::HierarchicalVars {
                    tap3: parallel("attn.tap3"),
                    tap4: parallel("attn.tap4"),
                    tap5: cam("attn.tap5.cam"),
                };
                let out = attention::fuse_hierarchical_on(tape, taps, &vars)?;
                maps.push(("tap3.pam".to_string(), out.tap3.pam_map));
                maps.push(("tap3.cam".to_string(), out.tap3.cam_map));
                maps.push(("tap4.pam".to_string(), out.tap4.pam_map));
                maps.push(("tap4.cam".to_string(), out.tap4.cam_map));
                maps.push(("tap5.cam".to_string(), out.tap5_cam_map));
                out.output
            }
        };
        let pooled = tape.global_avg_pool(attended)?;
        let logits = tape.dense(pooled, get("head.fc.weight"), get("head.fc.bias"))?;
        Ok(ForwardTrace {
            logits,
            taps,
            attended,
            attention_maps: maps,
            params,
        })
    }

    /// Two logits `[live, pa]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let trace = self.forward_on(&mut tape, x, false)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Probability of the PA class.
    pub fn pa_score(&self, image: &Tensor<T>) -> Result<T> {
        let logits = self.forward(image)?;
        Ok(pa_probability(logits.data()))
    }

    /// Cross-entropy loss, logits and parameter gradients (registry order)
    /// for one labelled image.
    pub fn loss_and_grads(&self, image: &Tensor<T>, label: usize) -> Result<SampleGrad<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let trace = self.forward_on(&mut tape, x, true)?;
        let loss = tape.softmax_cross_entropy(trace.logits, label)?;
        let mut grads = tape.backward(loss)?;
        let logits = tape.value(trace.logits).clone();
        let param_grads = trace
            .params
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok(SampleGrad {
            loss: tape.value(loss).item(),
            logits,
            grads: param_grads,
        })
    }
}

pub struct SampleGrad<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<Tensor<T>>,
}

/// `softmax(logits)[PA]`.
pub fn pa_probability<T: Scalar>(logits: &[T]) -> T {
    kernels::softmax(logits)[PA]
}
