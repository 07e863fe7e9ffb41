//! Grad-CAM heatmaps over backbone taps and the attention-refined map.

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::model::{ModelGraph, LAYER_NAMES, PA};
use crate::tensor::{Scalar, Tape, Tensor};

/// Score whose gradient drives the heatmap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamTarget {
    /// Softmax probability of the PA class.
    #[default]
    PaProbability,
    /// Raw PA logit.
    PaLogit,
}

impl CamTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "probability" | "prob" => Some(CamTarget::PaProbability),
            "logit" => Some(CamTarget::PaLogit),
            _ => None,
        }
    }
}

/// `H×W` map with values in `[0, 1]`: max-normalised, or all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor<f64>,
    pub layer: String,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Heatmap from a `C×H×W` feature map and the gradient of the score with
/// respect to it: channel weights are the spatial means of the gradient,
/// the map is `ReLU(Σ_c w_c · A_c)` divided by its maximum when positive.
pub fn grad_cam_from(feature: &Tensor<f64>, grad: &Tensor<f64>, layer: &str) -> Result<Heatmap> {
    let (c, h, w) = feature.dims3("grad_cam")?;
    if grad.shape() != feature.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            lhs: feature.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grad.data()[ch * hw..(ch + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        let a = &feature.data()[ch * hw..(ch + 1) * hw];
        for (acc, &v) in cam.iter_mut().zip(a) {
            *acc += weight * v;
        }
    }
    let mut max = 0.0f64;
    for v in &mut cam {
        *v = v.max(0.0);
        max = max.max(*v);
    }
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        values: Tensor::new([h, w], cam)?,
        layer: layer.to_string(),
    })
}

/// Feature map named `layer` and the gradient of `scale · target` with
/// respect to it, for one image.
pub fn feature_and_gradient<T: Scalar>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    layer: &str,
    target: CamTarget,
    scale: T,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    model.check_image(image)?;
    let mut tape = Tape::new();
    // A differentiable input makes every downstream map require a gradient
    // while the weights stay frozen.
    let x = tape.param(image.clone());
    let trace = model.forward_on(&mut tape, x, false)?;
    let feature = trace.layer(layer).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown layer {layer:?}; expected one of {}",
            LAYER_NAMES.join(", ")
        ))
    })?;
    let score = match target {
        CamTarget::PaProbability => tape.class_probability(trace.logits, PA)?,
        CamTarget::PaLogit => tape.select(trace.logits, PA)?,
    };
    let score = tape.scale(score, scale)?;
    let grads = tape.backward(score)?;
    let grad = match grads.get(feature) {
        Some(g) => g.cast(),
        None => Tensor::zeros(tape.shape(feature).to_vec()),
    };
    Ok((tape.value(feature).cast(), grad))
}

pub fn grad_cam<T: Scalar>(model: &ModelGraph<T>, image: &Tensor<T>, layer: &str, target: CamTarget) -> Result<Heatmap> {
    let (feature, grad) = feature_and_gradient(model, image, layer, target, T::one())?;
    grad_cam_from(&feature, &grad, layer)
}

/// Blue → cyan → yellow → red ramp.
pub fn colormap(h: f64) -> [f64; 3] {
    let ramp = |centre: f64| (1.5 - (4.0 * h - centre).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Upsamples the heatmap to the image size and blends the colormap over
/// the image with per-pixel weight `opacity · heat`. Returns `3×H×W`; a
/// grayscale image is replicated across channels first.
pub fn upsample_overlay(heatmap: &Heatmap, image: &Tensor<f32>, opacity: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3("overlay")?;
    if c != 1 && c != 3 {
        return Err(Error::dim("overlay", format!("expected 1 or 3 channels, got {c}")));
    }
    let heat = resize_bilinear(&heatmap.values.cast::<f32>().reshape([1, heatmap.height(), heatmap.width()])?, h, w)?;
    let hw = h * w;
    let mut out = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let v = heat.data()[i] as f64;
        let alpha = (opacity * v).clamp(0.0, 1.0);
        let tint = colormap(v);
        for ch in 0..3 {
            let base = image.data()[if c == 1 { i } else { ch * hw + i }];
            out[ch * hw + i] = if alpha == 0.0 {
                base
            } else {
                ((1.0 - alpha) * base as f64 + alpha * tint[ch]) as f32
            };
        }
    }
    Tensor::new([3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::SoftmaxAxis;
    use crate::model::{BackboneConfig, FusionMode, ModelConfig};

    #[test]
    fn single_channel_unit_weight_is_normalised_relu() {
        let a = Tensor::new([1, 2, 2], vec![-1.0, 2.0, 4.0, 0.0]).unwrap();
        let g = Tensor::full([1, 2, 2], 1.0);
        let hm = grad_cam_from(&a, &g, "x").unwrap();
        assert_eq!(hm.values.data(), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let a = Tensor::full([3, 2, 2], 1.0);
        let hm = grad_cam_from(&a, &Tensor::zeros([3, 2, 2]), "x").unwrap();
        assert!(hm.values.data().iter().all(|&v| v == 0.0));
        assert!(grad_cam_from(&a, &Tensor::zeros([3, 2, 1]), "x").is_err());
    }

    #[test]
    fn every_layer_maps_back_to_the_image() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                channels: [2, 4, 4, 8, 8],
                in_channels: 1,
                input_size: 32,
            },
            fusion: FusionMode::Parallel,
            reduction: 2,
            axis: SoftmaxAxis::Columns,
        };
        let model = ModelGraph::<f32>::new(cfg, 5).unwrap();
        let img = Tensor::from_fn([1, 32, 32], |i| ((i * 7) % 13) as f32 / 13.0);
        for layer in LAYER_NAMES {
            for target in [CamTarget::PaProbability, CamTarget::PaLogit] {
                let hm = grad_cam(&model, &img, layer, target).unwrap();
                let max = hm.values.data().iter().cloned().fold(0.0, f64::max);
                assert!(hm.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(max == 0.0 || max == 1.0);
                assert_eq!(upsample_overlay(&hm, &img, 0.5).unwrap().shape(), &[3, 32, 32]);
            }
        }
        assert!(grad_cam(&model, &img, "conv9", CamTarget::PaProbability).is_err());
    }

    #[test]
    fn overlay_limits() {
        let img = Tensor::from_fn([1, 4, 4], |i| i as f32 / 16.0);
        let zero = Heatmap {
            values: Tensor::zeros([2, 2]),
            layer: "x".into(),
        };
        let out = upsample_overlay(&zero, &img, 0.6).unwrap();
        for ch in 0..3 {
            assert_eq!(&out.data()[ch * 16..(ch + 1) * 16], img.data());
        }
        let flat = Tensor::full([1, 4, 4], 0.3);
        let full = Heatmap {
            values: Tensor::full([2, 2], 1.0),
            layer: "x".into(),
        };
        let out = upsample_overlay(&full, &flat, 1.0).unwrap();
        let red = colormap(1.0);
        for ch in 0..3 {
            assert!(out.data()[ch * 16..(ch + 1) * 16].iter().all(|&v| (v as f64 - red[ch]).abs() < 1e-6));
        }
    }
}
