//! `AGPD` checkpoints: magic, `u32` version, `u32` parameter count, then per
//! parameter a `u16` name length, the UTF-8 name and an `AGTD` tensor block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BackboneConfig, FusionMode, ModelConfig, ModelGraph, ParamStore, STAGES};
use crate::attention::SoftmaxAxis;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGPD";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

pub fn write_params<W: Write>(mut w: W, params: &ParamStore<f32>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad magic {word:?}")));
    }
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("parameter name is not UTF-8"))?;
        if store.contains(&name) {
            return Err(format_err(format!("duplicate parameter {name}")));
        }
        let t = read_tensor(&mut r)?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamStore<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    read_params(BufReader::new(file))
}

/// Recovers the model layout from parameter names and shapes. The input
/// size is not recorded in a checkpoint and must be supplied.
pub fn infer_config(params: &ParamStore<f32>, input_size: usize, axis: SoftmaxAxis) -> Result<ModelConfig> {
    let shape = |name: &str| {
        params
            .get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| format_err(format!("missing parameter {name}")))
    };
    let mut channels = [0; STAGES];
    for (s, c) in channels.iter_mut().enumerate() {
        *c = shape(&format!("backbone.stage{}.conv2.weight", s + 1))?[0];
    }
    let in_channels = shape("backbone.stage1.conv1.weight")?[1];
    let fusion = if params.contains("attn.tap3.pam.alpha") {
        FusionMode::Hierarchical
    } else if params.contains("attn.post_pam.conv1.weight") {
        FusionMode::Parallel
    } else {
        match (params.contains("attn.pam.alpha"), params.contains("attn.cam.beta")) {
            (true, true) => FusionMode::Sequential,
            (true, false) => FusionMode::PamOnly,
            (false, true) => FusionMode::CamOnly,
            (false, false) => FusionMode::None,
        }
    };
    let reduction = match fusion {
        FusionMode::Hierarchical => {
            let b = shape("attn.tap3.pam.conv_b.weight")?;
            b[1] / b[0].max(1)
        }
        FusionMode::PamOnly | FusionMode::Parallel | FusionMode::Sequential => {
            let b = shape("attn.pam.conv_b.weight")?;
            b[1] / b[0].max(1)
        }
        _ => ModelConfig::default().reduction,
    };
    Ok(ModelConfig {
        backbone: BackboneConfig {
            channels,
            in_channels,
            input_size,
        },
        fusion,
        reduction,
        axis,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelGraph<f32>) -> Result<()> {
    save_params(path, model.params())
}

pub fn load_model(path: impl AsRef<Path>, input_size: usize, axis: SoftmaxAxis) -> Result<ModelGraph<f32>> {
    let path = path.as_ref();
    let params = load_params(path)?;
    let config = infer_config(&params, input_size, axis).map_err(|e| Error::data(path, e.to_string()))?;
    ModelGraph::from_params(config, params).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_and_config_is_recovered() {
        for fusion in FusionMode::ALL {
            let cfg = ModelConfig {
                backbone: BackboneConfig {
                    channels: [2, 3, 4, 8, 8],
                    in_channels: 1,
                    input_size: 32,
                },
                fusion,
                reduction: 4,
                axis: SoftmaxAxis::Columns,
            };
            let mut model = ModelGraph::<f32>::new(cfg.clone(), 17).unwrap();
            if let Some(b) = model.params_mut().get_mut("head.fc.bias") {
                b.data_mut()[1] = -0.0;
            }
            let mut buf = Vec::new();
            write_params(&mut buf, model.params()).unwrap();
            let back = read_params(&buf[..]).unwrap();
            let bits = |s: &ParamStore<f32>| {
                s.iter()
                    .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(&back), bits(model.params()));
            let inferred = infer_config(&back, 32, SoftmaxAxis::Columns).unwrap();
            assert_eq!(inferred.backbone, cfg.backbone);
            assert_eq!(inferred.fusion, cfg.fusion);
            if fusion.uses_pam() {
                assert_eq!(inferred.reduction, cfg.reduction);
            }
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(read_params(&b"AGTD\x01\0\0\0\0\0\0\0"[..]).is_err());
        let model = ModelGraph::<f32>::new(ModelConfig::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, model.params()).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(read_params(&buf[..]).is_err());
    }
}
