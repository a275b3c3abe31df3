//! Frozen VGG-16-shaped feature extractor used by the content and style losses.
//!
//! Weights are either loaded from an ImageNet-pretrained safetensors file
//! (torchvision `features.{i}.weight` naming) or drawn once from a seeded
//! generator. They are plain tensors, never variables, so gradients reach the
//! inputs but not the extractor.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};

/// Channel widths of the five VGG-16 convolution blocks.
const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainedMode {
    /// Load pretrained weights when the file exists, else random.
    Auto,
    Required,
    Random,
}

impl std::str::FromStr for PretrainedMode {
    type Err = PenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "required" => Ok(Self::Required),
            "random" => Ok(Self::Random),
            other => Err(PenError::Config(format!(
                "features.pretrained: unknown mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub pretrained: PretrainedMode,
    /// 1-based pooling stages whose outputs are returned.
    pub layers: Vec<usize>,
    /// Divides every width; must be 1 with pretrained weights.
    pub width_div: usize,
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pretrained: PretrainedMode::Auto,
            layers: vec![1, 2, 3],
            width_div: 1,
            weights: None,
            seed: 0x5EED_F00D,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    blocks: Vec<Vec<(Tensor, Tensor)>>,
    layers: Vec<usize>,
    mean: Tensor,
    std: Tensor,
    pretrained: bool,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.layers.is_empty() || cfg.layers.iter().any(|&l| l == 0 || l > 5) {
            return Err(PenError::Config(
                "features.layers must be pooling stages in 1..=5".into(),
            ));
        }
        if cfg.width_div == 0 {
            return Err(PenError::Config(
                "features.width_div must be positive".into(),
            ));
        }
        let mut layers = cfg.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        let depth = *layers.last().expect("nonempty");
        let available = cfg.weights.as_deref().filter(|p| p.is_file());
        let pretrained_path = match (cfg.pretrained, available) {
            (PretrainedMode::Random, _) => None,
            (PretrainedMode::Auto, p) => p,
            (PretrainedMode::Required, Some(p)) => Some(p),
            (PretrainedMode::Required, None) => {
                return Err(PenError::Config(
                    "features.pretrained=required but features.weights is missing".into(),
                ))
            }
        };
        let blocks = match pretrained_path {
            Some(path) => {
                if cfg.width_div != 1 {
                    return Err(PenError::Config(
                        "pretrained features need features.width_div=1".into(),
                    ));
                }
                load_pretrained(path, depth, dtype, device)?
            }
            None => random_blocks(depth, cfg.width_div, cfg.seed, dtype, device)?,
        };
        let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            blocks,
            layers,
            mean,
            std,
            pretrained: pretrained_path.is_some(),
        })
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Pooling-stage outputs for the configured layers, in ascending order.
    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = img.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, block) in self.blocks.iter().enumerate() {
            for (w, b) in block {
                x = x
                    .conv2d(w, 1, 1, 1, 1)?
                    .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                    .relu()?;
            }
            x = max_pool2(&x)?;
            if self.layers.contains(&(i + 1)) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows and columns dropped),
/// written as a reshape and two max reductions. candle's `max_pool2d`
/// backward scales each gradient by the window's max-count fraction instead
/// of dividing by it, which is 4× too small for a unique maximum.
fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)?
    } else {
        x.clone()
    };
    Ok(x.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

fn random_blocks(
    depth: usize,
    width_div: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Vec<(Tensor, Tensor)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = 3;
    let mut blocks = Vec::new();
    for widths in VGG16_BLOCKS.iter().take(depth) {
        let mut block = Vec::new();
        for &w in widths.iter() {
            let w = (w / width_div).max(1);
            let fan_in = (prev * 9) as f64;
            let dist = Normal::new(0.0f32, (2.0 / fan_in).sqrt() as f32)
                .map_err(|e| PenError::Config(e.to_string()))?;
            let vals: Vec<f32> = (0..w * prev * 9).map(|_| dist.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(vals, (w, prev, 3, 3), device)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(w, dtype, device)?;
            block.push((weight, bias));
            prev = w;
        }
        blocks.push(block);
    }
    Ok(blocks)
}

fn load_pretrained(
    path: &Path,
    depth: usize,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Vec<(Tensor, Tensor)>>> {
    let tensors = candle_core::safetensors::load(path, device)
        .map_err(|e| PenError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut idx = 0;
    let mut blocks = Vec::new();
    for widths in VGG16_BLOCKS.iter().take(depth) {
        let mut block = Vec::new();
        for _ in widths.iter() {
            let get = |suffix: &str| {
                let key = format!("features.{idx}.{suffix}");
                tensors
                    .get(&key)
                    .ok_or_else(|| PenError::Config(format!("{}: missing `{key}`", path.display())))
                    .and_then(|t| Ok(t.to_dtype(dtype)?))
            };
            block.push((get("weight")?, get("bias")?));
            idx += 2;
        }
        idx += 1;
        blocks.push(block);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_matches_candle_forward_and_routes_full_gradient() {
        let x = candle_core::Var::from_tensor(
            &Tensor::arange(0f64, 2.0 * 3.0 * 6.0 * 6.0, &Device::Cpu)
                .unwrap()
                .reshape((2, 3, 6, 6))
                .unwrap()
                .sin()
                .unwrap(),
        )
        .unwrap();
        let ours = max_pool2(&x).unwrap();
        let theirs = x.max_pool2d(2).unwrap();
        assert_eq!(
            ours.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            theirs.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let grads = ours.sum_all().unwrap().backward().unwrap();
        let g = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        // One unit of gradient per window, on its maximum.
        assert_eq!(g.iter().sum::<f64>(), (2 * 3 * 3 * 3) as f64);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
        let odd = Tensor::zeros((1, 1, 5, 7), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(max_pool2(&odd).unwrap().dims(), &[1, 1, 2, 3]);
    }

    #[test]
    fn random_stack_shapes() {
        let cfg = FeatureConfig {
            width_div: 8,
            pretrained: PretrainedMode::Random,
            ..FeatureConfig::default()
        };
        let fx = FeatureExtractor::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::full(0.5f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let feats = fx.forward(&x).unwrap();
        let dims: Vec<_> = feats.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4]]
        );
        assert!(!fx.is_pretrained());
    }

    #[test]
    fn required_without_file_fails() {
        let cfg = FeatureConfig {
            pretrained: PretrainedMode::Required,
            ..FeatureConfig::default()
        };
        assert!(FeatureExtractor::new(&cfg, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn loads_torchvision_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let mut map = std::collections::HashMap::new();
        let mut prev = 3;
        let mut idx = 0;
        for widths in VGG16_BLOCKS.iter().take(2) {
            for &w in widths.iter() {
                map.insert(
                    format!("features.{idx}.weight"),
                    Tensor::full(0.01f32, (w, prev, 3, 3), &Device::Cpu).unwrap(),
                );
                map.insert(
                    format!("features.{idx}.bias"),
                    Tensor::zeros(w, DType::F32, &Device::Cpu).unwrap(),
                );
                prev = w;
                idx += 2;
            }
            idx += 1;
        }
        candle_core::safetensors::save(&map, &path).unwrap();
        let cfg = FeatureConfig {
            layers: vec![1, 2],
            weights: Some(path),
            ..FeatureConfig::default()
        };
        let fx = FeatureExtractor::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        assert!(fx.is_pretrained());
        let feats = fx
            .forward(&Tensor::full(0.5f32, (1, 3, 16, 16), &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(feats[1].dims(), &[1, 128, 4, 4]);
    }
}
