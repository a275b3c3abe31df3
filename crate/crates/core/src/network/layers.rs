//! Parameter storage and the small set of layers the generator is built from.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{PenError, Result};

/// Named trainable arrays, ordered by name so iteration (and therefore
/// serialization and optimizer updates) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(PenError::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| PenError::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let vals = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Copies values from `src[prefix + name]` into every parameter.
    pub fn load(&self, src: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = src
                .get(&key)
                .ok_or_else(|| PenError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(PenError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Snapshot of current values under `prefix + name`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((format!("{prefix}{n}"), v.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }
}

impl Conv {
    /// Kaiming-normal weights scaled by `gain`, zero bias, "same" padding.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            gain * (2.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.constant(&format!("{name}.bias"), &[spec.c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.dilation * (spec.kernel - 1) / 2,
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        let b = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions with a
/// learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let g = self.gamma.reshape((1, c, 1, 1))?;
        let bt = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&bt)?)
    }
}

/// Convolution → instance norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv,
    norm: InstanceNorm,
}

impl ConvNormAct {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), spec, 1.0, rng)?,
            norm: InstanceNorm::new(store, &format!("{name}.norm"), spec.c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// ResNet basic block with a projection shortcut when the shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv,
    norm1: InstanceNorm,
    conv2: Conv,
    norm2: InstanceNorm,
    shortcut: Option<(Conv, InstanceNorm)>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv::new(
            store,
            &format!("{name}.conv1"),
            ConvSpec::new(c_in, c_out, 3).stride(stride),
            1.0,
            rng,
        )?;
        let norm1 = InstanceNorm::new(store, &format!("{name}.norm1"), c_out)?;
        let conv2 = Conv::new(
            store,
            &format!("{name}.conv2"),
            ConvSpec::new(c_out, c_out, 3),
            1.0,
            rng,
        )?;
        let norm2 = InstanceNorm::new(store, &format!("{name}.norm2"), c_out)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv::new(
                    store,
                    &format!("{name}.down.conv"),
                    ConvSpec::new(c_in, c_out, 1).stride(stride),
                    1.0,
                    rng,
                )?,
                InstanceNorm::new(store, &format!("{name}.down.norm"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let identity = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// Skip transform of the erasing U-Net: 1×1 reduce, two 3×3 convolutions,
/// 1×1 restore, added back onto the encoder feature.
#[derive(Debug, Clone)]
pub struct ResidualSkip {
    reduce: Conv,
    mid1: Conv,
    mid2: Conv,
    restore: Conv,
}

impl ResidualSkip {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = (channels / 2).max(1);
        Ok(Self {
            reduce: Conv::new(
                store,
                &format!("{name}.reduce"),
                ConvSpec::new(channels, inner, 1),
                1.0,
                rng,
            )?,
            mid1: Conv::new(
                store,
                &format!("{name}.mid1"),
                ConvSpec::new(inner, inner, 3),
                1.0,
                rng,
            )?,
            mid2: Conv::new(
                store,
                &format!("{name}.mid2"),
                ConvSpec::new(inner, inner, 3),
                1.0,
                rng,
            )?,
            restore: Conv::new(
                store,
                &format!("{name}.restore"),
                ConvSpec::new(inner, channels, 1),
                0.5,
                rng,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.reduce.forward(x)?.relu()?;
        let y = self.mid1.forward(&y)?.relu()?;
        let y = self.mid2.forward(&y)?.relu()?;
        Ok((x + self.restore.forward(&y)?)?)
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}
