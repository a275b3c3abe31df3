//! Two-stream discriminator with spectrally normalized convolutions and the
//! hinge objective.
//!
//! The global stream sees the whole image. The local stream sees the text
//! regions of the candidate image embedded in the true background,
//! `S ⊙ img + (1 − S) ⊙ gt`. Each stream is a stack of 4×4 stride-2
//! convolutions with leaky ReLU (slope 0.2), globally averaged; the two
//! feature vectors are concatenated and mapped to one unbounded score.
//!
//! Training-mode forwards advance the power-iteration state of every
//! convolution and must not run concurrently with each other.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};
use crate::network::layers::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Width of the first layer; later layers double up to 8× this.
    pub base_channels: usize,
    pub layers: usize,
    /// Power iterations per training-mode forward.
    pub power_iterations: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            layers: 6,
            power_iterations: 1,
        }
    }
}

impl DiscConfig {
    fn widths(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|i| self.base_channels << i.min(3))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscMode {
    /// Advance the spectral-norm power iteration.
    Train,
    /// Use the stored singular-vector estimate as is.
    Eval,
}

const SLOPE: f64 = 0.2;
const SN_EPS: f64 = 1e-12;

fn normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_all()?.sqrt()?;
    Ok(v.broadcast_div(&(norm + SN_EPS)?)?)
}

#[derive(Debug)]
struct SnConv {
    name: String,
    weight: Tensor,
    bias: Tensor,
    u: Mutex<Tensor>,
}

impl SnConv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (c_in * 16) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, 4, 4],
            (2.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        let dist = Normal::new(0.0f32, 1.0).map_err(|e| PenError::Config(e.to_string()))?;
        let u0: Vec<f32> = (0..c_out).map(|_| dist.sample(rng)).collect();
        let u = normalize(&Tensor::from_vec(u0, c_out, store.device())?.to_dtype(store.dtype())?)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            u: Mutex::new(u),
        })
    }

    fn matrix(&self) -> Result<Tensor> {
        let c_out = self.weight.dim(0)?;
        Ok(self.weight.reshape((c_out, ()))?)
    }

    /// Runs `n` power iterations on the detached weight, updating `u`.
    fn power_iterate(&self, n: usize) -> Result<()> {
        let w = self.matrix()?.detach();
        let mut u = self.u.lock().expect("spectral state poisoned");
        for _ in 0..n {
            let v = normalize(&w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
            *u = normalize(&w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        }
        Ok(())
    }

    /// `uᵀ W v` with `u`, `v` held constant; gradients reach `W`.
    fn sigma(&self) -> Result<Tensor> {
        let w = self.matrix()?;
        let u = self.u.lock().expect("spectral state poisoned").clone();
        let v = normalize(&w.detach().t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
        Ok(u.unsqueeze(0)?
            .matmul(&w)?
            .matmul(&v.unsqueeze(1)?)?
            .reshape(())?)
    }

    fn normalized_weight(&self) -> Result<Tensor> {
        Ok(self.weight.broadcast_div(&self.sigma()?)?)
    }

    fn forward(&self, x: &Tensor, mode: DiscMode, power_iterations: usize) -> Result<Tensor> {
        if mode == DiscMode::Train {
            self.power_iterate(power_iterations)?;
        }
        let y = x.conv2d(&self.normalized_weight()?, 1, 2, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug)]
struct Stream {
    convs: Vec<SnConv>,
}

impl Stream {
    fn forward(&self, x: &Tensor, mode: DiscMode, power_iterations: usize) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            x = candle_nn::ops::leaky_relu(&conv.forward(&x, mode, power_iterations)?, SLOPE)?;
        }
        let (b, c, _, _) = x.dims4()?;
        Ok(x.reshape((b, c, ()))?.mean(D::Minus1)?)
    }
}

#[derive(Debug)]
pub struct DiscParams {
    pub store: ParamStore,
    config: DiscConfig,
    global: Stream,
    local: Stream,
    fusion_weight: Tensor,
    fusion_bias: Tensor,
}

impl DiscParams {
    pub fn init(cfg: &DiscConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.layers == 0 || cfg.base_channels == 0 {
            return Err(PenError::Config(
                "disc.layers and disc.base_channels must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let widths = cfg.widths();
        let mut make_stream = |store: &mut ParamStore, prefix: &str| -> Result<Stream> {
            let mut prev = 3;
            let mut convs = Vec::new();
            for (i, &w) in widths.iter().enumerate() {
                convs.push(SnConv::new(
                    store,
                    &format!("{prefix}.conv{i}"),
                    prev,
                    w,
                    &mut rng,
                )?);
                prev = w;
            }
            Ok(Stream { convs })
        };
        let global = make_stream(&mut store, "global")?;
        let local = make_stream(&mut store, "local")?;
        let feat = 2 * widths.last().copied().unwrap_or(1);
        let fusion_weight = store.normal(
            "fusion.weight",
            &[1, feat],
            (1.0 / feat as f64).sqrt(),
            &mut ChaCha8Rng::seed_from_u64(seed ^ 0xF05E),
        )?;
        let fusion_bias = store.constant("fusion.bias", &[1], 0.0)?;
        Ok(Self {
            store,
            config: cfg.clone(),
            global,
            local,
            fusion_weight,
            fusion_bias,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    fn convs(&self) -> impl Iterator<Item = &SnConv> {
        self.global.convs.iter().chain(self.local.convs.iter())
    }

    /// Input side length must be a multiple of this; smaller inputs are zero-padded.
    pub fn size_multiple(&self) -> usize {
        1 << self.config.layers
    }

    fn pad(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.size_multiple();
        let (_, _, h, w) = x.dims4()?;
        let ph = (m - h % m) % m;
        let pw = (m - w % m) % m;
        let mut x = x.clone();
        if ph > 0 {
            x = x.pad_with_zeros(2, ph / 2, ph - ph / 2)?;
        }
        if pw > 0 {
            x = x.pad_with_zeros(3, pw / 2, pw - pw / 2)?;
        }
        Ok(x)
    }

    /// One score per batch element, shape `(B,)`. `gt` supplies the true
    /// background for the local stream and never receives gradient.
    pub fn forward(
        &self,
        img: &Tensor,
        stroke_gt: &Tensor,
        gt: &Tensor,
        mode: DiscMode,
    ) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != 3 || gt.dims() != img.dims() || stroke_gt.dims() != [b, 1, h, w] {
            return Err(PenError::BadShape(format!(
                "discriminator inputs {:?} / {:?} / {:?}",
                img.dims(),
                gt.dims(),
                stroke_gt.dims()
            )));
        }
        let gt = gt.detach();
        let local_in =
            (img.broadcast_mul(stroke_gt)? + gt.broadcast_mul(&stroke_gt.affine(-1.0, 1.0)?)?)?;
        let n = self.config.power_iterations;
        let g = self.global.forward(&self.pad(img)?, mode, n)?;
        let l = self.local.forward(&self.pad(&local_in)?, mode, n)?;
        let feats = Tensor::cat(&[g, l], 1)?;
        let score = feats
            .matmul(&self.fusion_weight.t()?)?
            .broadcast_add(&self.fusion_bias)?;
        Ok(score.squeeze(1)?)
    }

    /// Runs `n` power iterations on every convolution.
    pub fn refresh_spectral(&self, n: usize) -> Result<()> {
        for conv in self.convs() {
            conv.power_iterate(n)?;
        }
        Ok(())
    }

    /// Top singular value of each normalized weight, estimated by an
    /// independent `iters`-step power method from a fixed start vector.
    pub fn spectral_estimates(&self, iters: usize) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for conv in self.convs() {
            let w = conv.normalized_weight()?.detach().to_dtype(DType::F64)?;
            let c_out = w.dim(0)?;
            let w = w.reshape((c_out, ()))?;
            let mut v = normalize(&Tensor::ones(w.dim(1)?, DType::F64, w.device())?)?;
            let mut sigma = 0.0;
            for _ in 0..iters {
                let u = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
                sigma = u.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
                v = normalize(&w.t()?.matmul(&normalize(&u)?.unsqueeze(1)?)?.squeeze(1)?)?;
            }
            out.push((conv.name.clone(), sigma));
        }
        Ok(out)
    }

    /// Multiplies the fusion head by `alpha`, scaling every score by `alpha`.
    pub fn scale_head(&self, alpha: f64) -> Result<()> {
        for name in ["fusion.weight", "fusion.bias"] {
            let var = self.store.get(name).expect("fusion parameters exist");
            var.set(&var.as_tensor().affine(alpha, 0.0)?)?;
        }
        Ok(())
    }

    /// Parameters plus power-iteration vectors under `prefix`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.store.export(prefix)?;
        for conv in self.convs() {
            let u = conv.u.lock().expect("spectral state poisoned").copy()?;
            out.push((format!("{prefix}sn.{}.u", conv.name), u));
        }
        Ok(out)
    }

    pub fn load(&self, src: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.store.load(src, prefix)?;
        for conv in self.convs() {
            let key = format!("{prefix}sn.{}.u", conv.name);
            let t = src
                .get(&key)
                .ok_or_else(|| PenError::Checkpoint(format!("missing tensor `{key}`")))?;
            *conv.u.lock().expect("spectral state poisoned") = t.to_dtype(self.store.dtype())?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }
}

/// Hinge critic loss: `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_from_scores(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = real_scores.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// Critic loss on a real/fake pair sharing the same stroke target. The real
/// image doubles as the background of the local stream.
pub fn disc_loss(
    params: &DiscParams,
    real: &Tensor,
    fake: &Tensor,
    stroke_gt: &Tensor,
    mode: DiscMode,
) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(PenError::BadShape(format!(
            "real {:?} vs fake {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    let real_scores = params.forward(real, stroke_gt, real, mode)?;
    let fake_scores = params.forward(fake, stroke_gt, real, mode)?;
    hinge_from_scores(&real_scores, &fake_scores)
}

/// Generator-side adversarial term `−mean(D(fake))`. The critic runs in eval
/// mode; only the generator's parameters should be stepped with the result.
pub fn adversarial_loss(
    params: &DiscParams,
    fake: &Tensor,
    gt: &Tensor,
    stroke_gt: &Tensor,
) -> Result<Tensor> {
    let scores = params.forward(fake, stroke_gt, gt, DiscMode::Eval)?;
    Ok(scores.mean_all()?.neg()?)
}
