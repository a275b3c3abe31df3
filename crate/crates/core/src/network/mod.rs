//! The erasing generator: a stroke module predicting a soft text mask and a
//! U-Net erasing module that is applied repeatedly with one set of weights.

pub mod layers;

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PenError, Result};
use crate::imagecore::{ImageTensor, StrokeMask};
use layers::{upsample2, Conv, ConvNormAct, ConvSpec, ParamStore, ResBlock, ResidualSkip};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Global deterministic-mode switch. When set, data loading runs serially and
/// every stage is reproducible bit-for-bit from its seed.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of erasing passes; does not change the parameter set.
    pub iterations: usize,
    pub dilation_rates: Vec<usize>,
    /// Residual blocks per stroke-encoder stage.
    pub stroke_blocks: usize,
    /// Predict a fresh stroke mask from each intermediate result instead of once.
    pub repredict_stroke: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            iterations: 3,
            dilation_rates: vec![2, 4, 8, 16],
            stroke_blocks: 2,
            repredict_stroke: false,
        }
    }
}

/// Spatial dimensions must be multiples of this.
pub const SIZE_DIVISOR: usize = 16;

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(PenError::Config("net.iterations must be at least 1".into()));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(PenError::Config(
                "net.dilation_rates must be nonempty and positive".into(),
            ));
        }
        if self.base_channels == 0 || self.stroke_blocks == 0 {
            return Err(PenError::Config(
                "net.base_channels and net.stroke_blocks must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the architecture fields only; `iterations` and
    /// `repredict_stroke` do not affect the parameter set.
    pub fn config_hash(&self) -> String {
        let text = format!(
            "pen-net-v1;base={};dil={:?};blocks={}",
            self.base_channels, self.dilation_rates, self.stroke_blocks
        );
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

pub fn check_input(img: &Tensor, channels: usize) -> Result<()> {
    let dims = img.dims();
    if dims.len() != 4 {
        return Err(PenError::BadShape(format!(
            "expected (B,C,H,W), got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    if c != channels {
        return Err(PenError::BadShape(format!(
            "expected {channels} channels, got {c}"
        )));
    }
    if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(PenError::BadShape(format!(
            "{h}x{w} is not a positive multiple of {SIZE_DIVISOR}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct StrokeNet {
    stem: ConvNormAct,
    stages: Vec<Vec<ResBlock>>,
    decoder: Vec<ConvNormAct>,
    head: Conv,
}

impl StrokeNet {
    fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.base_channels;
        let stem = ConvNormAct::new(store, "stem", ConvSpec::new(3, c, 3), rng)?;
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let mut stages = Vec::new();
        let mut prev = c;
        for (i, &width) in widths.iter().enumerate() {
            let mut blocks = vec![ResBlock::new(
                store,
                &format!("enc{i}.block0"),
                prev,
                width,
                2,
                rng,
            )?];
            for j in 1..cfg.stroke_blocks {
                blocks.push(ResBlock::new(
                    store,
                    &format!("enc{i}.block{j}"),
                    width,
                    width,
                    1,
                    rng,
                )?);
            }
            stages.push(blocks);
            prev = width;
        }
        // decoder targets the widths of [enc2, enc1, enc0, stem]
        let skip_widths = [widths[2], widths[1], widths[0], c];
        let mut decoder = Vec::new();
        for (i, &width) in skip_widths.iter().enumerate() {
            decoder.push(ConvNormAct::new(
                store,
                &format!("dec{i}"),
                ConvSpec::new(prev, width, 3),
                rng,
            )?);
            prev = width;
        }
        let head = Conv::new(store, "head", ConvSpec::new(c, 1, 3), 0.5, rng)?;
        Ok(Self {
            stem,
            stages,
            decoder,
            head,
        })
    }

    fn logits(&self, img: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(img)?;
        let mut skips = vec![x.clone()];
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            skips.push(x.clone());
        }
        skips.pop();
        for dec in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            x = (dec.forward(&upsample2(&x)?)? + skip)?;
        }
        self.head.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: ConvNormAct,
    refine: ConvNormAct,
}

#[derive(Debug, Clone)]
struct EraseNet {
    stem: ConvNormAct,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<ConvNormAct>,
    decoder: Vec<(ConvNormAct, ResidualSkip)>,
    head: Conv,
}

impl EraseNet {
    fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.base_channels;
        let stem = ConvNormAct::new(store, "stem", ConvSpec::new(4, c, 3), rng)?;
        let widths = [2 * c, 4 * c, 8 * c, 8 * c];
        let mut encoder = Vec::new();
        let mut prev = c;
        for (i, &width) in widths.iter().enumerate() {
            encoder.push(EncoderStage {
                down: ConvNormAct::new(
                    store,
                    &format!("enc{i}.down"),
                    ConvSpec::new(prev, width, 3).stride(2),
                    rng,
                )?,
                refine: ConvNormAct::new(
                    store,
                    &format!("enc{i}.refine"),
                    ConvSpec::new(width, width, 3),
                    rng,
                )?,
            });
            prev = width;
        }
        let bottleneck = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                ConvNormAct::new(
                    store,
                    &format!("dilated{i}"),
                    ConvSpec::new(prev, prev, 3).dilation(rate),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let skip_widths = [widths[2], widths[1], widths[0], c];
        let mut decoder = Vec::new();
        for (i, &width) in skip_widths.iter().enumerate() {
            decoder.push((
                ConvNormAct::new(
                    store,
                    &format!("dec{i}.up"),
                    ConvSpec::new(prev, width, 3),
                    rng,
                )?,
                ResidualSkip::new(store, &format!("dec{i}.skip"), width, rng)?,
            ));
            prev = width;
        }
        let head = Conv::new(store, "head", ConvSpec::new(c, 3, 3), 0.5, rng)?;
        Ok(Self {
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(input)?;
        let mut skips = vec![x.clone()];
        for stage in &self.encoder {
            x = stage.refine.forward(&stage.down.forward(&x)?)?;
            skips.push(x.clone());
        }
        skips.pop();
        for layer in &self.bottleneck {
            x = layer.forward(&x)?;
        }
        for (up, skip_block) in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            x = (up.forward(&upsample2(&x)?)? + skip_block.forward(&skip)?)?;
        }
        layers::sigmoid(&self.head.forward(&x)?)
    }
}

/// Learnable generator state. The erasing parameters form a single set no
/// matter how many passes are run.
#[derive(Debug, Clone)]
pub struct PenParams {
    pub stroke: ParamStore,
    pub erase: ParamStore,
    config: NetConfig,
    config_hash: String,
    stroke_net: StrokeNet,
    erase_net: EraseNet,
}

/// Tensor-level output of [`PenParams::erase_progressive`].
#[derive(Debug, Clone)]
pub struct EraseOutput {
    pub final_image: Tensor,
    pub intermediates: Vec<Tensor>,
    pub stroke: Tensor,
}

#[derive(Debug, Clone)]
pub struct EraseResult {
    pub final_image: ImageTensor,
    pub intermediates: Vec<ImageTensor>,
    pub stroke: StrokeMask,
}

impl PenParams {
    pub fn init(cfg: &NetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stroke = ParamStore::new(dtype, device);
        let stroke_net = StrokeNet::new(&mut stroke, cfg, &mut rng)?;
        let mut erase = ParamStore::new(dtype, device);
        let erase_net = EraseNet::new(&mut erase, cfg, &mut rng)?;
        Ok(Self {
            stroke,
            erase,
            config: cfg.clone(),
            config_hash: cfg.config_hash(),
            stroke_net,
            erase_net,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn dtype(&self) -> DType {
        self.stroke.dtype()
    }

    pub fn device(&self) -> &Device {
        self.stroke.device()
    }

    pub fn num_params(&self) -> usize {
        self.stroke.num_params() + self.erase.num_params()
    }

    /// Raw stroke logits, `(B, 1, H, W)`.
    pub fn forward_stroke_logits(&self, img: &Tensor) -> Result<Tensor> {
        check_input(img, 3)?;
        self.stroke_net.logits(img)
    }

    /// Soft stroke mask in `[0, 1]`, `(B, 1, H, W)`.
    pub fn forward_stroke(&self, img: &Tensor) -> Result<Tensor> {
        layers::sigmoid(&self.forward_stroke_logits(img)?)
    }

    /// One erasing pass on the channel concatenation of image and mask.
    pub fn erase_once(&self, img: &Tensor, stroke: &Tensor) -> Result<Tensor> {
        check_input(img, 3)?;
        check_input(stroke, 1)?;
        if img.dims()[2..] != stroke.dims()[2..] || img.dims()[0] != stroke.dims()[0] {
            return Err(PenError::BadShape(format!(
                "image {:?} and mask {:?} disagree",
                img.dims(),
                stroke.dims()
            )));
        }
        let input = Tensor::cat(&[img, stroke], 1)?;
        self.erase_net.forward(&input)
    }

    /// Predicts the stroke mask once, then applies the erasing module
    /// `iterations` times, each pass starting from the previous output.
    pub fn erase_progressive(&self, img: &Tensor, iterations: usize) -> Result<EraseOutput> {
        if iterations == 0 {
            return Err(PenError::Config("iterations must be at least 1".into()));
        }
        let stroke = self.forward_stroke(img)?;
        self.erase_progressive_with(img, &stroke, iterations)
    }

    /// Progressive erasing with a caller-supplied mask (e.g. a detached one).
    pub fn erase_progressive_with(
        &self,
        img: &Tensor,
        stroke: &Tensor,
        iterations: usize,
    ) -> Result<EraseOutput> {
        let mut current = img.clone();
        let mut mask = stroke.clone();
        let mut intermediates = Vec::with_capacity(iterations);
        for k in 0..iterations {
            if k > 0 && self.config.repredict_stroke {
                mask = self.forward_stroke(&current)?;
            }
            current = self.erase_once(&current, &mask)?;
            intermediates.push(current.clone());
        }
        Ok(EraseOutput {
            final_image: current,
            intermediates,
            stroke: stroke.clone(),
        })
    }

    /// Image-level convenience wrapper over [`PenParams::erase_progressive`].
    pub fn erase_image(&self, img: &ImageTensor, iterations: usize) -> Result<EraseResult> {
        let x = img.to_rgb().to_tensor(self.dtype(), self.device())?;
        let out = self.erase_progressive(&x, iterations)?;
        Ok(EraseResult {
            final_image: ImageTensor::from_tensor(&out.final_image)?,
            intermediates: out
                .intermediates
                .iter()
                .map(ImageTensor::from_tensor)
                .collect::<Result<_>>()?,
            stroke: StrokeMask::from_tensor(&out.stroke)?,
        })
    }

    pub fn forward_stroke_image(&self, img: &ImageTensor) -> Result<StrokeMask> {
        let x = img.to_rgb().to_tensor(self.dtype(), self.device())?;
        StrokeMask::from_tensor(&self.forward_stroke(&x)?)
    }

    /// Same parameters in another dtype (used for double-precision checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let other = Self::init(&self.config, 0, dtype, self.device())?;
        let mut map = std::collections::HashMap::new();
        for (k, t) in self
            .stroke
            .export("stroke.")?
            .into_iter()
            .chain(self.erase.export("erase.")?)
        {
            map.insert(k, t);
        }
        other.stroke.load(&map, "stroke.")?;
        other.erase.load(&map, "erase.")?;
        Ok(other)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(format!(
            "{}:{}",
            self.stroke.fingerprint()?,
            self.erase.fingerprint()?
        ))
    }
}
