//! Single-file checkpoints: safetensors tensors plus string metadata.
//!
//! Tensor namespaces: `gen/stroke.*`, `gen/erase.*`, `disc/*` and
//! `opt/{gen,disc}/{m,v}.*`. Metadata carries the format version, the network
//! and discriminator configs as JSON, the architecture hash, the stage tag,
//! the step counter and the loss history.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::Stage;
use super::optim::Adam;
use crate::discriminator::{DiscConfig, DiscParams};
use crate::error::{PenError, Result};
use crate::network::{NetConfig, PenParams};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub values: BTreeMap<String, f64>,
}

/// Training state carried between and within stages.
#[derive(Debug)]
pub struct StageState {
    pub params: PenParams,
    pub disc: Option<DiscParams>,
    /// Stage that produced this state; `None` for freshly initialized params.
    pub stage: Option<Stage>,
    /// Training iterations completed in `stage`.
    pub step: usize,
    pub complete: bool,
    pub gen_opt: Option<Adam>,
    pub disc_opt: Option<Adam>,
    pub loss_history: Vec<LossRecord>,
}

impl StageState {
    pub fn fresh(params: PenParams) -> Self {
        Self {
            params,
            disc: None,
            stage: None,
            step: 0,
            complete: false,
            gen_opt: None,
            disc_opt: None,
            loss_history: Vec::new(),
        }
    }

    /// Loss history as `step,loss_name,value` CSV.
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.loss_history)
    }

    /// Values of one named loss in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.loss_history
            .iter()
            .filter_map(|r| r.values.get(name).copied())
            .collect()
    }
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,loss_name,value\n");
    for rec in history {
        for (name, v) in &rec.values {
            out.push_str(&format!("{},{},{:?}\n", rec.step, name, v));
        }
    }
    out
}

fn meta_err(e: impl std::fmt::Display) -> PenError {
    PenError::Checkpoint(e.to_string())
}

fn write(path: &Path, tensors: Vec<(String, Tensor)>, meta: HashMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PenError::io(parent, e))?;
    }
    let tensors: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<Result<_>>()?;
    // Write to a sibling file first so an interrupted save never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(meta_err)?;
    fs::rename(&tmp, path).map_err(|e| PenError::io(path, e))
}

fn base_meta(params: &PenParams) -> Result<HashMap<String, String>> {
    let mut meta = HashMap::new();
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    meta.insert(
        "net_config".into(),
        serde_json::to_string(params.config()).map_err(meta_err)?,
    );
    meta.insert("config_hash".into(), params.config_hash().to_string());
    meta.insert(
        "dtype".into(),
        format!("{:?}", params.dtype()).to_lowercase(),
    );
    Ok(meta)
}

fn gen_tensors(params: &PenParams) -> Result<Vec<(String, Tensor)>> {
    let mut t = params.stroke.export("gen/stroke.")?;
    t.extend(params.erase.export("gen/erase.")?);
    Ok(t)
}

/// Full training checkpoint.
pub fn save_checkpoint(path: &Path, state: &StageState) -> Result<()> {
    let mut meta = base_meta(&state.params)?;
    meta.insert(
        "stage".into(),
        state.stage.map(|s| s.tag()).unwrap_or("init").into(),
    );
    meta.insert("step".into(), state.step.to_string());
    meta.insert("complete".into(), state.complete.to_string());
    meta.insert("inference_only".into(), "false".into());
    meta.insert(
        "loss_history".into(),
        serde_json::to_string(&state.loss_history).map_err(meta_err)?,
    );
    let mut tensors = gen_tensors(&state.params)?;
    if let Some(disc) = &state.disc {
        meta.insert(
            "disc_config".into(),
            serde_json::to_string(disc.config()).map_err(meta_err)?,
        );
        tensors.extend(disc.export("disc/")?);
    }
    if let Some(opt) = &state.gen_opt {
        meta.insert("opt_gen_t".into(), opt.steps_taken().to_string());
        tensors.extend(opt.export("opt/gen/"));
    }
    if let Some(opt) = &state.disc_opt {
        meta.insert("opt_disc_t".into(), opt.steps_taken().to_string());
        tensors.extend(opt.export("opt/disc/"));
    }
    write(path, tensors, meta)
}

/// Generator weights only: no discriminator, no optimizer state.
pub fn export_inference(path: &Path, params: &PenParams, stage: Option<Stage>) -> Result<()> {
    let mut meta = base_meta(params)?;
    meta.insert(
        "stage".into(),
        stage.map(|s| s.tag()).unwrap_or("init").into(),
    );
    meta.insert("inference_only".into(), "true".into());
    write(path, gen_tensors(params)?, meta)
}

/// Header of a checkpoint, readable without materializing tensors.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub net: NetConfig,
    pub config_hash: String,
    pub stage: Option<Stage>,
    pub step: usize,
    pub complete: bool,
    pub inference_only: bool,
    pub dtype: DType,
    pub disc: Option<DiscConfig>,
    pub opt_gen_t: Option<u64>,
    pub opt_disc_t: Option<u64>,
    pub loss_history: Vec<LossRecord>,
}

fn parse_info(meta: &HashMap<String, String>) -> Result<CheckpointInfo> {
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| PenError::Checkpoint(format!("missing metadata `{k}`")))
    };
    let version = get("format_version")?;
    if version != FORMAT_VERSION {
        return Err(PenError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let net: NetConfig = serde_json::from_str(get("net_config")?).map_err(meta_err)?;
    let config_hash = get("config_hash")?.to_string();
    if net.config_hash() != config_hash {
        return Err(PenError::Checkpoint(format!(
            "stored config hash {config_hash} does not match its config ({})",
            net.config_hash()
        )));
    }
    let stage = match get("stage")? {
        "init" => None,
        tag => Some(
            Stage::from_tag(tag)
                .ok_or_else(|| PenError::Checkpoint(format!("unknown stage tag `{tag}`")))?,
        ),
    };
    let dtype = match get("dtype")? {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(PenError::Checkpoint(format!("unsupported dtype `{other}`"))),
    };
    let parse_u64 = |k: &str| -> Result<Option<u64>> {
        meta.get(k).map(|v| v.parse().map_err(meta_err)).transpose()
    };
    Ok(CheckpointInfo {
        net,
        config_hash,
        stage,
        step: parse_u64("step")?.unwrap_or(0) as usize,
        complete: meta.get("complete").map(|v| v == "true").unwrap_or(true),
        inference_only: meta
            .get("inference_only")
            .map(|v| v == "true")
            .unwrap_or(false),
        dtype,
        disc: meta
            .get("disc_config")
            .map(|v| serde_json::from_str(v).map_err(meta_err))
            .transpose()?,
        opt_gen_t: parse_u64("opt_gen_t")?,
        opt_disc_t: parse_u64("opt_disc_t")?,
        loss_history: meta
            .get("loss_history")
            .map(|v| serde_json::from_str(v).map_err(meta_err))
            .transpose()?
            .unwrap_or_default(),
    })
}

fn read(path: &Path, device: &Device) -> Result<(CheckpointInfo, HashMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            PenError::Checkpoint(format!("{} does not exist", path.display()))
        }
        _ => PenError::Checkpoint(format!("cannot read {}: {e}", path.display())),
    })?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| PenError::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| PenError::Checkpoint(format!("{}: no metadata", path.display())))?;
    let info = parse_info(&meta)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| PenError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((info, tensors))
}

pub fn read_info(path: &Path) -> Result<CheckpointInfo> {
    Ok(read(path, &Device::Cpu)?.0)
}

fn params_from(
    info: &CheckpointInfo,
    tensors: &HashMap<String, Tensor>,
    device: &Device,
) -> Result<PenParams> {
    let params = PenParams::init(&info.net, 0, info.dtype, device)?;
    params.stroke.load(tensors, "gen/stroke.")?;
    params.erase.load(tensors, "gen/erase.")?;
    if !params.stroke.all_finite()? || !params.erase.all_finite()? {
        return Err(PenError::Checkpoint(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok(params)
}

fn ensure_hash(info: &CheckpointInfo, expected: Option<&NetConfig>) -> Result<()> {
    if let Some(cfg) = expected {
        if cfg.config_hash() != info.config_hash {
            return Err(PenError::Checkpoint(format!(
                "architecture mismatch: checkpoint {} vs config {}",
                info.config_hash,
                cfg.config_hash()
            )));
        }
    }
    Ok(())
}

/// Loads generator weights. With `expected`, fails unless the architecture
/// hash matches; the returned params use the iteration settings of
/// `expected` when given.
pub fn load_params(
    path: &Path,
    expected: Option<&NetConfig>,
    device: &Device,
) -> Result<PenParams> {
    let (mut info, tensors) = read(path, device)?;
    ensure_hash(&info, expected)?;
    if let Some(cfg) = expected {
        info.net = cfg.clone();
    }
    params_from(&info, &tensors, device)
}

/// Loads a full training state. Optimizers are rebuilt with the given
/// hyperparameters and their moments restored.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&NetConfig>,
    gen_hyper: (f64, (f64, f64)),
    disc_hyper: (f64, (f64, f64)),
    device: &Device,
) -> Result<StageState> {
    let (mut info, tensors) = read(path, device)?;
    ensure_hash(&info, expected)?;
    if let Some(cfg) = expected {
        info.net = cfg.clone();
    }
    let params = params_from(&info, &tensors, device)?;
    let disc = match &info.disc {
        Some(cfg) => {
            let d = DiscParams::init(cfg, 0, info.dtype, device)?;
            d.load(&tensors, "disc/")?;
            Some(d)
        }
        None => None,
    };
    let restore =
        |t: Option<u64>, prefix: &str, (lr, betas): (f64, (f64, f64))| -> Result<Option<Adam>> {
            t.map(|t| {
                let mut opt = Adam::new(lr, betas);
                opt.restore(&tensors, prefix, t)?;
                Ok(opt)
            })
            .transpose()
        };
    Ok(StageState {
        gen_opt: restore(info.opt_gen_t, "opt/gen/", gen_hyper)?,
        disc_opt: restore(info.opt_disc_t, "opt/disc/", disc_hyper)?,
        params,
        disc,
        stage: info.stage,
        step: info.step,
        complete: info.complete,
        loss_history: info.loss_history,
    })
}
