use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};
use crate::imagecore::{index_unlabeled, load_image, save_image, ImageTensor, StrokeMask};
use crate::network::{PenParams, SIZE_DIVISOR};

/// Replicates edge pixels so both spatial sides become multiples of 16.
pub fn pad_to_multiple(x: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (SIZE_DIVISOR - h % SIZE_DIVISOR) % SIZE_DIVISOR;
    let pw = (SIZE_DIVISOR - w % SIZE_DIVISOR) % SIZE_DIVISOR;
    let mut y = x.clone();
    if ph > 0 {
        y = y.pad_with_same(2, 0, ph)?;
    }
    if pw > 0 {
        y = y.pad_with_same(3, 0, pw)?;
    }
    Ok((y, h, w))
}

fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub erased: ImageTensor,
    pub stroke: StrokeMask,
    pub intermediates: Vec<ImageTensor>,
}

/// Erases one image of any size; padding is removed from every output.
pub fn erase_any_size(
    params: &PenParams,
    img: &ImageTensor,
    iterations: usize,
) -> Result<InferenceOutput> {
    let x = img.to_rgb().to_tensor(params.dtype(), params.device())?;
    let (padded, h, w) = pad_to_multiple(&x)?;
    let out = params.erase_progressive(&padded, iterations)?;
    Ok(InferenceOutput {
        erased: ImageTensor::from_tensor(&crop(&out.final_image, h, w)?)?,
        stroke: StrokeMask::from_tensor(&crop(&out.stroke, h, w)?)?,
        intermediates: out
            .intermediates
            .iter()
            .map(|t| ImageTensor::from_tensor(&crop(t, h, w)?))
            .collect::<Result<_>>()?,
    })
}

/// Erases every image under `in_dir`, writing `erased/<id>.png`,
/// `stroke/<id>.png` and, when asked, `intermediates/<id>_iter<k>.png`.
/// Returns the number of images processed.
pub fn run_inference(
    params: &PenParams,
    in_dir: &Path,
    out_dir: &Path,
    iterations: usize,
    intermediates: bool,
) -> Result<usize> {
    let index = index_unlabeled(in_dir)?;
    for entry in &index.entries {
        let img = load_image(&entry.original)?;
        let out = erase_any_size(params, &img, iterations)?;
        save_image(
            &out.erased,
            out_dir.join("erased").join(format!("{}.png", entry.id)),
        )?;
        save_image(
            &out.stroke.as_image(),
            out_dir.join("stroke").join(format!("{}.png", entry.id)),
        )?;
        if intermediates {
            for (k, im) in out.intermediates.iter().enumerate() {
                save_image(
                    im,
                    out_dir
                        .join("intermediates")
                        .join(format!("{}_iter{}.png", entry.id, k + 1)),
                )?;
            }
        }
    }
    Ok(index.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub iterations: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

/// Wall-clock time of a full progressive forward pass per image, for each
/// iteration count. Every image is timed `repeats` times after one warm-up.
pub fn benchmark_iterations(
    params: &PenParams,
    images: &[ImageTensor],
    iters: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if images.is_empty() {
        return Err(PenError::EmptyDataset("<benchmark images>".into()));
    }
    let inputs: Vec<Tensor> = images
        .iter()
        .map(|img| {
            let x = img.to_rgb().to_tensor(params.dtype(), params.device())?;
            Ok(pad_to_multiple(&x)?.0)
        })
        .collect::<Result<_>>()?;
    params.erase_progressive(&inputs[0], 1)?;
    let mut rows = Vec::with_capacity(iters.len());
    for &k in iters {
        let mut times = Vec::with_capacity(inputs.len() * repeats.max(1));
        for x in &inputs {
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let out = params.erase_progressive(x, k)?;
                // Force materialization before stopping the clock.
                out.final_image
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        rows.push(BenchRow {
            iterations: k,
            mean_ms: mean,
            std_ms: var.sqrt(),
            samples: times.len(),
        });
    }
    Ok(rows)
}
