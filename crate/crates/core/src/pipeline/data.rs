use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{PenError, Result};
use crate::imagecore::{load_image, resize_bilinear, DatasetIndex, ImageTensor, SamplePair};
use crate::synthgen::{derive_stroke_target, StrokeThreshold};

/// Caching image loader that records every file it opens.
#[derive(Debug)]
pub struct ImageLoader {
    index: DatasetIndex,
    size: usize,
    tau: StrokeThreshold,
    cache: HashMap<PathBuf, ImageTensor>,
    accessed: Vec<PathBuf>,
}

impl ImageLoader {
    pub fn new(index: DatasetIndex, size: usize, tau: StrokeThreshold) -> Result<Self> {
        if index.is_empty() {
            return Err(PenError::EmptyDataset(index.root.clone()));
        }
        Ok(Self {
            index,
            size,
            tau,
            cache: HashMap::new(),
            accessed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    /// Every path opened so far, in order, without repeats.
    pub fn accessed(&self) -> &[PathBuf] {
        &self.accessed
    }

    fn read(&mut self, path: &Path) -> Result<ImageTensor> {
        if let Some(img) = self.cache.get(path) {
            return Ok(img.clone());
        }
        self.accessed.push(path.to_path_buf());
        let img = load_image(path)?.to_rgb();
        let img = resize_bilinear(&img, self.size, self.size)?;
        self.cache.insert(path.to_path_buf(), img.clone());
        Ok(img)
    }

    /// The original (text-bearing) image of entry `i`, resized to the input size.
    pub fn original(&mut self, i: usize) -> Result<ImageTensor> {
        let path = self.index.entries[i].original.clone();
        self.read(&path)
    }

    /// Original, ground truth and derived stroke target of entry `i`.
    pub fn pair(&mut self, i: usize) -> Result<SamplePair> {
        let entry = self.index.entries[i].clone();
        let gt_path = entry
            .gt
            .clone()
            .ok_or_else(|| PenError::EmptyDataset(self.index.root.clone()))?;
        let original = self.read(&entry.original)?;
        let gt = self.read(&gt_path)?;
        let stroke = derive_stroke_target(&original, &gt, self.tau)?;
        SamplePair::new(&entry.id, original, gt, stroke)
    }
}

/// Stacks images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts: Vec<Tensor> = images
        .iter()
        .map(|i| i.to_tensor(dtype, device))
        .collect::<Result<_>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Batch tensors of a list of pairs: originals, ground truths, stroke targets.
pub fn stack_pairs(
    pairs: &[SamplePair],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor, Tensor)> {
    let originals: Vec<ImageTensor> = pairs.iter().map(|p| p.original.clone()).collect();
    let gts: Vec<ImageTensor> = pairs.iter().map(|p| p.erased_gt.clone()).collect();
    let strokes: Vec<Tensor> = pairs
        .iter()
        .map(|p| p.stroke_gt.to_tensor(dtype, device))
        .collect::<Result<_>>()?;
    Ok((
        stack_images(&originals, dtype, device)?,
        stack_images(&gts, dtype, device)?,
        Tensor::cat(&strokes, 0)?,
    ))
}
