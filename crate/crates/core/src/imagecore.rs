//! Image and mask containers, file I/O, resizing, and paired-dataset indexing.
//!
//! Pixels live in `[0, 1]` everywhere inside the crate; bytes only appear at
//! the file boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};

/// Luma weights used for every grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// H×W×C image with channel-interleaved `f64` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(PenError::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(PenError::InvalidSize {
                h: height,
                w: width,
            });
        }
        if data.len() != height * width * channels {
            return Err(PenError::InvalidImage(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(PenError::InvalidImage(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from a per-sample function; results are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma of pixel `(y, x)` in `[0, 1]`, computed in `f64`.
    #[inline]
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[base]
        } else {
            LUMA[0] * self.data[base]
                + LUMA[1] * self.data[base + 1]
                + LUMA[2] * self.data[base + 2]
        }
    }

    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = (0..self.height * self.width)
            .map(|i| clamp01(self.luma(i / self.width, i % self.width)))
            .collect();
        ImageTensor {
            data,
            height: self.height,
            width: self.width,
            channels: 1,
        }
    }

    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageTensor {
            data,
            height: self.height,
            width: self.width,
            channels: 3,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `(1, C, H, W)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`ImageTensor::to_tensor`]; accepts `(C, H, W)` or `(1, C, H, W)`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(PenError::BadShape(format!(
                    "expected (C,H,W) or (1,C,H,W), got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f64> = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .into_iter()
            .map(clamp01)
            .collect();
        Self::new(h, w, c, data)
    }
}

/// Soft or hard single-channel mask locating text strokes.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeMask {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl StrokeMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PenError::InvalidImage(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(PenError::InvalidImage(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; height * width],
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_hard(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of entries above 0.5.
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn as_image(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.clone(),
            height: self.height,
            width: self.width,
            channels: 1,
        }
    }

    pub fn from_image(img: &ImageTensor) -> Result<Self> {
        let gray = img.to_gray();
        Self::new(gray.height, gray.width, gray.data)
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let img = ImageTensor::from_tensor(t)?;
        if img.channels != 1 {
            return Err(PenError::BadShape(format!(
                "mask tensor must have one channel, got {}",
                img.channels
            )));
        }
        Self::new(img.height, img.width, img.data)
    }
}

/// An (original, erased ground truth, stroke target) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub original: ImageTensor,
    pub erased_gt: ImageTensor,
    pub stroke_gt: StrokeMask,
    pub id: String,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        original: ImageTensor,
        erased_gt: ImageTensor,
        stroke_gt: StrokeMask,
    ) -> Result<Self> {
        if original.shape() != erased_gt.shape() {
            return Err(PenError::ShapeMismatch(format!(
                "original {:?} vs ground truth {:?}",
                original.shape(),
                erased_gt.shape()
            )));
        }
        if (stroke_gt.height, stroke_gt.width) != (original.height, original.width) {
            return Err(PenError::ShapeMismatch(
                "stroke target size differs from image".into(),
            ));
        }
        Ok(Self {
            original,
            erased_gt,
            stroke_gt,
            id: id.into(),
        })
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PenError::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| PenError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    use image::DynamicImage as D;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded {
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
            (1, decoded.to_luma8().into_raw())
        }
        _ => (3, decoded.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    ImageTensor::new(h, w, channels, data)
}

/// Writes an 8-bit PNG (grayscale for one channel, RGB otherwise).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PenError::io(parent, e))?;
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png).map_err(
        |e| match e {
            image::ImageError::IoError(io) => PenError::io(path, io),
            other => PenError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(other.to_string()),
            },
        },
    )
}

#[inline]
pub(crate) fn to_byte(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    if h == 0 || w == 0 {
        return Err(PenError::InvalidSize { h, w });
    }
    if (h, w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let ys: Vec<(usize, usize, f64)> = axis_weights(img.height, h);
    let xs: Vec<(usize, usize, f64)> = axis_weights(img.width, w);
    let c = img.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for ch in 0..c {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), tx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), tx);
                data.push(clamp01(lerp(top, bottom, ty)));
            }
        }
    }
    ImageTensor::new(h, w, c, data)
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub original: PathBuf,
    /// Absent for unlabeled collections.
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
    /// Files present on one side only.
    pub unmatched: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| PenError::io(dir, e))? {
        let path = entry.map_err(|e| PenError::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !is_image || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Directory holding `images/` and `gt/`: `root/<split>` when present, else `root`.
fn split_root(root: &Path, split: Split) -> PathBuf {
    let nested = root.join(split.as_str());
    if nested.join("images").is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Indexes `images/` + `gt/` pairs under `root`, matched by file stem.
///
/// A `manifest.csv` (`id,original_path,gt_path` per line, paths relative to
/// the root) overrides directory scanning when present.
pub fn index_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let base = split_root(root.as_ref(), split);
    let manifest = base.join("manifest.csv");
    if manifest.is_file() {
        return read_manifest(&manifest, split);
    }
    let images = list_images(&base.join("images"))?;
    let gts = list_images(&base.join("gt"))?;
    let mut entries = Vec::new();
    let mut unmatched = Vec::new();
    for (id, original) in &images {
        match gts.get(id) {
            Some(gt) => entries.push(DatasetEntry {
                id: id.clone(),
                original: original.clone(),
                gt: Some(gt.clone()),
            }),
            None => unmatched.push(original.clone()),
        }
    }
    unmatched.extend(
        gts.iter()
            .filter(|(id, _)| !images.contains_key(*id))
            .map(|(_, p)| p.clone()),
    );
    for path in &unmatched {
        log::warn!("unpaired file {}", path.display());
    }
    if entries.is_empty() {
        return Err(PenError::EmptyDataset(base));
    }
    Ok(DatasetIndex {
        root: base,
        split,
        entries,
        unmatched,
    })
}

pub fn read_manifest(path: &Path, split: Split) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| PenError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(PenError::Config(format!(
                "{}:{}: expected `id,original_path,gt_path`",
                path.display(),
                lineno + 1
            )));
        }
        entries.push(DatasetEntry {
            id: fields[0].to_string(),
            original: base.join(fields[1]),
            gt: Some(base.join(fields[2])),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if entries.is_empty() {
        return Err(PenError::EmptyDataset(base));
    }
    Ok(DatasetIndex {
        root: base,
        split,
        entries,
        unmatched: Vec::new(),
    })
}

/// Indexes images without ground truth: `root/images/` if it exists, else `root` itself.
pub fn index_unlabeled(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let dir = if root.join("images").is_dir() {
        root.join("images")
    } else {
        root.to_path_buf()
    };
    let entries: Vec<DatasetEntry> = list_images(&dir)?
        .into_iter()
        .map(|(id, original)| DatasetEntry {
            id,
            original,
            gt: None,
        })
        .collect();
    if entries.is_empty() {
        return Err(PenError::EmptyDataset(dir));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split: Split::Train,
        entries,
        unmatched: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_bytes(path: &Path, w: u32, h: u32, bytes: Vec<u8>) {
        image::RgbImage::from_raw(w, h, bytes)
            .unwrap()
            .save(path)
            .unwrap();
    }

    #[test]
    fn load_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, expect) in [(255u8, 1.0f64), (0, 0.0), (128, 128.0 / 255.0)] {
            let p = dir.path().join(format!("v{byte}.png"));
            write_bytes(&p, 2, 2, vec![byte; 12]);
            let img = load_image(&p).unwrap();
            assert_eq!(img.shape(), (2, 2, 3));
            assert!(img.data().iter().all(|&v| v == expect));
        }
        let v = load_image(dir.path().join("v128.png"))
            .unwrap()
            .get(0, 0, 0);
        assert!((v - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(PenError::FileNotFound(_))
        ));
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"not an image").unwrap();
        assert!(matches!(load_image(&bad), Err(PenError::Decode { .. })));
    }

    #[test]
    fn save_load_extremes() {
        let dir = tempfile::tempdir().unwrap();
        for v in [0.0, 1.0] {
            let img = ImageTensor::filled(9, 10, 3, v).unwrap();
            let p = dir.path().join("x.png");
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
        let gray = ImageTensor::filled(8, 8, 1, 0.5).unwrap();
        save_image(&gray, dir.path().join("g.png")).unwrap();
        assert_eq!(load_image(dir.path().join("g.png")).unwrap().channels(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_quantization_bound(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random::<f64>()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let max = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            prop_assert!(max <= 1.0 / 255.0 + 1e-7);
        }

        #[test]
        fn resize_constant_is_exact(v in 0.0f64..=1.0, h in 8usize..40, w in 8usize..40) {
            let img = ImageTensor::filled(13, 17, 3, v).unwrap();
            let out = resize_bilinear(&img, h, w).unwrap();
            prop_assert!(out.data().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn resize_identity() {
        let img =
            ImageTensor::from_fn(12, 9, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0)
                .unwrap();
        assert_eq!(resize_bilinear(&img, 12, 9).unwrap(), img);
        assert!(matches!(
            resize_bilinear(&img, 0, 4),
            Err(PenError::InvalidSize { .. })
        ));
    }

    #[test]
    fn resize_checkerboard_matches_formula() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // Direct evaluation of the bilinear weights with half-pixel centers.
        let src = |v: f64| (((v + 0.5) * 0.5) - 0.5).clamp(0.0, 1.0);
        let px = |y: usize, x: usize| [[0.0, 1.0], [1.0, 0.0]][y][x];
        for i in 0..4 {
            for j in 0..4 {
                let (sy, sx) = (src(i as f64), src(j as f64));
                let expect = (1.0 - sy) * (1.0 - sx) * px(0, 0)
                    + (1.0 - sy) * sx * px(0, 1)
                    + sy * (1.0 - sx) * px(1, 0)
                    + sy * sx * px(1, 1);
                assert!((out.get(i, j, 0) - expect).abs() < 1e-6, "({i},{j})");
            }
        }
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 3, 0), 1.0);
    }

    #[test]
    fn index_pairs_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let img = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        for name in ["b", "a"] {
            save_image(&img, root.join("images").join(format!("{name}.png"))).unwrap();
            save_image(&img, root.join("gt").join(format!("{name}.png"))).unwrap();
        }
        save_image(&img, root.join("images/c.png")).unwrap();
        let idx = index_dataset(root, Split::Train).unwrap();
        let ids: Vec<_> = idx.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(idx.unmatched, vec![root.join("images/c.png")]);
    }

    #[test]
    fn index_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            index_dataset(dir.path(), Split::Test),
            Err(PenError::EmptyDataset(_))
        ));
    }

    #[test]
    fn manifest_overrides_scan() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(
            root.join("manifest.csv"),
            "z,x/1.png,y/1.png\nq,x/2.png,y/2.png\n",
        )
        .unwrap();
        let idx = index_dataset(root, Split::Train).unwrap();
        assert_eq!(idx.entries[0].id, "q");
        assert_eq!(
            idx.entries[1].gt.as_deref(),
            Some(root.join("y/1.png").as_path())
        );
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageTensor::from_fn(8, 5, 3, |y, x, c| ((y + 2 * x + 3 * c) % 7) as f64 / 6.0)
            .unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 8, 5]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), img);
        let t32 = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        let back = ImageTensor::from_tensor(&t32).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| (a - b).abs() < 1e-7));
    }
}
