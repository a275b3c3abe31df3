//! Erasure quality metrics and the directory-level report.
//!
//! MSE and PSNR work in the [0,1] domain. AGE, pEPs and pCEPS work on
//! 0–255 gray levels (`255 · luma`). SSIM uses the [0,1] luma image.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PenError, Result};
use crate::imagecore::{list_images, load_image, ImageTensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ERROR_THRESHOLD: f64 = 20.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PenError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn compensated_mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let sq = a.data().iter().zip(b.data()).map(|(&x, &y)| {
        let d = x - y;
        d * d
    });
    Ok(compensated_sum(sq) / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gray01(img: &ImageTensor) -> Vec<f64> {
    let (h, w, _) = img.shape();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(img.luma(y, x));
        }
    }
    out
}

fn gray255(img: &ImageTensor) -> Vec<f64> {
    gray01(img).into_iter().map(|v| 255.0 * v).collect()
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h×w` plane with a 1-D kernel.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on the luma image with an 11×11 Gaussian window
/// (σ = 1.5), averaged over all fully-inside window positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(PenError::TooSmall { h, w });
    }
    let ga = gray01(a);
    let gb = gray01(b);
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        ga.iter().zip(&gb).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let vals: Vec<f64> = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect();
    Ok(compensated_mean(&vals))
}

/// Average gray-level absolute error on the 0–255 scale.
pub fn age(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let ga = gray255(a);
    let gb = gray255(b);
    let diffs: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).collect();
    Ok(compensated_mean(&diffs))
}

fn error_map(a: &ImageTensor, b: &ImageTensor, tau_e: f64) -> Result<Vec<bool>> {
    check_same(a, b)?;
    Ok(gray255(a)
        .iter()
        .zip(gray255(b))
        .map(|(x, y)| (x - y).abs() > tau_e)
        .collect())
}

/// Fraction of pixels whose gray-level difference exceeds `tau_e`.
pub fn peps(a: &ImageTensor, b: &ImageTensor, tau_e: f64) -> Result<f64> {
    let err = error_map(a, b, tau_e)?;
    Ok(err.iter().filter(|&&e| e).count() as f64 / err.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(PenError::Config(format!(
                "metrics.connectivity must be 4 or 8, got {other}"
            ))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Fraction of error pixels whose in-bounds neighbors are all error pixels.
pub fn pceps(a: &ImageTensor, b: &ImageTensor, tau_e: f64) -> Result<f64> {
    pceps_with(a, b, tau_e, Connectivity::Four)
}

pub fn pceps_with(a: &ImageTensor, b: &ImageTensor, tau_e: f64, conn: Connectivity) -> Result<f64> {
    let err = error_map(a, b, tau_e)?;
    let (h, w, _) = a.shape();
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !err[y * w + x] {
                continue;
            }
            let clustered = conn.offsets().iter().all(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return true;
                }
                err[ny as usize * w + nx as usize]
            });
            if clustered {
                count += 1;
            }
        }
    }
    Ok(count as f64 / (h * w) as f64)
}

mod psnr_format {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    #[serde(with = "psnr_format")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// Mean over finite values; `inf` when every pair is identical.
    #[serde(with = "psnr_format")]
    pub psnr: f64,
    pub psnr_inf_excluded: usize,
    pub ssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub error_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            error_threshold: DEFAULT_ERROR_THRESHOLD,
            connectivity: Connectivity::Four,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub settings: MetricSettings,
    pub domains: BTreeMap<String, String>,
    pub per_image: BTreeMap<String, ImageMetrics>,
    pub aggregate: AggregateMetrics,
    pub count: usize,
    pub skipped: Vec<SkippedPair>,
}

pub fn image_metrics(
    pred: &ImageTensor,
    gt: &ImageTensor,
    settings: &MetricSettings,
) -> Result<ImageMetrics> {
    let m = mse(pred, gt)?;
    Ok(ImageMetrics {
        psnr: psnr_from_mse(m),
        ssim: ssim(pred, gt)?,
        mse: m,
        age: age(pred, gt)?,
        peps: peps(pred, gt, settings.error_threshold)?,
        pceps: pceps_with(pred, gt, settings.error_threshold, settings.connectivity)?,
    })
}

pub fn aggregate(per_image: &BTreeMap<String, ImageMetrics>) -> AggregateMetrics {
    let col = |f: fn(&ImageMetrics) -> f64| -> f64 {
        let vals: Vec<f64> = per_image.values().map(f).collect();
        compensated_mean(&vals)
    };
    let finite_psnr: Vec<f64> = per_image
        .values()
        .map(|m| m.psnr)
        .filter(|p| p.is_finite())
        .collect();
    AggregateMetrics {
        psnr: if finite_psnr.is_empty() {
            f64::INFINITY
        } else {
            compensated_mean(&finite_psnr)
        },
        psnr_inf_excluded: per_image.len() - finite_psnr.len(),
        ssim: col(|m| m.ssim),
        mse: col(|m| m.mse),
        age: col(|m| m.age),
        peps: col(|m| m.peps),
        pceps: col(|m| m.pceps),
    }
}

impl MetricReport {
    pub fn from_per_image(
        per_image: BTreeMap<String, ImageMetrics>,
        skipped: Vec<SkippedPair>,
        settings: MetricSettings,
    ) -> Result<Self> {
        if per_image.is_empty() {
            return Err(PenError::EmptyDataset("<no comparable pairs>".into()));
        }
        let domains = [
            ("mse", "[0,1] pixel values, mean over pixels and channels"),
            ("psnr", "dB, peak 1.0"),
            ("ssim", "[0,1] luma, 11x11 gaussian window sigma 1.5"),
            ("age", "0-255 gray levels"),
            ("peps", "fraction of pixels, 0-255 gray levels"),
            ("pceps", "fraction of pixels, 0-255 gray levels"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            settings,
            domains,
            aggregate: aggregate(&per_image),
            count: per_image.len(),
            per_image,
            skipped,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PenError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PenError::Config(format!("bad metric report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| PenError::io(parent, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| PenError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| PenError::io(path, e))?)
    }

    /// Human-readable summary; SSIM is shown ×100.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let psnr = if a.psnr.is_finite() {
            format!("{:.2}", a.psnr)
        } else {
            "inf".to_string()
        };
        format!(
            "{:>8} {:>8} {:>10} {:>8} {:>8} {:>8}\n{:>8} {:>8.2} {:>10.5} {:>8.3} {:>8.4} {:>8.4}\nimages: {}  skipped: {}  psnr inf excluded: {}",
            "PSNR", "SSIM", "MSE", "AGE", "pEPs", "pCEPS",
            psnr,
            a.ssim * 100.0,
            a.mse,
            a.age,
            a.peps,
            a.pceps,
            self.count,
            self.skipped.len(),
            a.psnr_inf_excluded
        )
    }
}

/// Compares every prediction with the ground truth of the same file stem.
/// Pairs that cannot be compared are recorded in `skipped`.
pub fn evaluate_dir(pred_root: &Path, gt_root: &Path) -> Result<MetricReport> {
    evaluate_dir_with(pred_root, gt_root, &MetricSettings::default())
}

pub fn evaluate_dir_with(
    pred_root: &Path,
    gt_root: &Path,
    settings: &MetricSettings,
) -> Result<MetricReport> {
    let preds = list_images(pred_root)?;
    let gts = list_images(gt_root)?;
    if preds.is_empty() {
        return Err(PenError::EmptyDataset(pred_root.to_path_buf()));
    }
    let mut per_image = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, pred_path) in &preds {
        let Some(gt_path) = gts.get(id) else {
            skipped.push(SkippedPair {
                id: id.clone(),
                reason: "no ground truth with this name".into(),
            });
            continue;
        };
        let result = load_image(pred_path)
            .and_then(|p| Ok((p, load_image(gt_path)?)))
            .and_then(|(p, g)| image_metrics(&p, &g, settings));
        match result {
            Ok(m) => {
                per_image.insert(id.clone(), m);
            }
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(SkippedPair {
                    id: id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    for id in gts.keys().filter(|id| !preds.contains_key(*id)) {
        skipped.push(SkippedPair {
            id: id.clone(),
            reason: "no prediction with this name".into(),
        });
    }
    if per_image.is_empty() {
        return Err(PenError::EmptyDataset(pred_root.to_path_buf()));
    }
    MetricReport::from_per_image(per_image, skipped, *settings)
}

/// Four corner points `(x, y)`.
pub type Quad = [[f64; 2]; 4];

/// External text detector run on erased images.
pub trait TextDetector {
    fn detect(&self, img: &ImageTensor) -> Result<Vec<Quad>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

impl DetectionScores {
    /// Ratios with an empty denominator are defined as 0.
    pub fn from_counts(matched: usize, detections: usize, ground_truth: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(matched, detections);
        let recall = ratio(matched, ground_truth);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            matched,
            detections,
            ground_truth,
        }
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

fn ccw(q: &Quad) -> Vec<[f64; 2]> {
    let mut v = q.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Clips `subject` by the convex polygon `clip` (both counter-clockwise).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let inside = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    };
    let intersect = |a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        let (x1, y1, x2, y2) = (a[0], a[1], b[0], b[1]);
        let (x3, y3, x4, y4) = (p[0], p[1], q[0], q[1]);
        let den = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4);
        let t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / den;
        [x1 + t * (x2 - x1), y1 + t * (y2 - y1)]
    };
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(a, b, prev), inside(a, b, cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(intersect(prev, cur, a, b)),
                (false, true) => {
                    out.push(intersect(prev, cur, a, b));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Intersection over union of two convex quadrilaterals.
pub fn quad_iou(a: &Quad, b: &Quad) -> f64 {
    let pa = ccw(a);
    let pb = ccw(b);
    let area_a = signed_area(&pa);
    let area_b = signed_area(&pb);
    let inter = clip_polygon(&pa, &pb);
    let inter_area = if inter.len() < 3 {
        0.0
    } else {
        signed_area(&inter).abs()
    };
    let union = area_a + area_b - inter_area;
    if union <= 0.0 {
        0.0
    } else {
        inter_area / union
    }
}

/// Greedy one-to-one matching by descending IoU; returns the match count.
pub fn match_boxes(detections: &[Quad], ground_truth: &[Quad], min_iou: f64) -> usize {
    let mut cands = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            let iou = quad_iou(d, g);
            if iou >= min_iou {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_d = vec![false; detections.len()];
    let mut used_g = vec![false; ground_truth.len()];
    let mut matched = 0;
    for (_, i, j) in cands {
        if !used_d[i] && !used_g[j] {
            used_d[i] = true;
            used_g[j] = true;
            matched += 1;
        }
    }
    matched
}

/// Runs `det` on each erased image and scores it against `gt_boxes`, a JSON
/// object mapping image id to a list of quads (`[[x,y],[x,y],[x,y],[x,y]]`).
pub fn detection_eval(
    erased_dir: &Path,
    gt_boxes: &Path,
    det: Option<&dyn TextDetector>,
) -> Result<DetectionScores> {
    let det = det.ok_or(PenError::NoDetector)?;
    let text = fs::read_to_string(gt_boxes).map_err(|e| PenError::io(gt_boxes, e))?;
    let annotations: BTreeMap<String, Vec<Quad>> = serde_json::from_str(&text)
        .map_err(|e| PenError::Config(format!("{}: {e}", gt_boxes.display())))?;
    let images = list_images(erased_dir)?;
    if images.is_empty() {
        return Err(PenError::EmptyDataset(erased_dir.to_path_buf()));
    }
    let (mut matched, mut detections, mut ground_truth) = (0, 0, 0);
    for (id, path) in &images {
        let boxes = det.detect(&load_image(path)?)?;
        let gt = annotations.get(id).map(Vec::as_slice).unwrap_or(&[]);
        matched += match_boxes(&boxes, gt, 0.5);
        detections += boxes.len();
        ground_truth += gt.len();
    }
    Ok(DetectionScores::from_counts(
        matched,
        detections,
        ground_truth,
    ))
}
