//! Lite synthetic pair engine: text rendered from a bundled 8×8 bitmap font is
//! composited onto backgrounds, and stroke targets come from thresholded
//! differences between the text image and its clean background.

use std::fs;
use std::io::Write;
use std::path::Path;

use font8x8::UnicodeFonts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};
use crate::imagecore::{
    index_dataset, resize_bilinear, save_image, DatasetIndex, ImageTensor, SamplePair, Split,
    StrokeMask,
};

/// Gray-level threshold in `(0, 1)` applied to `|original − gt|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeThreshold(f64);

impl StrokeThreshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(PenError::Config(format!(
                "stroke threshold {tau} not in (0, 1)"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for StrokeThreshold {
    fn default() -> Self {
        Self(25.0 / 255.0)
    }
}

/// Hard mask: 1 where the largest per-channel absolute difference exceeds `tau`.
pub fn derive_stroke_target(
    original: &ImageTensor,
    gt: &ImageTensor,
    tau: StrokeThreshold,
) -> Result<StrokeMask> {
    if original.shape() != gt.shape() {
        return Err(PenError::ShapeMismatch(format!(
            "original {:?} vs ground truth {:?}",
            original.shape(),
            gt.shape()
        )));
    }
    let (h, w, c) = original.shape();
    let data = original
        .data()
        .chunks_exact(c)
        .zip(gt.data().chunks_exact(c))
        .map(|(a, b)| {
            let diff = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if diff > tau.value() {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    StrokeMask::new(h, w, data)
}

pub const FONT_COUNT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub text: String,
    /// 0 regular, 1 bold, 2 italic.
    pub font_id: u8,
    /// Height (and per-character advance) of the glyph cell in pixels.
    pub size_px: usize,
    pub color: [f64; 3],
    /// Top-left `(row, col)` of the unrotated text box.
    pub position: (f64, f64),
    /// Counter-clockwise rotation about the text box center.
    pub rotation_deg: f64,
    #[serde(default = "default_true")]
    pub antialias: bool,
}

fn default_true() -> bool {
    true
}

impl RenderSpec {
    fn box_size(&self) -> (f64, f64) {
        (
            self.size_px as f64,
            (self.size_px * self.text.chars().count()) as f64,
        )
    }

    fn center(&self) -> (f64, f64) {
        let (bh, bw) = self.box_size();
        (self.position.0 + bh / 2.0, self.position.1 + bw / 2.0)
    }

    /// Axis-aligned bounds `(top, left, bottom, right)` of the rotated box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (bh, bw) = self.box_size();
        let (cy, cx) = self.center();
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (dy, dx) in [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)] {
            let (vy, vx) = (dy * bh, dx * bw);
            let y = cy + vx * -sin + vy * cos;
            let x = cx + vx * cos + vy * sin;
            b = (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x));
        }
        b
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        let (t, l, bt, r) = self.bounds();
        t >= 0.0 && l >= 0.0 && bt <= h as f64 && r <= w as f64
    }

    /// Glyph coverage at a point given in text-box coordinates.
    fn covered(&self, v: f64, u: f64, glyphs: &[[u8; 8]]) -> bool {
        let size = self.size_px as f64;
        let u = if self.font_id == 2 {
            u - (v - size) * 0.2
        } else {
            u
        };
        if v < 0.0 || u < 0.0 || v >= size {
            return false;
        }
        let cell = (u / size) as usize;
        if cell >= glyphs.len() {
            return false;
        }
        let gy = ((v / size) * 8.0) as usize;
        let gx = (((u - cell as f64 * size) / size) * 8.0) as usize;
        let row = glyphs[cell][gy.min(7)];
        let bit = |x: usize| row & (1 << x) != 0;
        let gx = gx.min(7);
        bit(gx) || (self.font_id == 1 && gx > 0 && bit(gx - 1))
    }
}

fn glyph_rows(text: &str) -> Vec<[u8; 8]> {
    text.chars()
        .map(|ch| {
            font8x8::BASIC_FONTS
                .get(ch)
                .unwrap_or_else(|| font8x8::BASIC_FONTS.get('?').unwrap_or([0; 8]))
        })
        .collect()
}

/// Coverage map in `[0, 1]` of one spec over an `h × w` canvas. Anti-aliased
/// specs use 4×4 supersampling; others sample pixel centers only.
pub fn render_alpha(spec: &RenderSpec, h: usize, w: usize) -> Result<Vec<f64>> {
    if spec.text.trim().is_empty() {
        return Err(PenError::EmptyText);
    }
    if spec.size_px == 0 || !spec.fits(h, w) {
        return Err(PenError::GlyphOverflow(format!(
            "{:?} at {:?} in {h}x{w}",
            spec.text, spec.position
        )));
    }
    let glyphs = glyph_rows(&spec.text);
    let (cy, cx) = spec.center();
    let (bh, bw) = spec.box_size();
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (t, l, b, r) = spec.bounds();
    let samples: &[f64] = if spec.antialias {
        &[0.125, 0.375, 0.625, 0.875]
    } else {
        &[0.5]
    };
    let weight = 1.0 / (samples.len() * samples.len()) as f64;
    let mut alpha = vec![0.0f64; h * w];
    let (y_lo, y_hi) = (t.floor().max(0.0) as usize, (b.ceil() as usize).min(h));
    let (x_lo, x_hi) = (l.floor().max(0.0) as usize, (r.ceil() as usize).min(w));
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let mut acc = 0.0f64;
            for sy in samples {
                for sx in samples {
                    let (py, px) = (y as f64 + sy - cy, x as f64 + sx - cx);
                    // inverse rotation back into the text box frame
                    let u = px * cos - py * sin + bw / 2.0;
                    let v = px * sin + py * cos + bh / 2.0;
                    if spec.covered(v, u, &glyphs) {
                        acc += weight;
                    }
                }
            }
            alpha[y * w + x] = acc.min(1.0);
        }
    }
    Ok(alpha)
}

/// Composites every spec onto a copy of `background`. The background itself
/// becomes the erased ground truth.
pub fn render_text_pair(
    id: &str,
    background: &ImageTensor,
    specs: &[RenderSpec],
    tau: StrokeThreshold,
) -> Result<SamplePair> {
    if specs.is_empty() {
        return Err(PenError::EmptyText);
    }
    let background = background.to_rgb();
    let (h, w, _) = background.shape();
    let mut canvas: Vec<f64> = background.data().to_vec();
    for spec in specs {
        let alpha = render_alpha(spec, h, w)?;
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                for c in 0..3 {
                    let px = &mut canvas[i * 3 + c];
                    *px = *px * (1.0 - a) + spec.color[c].clamp(0.0, 1.0) * a;
                }
            }
        }
    }
    let original = ImageTensor::new(h, w, 3, canvas)?;
    let stroke = derive_stroke_target(&original, &background, tau)?;
    SamplePair::new(id, original, background, stroke)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub size: usize,
    pub tau: StrokeThreshold,
    pub max_texts: usize,
    pub min_size_px: usize,
    pub max_size_px: usize,
    pub max_rotation_deg: f64,
    pub min_contrast: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: 64,
            tau: StrokeThreshold::default(),
            max_texts: 2,
            min_size_px: 10,
            max_size_px: 16,
            max_rotation_deg: 15.0,
            min_contrast: 0.3,
        }
    }
}

const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZabdefghkmnpqrstuy0123456789";

fn region_mean_luma(img: &ImageTensor, bounds: (f64, f64, f64, f64)) -> f64 {
    let (h, w, _) = img.shape();
    let (t, l, b, r) = bounds;
    let (y0, y1) = (t.max(0.0) as usize, (b.ceil() as usize).min(h));
    let (x0, x1) = (l.max(0.0) as usize, (r.ceil() as usize).min(w));
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += img.luma(y, x);
            n += 1;
        }
    }
    if n == 0 {
        img.luma(0, 0)
    } else {
        sum / n as f64
    }
}

fn luma_rgb(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Samples one text spec that fits inside the background, with a color whose
/// luma differs from the local background mean by at least `min_contrast`.
pub fn sample_render_spec<R: Rng + ?Sized>(
    background: &ImageTensor,
    opts: &SynthOptions,
    rng: &mut R,
) -> Option<RenderSpec> {
    let (h, w, _) = background.shape();
    for _ in 0..50 {
        let size_px = rng.random_range(opts.min_size_px..=opts.max_size_px.max(opts.min_size_px));
        let max_chars = (w.saturating_sub(2)) / size_px;
        if max_chars == 0 || size_px + 2 > h {
            continue;
        }
        let n_chars = rng.random_range(1..=max_chars.min(6));
        let text: String = (0..n_chars)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
            .collect();
        let rotation_deg = if opts.max_rotation_deg > 0.0 {
            rng.random_range(-opts.max_rotation_deg..opts.max_rotation_deg)
        } else {
            0.0
        };
        let (bh, bw) = (size_px as f64, (size_px * n_chars) as f64);
        let position = (
            rng.random_range(0.0..=(h as f64 - bh).max(0.0)),
            rng.random_range(0.0..=(w as f64 - bw).max(0.0)),
        );
        let mut spec = RenderSpec {
            text,
            font_id: rng.random_range(0..FONT_COUNT),
            size_px,
            color: [0.0; 3],
            position,
            rotation_deg,
            antialias: true,
        };
        if !spec.fits(h, w) {
            continue;
        }
        let local = region_mean_luma(background, spec.bounds());
        let mut color = None;
        for _ in 0..32 {
            let c = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            if (luma_rgb(c) - local).abs() >= opts.min_contrast {
                color = Some(c);
                break;
            }
        }
        spec.color = color.unwrap_or(if local > 0.5 { [0.0; 3] } else { [1.0; 3] });
        return Some(spec);
    }
    None
}

/// Smooth gradient with a few soft rectangles and mild noise.
pub fn procedural_background<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> ImageTensor {
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let grad: [f64; 3] = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    let horizontal = rng.random_bool(0.5);
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..rng.random_range(0..4))
        .map(|_| {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let y1 = rng.random_range(y0..=h);
            let x1 = rng.random_range(x0..=w);
            (y0, x0, y1, x1, [rng.random(), rng.random(), rng.random()])
        })
        .collect();
    let noise: Vec<f64> = (0..h * w * 3)
        .map(|_| rng.random_range(-0.02..0.02))
        .collect();
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let t = if horizontal {
            x as f64 / w as f64
        } else {
            y as f64 / h as f64
        };
        let mut v = base[c] + grad[c] * t;
        for &(y0, x0, y1, x1, col) in &rects {
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                v = 0.6 * v + 0.4 * col[c];
            }
        }
        v + noise[(y * w + x) * 3 + c]
    })
    .expect("finite values")
}

/// Per-sample seed derived from the master seed and the sample index, so any
/// sample can be regenerated independently of the others.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn crop_or_resize<R: Rng + ?Sized>(
    bg: &ImageTensor,
    size: usize,
    rng: &mut R,
) -> Result<ImageTensor> {
    let bg = bg.to_rgb();
    let (h, w, _) = bg.shape();
    if h >= size && w >= size {
        let y0 = rng.random_range(0..=h - size);
        let x0 = rng.random_range(0..=w - size);
        ImageTensor::from_fn(size, size, 3, |y, x, c| bg.get(y0 + y, x0 + x, c))
    } else {
        resize_bilinear(&bg, size, size)
    }
}

#[derive(Serialize)]
struct MetaRecord<'a> {
    id: &'a str,
    background: usize,
    specs: &'a [RenderSpec],
}

/// Generates one pair; the stroke target always has at least 10 pixels set.
pub fn generate_sample(
    backgrounds: &[ImageTensor],
    id: &str,
    seed: u64,
    opts: &SynthOptions,
) -> Result<(SamplePair, usize, Vec<RenderSpec>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let bg_index = rng.random_range(0..backgrounds.len());
        let bg = crop_or_resize(&backgrounds[bg_index], opts.size, &mut rng)?;
        let n_texts = rng.random_range(1..=opts.max_texts.max(1));
        let specs: Vec<RenderSpec> = (0..n_texts)
            .filter_map(|_| sample_render_spec(&bg, opts, &mut rng))
            .collect();
        if specs.is_empty() {
            continue;
        }
        let pair = render_text_pair(id, &bg, &specs, opts.tau)?;
        if pair.stroke_gt.count_set() >= 10 {
            return Ok((pair, bg_index, specs));
        }
    }
    Err(PenError::GlyphOverflow(format!(
        "could not place legible text on a {0}x{0} crop",
        opts.size
    )))
}

/// Writes `n` pairs as `images/`, `gt/`, `stroke/` PNGs plus `meta.jsonl`.
pub fn generate_toy_dataset<R: Rng + ?Sized>(
    backgrounds: &[ImageTensor],
    n: usize,
    out_root: &Path,
    opts: &SynthOptions,
    rng: &mut R,
) -> Result<DatasetIndex> {
    if backgrounds.is_empty() || n == 0 {
        return Err(PenError::EmptyDataset(out_root.to_path_buf()));
    }
    let master: u64 = rng.random();
    for dir in ["images", "gt", "stroke"] {
        let d = out_root.join(dir);
        fs::create_dir_all(&d).map_err(|e| PenError::io(&d, e))?;
    }
    let meta_path = out_root.join("meta.jsonl");
    let mut meta = fs::File::create(&meta_path).map_err(|e| PenError::io(&meta_path, e))?;
    for i in 0..n {
        let id = format!("synth_{i:05}");
        let (pair, bg_index, specs) =
            generate_sample(backgrounds, &id, sample_seed(master, i as u64), opts)?;
        save_image(
            &pair.original,
            out_root.join("images").join(format!("{id}.png")),
        )?;
        save_image(
            &pair.erased_gt,
            out_root.join("gt").join(format!("{id}.png")),
        )?;
        save_image(
            &pair.stroke_gt.as_image(),
            out_root.join("stroke").join(format!("{id}.png")),
        )?;
        let line = serde_json::to_string(&MetaRecord {
            id: &id,
            background: bg_index,
            specs: &specs,
        })
        .map_err(|e| PenError::Config(e.to_string()))?;
        writeln!(meta, "{line}").map_err(|e| PenError::io(&meta_path, e))?;
    }
    index_dataset(out_root, Split::Train)
}
