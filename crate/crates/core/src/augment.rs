//! Photometric variants for the stroke-consistency pretext task and the
//! geometric flip/rotation used during supervised training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};
use crate::imagecore::{clamp01, ImageTensor, SamplePair, StrokeMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Brightness,
    Saturation,
    Contrast,
    Sharpness,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Brightness,
        VariantKind::Saturation,
        VariantKind::Contrast,
        VariantKind::Sharpness,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct VariantPair {
    pub a: ImageTensor,
    pub b: ImageTensor,
    pub source_id: String,
    pub spec_a: VariantSpec,
    pub spec_b: VariantSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub factor_min: f64,
    pub factor_max: f64,
    pub rotation_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            factor_min: 0.5,
            factor_max: 1.5,
            rotation_deg: 10.0,
            flip_prob: 0.5,
        }
    }
}

/// `a·(1−f) + x·f`; exactly `x` when `f == 1`.
#[inline]
fn blend(anchor: f64, x: f64, f: f64) -> f64 {
    clamp01(anchor * (1.0 - f) + x * f)
}

pub fn apply_variant(img: &ImageTensor, spec: VariantSpec) -> Result<ImageTensor> {
    let f = spec.factor;
    if !(f.is_finite() && f > 0.0) {
        return Err(PenError::InvalidFactor(f));
    }
    let (h, w, c) = img.shape();
    match spec.kind {
        VariantKind::Brightness => ImageTensor::from_fn(h, w, c, |y, x, ch| img.get(y, x, ch) * f),
        VariantKind::Saturation => ImageTensor::from_fn(h, w, c, |y, x, ch| {
            blend(img.luma(y, x), img.get(y, x, ch), f)
        }),
        VariantKind::Contrast => {
            let mean = mean_gray(img);
            ImageTensor::from_fn(h, w, c, |y, x, ch| blend(mean, img.get(y, x, ch), f))
        }
        VariantKind::Sharpness => {
            let blurred = smooth3x3(img);
            ImageTensor::from_fn(h, w, c, |y, x, ch| {
                blend(blurred[(y * w + x) * c + ch], img.get(y, x, ch), f)
            })
        }
    }
}

pub fn mean_gray(img: &ImageTensor) -> f64 {
    let (h, w, _) = img.shape();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            sum += img.luma(y, x);
        }
    }
    sum / (h * w) as f64
}

/// 3×3 smoothing kernel `[1 1 1; 1 5 1; 1 1 1] / 13` with edge replication.
fn smooth3x3(img: &ImageTensor) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let k = if dy == 0 && dx == 0 { 5.0 } else { 1.0 };
                        acc += k * img.get(yy, xx, ch);
                    }
                }
                out[(y * w + x) * c + ch] = acc / 13.0;
            }
        }
    }
    out
}

pub fn sample_variant_spec<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> VariantSpec {
    let kind = VariantKind::ALL[rng.random_range(0..VariantKind::ALL.len())];
    let factor = if cfg.factor_max > cfg.factor_min {
        rng.random_range(cfg.factor_min..cfg.factor_max)
    } else {
        cfg.factor_min
    };
    VariantSpec { kind, factor }
}

/// Two independently sampled photometric variants of the same image. Geometry
/// is never touched.
pub fn sample_variant_pair<R: Rng + ?Sized>(
    img: &ImageTensor,
    source_id: &str,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<VariantPair> {
    let spec_a = sample_variant_spec(cfg, rng);
    let spec_b = sample_variant_spec(cfg, rng);
    Ok(VariantPair {
        a: apply_variant(img, spec_a)?,
        b: apply_variant(img, spec_b)?,
        source_id: source_id.to_string(),
        spec_a,
        spec_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub flip: bool,
    pub angle_deg: f64,
}

impl GeometricTransform {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let angle_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..cfg.rotation_deg)
        } else {
            0.0
        };
        Self { flip, angle_deg }
    }
}

pub fn flip_image(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.shape();
    ImageTensor::from_fn(h, w, c, |y, x, ch| img.get(y, w - 1 - x, ch)).expect("same shape")
}

pub fn flip_mask(mask: &StrokeMask) -> StrokeMask {
    let (h, w) = (mask.height(), mask.width());
    let data = (0..h * w).map(|i| mask.get(i / w, w - 1 - i % w)).collect();
    StrokeMask::new(h, w, data).expect("same shape")
}

/// Source coordinate of output pixel `(y, x)` under a rotation about the image center.
#[inline]
fn rotate_source(y: usize, x: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    (cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)
}

/// Bilinear rotation with edge replication.
pub fn rotate_image(img: &ImageTensor, angle_deg: f64) -> ImageTensor {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w, c) = img.shape();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let (sy, sx) = rotate_source(y, x, h, w, cos, sin);
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |yy: usize, xx: usize| img.get(yy, xx, ch);
        let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
        let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
    .expect("same shape")
}

/// Nearest-neighbour rotation; pixels sourced from outside the mask become 0.
pub fn rotate_mask(mask: &StrokeMask, angle_deg: f64) -> StrokeMask {
    if angle_deg == 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let data = (0..h * w)
        .map(|i| {
            let (sy, sx) = rotate_source(i / w, i % w, h, w, cos, sin);
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
                0.0
            } else {
                mask.get(ry as usize, rx as usize)
            }
        })
        .collect();
    StrokeMask::new(h, w, data).expect("same shape")
}

pub fn apply_geometric(pair: &SamplePair, t: GeometricTransform) -> SamplePair {
    let (mut original, mut gt, mut stroke) = if t.flip {
        (
            flip_image(&pair.original),
            flip_image(&pair.erased_gt),
            flip_mask(&pair.stroke_gt),
        )
    } else {
        (
            pair.original.clone(),
            pair.erased_gt.clone(),
            pair.stroke_gt.clone(),
        )
    };
    if t.angle_deg != 0.0 {
        original = rotate_image(&original, t.angle_deg);
        gt = rotate_image(&gt, t.angle_deg);
        stroke = rotate_mask(&stroke, t.angle_deg);
    }
    SamplePair {
        original,
        erased_gt: gt,
        stroke_gt: stroke,
        id: pair.id.clone(),
    }
}

/// Random horizontal flip and small rotation, applied identically to all three
/// members of the pair.
pub fn train_augment<R: Rng + ?Sized>(
    pair: &SamplePair,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> SamplePair {
    apply_geometric(pair, GeometricTransform::sample(cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn unit_factor_is_identity() {
        let img = random_image(1, 12, 10);
        for kind in VariantKind::ALL {
            let out = apply_variant(&img, VariantSpec { kind, factor: 1.0 }).unwrap();
            assert_eq!(out, img, "{kind:?}");
        }
    }

    #[test]
    fn brightness_doubles() {
        let img = ImageTensor::filled(8, 8, 3, 0.25).unwrap();
        let out = apply_variant(
            &img,
            VariantSpec {
                kind: VariantKind::Brightness,
                factor: 2.0,
            },
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn contrast_matches_pixel_formula() {
        let img = random_image(7, 9, 11);
        let f = 1.37;
        let out = apply_variant(
            &img,
            VariantSpec {
                kind: VariantKind::Contrast,
                factor: f,
            },
        )
        .unwrap();
        let mut mean = 0.0;
        for y in 0..9 {
            for x in 0..11 {
                mean += 0.299 * img.get(y, x, 0)
                    + 0.587 * img.get(y, x, 1)
                    + 0.114 * img.get(y, x, 2);
            }
        }
        mean /= 99.0;
        for y in 0..9 {
            for x in 0..11 {
                for c in 0..3 {
                    let expect = (mean + f * (img.get(y, x, c) - mean)).clamp(0.0, 1.0);
                    assert!((out.get(y, x, c) as f64 - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_nonpositive_factor() {
        let img = random_image(2, 8, 8);
        for factor in [0.0, -1.0, f64::NAN] {
            let r = apply_variant(
                &img,
                VariantSpec {
                    kind: VariantKind::Sharpness,
                    factor,
                },
            );
            assert!(matches!(r, Err(PenError::InvalidFactor(_))));
        }
    }

    #[test]
    fn variant_pairs_are_seeded_and_cover_all_kinds() {
        let img = random_image(3, 8, 8);
        let cfg = AugmentConfig::default();
        let a = sample_variant_pair(&img, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_variant_pair(&img, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.spec_a, a.spec_b), (b.spec_a, b.spec_b));
        assert_eq!(a.a.shape(), img.shape());
        assert_eq!(a.b.shape(), img.shape());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = [0usize; 4];
        for _ in 0..1000 {
            let s = sample_variant_spec(&cfg, &mut rng);
            assert!((0.5..=1.5).contains(&s.factor));
            seen[VariantKind::ALL.iter().position(|k| *k == s.kind).unwrap()] += 1;
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    }

    #[test]
    fn outputs_stay_in_range() {
        let img = random_image(5, 10, 10);
        for kind in VariantKind::ALL {
            for factor in [0.1, 0.5, 1.5, 3.0] {
                let out = apply_variant(&img, VariantSpec { kind, factor }).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    fn random_pair(seed: u64) -> SamplePair {
        let original = random_image(seed, 16, 16);
        let gt = random_image(seed + 100, 16, 16);
        let stroke = crate::synthgen::derive_stroke_target(
            &original,
            &gt,
            crate::synthgen::StrokeThreshold::default(),
        )
        .unwrap();
        SamplePair::new("p", original, gt, stroke).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let pair = random_pair(1);
        let t = GeometricTransform {
            flip: true,
            angle_deg: 0.0,
        };
        let twice = apply_geometric(&apply_geometric(&pair, t), t);
        assert_eq!(twice, pair);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let pair = random_pair(2);
        let out = apply_geometric(
            &pair,
            GeometricTransform {
                flip: false,
                angle_deg: 0.0,
            },
        );
        assert_eq!(out, pair);
    }
}
