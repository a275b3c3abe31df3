//! Generator-side objectives. All operate on `(B, C, H, W)` tensors and
//! realize every L1 norm as a mean over elements.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};
use crate::features::FeatureExtractor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    /// Auxiliary stroke BCE used while the stroke module trains jointly.
    pub lambda_stroke: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r1: 10.0,
            lambda_r2: 2.0,
            lambda_c: 0.1,
            lambda_s: 150.0,
            lambda_a: 0.1,
            lambda_stroke: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_r1,
            self.lambda_r2,
            self.lambda_c,
            self.lambda_s,
            self.lambda_a,
            self.lambda_stroke,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PenError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(PenError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mask_matches(img: &Tensor, mask: &Tensor) -> Result<()> {
    let (b, _, h, w) = img.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(PenError::ShapeMismatch(format!(
            "mask {:?} for image {:?}",
            mask.dims(),
            img.dims()
        )));
    }
    Ok(())
}

/// `|x|` whose subgradient at 0 is 0, so identical inputs yield exactly zero
/// gradient.
fn abs0(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&x.sign()?.detach())?)
}

fn l1_mean(x: &Tensor) -> Result<Tensor> {
    Ok(abs0(x)?.mean_all()?)
}

/// Soft stroke map `max_c |img − erased|`, `(B, 1, H, W)`. No threshold, so it
/// stays differentiable.
pub fn extract_stroke(img: &Tensor, erased: &Tensor) -> Result<Tensor> {
    same_dims(img, erased, "extract_stroke")?;
    Ok(abs0(&(img - erased)?)?.max_keepdim(1)?)
}

/// Mean over pairs of the mean absolute difference between paired masks.
pub fn self_supervised_loss(strokes_a: &[Tensor], strokes_b: &[Tensor]) -> Result<Tensor> {
    if strokes_a.len() != strokes_b.len() {
        return Err(PenError::LengthMismatch {
            left: strokes_a.len(),
            right: strokes_b.len(),
        });
    }
    if strokes_a.is_empty() {
        return Err(PenError::LengthMismatch { left: 0, right: 0 });
    }
    let mut terms = Vec::with_capacity(strokes_a.len());
    for (a, b) in strokes_a.iter().zip(strokes_b) {
        same_dims(a, b, "self_supervised_loss")?;
        terms.push(l1_mean(&(a - b)?)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Stroke-weighted L1: `λ_r1·mean|S⊙Δ| + λ_r2·mean|(1−S)⊙Δ|` with `Δ = out − gt`.
pub fn reconstruction_loss(
    out: &Tensor,
    gt: &Tensor,
    stroke: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    same_dims(out, gt, "reconstruction_loss")?;
    mask_matches(out, stroke)?;
    let diff = (out - gt)?;
    let inside = l1_mean(&diff.broadcast_mul(stroke)?)?;
    let outside = l1_mean(&diff.broadcast_mul(&stroke.affine(-1.0, 1.0)?)?)?;
    Ok(((inside * w.lambda_r1)? + (outside * w.lambda_r2)?)?)
}

/// `gt ⊙ (1 − S) + out ⊙ S`.
pub fn compose_image(out: &Tensor, gt: &Tensor, stroke: &Tensor) -> Result<Tensor> {
    same_dims(out, gt, "compose_image")?;
    mask_matches(out, stroke)?;
    Ok((gt.broadcast_mul(&stroke.affine(-1.0, 1.0)?)? + out.broadcast_mul(stroke)?)?)
}

/// `Σ_n mean|φ_n(out) − φ_n(gt)| + mean|φ_n(composed) − φ_n(gt)|`.
pub fn content_loss(
    out: &Tensor,
    gt: &Tensor,
    composed: &Tensor,
    fx: &FeatureExtractor,
) -> Result<Tensor> {
    same_dims(out, gt, "content_loss")?;
    same_dims(composed, gt, "content_loss")?;
    let f_out = fx.forward(out)?;
    let f_gt = fx.forward(gt)?;
    let f_comp = fx.forward(composed)?;
    let mut total = Tensor::zeros((), out.dtype(), out.device())?;
    for ((o, g), c) in f_out.iter().zip(&f_gt).zip(&f_comp) {
        total = (total + l1_mean(&(o - g)?)?)?;
        total = (total + l1_mean(&(c - g)?)?)?;
    }
    Ok(total)
}

/// Unnormalized Gram matrix `φ φᵀ` over flattened positions, `(B, C, C)`.
pub fn gram_matrix(feat: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feat.dims4()?;
    let flat = feat.reshape((b, c, h * w))?;
    Ok(flat.matmul(&flat.transpose(1, 2)?)?)
}

/// `Σ_n mean|G(φ_n(out)) − G(φ_n(gt))| / (h_n·w_n·c_n)`.
pub fn style_loss(out: &Tensor, gt: &Tensor, fx: &FeatureExtractor) -> Result<Tensor> {
    same_dims(out, gt, "style_loss")?;
    let f_out = fx.forward(out)?;
    let f_gt = fx.forward(gt)?;
    let mut total = Tensor::zeros((), out.dtype(), out.device())?;
    for (o, g) in f_out.iter().zip(&f_gt) {
        let (_, c, h, w) = o.dims4()?;
        let term = l1_mean(&(gram_matrix(o)? - gram_matrix(g)?)?)?;
        total = (total + (term / (h * w * c) as f64)?)?;
    }
    Ok(total)
}

/// Mean binary cross-entropy between `sigmoid(logits)` and a `{0,1}` target,
/// in the numerically stable logits form.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_dims(logits, target, "bce_with_logits")?;
    let pos = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((pos - logits.mul(target)?)? + soft)?.mean_all()?)
}

/// Scalar loss terms combined by [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub content: f64,
    pub style: f64,
    pub adversarial: f64,
}

/// `L_r + λ_c·L_c + λ_s·L_s + λ_a·L_a`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("reconstruction", terms.reconstruction),
        ("content", terms.content),
        ("style", terms.style),
        ("adversarial", terms.adversarial),
    ] {
        if !v.is_finite() {
            return Err(PenError::NonFiniteTerm(name.into()));
        }
    }
    Ok(terms.reconstruction
        + w.lambda_c * terms.content
        + w.lambda_s * terms.style
        + w.lambda_a * terms.adversarial)
}

/// Tensor form of [`total_loss`] for backpropagation.
pub fn total_loss_tensor(
    reconstruction: &Tensor,
    content: &Tensor,
    style: &Tensor,
    adversarial: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    Ok(
        (((reconstruction + (content * w.lambda_c)?)? + (style * w.lambda_s)?)?
            + (adversarial * w.lambda_a)?)?,
    )
}

/// Per-sample mean over channels and pixels, `(B,)`.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(vals: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_slice(vals, shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn default_total() {
        let terms = LossTerms {
            reconstruction: 1.0,
            content: 1.0,
            style: 1.0,
            adversarial: 1.0,
        };
        let v = total_loss(&terms, &LossWeights::default()).unwrap();
        assert!((v - 151.2).abs() < 1e-12);
        let zero = LossTerms {
            reconstruction: 0.0,
            content: 0.0,
            style: 0.0,
            adversarial: 0.0,
        };
        assert_eq!(total_loss(&zero, &LossWeights::default()).unwrap(), 0.0);
        let bad = LossTerms {
            content: f64::NAN,
            ..terms
        };
        assert!(matches!(
            total_loss(&bad, &LossWeights::default()),
            Err(PenError::NonFiniteTerm(_))
        ));
    }

    #[test]
    fn doubling_style_weight_doubles_style_part() {
        let terms = LossTerms {
            reconstruction: 0.3,
            content: 0.7,
            style: 0.011,
            adversarial: -0.4,
        };
        let w = LossWeights::default();
        let w2 = LossWeights {
            lambda_s: 2.0 * w.lambda_s,
            ..w
        };
        let d = total_loss(&terms, &w2).unwrap() - total_loss(&terms, &w).unwrap();
        assert!((d - w.lambda_s * terms.style).abs() < 1e-12);
    }

    #[test]
    fn extract_stroke_limits() {
        let ones = Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let s = extract_stroke(&ones, &zeros).unwrap();
        assert_eq!(s.dims(), &[1, 1, 4, 4]);
        assert_eq!(scalar(&s.mean_all().unwrap()), 1.0);
        assert_eq!(
            scalar(&extract_stroke(&ones, &ones).unwrap().sum_all().unwrap()),
            0.0
        );
    }

    #[test]
    fn self_supervised_limits() {
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(
            scalar(&self_supervised_loss(&[ones.clone()], &[zeros.clone()]).unwrap()),
            1.0
        );
        assert_eq!(
            scalar(&self_supervised_loss(&[ones.clone()], &[ones.clone()]).unwrap()),
            0.0
        );
        assert!(matches!(
            self_supervised_loss(&[ones.clone()], &[]),
            Err(PenError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn reconstruction_limits() {
        let w = LossWeights::default();
        let out = t(
            &(0..12).map(|i| i as f64 / 12.0).collect::<Vec<_>>(),
            (1, 3, 2, 2),
        );
        let gt = out.affine(0.5, 0.1).unwrap();
        let l1 = scalar(&(&out - &gt).unwrap().abs().unwrap().mean_all().unwrap());
        let ones = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert!(
            (scalar(&reconstruction_loss(&out, &gt, &ones, &w).unwrap()) - 10.0 * l1).abs() < 1e-12
        );
        assert!(
            (scalar(&reconstruction_loss(&out, &gt, &zeros, &w).unwrap()) - 2.0 * l1).abs() < 1e-12
        );
        assert!(matches!(
            reconstruction_loss(&out, &gt.narrow(3, 0, 1).unwrap(), &ones, &w),
            Err(PenError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn compose_limits() {
        let out = Tensor::full(0.8f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let gt = Tensor::full(0.2f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let m = |v: f64| Tensor::full(v, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let vals = |x: Tensor| x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(
            vals(compose_image(&out, &gt, &m(0.0)).unwrap()),
            vals(gt.clone())
        );
        assert_eq!(
            vals(compose_image(&out, &gt, &m(1.0)).unwrap()),
            vals(out.clone())
        );
        for v in vals(compose_image(&out, &gt, &m(0.5)).unwrap()) {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_is_symmetric() {
        let vals: Vec<f64> = (0..2 * 5 * 3 * 4)
            .map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6)
            .collect();
        let g = gram_matrix(&t(&vals, (2, 5, 3, 4))).unwrap();
        assert_eq!(g.dims(), &[2, 5, 5]);
        let gt = g.transpose(1, 2).unwrap();
        let diff = scalar(&(g - gt).unwrap().abs().unwrap().max_all().unwrap());
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = t(&[-3.0, -0.5, 0.0, 2.5], (1, 1, 2, 2));
        let target = t(&[0.0, 1.0, 1.0, 0.0], (1, 1, 2, 2));
        let got = scalar(&bce_with_logits(&logits, &target).unwrap());
        let expect: f64 = [(-3.0f64, 0.0f64), (-0.5, 1.0), (0.0, 1.0), (2.5, 0.0)]
            .iter()
            .map(|&(x, y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((got - expect).abs() < 1e-12);
    }
}
