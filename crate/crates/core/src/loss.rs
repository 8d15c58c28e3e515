//! Per-pixel RGB losses and simulated observation corruption.
//!
//! With `e = ŷ - y` (prediction minus target), each loss is a sum over the
//! three channels of:
//!
//! | kind          | value                              |
//! |---------------|------------------------------------|
//! | `L1`          | `|e|`                              |
//! | `L2`          | `e²`                               |
//! | `LogL1`       | `ln(1 + |e|)`                      |
//! | `RelativeL2`  | `e² / (ŷ² + ε)`                    |
//! | `Mape`        | `|e| / (|y| + ε)`                  |
//! | `Smape`       | `2|e| / (|ŷ| + |y| + ε)`           |
//! | `SmoothL1`    | `0.5 e²/β` if `|e| < β`, else `|e| - 0.5β` |
//!
//! Denominators that contain the prediction are detached: the gradient
//! only flows through the numerator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
    LogL1,
    RelativeL2,
    Mape,
    Smape,
    SmoothL1,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::L1,
        LossKind::L2,
        LossKind::LogL1,
        LossKind::RelativeL2,
        LossKind::Mape,
        LossKind::Smape,
        LossKind::SmoothL1,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::LogL1 => "log_l1",
            LossKind::RelativeL2 => "relative_l2",
            LossKind::Mape => "mape",
            LossKind::Smape => "smape",
            LossKind::SmoothL1 => "smooth_l1",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss {s:?}")))
    }
}

/// A loss kind together with its constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelLoss {
    pub kind: LossKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta() -> f64 {
    0.1
}

fn default_epsilon() -> f64 {
    1e-2
}

impl From<LossKind> for PixelLoss {
    fn from(kind: LossKind) -> Self {
        Self::new(kind)
    }
}

impl PixelLoss {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            beta: default_beta(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta > 0.0 && self.epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss constants must be positive (beta {}, epsilon {})",
                self.beta, self.epsilon
            )))
        }
    }

    /// Loss value with every detached denominator evaluated at `anchor`
    /// instead of `pred`. Differentiating this in `pred` with `anchor` held
    /// fixed gives exactly the gradient of [`loss_value_and_grad`].
    pub fn value_with_anchor(&self, pred: &Vec3, target: &Vec3, anchor: &Vec3) -> f64 {
        (0..3)
            .map(|c| self.channel(pred[c], target[c], anchor[c]).0)
            .sum()
    }

    fn channel(&self, pred: f64, target: f64, anchor: f64) -> (f64, f64) {
        let e = pred - target;
        let eps = self.epsilon;
        let sign = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self.kind {
            LossKind::L1 => (e.abs(), sign),
            LossKind::L2 => (e * e, 2.0 * e),
            LossKind::LogL1 => (e.abs().ln_1p(), sign / (1.0 + e.abs())),
            LossKind::RelativeL2 => {
                let d = anchor * anchor + eps;
                (e * e / d, 2.0 * e / d)
            }
            LossKind::Mape => {
                let d = target.abs() + eps;
                (e.abs() / d, sign / d)
            }
            LossKind::Smape => {
                let d = anchor.abs() + target.abs() + eps;
                (2.0 * e.abs() / d, 2.0 * sign / d)
            }
            LossKind::SmoothL1 => {
                let b = self.beta;
                if e.abs() < b {
                    (0.5 * e * e / b, e / b)
                } else {
                    (e.abs() - 0.5 * b, sign)
                }
            }
        }
    }
}

/// Loss summed over channels and its derivative with respect to `pred`.
pub fn loss_value_and_grad(loss: &PixelLoss, pred: &Vec3, target: &Vec3) -> (f64, Vec3) {
    let mut value = 0.0;
    let mut grad = Vec3::zeros();
    for c in 0..3 {
        let (v, g) = loss.channel(pred[c], target[c], pred[c]);
        value += v;
        grad[c] = g;
    }
    (value, grad)
}

/// Simulated disturbances applied to an observed image.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub gaussian_sigma: f64,
    pub poisson_scale: f64,
    pub brightness_delta: f64,
    pub missing_fraction: f64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Defaults for the loss ablation.
    pub fn ablation_default() -> Self {
        Self {
            gaussian_sigma: 0.05,
            poisson_scale: 100.0,
            brightness_delta: 0.1,
            missing_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_sigma >= 0.0
            && self.poisson_scale >= 0.0
            && (-1.0..=1.0).contains(&self.brightness_delta)
            && (0.0..=1.0).contains(&self.missing_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid corruption spec {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

/// Applies, in order: Gaussian noise, Poisson shot noise, a brightness
/// offset, and blacking out a random subset of pixels; then clamps to
/// `[0, 1]`. A zero field disables its step.
pub fn corrupt_image<R: Rng + ?Sized>(img: &Image, spec: &CorruptionSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let mut out = img.clone();
    if spec.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.gaussian_sigma)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for p in &mut out.pixels {
            for c in 0..3 {
                p[c] += normal.sample(rng);
            }
        }
    }
    if spec.poisson_scale > 0.0 {
        let s = spec.poisson_scale;
        for p in &mut out.pixels {
            for c in 0..3 {
                let lambda = p[c].max(0.0) * s;
                p[c] = if lambda > 0.0 {
                    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    dist.sample(rng) / s
                } else {
                    0.0
                };
            }
        }
    }
    if spec.brightness_delta != 0.0 {
        for p in &mut out.pixels {
            *p += Vec3::repeat(spec.brightness_delta);
        }
    }
    if spec.missing_fraction > 0.0 {
        let n = out.pixels.len();
        let count = ((spec.missing_fraction * n as f64).round() as usize).min(n);
        for i in rand::seq::index::sample(rng, n, count) {
            out.pixels[i] = Vec3::zeros();
        }
    }
    out.clamp();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_grad(loss: &PixelLoss, pred: &Vec3, target: &Vec3, h: f64) -> Vec3 {
        Vec3::from_fn(|c, _| {
            let mut p = *pred;
            let mut m = *pred;
            p[c] += h;
            m[c] -= h;
            (loss.value_with_anchor(&p, target, pred) - loss.value_with_anchor(&m, target, pred)) / (2.0 * h)
        })
    }

    #[test]
    fn zero_error_gives_zero_loss_and_gradient() {
        let y = Vec3::new(0.3, 0.0, 1.0);
        for kind in LossKind::ALL {
            let (v, g) = loss_value_and_grad(&kind.into(), &y, &y);
            assert_eq!(v, 0.0, "{kind}");
            assert_eq!(g, Vec3::zeros(), "{kind}");
        }
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let loss = PixelLoss::new(LossKind::SmoothL1);
        let y = Vec3::new(0.5, 0.2, 0.7);
        let pred = y + Vec3::new(0.05, -0.05, 0.05);
        let (v, g) = loss_value_and_grad(&loss, &pred, &y);
        assert!((v - 3.0 * 0.0125).abs() < 1e-12);
        let expected = Vec3::new(0.5, -0.5, 0.5);
        assert!((g - expected).norm() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(21, 0);
        for kind in LossKind::ALL {
            let loss = PixelLoss::new(kind);
            let mut checked = 0;
            while checked < 500 {
                let y = Vec3::from_fn(|_, _| rng.random::<f64>());
                let pred = Vec3::from_fn(|_, _| rng.random_range(-0.2..1.2));
                let e = pred - y;
                let near_kink = e.iter().any(|v| v.abs() < 1e-3 || (v.abs() - loss.beta).abs() < 1e-3);
                if near_kink {
                    continue;
                }
                checked += 1;
                let (_, g) = loss_value_and_grad(&loss, &pred, &y);
                let fd = fd_grad(&loss, &pred, &y, 1e-6);
                for c in 0..3 {
                    let rel = (g[c] - fd[c]).abs() / fd[c].abs().max(1e-8);
                    assert!(rel < 1e-4, "{kind} channel {c}: {} vs {}", g[c], fd[c]);
                }
            }
        }
    }

    #[test]
    fn mape_is_scale_independent_exactly_for_binary_scales() {
        let mut rng = RngStream::new(22, 0);
        for _ in 0..1000 {
            let y = Vec3::from_fn(|_, _| rng.random::<f64>());
            let pred = Vec3::from_fn(|_, _| rng.random::<f64>());
            let base = PixelLoss::new(LossKind::Mape);
            let v = loss_value_and_grad(&base, &pred, &y).0;
            for k in [0.25, 0.5, 2.0, 8.0] {
                let scaled = PixelLoss {
                    epsilon: base.epsilon * k,
                    ..base
                };
                let vk = loss_value_and_grad(&scaled, &(pred * k), &(y * k)).0;
                assert_eq!(v, vk);
            }
        }
    }

    #[test]
    fn relative_losses_are_asymmetric() {
        let a = Vec3::new(0.2, 0.2, 0.2);
        let b = Vec3::new(0.8, 0.8, 0.8);
        for kind in [LossKind::RelativeL2, LossKind::Mape] {
            let l = PixelLoss::new(kind);
            let ab = loss_value_and_grad(&l, &a, &b).0;
            let ba = loss_value_and_grad(&l, &b, &a).0;
            assert!((ab - ba).abs() > 1e-3, "{kind}");
        }
    }

    #[test]
    fn loss_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
        assert_eq!("Smooth-L1".parse::<LossKind>().unwrap(), LossKind::SmoothL1);
        assert!("huber".parse::<LossKind>().is_err());
    }

    #[test]
    fn identity_corruption_leaves_image_unchanged() {
        let img = Image::filled(8, 8, Vec3::new(0.1, 0.5, 0.9));
        let out = corrupt_image(&img, &CorruptionSpec::none(), &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_missing_fraction_blacks_out_everything() {
        let img = Image::filled(8, 8, Vec3::new(0.1, 0.5, 0.9));
        let spec = CorruptionSpec {
            missing_fraction: 1.0,
            ..CorruptionSpec::none()
        };
        let out = corrupt_image(&img, &spec, &mut RngStream::new(0, 0)).unwrap();
        assert!(out.pixels.iter().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = Image::filled(64, 64, Vec3::repeat(0.5));
        let spec = CorruptionSpec {
            gaussian_sigma: 0.1,
            ..CorruptionSpec::none()
        };
        let out = corrupt_image(&img, &spec, &mut RngStream::new(12, 0)).unwrap();
        let values: Vec<f64> = out.pixels.iter().flat_map(|p| p.iter().copied()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((std - 0.1).abs() < 0.01, "std {std}");
    }

    #[test]
    fn poisson_noise_is_unbiased_and_brightness_shifts() {
        let img = Image::filled(64, 64, Vec3::repeat(0.4));
        let spec = CorruptionSpec {
            poisson_scale: 100.0,
            brightness_delta: 0.1,
            ..CorruptionSpec::none()
        };
        let out = corrupt_image(&img, &spec, &mut RngStream::new(13, 0)).unwrap();
        let mean = out.pixels.iter().map(|p| p.sum()).sum::<f64>() / (3.0 * out.pixels.len() as f64);
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn invalid_corruption_spec_rejected() {
        let spec = CorruptionSpec {
            missing_fraction: 1.5,
            ..CorruptionSpec::none()
        };
        assert!(corrupt_image(&Image::new(2, 2), &spec, &mut RngStream::new(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_zero_only_at_equality(
            p in prop::array::uniform3(0.0f64..1.0),
            y in prop::array::uniform3(0.0f64..1.0),
        ) {
            let (p, y) = (Vec3::from(p), Vec3::from(y));
            for kind in LossKind::ALL {
                let v = loss_value_and_grad(&kind.into(), &p, &y).0;
                prop_assert!(v >= 0.0);
                if p != y {
                    prop_assert!(v > 0.0);
                }
            }
        }

        #[test]
        fn absolute_losses_are_symmetric(
            p in prop::array::uniform3(0.0f64..1.0),
            y in prop::array::uniform3(0.0f64..1.0),
        ) {
            let (p, y) = (Vec3::from(p), Vec3::from(y));
            for kind in [LossKind::L1, LossKind::L2, LossKind::LogL1, LossKind::SmoothL1] {
                let l = PixelLoss::new(kind);
                let a = loss_value_and_grad(&l, &p, &y).0;
                let b = loss_value_and_grad(&l, &y, &p).0;
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }

        #[test]
        fn mape_scale_independence(
            p in prop::array::uniform3(0.0f64..1.0),
            y in prop::array::uniform3(0.0f64..1.0),
            k in 0.01f64..100.0,
        ) {
            let (p, y) = (Vec3::from(p), Vec3::from(y));
            let base = PixelLoss::new(LossKind::Mape);
            let scaled = PixelLoss { epsilon: base.epsilon * k, ..base };
            let a = loss_value_and_grad(&base, &p, &y).0;
            let b = loss_value_and_grad(&scaled, &(p * k), &(y * k)).0;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
