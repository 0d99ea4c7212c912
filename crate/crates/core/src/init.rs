//! Initialization schemes for the frozen (never-trained) layers.
//!
//! Frozen weights are drawn from zero-mean normals. Two schemes are
//! supported: a plain scheme with fixed standard deviations per layer
//! family, and a scalable scheme whose deviation shrinks with the layer's
//! input width so activation variance survives depth. With gain `g` and
//! input width `fan_in`, the scalable deviation solves
//! `fan_in * Var(w) = g^2` — or `2 g^2` when the layer's input has already
//! passed through a relu, which halves its variance.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Plain-scheme deviation for frozen self-attention projections.
pub const DEFAULT_SIGMA_SA: f64 = 0.01;
/// Plain-scheme deviation for frozen feed-forward first layers.
pub const DEFAULT_SIGMA_FF: f64 = 0.05;
/// Scalable-scheme gain for frozen self-attention projections.
pub const DEFAULT_GAIN_SA: f64 = 2.5;
/// Scalable-scheme gain for frozen feed-forward first layers.
pub const DEFAULT_GAIN_FF: f64 = 1.5;

/// Which family a frozen tensor belongs to; picks its distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrozenRole {
    /// Query/key/value projections inside randomized attention.
    AttentionQkv,
    /// First weight matrix and bias of a randomized feed-forward block.
    FeedForwardFirst,
    /// Externally supplied values (e.g. fixed word vectors); never redrawn.
    Pretrained,
}

/// How frozen layers are (re)drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    /// N(0, sigma^2) with a fixed sigma per layer family.
    StandardNormal { sigma_sa: f64, sigma_ff: f64 },
    /// N(0, (gain / sqrt(fan_in))^2): variance-preserving up to the gain.
    ScalableKaiming { gain_sa: f64, gain_ff: f64 },
}

impl InitSpec {
    pub fn standard_defaults() -> Self {
        InitSpec::StandardNormal { sigma_sa: DEFAULT_SIGMA_SA, sigma_ff: DEFAULT_SIGMA_FF }
    }

    pub fn kaiming_defaults() -> Self {
        InitSpec::ScalableKaiming { gain_sa: DEFAULT_GAIN_SA, gain_ff: DEFAULT_GAIN_FF }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = match *self {
            InitSpec::StandardNormal { sigma_sa, sigma_ff } => (sigma_sa, sigma_ff),
            InitSpec::ScalableKaiming { gain_sa, gain_ff } => (gain_sa, gain_ff),
        };
        for v in [a, b] {
            if !v.is_finite() || v <= 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "init parameters must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Standard deviation used to draw a frozen tensor of the given role.
    /// Both frozen families consume raw (pre-relu) inputs, so the scalable
    /// branch never takes the doubled-variance form.
    pub fn frozen_std(&self, role: FrozenRole, fan_in: usize) -> Result<f64> {
        let std = match (*self, role) {
            (_, FrozenRole::Pretrained) => {
                return Err(CoreError::InvalidConfig(
                    "pretrained frozen tensors are never redrawn".into(),
                ));
            }
            (InitSpec::StandardNormal { sigma_sa, .. }, FrozenRole::AttentionQkv) => sigma_sa,
            (InitSpec::StandardNormal { sigma_ff, .. }, FrozenRole::FeedForwardFirst) => sigma_ff,
            (InitSpec::ScalableKaiming { gain_sa, .. }, FrozenRole::AttentionQkv) => {
                kaiming_std(fan_in, gain_sa, false)?
            }
            (InitSpec::ScalableKaiming { gain_ff, .. }, FrozenRole::FeedForwardFirst) => {
                kaiming_std(fan_in, gain_ff, false)?
            }
        };
        Ok(std)
    }
}

/// Deviation that keeps `fan_in * Var(w) = gain^2` (doubled when the
/// input already went through a relu, which halves its variance).
pub fn kaiming_std(fan_in: usize, gain: f64, relu_on_input: bool) -> Result<f64> {
    if fan_in == 0 {
        return Err(CoreError::InvalidConfig("kaiming_std needs fan_in > 0".into()));
    }
    if !gain.is_finite() || gain <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("kaiming_std needs a positive gain, got {gain}")));
    }
    let var = if relu_on_input { 2.0 * gain * gain } else { gain * gain };
    Ok((var / fan_in as f64).sqrt())
}

/// Draw `numel` values from N(0, std^2).
pub fn sample_normal(numel: usize, std: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| CoreError::InvalidConfig(format!("normal({std}): {e}")))?;
    Ok((0..numel).map(|_| normal.sample(rng)).collect())
}

/// Draw a frozen tensor with i.i.d. N(0, sigma^2) entries.
pub fn std_normal_init(shape: [usize; 2], sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("std_normal_init needs sigma > 0, got {sigma}")));
    }
    Tensor::new(shape, sample_normal(shape[0] * shape[1], sigma, rng)?, false)
}

/// Draw a frozen tensor for a layer role under the given scheme. `fan_in`
/// is the layer's input width: the row count for weight matrices, and the
/// owning layer's input width for bias rows (whose shape cannot carry it).
pub fn init_frozen_layer(
    role: FrozenRole,
    shape: [usize; 2],
    fan_in: usize,
    spec: &InitSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let std = spec.frozen_std(role, fan_in)?;
    std_normal_init(shape, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn kaiming_std_solves_variance_equation() {
        // fan_in * std^2 = gain^2, checked to rounding error.
        let std = kaiming_std(512, 1.0, false).unwrap();
        assert!((512.0 * std * std - 1.0).abs() < 1e-12);
        let std = kaiming_std(300, 2.5, false).unwrap();
        assert!((300.0 * std * std - 6.25).abs() / 6.25 < 1e-12);
        // With a relu on the input the variance target doubles.
        let std = kaiming_std(300, 1.5, true).unwrap();
        assert!((300.0 * std * std - 2.0 * 2.25).abs() / 4.5 < 1e-12);
    }

    #[test]
    fn kaiming_std_matches_closed_forms() {
        assert_eq!(kaiming_std(1, 1.0, false).unwrap(), 1.0);
        let v = kaiming_std(300, 1.0, false).unwrap();
        assert!((v - 0.057_735_026_918_962_58).abs() < 1e-15);
        let v = kaiming_std(300, 2.5, false).unwrap();
        assert!((v - 0.144_337_567_297_406_44).abs() < 1e-15);
    }

    #[test]
    fn frozen_std_picks_the_right_family() {
        let plain = InitSpec::standard_defaults();
        assert_eq!(plain.frozen_std(FrozenRole::AttentionQkv, 300).unwrap(), 0.01);
        assert_eq!(plain.frozen_std(FrozenRole::FeedForwardFirst, 300).unwrap(), 0.05);

        let scaled = InitSpec::kaiming_defaults();
        let attn = scaled.frozen_std(FrozenRole::AttentionQkv, 300).unwrap();
        assert!((attn - 2.5 / 300.0_f64.sqrt()).abs() < 1e-15);
        let ff = scaled.frozen_std(FrozenRole::FeedForwardFirst, 300).unwrap();
        assert!((ff - 1.5 / 300.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pretrained_role_is_never_redrawn() {
        let spec = InitSpec::standard_defaults();
        assert!(spec.frozen_std(FrozenRole::Pretrained, 300).is_err());
    }

    #[test]
    fn frozen_layer_tensors_are_grad_disabled() {
        let spec = InitSpec::standard_defaults();
        let mut rng = SeedStream::new(3).child("t").rng();
        let w = init_frozen_layer(FrozenRole::AttentionQkv, [8, 4], 8, &spec, &mut rng).unwrap();
        assert!(!w.grad_enabled());
        assert_eq!(w.shape(), [8, 4]);
        let b = std_normal_init([1, 16], 0.05, &mut rng).unwrap();
        assert!(!b.grad_enabled());
    }

    #[test]
    fn sample_statistics_match_requested_distribution() {
        let mut rng = SeedStream::new(11).child("init-test").rng();
        let draws = sample_normal(50_000, 0.05, &mut rng).unwrap();
        let (mean, std) = mean_std(&draws);
        // Standard error of the mean is 0.05 / sqrt(50000) ~ 2.2e-4.
        assert!(mean.abs() < 3.0 * 0.05 / (50_000.0_f64).sqrt(), "mean {mean}");
        assert!((std - 0.05).abs() / 0.05 < 0.05, "std {std}");
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let a = sample_normal(100, 0.01, &mut SeedStream::new(5).child("w").rng()).unwrap();
        let b = sample_normal(100, 0.01, &mut SeedStream::new(5).child("w").rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(kaiming_std(0, 1.0, false).is_err());
        assert!(kaiming_std(10, 0.0, false).is_err());
        assert!(kaiming_std(10, f64::NAN, false).is_err());
        let mut rng = SeedStream::new(1).rng();
        assert!(std_normal_init([2, 2], 0.0, &mut rng).is_err());
        assert!((InitSpec::StandardNormal { sigma_sa: -0.01, sigma_ff: 0.05 }).validate().is_err());
        assert!((InitSpec::ScalableKaiming { gain_sa: 2.5, gain_ff: f64::INFINITY }).validate().is_err());
        assert!(InitSpec::standard_defaults().validate().is_ok());
        assert!(InitSpec::kaiming_defaults().validate().is_ok());
    }

    #[test]
    fn variance_propagates_through_scaled_draws() {
        // For W with fan_in * Var(w) = gain^2 and x ~ N(0,1), each entry of
        // x·W has variance ~ gain^2.
        let fan_in = 256;
        let gain = 1.5;
        let std = kaiming_std(fan_in, gain, false).unwrap();
        let mut rng = SeedStream::new(21).child("vp").rng();
        let w = sample_normal(fan_in * 4, std, &mut rng).unwrap();
        let mut outputs = Vec::new();
        for _ in 0..2_000 {
            let x = sample_normal(fan_in, 1.0, &mut rng).unwrap();
            for j in 0..4 {
                let y: f64 = (0..fan_in).map(|i| x[i] * w[i * 4 + j]).sum();
                outputs.push(y);
            }
        }
        let (_, out_std) = mean_std(&outputs);
        let ratio = (out_std * out_std) / (gain * gain);
        assert!((ratio - 1.0).abs() < 0.1, "variance ratio {ratio}");
    }

    proptest! {
        #[test]
        fn kaiming_variance_identity_holds(fan_in in 1usize..10_000, gain in 0.01f64..10.0) {
            let std = kaiming_std(fan_in, gain, false).unwrap();
            let lhs = fan_in as f64 * std * std;
            prop_assert!((lhs - gain * gain).abs() / (gain * gain) < 1e-12);
        }

        #[test]
        fn relu_flag_doubles_target_variance(fan_in in 1usize..10_000, gain in 0.01f64..10.0) {
            let plain = kaiming_std(fan_in, gain, false).unwrap();
            let relu = kaiming_std(fan_in, gain, true).unwrap();
            prop_assert!((relu / plain - 2.0_f64.sqrt()).abs() < 1e-12);
        }
    }
}
