use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the constrained (high-pass) filter bank in front of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstrainedConvSpec {
    pub num_filters: usize,
    /// Odd spatial support, so that a center tap exists.
    pub support: usize,
    pub in_channels: usize,
}

impl ConstrainedConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_filters == 0 {
            return Err(Error::Config("constrained conv needs at least one filter".into()));
        }
        if self.support == 0 || self.support % 2 == 0 {
            return Err(Error::Config(format!(
                "constrained conv support must be odd, got {}",
                self.support
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Number of weights in one filter (all taps over all input channels).
    pub fn taps(&self) -> usize {
        self.support * self.support * self.in_channels
    }
}

/// How the second half of the encoder head is turned into a positive scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleParam {
    /// `sigma = softplus(pre)`
    Softplus,
    /// `sigma = exp(pre / 2)`, i.e. the head predicts a log-variance.
    ExpHalfLogvar,
}

/// Minimum standard deviation of the stochastic code.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Each group is `conv(k0) -> res.block -> conv(k1) -> res.block`.
    pub num_residual_groups: usize,
    /// Valid-padding kernel sizes of the two plain convolutions in a group.
    pub group_kernels: [usize; 2],
    pub code_dim: usize,
    pub scale: ScaleParam,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub constrained: ConstrainedConvSpec,
    pub encoder: EncoderConfig,
    /// Number of camera-model classes seen by the decoder.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: 17x17 patches, 16 channels, one group, d = 8, 4 classes.
    fn default() -> Self {
        Self {
            constrained: ConstrainedConvSpec {
                num_filters: 16,
                support: 3,
                in_channels: 3,
            },
            encoder: EncoderConfig {
                patch_size: 17,
                channels: 16,
                num_residual_groups: 1,
                group_kernels: [7, 5],
                code_dim: 8,
                scale: ScaleParam::Softplus,
            },
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    /// Full-size network: 49x49 patches, 64 filters everywhere, four groups, 36-dim code.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            constrained: ConstrainedConvSpec {
                num_filters: 64,
                support: 3,
                in_channels: 3,
            },
            encoder: EncoderConfig {
                patch_size: 49,
                channels: 64,
                num_residual_groups: 4,
                group_kernels: [7, 5],
                code_dim: 36,
                scale: ScaleParam::Softplus,
            },
            num_classes,
        }
    }

    /// Small network used for gradient checks: 9x9 patches, d = 4.
    pub fn tiny() -> Self {
        Self {
            constrained: ConstrainedConvSpec {
                num_filters: 3,
                support: 3,
                in_channels: 3,
            },
            encoder: EncoderConfig {
                patch_size: 9,
                channels: 3,
                num_residual_groups: 1,
                group_kernels: [3, 3],
                code_dim: 4,
                scale: ScaleParam::Softplus,
            },
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constrained.validate()?;
        let e = &self.encoder;
        if e.channels == 0 || e.code_dim == 0 {
            return Err(Error::Config("channels and code_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if e.group_kernels.iter().any(|&k| k == 0) {
            return Err(Error::Config("group kernels must be positive".into()));
        }
        self.final_kernel().map(|_| ())
    }

    /// Spatial size left after the constrained layer and all groups; the last
    /// plain convolution uses it as its kernel so the body ends at 1x1.
    pub fn final_kernel(&self) -> Result<usize> {
        let e = &self.encoder;
        let shrink_per_group = e.group_kernels[0] + e.group_kernels[1] - 2;
        let total = (self.constrained.support - 1) + e.num_residual_groups * shrink_per_group;
        if e.patch_size <= total {
            return Err(Error::Config(format!(
                "patch size {} too small: constrained layer and {} group(s) consume {} pixels",
                e.patch_size, e.num_residual_groups, total
            )));
        }
        Ok(e.patch_size - total)
    }
}
