use serde::{Deserialize, Serialize};

use crate::{PlanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    DepthwiseConv2d,
}

/// Position of a layer in the network. Boundary layers may be kept dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    BoundaryFirst,
    BoundaryLast,
    #[default]
    Interior,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Shape description of one dense layer.
///
/// For convolutions `d_in`/`d_out` are channel counts and the weight is viewed
/// as the lowered `(d_in·kernel_h·kernel_w) × d_out` matrix. A depthwise layer
/// applies one `kernel_h × kernel_w` filter per output channel; `d_out` must be
/// a multiple of `d_in` (channel multiplier).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default = "one")]
    pub kernel_h: usize,
    #[serde(default = "one")]
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub out_h: usize,
    #[serde(default = "one")]
    pub out_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "yes")]
    pub has_bias: bool,
    #[serde(default)]
    pub role: LayerRole,
}

impl LayerSpec {
    pub fn linear(d_in: usize, d_out: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            d_in,
            d_out,
            kernel_h: 1,
            kernel_w: 1,
            out_h: 1,
            out_w: 1,
            stride: 1,
            padding: 0,
            has_bias: true,
            role: LayerRole::Interior,
        }
    }

    pub fn conv2d(c_in: usize, c_out: usize, kernel: (usize, usize), out: (usize, usize)) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            out_h: out.0,
            out_w: out.1,
            ..Self::linear(c_in, c_out)
        }
    }

    pub fn depthwise(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        out: (usize, usize),
    ) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv2d,
            ..Self::conv2d(c_in, c_out, kernel, out)
        }
    }

    pub fn with_role(mut self, role: LayerRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_geometry(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("out_h", self.out_h),
            ("out_w", self.out_w),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(PlanError::InvalidSpec(format!("{name} must be >= 1")));
        }
        match self.kind {
            LayerKind::Linear => {
                if self.kernel_h != 1
                    || self.kernel_w != 1
                    || self.out_h != 1
                    || self.out_w != 1
                    || self.stride != 1
                    || self.padding != 0
                {
                    return Err(PlanError::InvalidSpec(
                        "linear layers have unit kernel and spatial size".into(),
                    ));
                }
            }
            LayerKind::Conv2d => {}
            LayerKind::DepthwiseConv2d => {
                if !self.d_out.is_multiple_of(self.d_in) {
                    return Err(PlanError::InvalidSpec(format!(
                        "depthwise d_out {} is not a multiple of d_in {}",
                        self.d_out, self.d_in
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows of the lowered weight matrix.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv2d => self.kernel_h * self.kernel_w,
            _ => self.d_in * self.kernel_h * self.kernel_w,
        }
    }

    pub fn fan_out(&self) -> usize {
        self.d_out
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn weight_positions(&self) -> u64 {
        self.fan_in() as u64 * self.fan_out() as u64
    }

    /// Number of output pixels each weight is applied at.
    pub fn spatial(&self) -> u64 {
        self.out_h as u64 * self.out_w as u64
    }

    pub fn dense_macs(&self) -> u64 {
        self.weight_positions() * self.spatial()
    }

    /// Width of the flattened output feature vector.
    pub fn output_features(&self) -> usize {
        self.d_out * self.out_h * self.out_w
    }

    pub fn is_conv(&self) -> bool {
        !matches!(self.kind, LayerKind::Linear)
    }

    pub fn is_boundary(&self) -> bool {
        !matches!(self.role, LayerRole::Interior)
    }
}

/// MACs of a dense layer at the given batch size and uniform sparsity.
pub fn flop_count(spec: &LayerSpec, batch: usize, sparsity: f64) -> Result<u64> {
    spec.validate()?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(PlanError::InvalidSparsity(sparsity));
    }
    let dense = batch as u64 * spec.dense_macs();
    Ok((dense as f64 * (1.0 - sparsity)).round() as u64)
}
