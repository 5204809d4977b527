use crate::{Result, Scalar, TensorError};

/// Shape bookkeeping for a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, channels, height, width] = input_shape else {
            return Err(TensorError::Geometry(format!(
                "expected NCHW input, got shape {input_shape:?}"
            )));
        };
        let (kernel_h, kernel_w) = kernel;
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(TensorError::Geometry(
                "stride and kernel must be positive".into(),
            ));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if ph < kernel_h || pw < kernel_w {
            return Err(TensorError::Geometry(format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Rows of the patch matrix: one per (batch, out_y, out_x).
    pub fn patch_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the patch matrix: one per (channel, ky, kx).
    pub fn patch_cols(&self) -> usize {
        self.channels * self.kernel_area()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    pub(crate) fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (cols, area) = (self.patch_cols(), self.kernel_area());
        let mut out = vec![T::zero(); self.patch_rows() * cols];
        self.for_each_tap(|row, col, src| out[row * cols + col] = x[src]);
        debug_assert_eq!(out.len(), self.patch_rows() * self.channels * area);
        out
    }

    pub(crate) fn col2im<T: Scalar>(&self, patches: &[T]) -> Vec<T> {
        let cols = self.patch_cols();
        let mut out = vec![T::zero(); self.input_len()];
        self.for_each_tap(|row, col, src| out[src] += patches[row * cols + col]);
        out
    }

    /// Visits every in-bounds (patch row, patch column, input index) triple in
    /// a fixed order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (area, hw) = (self.kernel_area(), self.height * self.width);
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for c in 0..self.channels {
                        let base = (b * self.channels + c) * hw;
                        for ky in 0..self.kernel_h {
                            let Some(iy) = self.source(oy, ky, self.height) else {
                                continue;
                            };
                            for kx in 0..self.kernel_w {
                                let Some(ix) = self.source(ox, kx, self.width) else {
                                    continue;
                                };
                                f(
                                    row,
                                    c * area + ky * self.kernel_w + kx,
                                    base + iy * self.width + ix,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    /// Calls `f(out_index, kernel_offset, out_channel, input_index)` for every
    /// in-bounds tap of a depthwise convolution producing `out_channels`
    /// channels, where output channel `o` reads input channel `o / multiplier`.
    pub(crate) fn for_each_depthwise_tap(
        &self,
        out_channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let mult = out_channels / self.channels;
        let (hw, ohw) = (self.height * self.width, self.out_h * self.out_w);
        for b in 0..self.batch {
            for o in 0..out_channels {
                let in_base = (b * self.channels + o / mult) * hw;
                let out_base = (b * out_channels + o) * ohw;
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        let out_idx = out_base + oy * self.out_w + ox;
                        for ky in 0..self.kernel_h {
                            let Some(iy) = self.source(oy, ky, self.height) else {
                                continue;
                            };
                            for kx in 0..self.kernel_w {
                                let Some(ix) = self.source(ox, kx, self.width) else {
                                    continue;
                                };
                                f(
                                    out_idx,
                                    ky * self.kernel_w + kx,
                                    o,
                                    in_base + iy * self.width + ix,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B·oh·ow, C]` rows to `[B, C, oh, ow]`.
pub(crate) fn rows_to_nchw<T: Scalar>(rows: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for bi in 0..b {
        for p in 0..hw {
            let r = (bi * hw + p) * c;
            for ci in 0..c {
                out[(bi * c + ci) * hw + p] = rows[r + ci];
            }
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub(crate) fn nchw_to_rows<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for p in 0..hw {
            let r = (bi * hw + p) * c;
            for ci in 0..c {
                out[r + ci] = x[(bi * c + ci) * hw + p];
            }
        }
    }
    out
}
