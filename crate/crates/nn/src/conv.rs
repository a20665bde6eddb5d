//! im2col / col2im kernels for 2-D convolution over `[N, C, H, W]` buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `C·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// The same convolution applied to a single sample.
    pub fn sample(&self) -> Self {
        ConvGeometry { batch: 1, ..*self }
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Columns of the column matrix: `N·H_out·W_out`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies
/// inside `[0, width)`.
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, width: usize) -> (usize, usize) {
    // ix = ox·stride + offset − pad ≥ 0  ⇔  ox ≥ ceil((pad − offset) / stride)
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    // ix < width  ⇔  ox·stride < width + pad − offset
    let lim = width + pad - offset.min(width + pad);
    let hi = lim.div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

/// Unfold `x` into a `[C·k·k, N·H_out·W_out]` row-major matrix.
#[cfg(test)]
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
    im2col_into(x, g, &mut cols);
    cols
}

/// As [`im2col`], writing into a zeroed buffer of the right size.
pub fn im2col_into<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw_out = ho * wo;
    let positions = g.positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let row_buf = &mut cols[row * positions..(row + 1) * positions];
                let (lo, hi) = valid_range(wo, g.stride, kj, g.pad, g.width);
                for n in 0..g.batch {
                    let plane = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut row_buf[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                        } else {
                            for (k, d) in dst_row[lo..hi].iter_mut().enumerate() {
                                *d = src_row[ix0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the input layout (accumulating).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw_out = ho * wo;
    let positions = g.positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let row_buf = &cols[row * positions..(row + 1) * positions];
                let (lo, hi) = valid_range(wo, g.stride, kj, g.pad, g.width);
                for n in 0..g.batch {
                    let plane = &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &row_buf[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        let src_row = &src[oy * wo..(oy + 1) * wo];
                        let ix0 = lo * g.stride + kj - g.pad;
                        for (k, &s) in src_row[lo..hi].iter().enumerate() {
                            let d = &mut dst_row[ix0 + k * g.stride];
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution used as the oracle for the im2col path.
    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeometry, out_ch: usize) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.batch * out_ch * ho * wo];
        for n in 0..g.batch {
            for o in 0..out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += x
                                        [((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.in_channels + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                        out[((n * out_ch + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_product_matches_direct_convolution() {
        for &(stride, pad, h, w) in &[(1, 1, 5, 4), (2, 1, 6, 6), (2, 0, 5, 7), (1, 0, 3, 3)] {
            let g = ConvGeometry { batch: 2, in_channels: 3, height: h, width: w, kernel: 3, stride, pad };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wts: Vec<f64> = (0..4 * 27).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let cols = im2col(&x, &g);
            let p = g.positions();
            let hw = g.out_height() * g.out_width();
            let want = direct_conv(&x, &wts, &g, 4);
            for n in 0..2 {
                for o in 0..4 {
                    for q in 0..hw {
                        let got: f64 = (0..27).map(|r| wts[o * 27 + r] * cols[r * p + n * hw + q]).sum();
                        let idx = (n * 4 + o) * hw + q;
                        assert!((got - want[idx]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry { batch: 2, in_channels: 2, height: 5, width: 6, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 2 * 30).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
