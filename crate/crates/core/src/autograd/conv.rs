//! im2col lowering for 2-D convolution.

use crate::autograd::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride-1, unpadded convolution reads the image as its own
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn source(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        if pos < self.padding || pos - self.padding >= limit {
            None
        } else {
            Some(pos - self.padding)
        }
    }

    /// Output columns `lo..hi` whose kernel tap `kj` lands inside the row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.padding > kj {
            (self.padding - kj).div_ceil(self.stride)
        } else {
            0
        };
        let reach = self.width + self.padding;
        let hi = if reach > kj {
            ((reach - kj - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = iy * g.width + lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, slot) in line[lo..hi].iter_mut().enumerate() {
                            *slot = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let first = iy * g.width + lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}
