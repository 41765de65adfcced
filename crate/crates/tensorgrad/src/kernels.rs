//! Raw slice kernels behind the convolution primitives.

use crate::tensor::Element;

/// How out-of-bounds taps of a convolution window are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge pixel (`-1 -> 1`).
    Reflect,
}

/// Geometry of one sliding-window pass over a `(channels, height, width)` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    #[inline]
    fn source(&self, pos: isize, extent: usize) -> Option<usize> {
        let n = extent as isize;
        if (0..n).contains(&pos) {
            return Some(pos as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let p = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
                (0..n).contains(&p).then_some(p as usize)
            }
        }
    }

    /// Unfolds `img` into `cols` laid out as `(C·kh·kw, Ho·Wo)`.
    pub fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let ncol = ho * wo;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let sy = self.source(iy, self.height);
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = match (sy, self.source(ix, self.width)) {
                                (Some(y), Some(x)) => plane[y * self.width + x],
                                _ => T::zero(),
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters `cols` back, accumulating into `img`.
    pub fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let ncol = ho * wo;
        let mut row = 0;
        for c in 0..self.channels {
            let base = c * self.height * self.width;
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let Some(y) = self.source(iy, self.height) else {
                            continue;
                        };
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if let Some(x) = self.source(ix, self.width) {
                                img[base + y * self.width + x] =
                                    img[base + y * self.width + x] + src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
