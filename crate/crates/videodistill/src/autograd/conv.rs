//! 2-D and 3-D convolution via im2col + GEMM.
//!
//! The im2col/col2im kernels work on flat slices with precomputed valid
//! ranges; dynamic-dim indexing is far too slow for the training loop.

use ndarray::{Array2, ArrayD, IxDyn};

use super::{Graph, Var};

fn as2(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-d tensor")
}

/// Valid output range `[lo, hi)` so that `o*stride + k - pad` lies in `[0, limit)`.
fn valid_range(limit: usize, k: usize, stride: usize, pad: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= limit-1
    let hi = if limit + pad > k {
        (((limit + pad - k - 1) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}

// -- 2-D -------------------------------------------------------------------

fn im2col2d(
    x: &ArrayD<f32>,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array2<f32> {
    let sh = x.shape();
    let (cin, h, w) = (sh[0], sh[1], sh[2]);
    let xs = x.as_slice().expect("standard layout");
    let l = ho * wo;
    let mut col = Array2::<f32>::zeros((cin * kh * kw, l));
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..cin {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, ho);
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let in_base = (ci * h + iy) * w + kx + ox_lo * stride - pad;
                    let out_base = row * l + oy * wo;
                    if stride == 1 {
                        let n = ox_hi - ox_lo;
                        cs[out_base + ox_lo..out_base + ox_lo + n]
                            .copy_from_slice(&xs[in_base..in_base + n]);
                    } else {
                        let mut ip = in_base;
                        for ox in ox_lo..ox_hi {
                            cs[out_base + ox] = xs[ip];
                            ip += stride;
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im2d(
    dcol: &Array2<f32>,
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> ArrayD<f32> {
    let l = ho * wo;
    let mut dx = ArrayD::<f32>::zeros(IxDyn(&[cin, h, w]));
    let ds = dx.as_slice_mut().expect("standard layout");
    let cs = dcol.as_slice().expect("standard layout");
    for ci in 0..cin {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, ho);
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let in_base = (ci * h + iy) * w + kx + ox_lo * stride - pad;
                    let out_base = row * l + oy * wo;
                    let mut ip = in_base;
                    for ox in ox_lo..ox_hi {
                        ds[ip] += cs[out_base + ox];
                        ip += stride;
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    /// `x:[cin,h,w]`, `w:[cout,cin,kh,kw]`, `b:[cout]` -> `[cout,ho,wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [cin,h,w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [cout,cin,kh,kw]");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch");
        let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        assert_eq!(self.shape(b), &[cout], "conv2d bias shape");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let bv = self.value_rc(b);
        let col = std::rc::Rc::new(im2col2d(&xv, (kh, kw), stride, pad, (ho, wo)));
        let w_mat = wv
            .view()
            .into_shape_with_order(IxDyn(&[cout, cin * kh * kw]))
            .expect("weight flatten")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d")
            .to_owned();
        let mut out = w_mat.dot(&*col);
        for (co, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bv[[co]];
        }
        let value = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&[cout, ho, wo]))
            .expect("conv2d output");
        self.op(value, &[x, w, b], || {
            Box::new(move |g| {
                let g_mat = g
                    .view()
                    .into_shape_with_order(IxDyn(&[cout, ho * wo]))
                    .expect("grad flatten")
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2d");
                let dw = g_mat
                    .dot(&col.t())
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .expect("dw shape");
                let db = g_mat.sum_axis(ndarray::Axis(1)).into_dyn();
                let w_mat = wv
                    .view()
                    .into_shape_with_order(IxDyn(&[cout, cin * kh * kw]))
                    .expect("weight flatten")
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2d");
                let dcol = w_mat.t().dot(&g_mat);
                let dx = col2im2d(&dcol, (cin, h, wdt), (kh, kw), stride, pad, (ho, wo));
                vec![Some(dx), Some(dw), Some(db)]
            })
        })
    }
}

// -- 3-D -------------------------------------------------------------------

fn im2col3d(x: &ArrayD<f32>, (kt, kh, kw): (usize, usize, usize)) -> Array2<f32> {
    let sh = x.shape();
    let (cin, t, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let xs = x.as_slice().expect("standard layout");
    let l = t * h * w;
    let mut col = Array2::<f32>::zeros((cin * kt * kh * kw, l));
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..cin {
        for ktt in 0..kt {
            let (ot_lo, ot_hi) = valid_range(t, ktt, 1, pt, t);
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, 1, ph, h);
                for kx in 0..kw {
                    let row = ((ci * kt + ktt) * kh + ky) * kw + kx;
                    let (ox_lo, ox_hi) = valid_range(w, kx, 1, pw, w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    for ot in ot_lo..ot_hi {
                        let it = ot + ktt - pt;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - ph;
                            let in_base = ((ci * t + it) * h + iy) * w + (ox_lo + kx - pw);
                            let out_base = row * l + (ot * h + oy) * w + ox_lo;
                            cs[out_base..out_base + n].copy_from_slice(&xs[in_base..in_base + n]);
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im3d(
    dcol: &Array2<f32>,
    (cin, t, h, w): (usize, usize, usize, usize),
    (kt, kh, kw): (usize, usize, usize),
) -> ArrayD<f32> {
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let l = t * h * w;
    let mut dx = ArrayD::<f32>::zeros(IxDyn(&[cin, t, h, w]));
    let ds = dx.as_slice_mut().expect("standard layout");
    let cs = dcol.as_slice().expect("standard layout");
    for ci in 0..cin {
        for ktt in 0..kt {
            let (ot_lo, ot_hi) = valid_range(t, ktt, 1, pt, t);
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, 1, ph, h);
                for kx in 0..kw {
                    let row = ((ci * kt + ktt) * kh + ky) * kw + kx;
                    let (ox_lo, ox_hi) = valid_range(w, kx, 1, pw, w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for ot in ot_lo..ot_hi {
                        let it = ot + ktt - pt;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - ph;
                            let in_base = ((ci * t + it) * h + iy) * w + (ox_lo + kx - pw);
                            let out_base = row * l + (ot * h + oy) * w + ox_lo;
                            for i in 0..(ox_hi - ox_lo) {
                                ds[in_base + i] += cs[out_base + i];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    /// Same-padding, stride-1 space-time convolution.
    /// `x:[cin,t,h,w]`, `w:[cout,cin,kt,kh,kw]`, `b:[cout]` -> `[cout,t,h,w]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv3d input must be [cin,t,h,w]");
        assert_eq!(sw.len(), 5, "conv3d weight must be [cout,cin,kt,kh,kw]");
        assert_eq!(sx[0], sw[1], "conv3d channel mismatch");
        let (cin, t, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kt, kh, kw) = (sw[0], sw[2], sw[3], sw[4]);
        assert_eq!(self.shape(b), &[cout], "conv3d bias shape");

        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let bv = self.value_rc(b);
        let col = std::rc::Rc::new(im2col3d(&xv, (kt, kh, kw)));
        let w_mat = wv
            .view()
            .into_shape_with_order(IxDyn(&[cout, cin * kt * kh * kw]))
            .expect("weight flatten")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d")
            .to_owned();
        let mut out = w_mat.dot(&*col);
        for (co, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bv[[co]];
        }
        let value = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&[cout, t, h, wdt]))
            .expect("conv3d output");
        self.op(value, &[x, w, b], || {
            Box::new(move |g| {
                let g_mat = g
                    .view()
                    .into_shape_with_order(IxDyn(&[cout, t * h * wdt]))
                    .expect("grad flatten")
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2d");
                let dw = g_mat
                    .dot(&col.t())
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[cout, cin, kt, kh, kw]))
                    .expect("dw shape");
                let db = g_mat.sum_axis(ndarray::Axis(1)).into_dyn();
                let w_mat = wv
                    .view()
                    .into_shape_with_order(IxDyn(&[cout, cin * kt * kh * kw]))
                    .expect("weight flatten")
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2d");
                let dcol = w_mat.t().dot(&g_mat);
                let dx = col2im3d(&dcol, (cin, t, h, wdt), (kt, kh, kw));
                vec![Some(dx), Some(dw), Some(db)]
            })
        })
    }
}

// -- references for testing -------------------------------------------------

/// Naive direct 2-D convolution, used as an oracle in tests.
pub fn conv2d_reference(
    x: &ArrayD<f32>,
    w: &ArrayD<f32>,
    b: &ArrayD<f32>,
    stride: usize,
    pad: usize,
) -> ArrayD<f32> {
    let (cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[cout, ho, wo]));
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[[co]];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            acc += x[[ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                        }
                    }
                }
                out[[co, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Naive direct 3-D convolution (stride 1, same padding), test oracle.
pub fn conv3d_reference(x: &ArrayD<f32>, w: &ArrayD<f32>, b: &ArrayD<f32>) -> ArrayD<f32> {
    let (cin, t, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kt, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[cout, t, h, wdt]));
    for co in 0..cout {
        for ot in 0..t {
            for oy in 0..h {
                for ox in 0..wdt {
                    let mut acc = b[[co]];
                    for ci in 0..cin {
                        for ktt in 0..kt {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let it = (ot + ktt) as isize - pt as isize;
                                    let iy = (oy + ky) as isize - ph as isize;
                                    let ix = (ox + kx) as isize - pw as isize;
                                    if it < 0
                                        || it >= t as isize
                                        || iy < 0
                                        || iy >= h as isize
                                        || ix < 0
                                        || ix >= wdt as isize
                                    {
                                        continue;
                                    }
                                    acc += x[[ci, it as usize, iy as usize, ix as usize]]
                                        * w[[co, ci, ktt, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[co, ot, oy, ox]] = acc;
                }
            }
        }
    }
    out
}
