//! 2-D convolution and transposed convolution over NCHW tensors, lowered to
//! matrix products through im2col / col2im.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, IxDyn};

use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    // the "large" side: convolution input / transposed-convolution output
    h: usize,
    w: usize,
    // the "small" side: convolution output / transposed-convolution input
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(src: &[f64], g: &Geometry, dst: &mut [f64]) {
    let cols = g.cols();
    debug_assert_eq!(dst.len(), g.rows() * cols);
    for c in 0..g.channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut dst[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols_buf: &[f64], g: &Geometry, dst: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous block")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous block")
}

fn dims4(t: &Tensor, what: &str) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what}: expected a 4-D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

fn contiguous(t: &Tensor) -> Vec<f64> {
    t.as_standard_layout().iter().copied().collect()
}

impl Graph<'_> {
    /// `x`: (N, C, H, W); `weight`: (O, C / groups, k, k); `bias`: (O).
    pub fn conv2d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let [n, c, h, w] = dims4(&xv, "conv2d input");
        let [o, cg, k, k2] = dims4(&wv, "conv2d weight");
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert!(groups >= 1 && c % groups == 0 && o % groups == 0, "conv2d: bad groups");
        assert_eq!(c / groups, cg, "conv2d: input has {c} channels, weight expects {cg}x{groups}");
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(w, k, stride, pad);
        let og = o / groups;
        let geo = Geometry {
            channels: cg,
            h,
            w,
            oh,
            ow,
            k,
            stride,
            pad,
        };
        let bias_v = bias.map(|b| {
            let b = self.value(b);
            assert_eq!(b.shape(), &[o], "conv2d bias shape");
            contiguous(&b)
        });

        let xs = contiguous(&xv);
        let ws = contiguous(&wv);
        let mut out = vec![0.0; n * o * oh * ow];
        let mut cols = vec![0.0; geo.rows() * geo.cols()];
        let in_plane = cg * h * w;
        let out_plane = og * oh * ow;
        for ni in 0..n {
            for gi in 0..groups {
                let src = &xs[(ni * c + gi * cg) * h * w..][..in_plane];
                im2col(src, &geo, &mut cols);
                let wmat = view2(&ws[gi * og * geo.rows()..][..og * geo.rows()], og, geo.rows());
                let dst = &mut out[(ni * o + gi * og) * oh * ow..][..out_plane];
                let mut dst_m = view2_mut(dst, og, geo.cols());
                general_mat_mul(1.0, &wmat, &view2(&cols, geo.rows(), geo.cols()), 0.0, &mut dst_m);
            }
            if let Some(b) = &bias_v {
                for (oc, &bv) in b.iter().enumerate() {
                    out[(ni * o + oc) * oh * ow..][..oh * ow]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).unwrap();

        let mut parents = vec![x, weight];
        parents.extend(bias);
        let wshape = wv.raw_dim();
        self.push(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gs = contiguous(g);
                let mut dx = needs[0].then(|| vec![0.0; n * c * h * w]);
                let mut dw = needs[1].then(|| vec![0.0; ws.len()]);
                let mut cols = vec![0.0; geo.rows() * geo.cols()];
                for ni in 0..n {
                    for gi in 0..groups {
                        let gout = view2(&gs[(ni * o + gi * og) * oh * ow..][..out_plane], og, geo.cols());
                        if let Some(dw) = dw.as_mut() {
                            let src = &xs[(ni * c + gi * cg) * h * w..][..in_plane];
                            im2col(src, &geo, &mut cols);
                            let mut dwm = view2_mut(&mut dw[gi * og * geo.rows()..][..og * geo.rows()], og, geo.rows());
                            general_mat_mul(1.0, &gout, &view2(&cols, geo.rows(), geo.cols()).t(), 1.0, &mut dwm);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wmat = view2(&ws[gi * og * geo.rows()..][..og * geo.rows()], og, geo.rows());
                            let mut cm = view2_mut(&mut cols, geo.rows(), geo.cols());
                            general_mat_mul(1.0, &wmat.t(), &gout, 0.0, &mut cm);
                            col2im(&cols, &geo, &mut dx[(ni * c + gi * cg) * h * w..][..in_plane]);
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap()),
                    dw.map(|d| Tensor::from_shape_vec(wshape.clone(), d).unwrap()),
                ];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![0.0; o];
                        for ni in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                *d += gs[(ni * o + oc) * oh * ow..][..oh * ow].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_shape_vec(IxDyn(&[o]), db).unwrap()
                    }));
                }
                grads
            }),
        )
    }

    /// `x`: (N, Cin, H, W); `weight`: (Cin, Cout, k, k); `bias`: (Cout).
    /// Output size is `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let [n, cin, h, w] = dims4(&xv, "conv_transpose2d input");
        let [wcin, cout, k, k2] = dims4(&wv, "conv_transpose2d weight");
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        assert_eq!(cin, wcin, "conv_transpose2d: channel mismatch");
        assert!(out_pad < stride.max(1), "conv_transpose2d: out_pad must be < stride");
        let oh = conv_transpose_out_size(h, k, stride, pad, out_pad);
        let ow = conv_transpose_out_size(w, k, stride, pad, out_pad);
        // im2col geometry runs from the large (output) side to the small (input) side
        let geo = Geometry {
            channels: cout,
            h: oh,
            w: ow,
            oh: h,
            ow: w,
            k,
            stride,
            pad,
        };
        debug_assert_eq!(conv_out_size(oh, k, stride, pad), h);
        let bias_v = bias.map(|b| {
            let b = self.value(b);
            assert_eq!(b.shape(), &[cout], "conv_transpose2d bias shape");
            contiguous(&b)
        });

        let xs = contiguous(&xv);
        let ws = contiguous(&wv);
        let in_plane = cin * h * w;
        let out_plane = cout * oh * ow;
        let mut out = vec![0.0; n * out_plane];
        let mut cols = vec![0.0; geo.rows() * geo.cols()];
        let wmat = view2(&ws, cin, geo.rows());
        for ni in 0..n {
            let xm = view2(&xs[ni * in_plane..][..in_plane], cin, h * w);
            let mut cm = view2_mut(&mut cols, geo.rows(), geo.cols());
            general_mat_mul(1.0, &wmat.t(), &xm, 0.0, &mut cm);
            let dst = &mut out[ni * out_plane..][..out_plane];
            col2im(&cols, &geo, dst);
            if let Some(b) = &bias_v {
                for (oc, &bv) in b.iter().enumerate() {
                    dst[oc * oh * ow..][..oh * ow].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, cout, oh, ow]), out).unwrap();

        let mut parents = vec![x, weight];
        parents.extend(bias);
        let wshape = wv.raw_dim();
        self.push(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gs = contiguous(g);
                let wmat = view2(&ws, cin, geo.rows());
                let mut dx = needs[0].then(|| vec![0.0; n * in_plane]);
                let mut dw = needs[1].then(|| vec![0.0; ws.len()]);
                let mut cols = vec![0.0; geo.rows() * geo.cols()];
                for ni in 0..n {
                    im2col(&gs[ni * out_plane..][..out_plane], &geo, &mut cols);
                    let cm = view2(&cols, geo.rows(), geo.cols());
                    if let Some(dx) = dx.as_mut() {
                        let mut dxm = view2_mut(&mut dx[ni * in_plane..][..in_plane], cin, h * w);
                        general_mat_mul(1.0, &wmat, &cm, 0.0, &mut dxm);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xm = view2(&xs[ni * in_plane..][..in_plane], cin, h * w);
                        let mut dwm = view2_mut(dw, cin, geo.rows());
                        general_mat_mul(1.0, &xm, &cm.t(), 1.0, &mut dwm);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_shape_vec(IxDyn(&[n, cin, h, w]), d).unwrap()),
                    dw.map(|d| Tensor::from_shape_vec(wshape.clone(), d).unwrap()),
                ];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![0.0; cout];
                        for ni in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                *d += gs[ni * out_plane + oc * oh * ow..][..oh * ow].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_shape_vec(IxDyn(&[cout]), db).unwrap()
                    }));
                }
                grads
            }),
        )
    }
}
