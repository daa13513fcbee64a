use ndarray::{s, Array4, ArrayView4, Axis, Ix4};

use crate::graph::{Graph, Tensor, Var};

fn as4(t: &Tensor) -> ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .unwrap_or_else(|_| panic!("expected (N, C, H, W), got {:?}", t.shape()))
}

/// Interpolation taps for resizing one axis from `input` to `output` samples
/// with pixel-centre alignment and edge clamping: output index `i` reads
/// `(lo, hi, frac)` as `(1 - frac) * src[lo] + frac * src[hi]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    assert!(input > 0 && output > 0, "bilinear_taps: empty axis");
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of an (N, C, H, W) array without recording on a graph.
pub fn resize_bilinear_array(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let xv = as4(x);
    let (n, c, h, w) = xv.dim();
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let src = xv.slice(s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(s![ni, ci, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                    let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                    dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out.into_dyn()
}

fn resize_bilinear_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let gv = as4(g);
    let (n, c, oh, ow) = gv.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let src = gv.slice(s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(s![ni, ci, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = src[[oy, ox]];
                    dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                    dst[[y0, x1]] += v * (1.0 - fy) * fx;
                    dst[[y1, x0]] += v * fy * (1.0 - fx);
                    dst[[y1, x1]] += v * fy * fx;
                }
            }
        }
    }
    out.into_dyn()
}

impl Graph<'_> {
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.shape()[2], xv.shape()[3]);
        let out = resize_bilinear_array(&xv, oh, ow);
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                if (h, w) == (oh, ow) {
                    vec![Some(g.clone())]
                } else {
                    vec![Some(resize_bilinear_adjoint(g, h, w))]
                }
            }),
        )
    }

    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = as4(&xv).dim();
        let mut out = Array4::zeros((n, c, h * factor, w * factor));
        for ((ni, ci, y, x_), v) in out.indexed_iter_mut() {
            *v = xv[[ni, ci, y / factor, x_ / factor]];
        }
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let mut d = Array4::zeros((n, c, h, w));
                for ((ni, ci, y, x_), &v) in as4(g).indexed_iter() {
                    d[[ni, ci, y / factor, x_ / factor]] += v;
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// Average pooling with zero padding counted in the denominator.
    pub fn avg_pool2d(&self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = as4(&xv).dim();
        let oh = crate::ops::conv::conv_out_size(h, k, stride, pad);
        let ow = crate::ops::conv::conv_out_size(w, k, stride, pad);
        let norm = 1.0 / (k * k) as f64;
        let window = move |o: usize, limit: usize| {
            let start = (o * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + k as isize).min(limit as isize)).max(0) as usize;
            lo..hi
        };
        let mut out = Array4::zeros((n, c, oh, ow));
        let x4 = as4(&xv);
        for ((ni, ci, oy, ox), v) in out.indexed_iter_mut() {
            *v = x4
                .slice(s![ni, ci, window(oy, h), window(ox, w)])
                .sum()
                * norm;
        }
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let mut d = Array4::zeros((n, c, h, w));
                for ((ni, ci, oy, ox), &gv) in as4(g).indexed_iter() {
                    d.slice_mut(s![ni, ci, window(oy, h), window(ox, w)])
                        .mapv_inplace(|v| v + gv * norm);
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// Max pooling without padding; ties route the gradient to the first maximum.
    pub fn max_pool2d(&self, x: Var, k: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = as4(&xv).dim();
        let oh = crate::ops::conv::conv_out_size(h, k, stride, 0);
        let ow = crate::ops::conv::conv_out_size(w, k, stride, 0);
        let x4 = as4(&xv);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = vec![(0usize, 0usize); n * c * oh * ow];
        for (idx, ((ni, ci, oy, ox), v)) in out.indexed_iter_mut().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for dy in 0..k {
                for dx in 0..k {
                    let (y, xx) = (oy * stride + dy, ox * stride + dx);
                    let val = x4[[ni, ci, y, xx]];
                    if val > best.0 {
                        best = (val, y, xx);
                    }
                }
            }
            *v = best.0;
            arg[idx] = (best.1, best.2);
        }
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let mut d = Array4::zeros((n, c, h, w));
                for (idx, ((ni, ci, _, _), &gv)) in as4(g).indexed_iter().enumerate() {
                    let (y, xx) = arg[idx];
                    d[[ni, ci, y, xx]] += gv;
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// (N, C, H, W) -> (N, C)
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = as4(&xv).dim();
        let hw = (h * w) as f64;
        let out = xv.sum_axis(Axis(3)).sum_axis(Axis(2)) / hw;
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = Array4::zeros((n, c, h, w));
                for ((ni, ci), &gv) in g.view().into_dimensionality::<ndarray::Ix2>().unwrap().indexed_iter() {
                    d.slice_mut(s![ni, ci, .., ..]).fill(gv / hw);
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// Standardizes each (sample, channel) plane over its spatial positions:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn channel_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, _, _) = as4(&xv).dim();
        let mut out = (*xv).clone();
        let mut inv_std = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = out.slice_mut(s![ni, ci, .., ..]);
                let m = plane.len() as f64;
                let mean = plane.sum() / m;
                let var = plane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
                let is = 1.0 / (var + eps).sqrt();
                plane.mapv_inplace(|v| (v - mean) * is);
                inv_std[ni * c + ci] = is;
            }
        }
        let y = out.clone();
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = g.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let yp = y.slice(s![ni, ci, .., ..]);
                        let mut dp = d.slice_mut(s![ni, ci, .., ..]);
                        let m = dp.len() as f64;
                        let mean_g = dp.sum() / m;
                        let mean_gy = dp.iter().zip(yp.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                        let is = inv_std[ni * c + ci];
                        dp.zip_mut_with(&yp, |gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                    }
                }
                vec![Some(d)]
            }),
        )
    }
}
