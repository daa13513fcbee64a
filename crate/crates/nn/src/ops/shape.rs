use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::graph::{Graph, Tensor, Var};

impl Graph<'_> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = va
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {old:?} -> {shape:?}"));
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&old))
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.value(a);
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    pub fn concat(&self, axis: usize, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat: empty input");
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            xs,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let part = need.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + len))
                                .to_owned()
                        });
                        start += len;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let out = va
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let dim = va.raw_dim();
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(dim.clone());
                d.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(d)]
            }),
        )
    }

    /// `x`: (N, in); `weight`: (out, in); `bias`: (out).
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let xm = xv.view().into_dimensionality::<Ix2>().expect("linear: 2-D input");
        let wm = wv.view().into_dimensionality::<Ix2>().expect("linear: 2-D weight");
        assert_eq!(xm.ncols(), wm.ncols(), "linear: input width {} vs weight {}", xm.ncols(), wm.ncols());
        let mut out = xm.dot(&wm.t());
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[wm.nrows()], "linear bias shape");
            out += &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            out.into_dyn(),
            &parents,
            Box::new(move |g, needs| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let xm = xv.view().into_dimensionality::<Ix2>().unwrap();
                let wm = wv.view().into_dimensionality::<Ix2>().unwrap();
                let mut grads = vec![
                    needs[0].then(|| gm.dot(&wm).into_dyn()),
                    needs[1].then(|| gm.t().dot(&xm).into_dyn()),
                ];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| gm.sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Batched matrix product: (B, M, K) x (B, K, N) -> (B, M, N).
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm: 3-D lhs");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm: 3-D rhs");
        let (batch, _, k) = a3.dim();
        let (bb, k2, _) = b3.dim();
        assert!(batch == bb && k == k2, "bmm: shapes {:?} x {:?}", a3.dim(), b3.dim());
        let out = batched(&a3, &b3, false, false);
        self.push(
            out.into_dyn(),
            &[a, b],
            Box::new(move |g, needs| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                vec![
                    needs[0].then(|| batched(&g3, &b3, false, true).into_dyn()),
                    needs[1].then(|| batched(&a3, &g3, true, false).into_dyn()),
                ]
            }),
        )
    }

    /// Adds a per-(sample, channel) offset to an (N, C, H, W) tensor.
    pub fn add_channel_offset(&self, x: Var, offset: Var) -> Var {
        let xv = self.value(x);
        let ov = self.value(offset);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "add_channel_offset: 4-D input");
        assert_eq!(ov.shape(), &s[..2], "add_channel_offset: offset must be (N, C)");
        let mut out = (*xv).clone();
        for ((n, c), &o) in ov
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .indexed_iter()
        {
            out.slice_mut(s![n, c, .., ..]).mapv_inplace(|v| v + o);
        }
        self.push(
            out,
            &[x, offset],
            Box::new(|g, needs| {
                let d_off = needs[1].then(|| g.sum_axis(Axis(3)).sum_axis(Axis(2)));
                vec![needs[0].then(|| g.clone()), d_off]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let va = self.value(a);
        let last = va.ndim() - 1;
        let mut out = (*va).clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let y = out.clone();
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = g * &y;
                for (mut dl, yl) in d.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = dl.sum();
                    dl.zip_mut_with(&yl, |dv, &yv| *dv -= dot * yv);
                }
                vec![Some(d)]
            }),
        )
    }
}

fn batched(a: &ArrayView3<f64>, b: &ArrayView3<f64>, ta: bool, tb: bool) -> Array3<f64> {
    let batch = a.dim().0;
    let m = if ta { a.dim().2 } else { a.dim().1 };
    let n = if tb { b.dim().1 } else { b.dim().2 };
    let mut out = Array3::zeros((batch, m, n));
    for i in 0..batch {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        let mut oi: Array2<f64> = Array2::zeros((m, n));
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
        out.index_axis_mut(Axis(0), i).assign(&oi);
    }
    out
}
