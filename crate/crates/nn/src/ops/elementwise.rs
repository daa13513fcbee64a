use ndarray::{Axis, Zip};

use crate::graph::{Graph, Tensor, Var};

fn assert_same(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Graph<'_> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same("add", &va, &vb);
        let out = &*va + &*vb;
        self.push(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same("sub", &va, &vb);
        let out = &*va - &*vb;
        self.push(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(-g)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same("mul", &va, &vb);
        let out = &*va * &*vb;
        self.push(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * &*vb),
                    needs[1].then(|| g * &*va),
                ]
            }),
        )
    }

    /// Sum of several same-shaped nodes.
    pub fn sum_of(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum_of: empty input");
        let first = self.value(xs[0]);
        let mut out = (*first).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            assert_same("sum_of", &out, &v);
            out += &*v;
        }
        let n = xs.len();
        self.push(out, xs, Box::new(move |g, _| vec![Some(g.clone()); n]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = &*self.value(a) * s;
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g * s)]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = &*self.value(a) + s;
        self.push(out, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        assert_same("mul_const", &va, &c);
        let out = &*va * &c;
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g * &c)]))
    }

    pub fn add_const(&self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_same("add_const", &va, c);
        let out = &*va + c;
        self.push(out, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.len(), 1, "scale_by: scale must have one element");
        let sv = vs.iter().copied().next().unwrap();
        let out = &*va * sv;
        self.push(
            out,
            &[a, s],
            Box::new(move |g, needs| {
                let ds = needs[1].then(|| {
                    let total: f64 = Zip::from(g).and(&*va).fold(0.0, |acc, &g, &x| acc + g * x);
                    Tensor::from_elem(vs.raw_dim(), total)
                });
                vec![needs[0].then(|| g * sv), ds]
            }),
        )
    }

    /// Multiplies sample `n` (first axis) of `a` by `coeffs[n]`.
    pub fn scale_samples(&self, a: Var, coeffs: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape()[0], coeffs.len(), "scale_samples: batch mismatch");
        let coeffs = coeffs.to_vec();
        let apply = move |t: &Tensor, c: &[f64]| {
            let mut out = t.clone();
            for (mut row, &k) in out.axis_iter_mut(Axis(0)).zip(c) {
                row *= k;
            }
            out
        };
        let out = apply(&va, &coeffs);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(apply(g, &coeffs))]))
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = va.mapv(f);
        let y = out.clone();
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&*va)
                    .and(&y)
                    .for_each(|d, &x, &y| *d *= df(x, y));
                vec![Some(d)]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Clamp with a pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_elem(ndarray::IxDyn(&[1]), va.sum());
        let dim = va.raw_dim();
        self.push(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::from_elem(dim.clone(), g[[0]]))]),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
