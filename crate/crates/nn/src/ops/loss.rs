use ndarray::{IxDyn, Zip};

use crate::graph::{Graph, Tensor, Var};

/// How a per-element loss is collapsed to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[1]), v)
}

impl Graph<'_> {
    /// Mean of squared differences.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Binary cross-entropy `-w * (t ln p + (1 - t) ln(1 - p))` with `p`
    /// clamped into `[eps, 1 - eps]`. `weights` is an optional per-element
    /// constant weight; the gradient is zero where the clamp is active.
    pub fn binary_cross_entropy(
        &self,
        probs: Var,
        targets: &Tensor,
        weights: Option<&Tensor>,
        eps: f64,
        reduction: Reduction,
    ) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), targets.shape(), "bce: shape mismatch");
        let ones;
        let w = match weights {
            Some(w) => {
                assert_eq!(w.shape(), targets.shape(), "bce: weight shape mismatch");
                w
            }
            None => {
                ones = Tensor::ones(targets.raw_dim());
                &ones
            }
        };
        let factor = reduction.factor(pv.len());
        let total = Zip::from(&*pv)
            .and(targets)
            .and(w)
            .fold(0.0, |acc, &p, &t, &wt| {
                let p = p.clamp(eps, 1.0 - eps);
                acc - wt * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            });
        let targets = targets.clone();
        let w = w.clone();
        self.push(
            scalar(total * factor),
            &[probs],
            Box::new(move |g, _| {
                let g0 = g[[0]] * factor;
                let mut d = Tensor::zeros(pv.raw_dim());
                Zip::from(&mut d)
                    .and(&*pv)
                    .and(&targets)
                    .and(&w)
                    .for_each(|d, &p, &t, &wt| {
                        *d = if p < eps || p > 1.0 - eps {
                            0.0
                        } else {
                            g0 * wt * (-t / p + (1.0 - t) / (1.0 - p))
                        };
                    });
                vec![Some(d)]
            }),
        )
    }

    /// KL divergence of N(mu, exp(log_var)) from N(0, 1):
    /// `0.5 * (exp(log_var) + mu^2 - 1 - log_var)` per element.
    pub fn kl_standard_normal(&self, mu: Var, log_var: Var, reduction: Reduction) -> Var {
        let (mv, lv) = (self.value(mu), self.value(log_var));
        assert_eq!(mv.shape(), lv.shape(), "kl: shape mismatch");
        let factor = reduction.factor(mv.len());
        let total = Zip::from(&*mv)
            .and(&*lv)
            .fold(0.0, |acc, &m, &l| acc + 0.5 * (l.exp() + m * m - 1.0 - l));
        self.push(
            scalar(total * factor),
            &[mu, log_var],
            Box::new(move |g, needs| {
                let g0 = g[[0]] * factor;
                vec![
                    needs[0].then(|| mv.mapv(|m| g0 * m)),
                    needs[1].then(|| lv.mapv(|l| g0 * 0.5 * (l.exp() - 1.0))),
                ]
            }),
        )
    }
}
