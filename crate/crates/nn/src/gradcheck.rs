//! Central finite-difference checks for analytic gradients.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub numel: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`
    pub relative_error: f64,
    pub max_abs_diff: f64,
}

/// Compares backprop gradients of the scalar built by `loss` against central
/// differences with step `h`, for every element of every trainable parameter.
pub fn check_gradients<F>(store: &ParamStore, h: f64, loss: F) -> Vec<GradCheck>
where
    F: Fn(&Graph) -> Var,
{
    let analytic = {
        let g = Graph::new(store);
        let out = loss(&g);
        g.backward(out).params()
    };
    let eval = |s: &ParamStore| {
        let g = Graph::new(s);
        let out = loss(&g);
        g.scalar(out)
    };

    let mut probe = store.clone();
    let mut report = Vec::new();
    for (name, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let zero = ndarray::ArrayD::zeros(p.value.raw_dim());
        let a = analytic.get(name).unwrap_or(&zero);
        let mut numeric = Vec::with_capacity(p.value.len());
        for i in 0..p.value.len() {
            let orig = p.value.as_slice_memory_order().map(|s| s[i]);
            let orig = orig.unwrap_or_else(|| p.value.iter().nth(i).copied().unwrap());
            set(&mut probe, name, i, orig + h);
            let up = eval(&probe);
            set(&mut probe, name, i, orig - h);
            let down = eval(&probe);
            set(&mut probe, name, i, orig);
            numeric.push((up - down) / (2.0 * h));
        }
        let a: Vec<f64> = a.iter().copied().collect();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        report.push(GradCheck {
            name: name.clone(),
            numel: numeric.len(),
            relative_error: if denom == 0.0 { 0.0 } else { diff / denom },
            max_abs_diff: a
                .iter()
                .zip(&numeric)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        });
    }
    report
}

fn set(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    let t = store.value_mut(name).unwrap();
    match t.as_slice_memory_order_mut() {
        Some(s) => s[i] = v,
        None => *t.iter_mut().nth(i).unwrap() = v,
    }
}
