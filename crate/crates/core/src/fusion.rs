//! Bringing the pooled condition map to image shape and combining it with
//! the diffusion state.
//!
//! The condition (E channels, h×w) first goes through a 1×1 projection to
//! three channels, then is resized either by parameter-free bilinear
//! interpolation or by a stack of learned transposed convolutions, and is
//! finally added to `x` with static (1, 1) or gated weights.

use fundus_nn::{resize_bilinear_array, ConvTranspose2d, Conv2d, Graph, ParamStore, Tensor, Var};
use ndarray::{IxDyn, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    LearnedUpsample,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FusionStrategy {
    pub resize: ResizeMode,
    pub weighting: Weighting,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy {
            resize: ResizeMode::Bilinear,
            weighting: Weighting::Static,
        }
    }
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy {
            resize: ResizeMode::LearnedUpsample,
            weighting: Weighting::Static,
        },
        FusionStrategy {
            resize: ResizeMode::LearnedUpsample,
            weighting: Weighting::Dynamic,
        },
        FusionStrategy {
            resize: ResizeMode::Bilinear,
            weighting: Weighting::Static,
        },
        FusionStrategy {
            resize: ResizeMode::Bilinear,
            weighting: Weighting::Dynamic,
        },
    ];

    pub fn key(self) -> &'static str {
        match (self.resize, self.weighting) {
            (ResizeMode::LearnedUpsample, Weighting::Static) => "upsample_static",
            (ResizeMode::LearnedUpsample, Weighting::Dynamic) => "upsample_dynamic",
            (ResizeMode::Bilinear, Weighting::Static) => "bilinear_static",
            (ResizeMode::Bilinear, Weighting::Dynamic) => "bilinear_dynamic",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {key:?}")))
    }
}

impl TryFrom<String> for FusionStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::from_key(&s)
    }
}

impl From<FusionStrategy> for String {
    fn from(s: FusionStrategy) -> String {
        s.key().to_string()
    }
}

/// How the matched condition enters the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// weighted sum with the chain state (three input channels)
    #[default]
    Add,
    /// matched condition stacked in front of the chain state (six channels)
    Concat,
}

impl ConditionMode {
    pub fn input_channels(self) -> usize {
        match self {
            ConditionMode::Add => 3,
            ConditionMode::Concat => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub w_c: f64,
    pub w_x: f64,
}

impl FusionWeights {
    pub const STATIC: FusionWeights = FusionWeights { w_c: 1.0, w_x: 1.0 };

    /// `(sigmoid(g), 1 - sigmoid(g))`
    pub fn dynamic(gate: f64) -> Self {
        let w_c = fundus_nn::sigmoid(gate);
        FusionWeights { w_c, w_x: 1.0 - w_c }
    }
}

/// `w_c * c + w_x * x`.
pub fn fuse_arrays(c: &Tensor, x: &Tensor, weights: FusionWeights) -> Result<Tensor> {
    if c.shape() != x.shape() {
        return Err(invalid(format!("cannot fuse {:?} with {:?}", c.shape(), x.shape())));
    }
    let FusionWeights { w_c, w_x } = weights;
    Ok(Zip::from(c).and(x).map_collect(|&c, &x| w_c * c + w_x * x))
}

/// Bilinear resize of a (C, h, w) or (N, C, h, w) map.
pub fn match_resolution_bilinear(map: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    if oh == 0 || ow == 0 {
        return Err(invalid("target size must be at least 1×1"));
    }
    match map.ndim() {
        3 => {
            let s = map.shape();
            let four = map.clone().into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]])).expect("same length");
            let out = resize_bilinear_array(&four, oh, ow);
            Ok(out.into_shape_with_order(IxDyn(&[s[0], oh, ow])).expect("same length"))
        }
        4 => Ok(resize_bilinear_array(map, oh, ow)),
        _ => Err(invalid(format!("expected a (C, h, w) map, got {:?}", map.shape()))),
    }
}

/// Fusion site with its parameters `fusion/*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub strategy: FusionStrategy,
    pub mode: ConditionMode,
    pub embed_dim: usize,
    pub source_size: usize,
    pub target_size: usize,
}

impl Fusion {
    pub fn new(
        strategy: FusionStrategy,
        mode: ConditionMode,
        embed_dim: usize,
        source_size: usize,
        target_size: usize,
    ) -> Result<Self> {
        if embed_dim == 0 || source_size == 0 || target_size == 0 {
            return Err(invalid("fusion dimensions must be >= 1"));
        }
        let f = Fusion {
            strategy,
            mode,
            embed_dim,
            source_size,
            target_size,
        };
        if strategy.resize == ResizeMode::LearnedUpsample {
            f.upsample_stages()?;
        }
        Ok(f)
    }

    /// Number of 2× transposed convolutions needed by the learned resize.
    pub fn upsample_stages(&self) -> Result<usize> {
        let (s, t) = (self.source_size, self.target_size);
        if t < s || t % s != 0 || !(t / s).is_power_of_two() {
            return Err(Error::Fusion(format!(
                "learned upsampling needs a power-of-two factor, got {s} -> {t}"
            )));
        }
        Ok((t / s).trailing_zeros() as usize)
    }

    fn proj(&self) -> Conv2d {
        Conv2d::new("fusion/proj", self.embed_dim, 3, 1).no_bias()
    }

    fn up(&self, i: usize) -> ConvTranspose2d {
        ConvTranspose2d::doubling(format!("fusion/up{i}"), 3, 3)
    }

    pub const GATE: &'static str = "fusion/gate";

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.proj().init(store, rng);
        if self.strategy.resize == ResizeMode::LearnedUpsample {
            for i in 0..self.upsample_stages().expect("checked in new") {
                let up = self.up(i).init(store, rng);
                // the resize stays linear in c, so c = 0 contributes nothing
                store.remove(&up.bias_name());
            }
        }
        if self.strategy.weighting == Weighting::Dynamic {
            store.insert(Self::GATE, Tensor::zeros(IxDyn(&[1])));
        }
    }

    /// Current weights read from the parameters.
    pub fn weights(&self, store: &ParamStore) -> FusionWeights {
        match self.strategy.weighting {
            Weighting::Static => FusionWeights::STATIC,
            Weighting::Dynamic => {
                let g = store.value(Self::GATE).map(|t| t[[0]]).unwrap_or(0.0);
                FusionWeights::dynamic(g)
            }
        }
    }

    /// (1, E, h, w) condition to (1, 3, S, S).
    pub fn match_resolution(&self, g: &Graph, c: Var) -> Result<Var> {
        let s = g.shape(c);
        if s.len() != 4 || s[1] != self.embed_dim || s[2] != self.source_size || s[3] != self.source_size {
            return Err(Error::Fusion(format!(
                "condition {s:?} does not match ({}, {}, {})",
                self.embed_dim, self.source_size, self.source_size
            )));
        }
        let h = self.proj().forward(g, c);
        Ok(match self.strategy.resize {
            ResizeMode::Bilinear => g.resize_bilinear(h, self.target_size, self.target_size),
            ResizeMode::LearnedUpsample => {
                let mut h = h;
                for i in 0..self.upsample_stages()? {
                    let up = self.up(i);
                    h = g.conv_transpose2d(h, g.param(&up.weight_name()), None, up.stride, up.pad, up.out_pad);
                }
                h
            }
        })
    }

    /// `w_c * c + w_x * x` for a matched `c` broadcast over the batch of `x`.
    pub fn fuse(&self, g: &Graph, c_matched: Var, x: Var) -> Result<Var> {
        let c = broadcast_batch(g, c_matched, g.shape(x)[0]);
        if g.shape(c) != g.shape(x) {
            return Err(Error::Fusion(format!("cannot fuse {:?} with {:?}", g.shape(c), g.shape(x))));
        }
        Ok(match self.strategy.weighting {
            Weighting::Static => g.add(c, x),
            Weighting::Dynamic => {
                // x + σ(g)(c - x) = σ(g) c + (1 - σ(g)) x
                let w = g.sigmoid(g.param(Self::GATE));
                g.add(x, g.scale_by(g.sub(c, x), w))
            }
        })
    }

    /// The denoiser input for chain state `x_t` (N, 3, S, S).
    pub fn condition(&self, g: &Graph, c: Var, x_t: Var) -> Result<Var> {
        let matched = self.match_resolution(g, c)?;
        match self.mode {
            ConditionMode::Add => self.fuse(g, matched, x_t),
            ConditionMode::Concat => {
                let n = g.shape(x_t)[0];
                let m = broadcast_batch(g, matched, n);
                if g.shape(m)[2..] != g.shape(x_t)[2..] {
                    return Err(Error::Fusion("condition and state differ in size".into()));
                }
                Ok(g.concat(1, &[m, x_t]))
            }
        }
    }
}

fn broadcast_batch(g: &Graph, v: Var, n: usize) -> Var {
    if g.shape(v)[0] == n || g.shape(v)[0] != 1 {
        v
    } else {
        g.concat(0, &vec![v; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn keys_round_trip() {
        let keys: Vec<_> = FusionStrategy::ALL.iter().map(|s| s.key()).collect();
        assert_eq!(keys, ["upsample_static", "upsample_dynamic", "bilinear_static", "bilinear_dynamic"]);
        for s in FusionStrategy::ALL {
            assert_eq!(FusionStrategy::from_key(s.key()).unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<FusionStrategy>(&json).unwrap(), s);
        }
        assert!(matches!(FusionStrategy::from_key("nearest"), Err(Error::Config(_))));
        assert_eq!(FusionStrategy::default().key(), "bilinear_static");
    }

    #[test]
    fn fuse_values() {
        let c = t(&[1], vec![0.25]);
        let x = t(&[1], vec![0.5]);
        assert_eq!(fuse_arrays(&c, &x, FusionWeights::STATIC).unwrap()[[0]], 0.75);
        let zero = FusionWeights { w_c: 0.0, w_x: 1.0 };
        assert_eq!(fuse_arrays(&c, &x, zero).unwrap(), x);
        let half = FusionWeights::dynamic(0.0);
        assert_eq!((half.w_c, half.w_x), (0.5, 0.5));
        assert_eq!(fuse_arrays(&c, &x, half).unwrap()[[0]], 0.375);
        assert!(fuse_arrays(&c, &t(&[2], vec![0.0, 1.0]), half).is_err());
    }

    #[test]
    fn dynamic_weights_stay_in_range() {
        for g in [-800.0, -30.0, -1.0, 0.0, 2.5, 30.0, 800.0] {
            let w = FusionWeights::dynamic(g);
            assert!((0.0..=1.0).contains(&w.w_c) && (0.0..=1.0).contains(&w.w_x));
            assert_eq!(w.w_c + w.w_x, 1.0);
        }
        for g in [-5.0, 0.3, 5.0] {
            let w = FusionWeights::dynamic(g);
            assert!(w.w_c > 0.0 && w.w_c < 1.0);
        }
    }

    #[test]
    fn bilinear_oracle() {
        let m = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = match_resolution_bilinear(&m, 3, 3).unwrap();
        // half-pixel centres: source coordinate (i + 0.5) * 2/3 - 0.5, clamped
        let coord = |i: usize| (((i as f64 + 0.5) * 2.0 / 3.0 - 0.5) as f64).clamp(0.0, 1.0);
        let get = |y: usize, x: usize| [[1.0, 2.0], [3.0, 4.0]][y][x];
        for i in 0..3 {
            for j in 0..3 {
                let (sy, sx) = (coord(i), coord(j));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = (1.0 - fy) * ((1.0 - fx) * get(y0, x0) + fx * get(y0, x1))
                    + fy * ((1.0 - fx) * get(y1, x0) + fx * get(y1, x1));
                assert!((out[[0, i, j]] - v).abs() < 1e-9, "({i}, {j})");
            }
        }
        assert_eq!(match_resolution_bilinear(&m, 2, 2).unwrap(), m);
        let k = Tensor::from_elem(IxDyn(&[2, 3, 5]), 0.4);
        assert!(match_resolution_bilinear(&k, 7, 11).unwrap().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(match_resolution_bilinear(&m, 0, 3).is_err());
    }

    #[test]
    fn bilinear_preserves_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::from_shape_simple_fn(IxDyn(&[3, 5, 4]), || rng.random_range(-2.0..3.0));
        let (lo, hi) = m.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let out = match_resolution_bilinear(&m, 13, 9).unwrap();
        assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn learned_upsample_needs_power_of_two() {
        let s = FusionStrategy::from_key("upsample_static").unwrap();
        assert!(matches!(Fusion::new(s, ConditionMode::Add, 4, 8, 24), Err(Error::Fusion(_))));
        assert_eq!(Fusion::new(s, ConditionMode::Add, 4, 8, 64).unwrap().upsample_stages().unwrap(), 3);
        // bilinear accepts any target
        assert!(Fusion::new(FusionStrategy::default(), ConditionMode::Add, 4, 8, 24).is_ok());
    }

    #[test]
    fn zero_condition_leaves_state_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in FusionStrategy::ALL {
            let f = Fusion::new(s, ConditionMode::Add, 4, 2, 8).unwrap();
            let mut store = ParamStore::new();
            f.init(&mut store, &mut rng);
            let g = Graph::new(&store);
            let x = Tensor::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.random::<f64>());
            let c = g.input(Tensor::zeros(IxDyn(&[1, 4, 2, 2])));
            let out = f.condition(&g, c, g.input(x.clone())).unwrap();
            let expected = x.mapv(|v| v * f.weights(&store).w_x);
            assert_eq!(*g.value(out), expected, "{}", s.key());
        }
    }

    #[test]
    fn graph_fuse_matches_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Fusion::new(FusionStrategy::from_key("bilinear_dynamic").unwrap(), ConditionMode::Add, 4, 4, 4).unwrap();
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        store.value_mut(Fusion::GATE).unwrap()[[0]] = 0.8;
        let c = Tensor::from_shape_simple_fn(IxDyn(&[1, 3, 4, 4]), || rng.random::<f64>());
        let x = Tensor::from_shape_simple_fn(IxDyn(&[1, 3, 4, 4]), || rng.random::<f64>());
        let g = Graph::new(&store);
        let out = f.fuse(&g, g.input(c.clone()), g.input(x.clone())).unwrap();
        let oracle = fuse_arrays(&c, &x, f.weights(&store)).unwrap();
        assert!(g.value(out).iter().zip(oracle.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn concat_doubles_channels_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Fusion::new(FusionStrategy::default(), ConditionMode::Concat, 4, 2, 8).unwrap();
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        let g = Graph::new(&store);
        let c = g.input(Tensor::ones(IxDyn(&[1, 4, 2, 2])));
        let x = g.input(Tensor::zeros(IxDyn(&[3, 3, 8, 8])));
        assert_eq!(g.shape(f.condition(&g, c, x).unwrap()), vec![3, 6, 8, 8]);
        let wrong = g.input(Tensor::ones(IxDyn(&[1, 5, 2, 2])));
        assert!(matches!(f.condition(&g, wrong, x), Err(Error::Fusion(_))));
    }
}
