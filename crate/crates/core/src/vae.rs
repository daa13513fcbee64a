//! Convolutional VAE: three stride-2 convolutions down to a Gaussian
//! latent, a fully connected layer and three transposed convolutions back
//! up, with a sigmoid on the output.
//!
//! The reconstruction term is the usual non-negative binary cross-entropy
//! `-Σ [x ln x̂ + (1 - x) ln(1 - x̂)]`, and the KL term is
//! `½ Σ (exp(log σ²) + μ² - 1 - log σ²)`.

use fundus_nn::{Adam, Conv2d, ConvTranspose2d, Graph, Linear, Optimizer, ParamStore, Reduction, Tensor, Var};
use ndarray::{Axis, IxDyn, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::gaussian_like;
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::image::ImageTensor;

pub const LOG_VAR_CLAMP: f64 = 20.0;
pub const VAE_BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// sum over pixels and latent dimensions, averaged over the batch
    #[default]
    Sum,
    /// mean over pixels and latent dimensions
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// output channels of the three encoder convolutions
    pub channels: [usize; 3],
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub reduction: LossReduction,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            channels: [32, 64, 128],
            latent_dim: 128,
            kl_weight: 1.0,
            reduction: LossReduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Layer layout of one VAE; parameters live in a [`ParamStore`] under
/// `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
    pub prefix: String,
    /// width of an optional time embedding added at every stage
    pub time_dim: Option<usize>,
}

impl Vae {
    pub fn new(config: VaeConfig, in_channels: usize, image_size: usize, prefix: &str) -> Result<Self> {
        if image_size < 8 || image_size % 8 != 0 {
            return Err(invalid(format!("vae image size must be a positive multiple of 8, got {image_size}")));
        }
        if config.latent_dim == 0 || config.channels.contains(&0) {
            return Err(Error::Config("vae widths must be >= 1".into()));
        }
        if !(config.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be >= 0".into()));
        }
        Ok(Vae {
            config,
            in_channels,
            out_channels: 3,
            image_size,
            prefix: prefix.to_string(),
            time_dim: None,
        })
    }

    pub fn with_time_embedding(mut self, dim: usize) -> Self {
        self.time_dim = Some(dim);
        self
    }

    fn name(&self, s: &str) -> String {
        format!("{}/{s}", self.prefix)
    }

    fn bottom(&self) -> usize {
        self.image_size / 8
    }

    fn flat(&self) -> usize {
        self.config.channels[2] * self.bottom() * self.bottom()
    }

    fn enc(&self, i: usize) -> Conv2d {
        let cin = if i == 0 { self.in_channels } else { self.config.channels[i - 1] };
        Conv2d::new(self.name(&format!("enc{i}")), cin, self.config.channels[i], 3).stride(2)
    }

    fn dec(&self, i: usize) -> ConvTranspose2d {
        let [c0, c1, c2] = self.config.channels;
        let (cin, cout) = [(c2, c1), (c1, c0), (c0, self.out_channels)][i];
        ConvTranspose2d::doubling(self.name(&format!("dec{i}")), cin, cout)
    }

    fn time_proj(&self, stage: &str, ch: usize) -> Option<Linear> {
        self.time_dim.map(|d| Linear::new(self.name(&format!("t_{stage}")), d, ch))
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let [c0, c1, c2] = self.config.channels;
        for i in 0..3 {
            self.enc(i).init(store, rng);
        }
        let l = self.config.latent_dim;
        Linear::new(self.name("mu"), self.flat(), l).init(store, rng);
        Linear::new(self.name("log_var"), self.flat(), l).init(store, rng);
        Linear::new(self.name("fc"), l, self.flat()).init(store, rng);
        for i in 0..3 {
            self.dec(i).init(store, rng);
        }
        for (stage, ch) in [("enc0", c0), ("enc1", c1), ("enc2", c2), ("dec0", c1), ("dec1", c0)] {
            if let Some(p) = self.time_proj(stage, ch) {
                p.init_scaled(store, rng, 0.5);
            }
        }
    }

    fn add_time(&self, g: &Graph, h: Var, stage: &str, temb: Option<Var>) -> Var {
        match (temb, self.time_proj(stage, g.shape(h)[1])) {
            (Some(e), Some(p)) => g.add_channel_offset(h, p.forward(g, e)),
            _ => h,
        }
    }

    /// (N, C, S, S) input to `(mu, log_var)`, each (N, latent_dim). The
    /// returned log-variance is already clamped.
    pub fn encode_graph(&self, g: &Graph, x: Var, temb: Option<Var>) -> (Var, Var) {
        let mut h = x;
        for i in 0..3 {
            h = self.enc(i).forward(g, h);
            h = self.add_time(g, h, &format!("enc{i}"), temb);
            h = g.relu(h);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.flat()]);
        let mu = Linear::new(self.name("mu"), 0, 0).forward(g, flat);
        let lv = Linear::new(self.name("log_var"), 0, 0).forward(g, flat);
        (mu, g.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP))
    }

    /// (N, latent_dim) latent to (N, 3, S, S) output in (0, 1).
    pub fn decode_graph(&self, g: &Graph, z: Var, temb: Option<Var>) -> Var {
        let n = g.shape(z)[0];
        let h = g.relu(Linear::new(self.name("fc"), 0, 0).forward(g, z));
        let b = self.bottom();
        let mut h = g.reshape(h, &[n, self.config.channels[2], b, b]);
        for i in 0..3 {
            h = self.dec(i).forward(g, h);
            if i < 2 {
                h = self.add_time(g, h, &format!("dec{i}"), temb);
                h = g.relu(h);
            }
        }
        g.sigmoid(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.image_size || s[3] != self.image_size {
            return Err(invalid(format!(
                "vae expects (N, {}, {}, {}), got {s:?}",
                self.in_channels, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<LatentParams>> {
        self.check_input(x)?;
        let g = Graph::new(params);
        let (mu, lv) = self.encode_graph(&g, g.input(x.clone()), None);
        let (mu, lv) = (g.value(mu), g.value(lv));
        Ok(mu
            .axis_iter(Axis(0))
            .zip(lv.axis_iter(Axis(0)))
            .map(|(m, l)| LatentParams {
                mu: m.iter().copied().collect(),
                log_var: l.iter().copied().collect(),
            })
            .collect())
    }

    pub fn decode(&self, params: &ParamStore, z: &[f64]) -> Result<ImageTensor> {
        if z.len() != self.config.latent_dim {
            return Err(invalid(format!("latent has {} values, expected {}", z.len(), self.config.latent_dim)));
        }
        let g = Graph::new(params);
        let zt = Tensor::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).expect("length checked");
        let out = self.decode_graph(&g, g.input(zt), None);
        Ok(ImageTensor::unbatch(&g.value(out))?.pop().expect("one image"))
    }

    /// Loss graph for a batch with fixed reparameterization noise `eps`
    /// of shape (N, latent_dim).
    pub fn loss_graph(&self, g: &Graph, x: &Tensor, eps: &Tensor) -> Var {
        let (mu, lv) = self.encode_graph(g, g.input(x.clone()), None);
        let z = reparameterize_graph(g, mu, lv, eps);
        let x_hat = self.decode_graph(g, z, None);
        let n = x.shape()[0] as f64;
        let (rec, kl) = match self.config.reduction {
            LossReduction::Sum => (
                g.scale(g.binary_cross_entropy(x_hat, x, None, VAE_BCE_EPS, Reduction::Sum), 1.0 / n),
                g.scale(g.kl_standard_normal(mu, lv, Reduction::Sum), 1.0 / n),
            ),
            LossReduction::Mean => (
                g.binary_cross_entropy(x_hat, x, None, VAE_BCE_EPS, Reduction::Mean),
                g.kl_standard_normal(mu, lv, Reduction::Mean),
            ),
        };
        g.add(rec, g.scale(kl, self.config.kl_weight))
    }
}

/// `z = mu + eps * exp(log_var / 2)` on a graph, differentiable in both
/// `mu` and `log_var`.
pub fn reparameterize_graph(g: &Graph, mu: Var, log_var: Var, eps: &Tensor) -> Var {
    let sigma = g.exp(g.scale(log_var, 0.5));
    g.add(mu, g.mul_const(sigma, eps.clone()))
}

pub fn reparameterize(params: &LatentParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != params.mu.len() {
        return Err(invalid("eps length must equal latent_dim"));
    }
    Ok(params
        .mu
        .iter()
        .zip(&params.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + e * (lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP) / 2.0).exp())
        .collect())
}

/// Summed binary cross-entropy with `x_hat` clamped into `[1e-7, 1 - 1e-7]`.
pub fn bce_recon_loss(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(invalid("bce_recon_loss: shape mismatch"));
    }
    ensure_finite("reconstruction", x_hat.iter())?;
    ensure_finite("target", x.iter())?;
    Ok(Zip::from(x_hat).and(x).fold(0.0, |acc, &p, &t| {
        let p = p.clamp(VAE_BCE_EPS, 1.0 - VAE_BCE_EPS);
        acc - (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
    }))
}

pub fn kl_loss(params: &LatentParams) -> f64 {
    params
        .mu
        .iter()
        .zip(&params.log_var)
        .map(|(m, lv)| {
            let lv = lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
            0.5 * (lv.exp() + m * m - 1.0 - lv)
        })
        .sum()
}

pub fn vae_loss(x_hat: &Tensor, x: &Tensor, params: &LatentParams, kl_weight: f64) -> Result<f64> {
    if !(kl_weight >= 0.0) {
        return Err(invalid("kl_weight must be >= 0"));
    }
    Ok(bce_recon_loss(x_hat, x)? + kl_weight * kl_loss(params))
}

/// Fits a VAE to a set of images with Adam; returns the parameters and the
/// mean loss of every epoch.
pub fn train_vae(
    vae: &Vae,
    images: &[&ImageTensor],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(ParamStore, Vec<f64>)> {
    if images.is_empty() {
        return Err(invalid("no training images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    vae.init(&mut params, &mut rng);
    let mut opt = Adam::new(learning_rate);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size.max(1)) {
            let refs: Vec<&ImageTensor> = batch.iter().map(|&i| images[i]).collect();
            let x = ImageTensor::batch(&refs)?;
            let eps = gaussian_like(&[batch.len(), vae.config.latent_dim], &mut rng);
            let g = Graph::new(&params);
            let loss = vae.loss_graph(&g, &x, &eps);
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("vae loss became {v}"),
                });
            }
            total += v * batch.len() as f64;
            let grads = g.backward(loss).params();
            drop(g);
            opt.step(&mut params, &grads);
        }
        history.push(total / images.len() as f64);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn tiny() -> (Vae, ParamStore) {
        let cfg = VaeConfig {
            channels: [2, 3, 4],
            latent_dim: 2,
            ..VaeConfig::default()
        };
        let vae = Vae::new(cfg, 3, 8, "vae").unwrap();
        let mut store = ParamStore::new();
        vae.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (vae, store)
    }

    fn lp(mu: f64, log_var: f64) -> LatentParams {
        LatentParams {
            mu: vec![mu],
            log_var: vec![log_var],
        }
    }

    #[test]
    fn loss_spot_values() {
        let one = Tensor::from_elem(IxDyn(&[1]), 1.0);
        let half = Tensor::from_elem(IxDyn(&[1]), 0.5);
        assert!((bce_recon_loss(&half, &one).unwrap() - LN_2).abs() < 1e-12);
        assert_eq!(kl_loss(&lp(0.0, 0.0)), 0.0);
        assert!((kl_loss(&lp(1.0, 0.0)) - 0.5).abs() < 1e-15);
        let v = kl_loss(&lp(0.0, 2f64.ln()));
        assert!((v - 0.5 * (1.0 - LN_2)).abs() < 1e-15);
        assert!((v - 0.153426).abs() < 1e-6);
        let zero = Tensor::zeros(IxDyn(&[1]));
        for x in [&zero, &one] {
            assert!(bce_recon_loss(x, x).unwrap() <= 1.2e-7);
        }
        assert!(vae_loss(&one, &one, &lp(0.0, 0.0), 1.0).unwrap() <= 1.2e-7);
    }

    #[test]
    fn combined_loss_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_shape_simple_fn(IxDyn(&[4]), || rand::Rng::random::<f64>(&mut rng));
        let x_hat = Tensor::from_shape_simple_fn(IxDyn(&[4]), || rand::Rng::random::<f64>(&mut rng));
        let p = LatentParams {
            mu: vec![0.3, -1.2],
            log_var: vec![0.1, -0.7],
        };
        let sum = bce_recon_loss(&x_hat, &x).unwrap() + 0.7 * kl_loss(&p);
        assert!((vae_loss(&x_hat, &x, &p, 0.7).unwrap() - sum).abs() < 1e-12);
        assert_eq!(vae_loss(&x_hat, &x, &p, 0.0).unwrap(), bce_recon_loss(&x_hat, &x).unwrap());
        let oracle: f64 = x
            .iter()
            .zip(x_hat.iter())
            .map(|(t, p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum();
        assert!((bce_recon_loss(&x_hat, &x).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn bce_minimized_at_target() {
        for &t in &[0.0, 0.2, 0.5, 0.9, 1.0] {
            let target = Tensor::from_elem(IxDyn(&[1]), t);
            let best = (0..=1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|a, b| {
                    let la = bce_recon_loss(&Tensor::from_elem(IxDyn(&[1]), *a), &target).unwrap();
                    let lb = bce_recon_loss(&Tensor::from_elem(IxDyn(&[1]), *b), &target).unwrap();
                    la.total_cmp(&lb)
                })
                .unwrap();
            assert!((best - t).abs() < 1e-9, "{t}: {best}");
        }
    }

    #[test]
    fn reparameterize_values() {
        let p = LatentParams {
            mu: vec![0.4, -2.0],
            log_var: vec![1.0, 0.0],
        };
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), p.mu);
        assert_eq!(reparameterize(&lp(0.0, 0.0), &[1.5]).unwrap(), vec![1.5]);
        assert!(reparameterize(&p, &[0.0]).is_err());
    }

    #[test]
    fn encode_decode_contracts() {
        let (vae, mut store) = tiny();
        let x = Tensor::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |d| ((d[1] + d[2] * 3 + d[3]) % 5) as f64 / 4.0);
        let a = vae.encode(&store, &x).unwrap();
        assert_eq!(a, vae.encode(&store, &x).unwrap());
        assert_eq!(a[0].mu.len(), 2);
        assert_eq!(a[0].log_var.len(), 2);
        assert!(vae.encode(&store, &Tensor::zeros(IxDyn(&[1, 3, 16, 16]))).is_err());

        let out = vae.decode(&store, &[0.3, -2.0]).unwrap();
        assert_eq!((out.height(), out.width()), (8, 8));
        assert!(out.array().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(vae.decode(&store, &[0.3]).is_err());

        for name in ["vae/mu/weight", "vae/mu/bias", "vae/log_var/weight", "vae/log_var/bias"] {
            store.value_mut(name).unwrap().fill(0.0);
        }
        for p in vae.encode(&store, &x).unwrap() {
            assert_eq!(p.mu, vec![0.0, 0.0]);
            assert_eq!(p.log_var, vec![0.0, 0.0]);
        }
        let decoder: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("vae/fc") || n.starts_with("vae/dec"))
            .cloned()
            .collect();
        for name in decoder {
            store.value_mut(&name).unwrap().fill(0.0);
        }
        let flat = vae.decode(&store, &[1.0, -1.0]).unwrap();
        assert!(flat.array().iter().all(|&v| v == 0.5));
    }
}
