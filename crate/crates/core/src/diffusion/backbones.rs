//! Noise-prediction networks. All backbones take the conditioned input, the
//! current chain state and the step index, and return ε̂ with the shape of
//! the chain state.

use fundus_nn::{Conv2d, Graph, Linear, ParamStore, Reduction, Tensor, Var};
use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::vae::{reparameterize_graph, Vae, VaeConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Unet,
    UnetPp,
    ResnetUnet,
    DensenetUnet,
    #[default]
    Vae,
}

impl Backbone {
    pub const ALL: [Backbone; 5] = [
        Backbone::Unet,
        Backbone::UnetPp,
        Backbone::ResnetUnet,
        Backbone::DensenetUnet,
        Backbone::Vae,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Backbone::Unet => "unet",
            Backbone::UnetPp => "unet_pp",
            Backbone::ResnetUnet => "resnet_unet",
            Backbone::DensenetUnet => "densenet_unet",
            Backbone::Vae => "vae",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown backbone {key:?}")))
    }
}

/// How the U-Net family head maps to ε̂. `Image` reads the head through a
/// sigmoid as x̂0 in (0, 1) and converts, like the VAE decoder does;
/// `Epsilon` takes the head output as ε̂ directly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Image,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub backbone: Backbone,
    /// ignored by the VAE, which always decodes an image
    pub parameterization: Parameterization,
    /// base channel width of the U-Net family
    pub width: usize,
    pub time_dim: usize,
    pub vae: VaeConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            backbone: Backbone::Vae,
            parameterization: Parameterization::Image,
            width: 16,
            time_dim: 32,
            vae: VaeConfig {
                channels: [16, 32, 64],
                latent_dim: 64,
                ..VaeConfig::default()
            },
        }
    }
}

/// Transformer-style sinusoidal embedding of the step indices, (N, dim).
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_shape_fn(IxDyn(&[t.len(), dim]), |d| {
        let (n, j) = (d[0], d[1]);
        if j >= 2 * half {
            return 0.0;
        }
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = t[n] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Plain,
    Residual,
    Dense,
}

/// Two-convolution block. The first convolution is instance-normalised
/// (so it carries no bias) and then shifted by the time embedding.
#[derive(Clone, Debug)]
struct Block {
    name: String,
    cin: usize,
    cout: usize,
    kind: BlockKind,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, kind: BlockKind) -> Self {
        Block {
            name: name.to_string(),
            cin,
            cout,
            kind,
        }
    }

    fn growth(&self) -> usize {
        (self.cout / 2).max(1)
    }

    fn convs(&self) -> Vec<Conv2d> {
        let n = |s: &str| format!("{}/{s}", self.name);
        match self.kind {
            BlockKind::Plain => vec![
                Conv2d::new(n("conv1"), self.cin, self.cout, 3).no_bias(),
                Conv2d::new(n("conv2"), self.cout, self.cout, 3),
            ],
            BlockKind::Residual => {
                let mut v = vec![
                    Conv2d::new(n("conv1"), self.cin, self.cout, 3).no_bias(),
                    Conv2d::new(n("conv2"), self.cout, self.cout, 3),
                ];
                if self.cin != self.cout {
                    v.push(Conv2d::new(n("skip"), self.cin, self.cout, 1));
                }
                v
            }
            BlockKind::Dense => {
                let g = self.growth();
                vec![
                    Conv2d::new(n("conv1"), self.cin, g, 3).no_bias(),
                    Conv2d::new(n("conv2"), self.cin + g, g, 3),
                    Conv2d::new(n("trans"), self.cin + 2 * g, self.cout, 1),
                ]
            }
        }
    }

    fn time_channels(&self) -> usize {
        match self.kind {
            BlockKind::Dense => self.growth(),
            _ => self.cout,
        }
    }

    fn time_proj(&self, time_dim: usize) -> Linear {
        Linear::new(format!("{}/time", self.name), time_dim, self.time_channels())
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, time_dim: usize) {
        for c in self.convs() {
            c.init(store, rng);
        }
        self.time_proj(time_dim).init(store, rng);
    }

    fn forward(&self, g: &Graph, x: Var, temb: Var) -> Var {
        let convs = self.convs();
        let t = self.time_proj(0).forward(g, temb);
        let first = g.silu(g.add_channel_offset(g.channel_norm(convs[0].forward(g, x), 1e-5), t));
        match self.kind {
            BlockKind::Plain => g.silu(convs[1].forward(g, first)),
            BlockKind::Residual => {
                let h = convs[1].forward(g, first);
                let skip = if convs.len() > 2 { convs[2].forward(g, x) } else { x };
                g.silu(g.add(h, skip))
            }
            BlockKind::Dense => {
                let second = g.silu(convs[1].forward(g, g.concat(1, &[x, first])));
                g.silu(convs[2].forward(g, g.concat(1, &[x, first, second])))
            }
        }
    }
}

pub struct DenoiserOutput {
    pub eps: Var,
    /// KL term of the VAE backbone, summed over latent dimensions, divided
    /// by the number of output pixel values and averaged over the batch
    pub kl: Option<Var>,
}

/// `x_t = sqrt(ᾱ) x0 + sqrt(1 - ᾱ) ε` solved for ε, per sample.
fn eps_from_image(g: &Graph, x_t: Var, x0: Var, t: &[usize], schedule: &NoiseSchedule) -> Var {
    let inv: Vec<f64> = t.iter().map(|&t| 1.0 / (1.0 - schedule.alpha_bar(t)).sqrt()).collect();
    let ratio: Vec<f64> = t
        .iter()
        .zip(&inv)
        .map(|(&t, k)| schedule.alpha_bar(t).sqrt() * k)
        .collect();
    g.sub(g.scale_samples(x_t, &inv), g.scale_samples(x0, &ratio))
}

/// A noise predictor. Parameters are named `den/...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub in_channels: usize,
    pub image_size: usize,
}

const PREFIX: &str = "den";

impl Denoiser {
    pub fn new(config: DenoiserConfig, in_channels: usize, image_size: usize) -> Result<Self> {
        if config.width == 0 || config.time_dim < 2 {
            return Err(Error::Config("denoiser width must be >= 1 and time_dim >= 2".into()));
        }
        if image_size < 8 || image_size % 8 != 0 {
            return Err(invalid(format!("image size must be a positive multiple of 8, got {image_size}")));
        }
        if config.backbone == Backbone::Vae {
            // validates the latent settings
            Vae::new(config.vae.clone(), in_channels, image_size, PREFIX)?;
        }
        Ok(Denoiser {
            config,
            in_channels,
            image_size,
        })
    }

    fn vae(&self) -> Vae {
        Vae::new(self.config.vae.clone(), self.in_channels, self.image_size, &format!("{PREFIX}/vae"))
            .expect("checked in new")
            .with_time_embedding(self.config.time_dim)
    }

    fn blocks(&self) -> Vec<Block> {
        let w = self.config.width;
        let c = self.in_channels;
        let kind = match self.config.backbone {
            Backbone::ResnetUnet => BlockKind::Residual,
            Backbone::DensenetUnet => BlockKind::Dense,
            _ => BlockKind::Plain,
        };
        let b = |name: &str, cin, cout| Block::new(&format!("{PREFIX}/{name}"), cin, cout, kind);
        match self.config.backbone {
            Backbone::Vae => Vec::new(),
            Backbone::UnetPp => vec![
                b("x00", c, w),
                b("x10", w, 2 * w),
                b("x20", 2 * w, 4 * w),
                b("x01", 3 * w, w),
                b("x11", 6 * w, 2 * w),
                b("x02", 4 * w, w),
            ],
            _ => vec![
                b("enc0", c, w),
                b("enc1", w, 2 * w),
                b("mid", 2 * w, 4 * w),
                b("dec1", 6 * w, 2 * w),
                b("dec0", 3 * w, w),
            ],
        }
    }

    fn time_mlp(&self) -> Linear {
        let d = self.config.time_dim;
        Linear::new(format!("{PREFIX}/time"), d, d)
    }

    fn head(&self) -> Conv2d {
        Conv2d::new(format!("{PREFIX}/out"), self.config.width, 3, 3)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.time_mlp().init(store, rng);
        if self.config.backbone == Backbone::Vae {
            self.vae().init(store, rng);
            return;
        }
        for b in self.blocks() {
            b.init(store, rng, self.config.time_dim);
        }
        // a zero head starts at ε̂ = 0, or at x̂0 = 0.5
        self.head().init_scaled(store, rng, 0.0);
    }

    fn embed(&self, g: &Graph, t: &[usize]) -> Var {
        let e = g.input(sinusoidal_embedding(t, self.config.time_dim));
        g.silu(self.time_mlp().forward(g, e))
    }

    /// `x_in` is the conditioned network input (N, in_channels, S, S),
    /// `x_t` the chain state (N, 3, S, S). `latent_noise` (N, latent_dim)
    /// switches the VAE backbone to a sampled latent; without it the mean
    /// is used.
    pub fn forward(
        &self,
        g: &Graph,
        x_in: Var,
        x_t: Var,
        t: &[usize],
        schedule: &NoiseSchedule,
        latent_noise: Option<&Tensor>,
    ) -> Result<DenoiserOutput> {
        let s = g.shape(x_in);
        let n = s[0];
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.image_size || s[3] != self.image_size {
            return Err(invalid(format!(
                "denoiser expects (N, {}, {s2}, {s2}), got {s:?}",
                self.in_channels,
                s2 = self.image_size
            )));
        }
        if g.shape(x_t) != [n, 3, self.image_size, self.image_size] || t.len() != n {
            return Err(invalid("denoiser: chain state or step indices do not match the batch"));
        }
        if let Some(&bad) = t.iter().find(|&&t| t == 0 || t > schedule.steps()) {
            return Err(invalid(format!("step index {bad} outside [1, {}]", schedule.steps())));
        }
        let temb = self.embed(g, t);
        let blocks = self.blocks();
        let pool = |v| g.avg_pool2d(v, 2, 2, 0);
        let up = |v| g.upsample_nearest(v, 2);
        let out = match self.config.backbone {
            Backbone::Vae => return self.vae_forward(g, x_in, x_t, t, temb, schedule, latent_noise),
            Backbone::UnetPp => {
                let x00 = blocks[0].forward(g, x_in, temb);
                let x10 = blocks[1].forward(g, pool(x00), temb);
                let x20 = blocks[2].forward(g, pool(x10), temb);
                let x01 = blocks[3].forward(g, g.concat(1, &[x00, up(x10)]), temb);
                let x11 = blocks[4].forward(g, g.concat(1, &[x10, up(x20)]), temb);
                blocks[5].forward(g, g.concat(1, &[x00, x01, up(x11)]), temb)
            }
            _ => {
                let e0 = blocks[0].forward(g, x_in, temb);
                let e1 = blocks[1].forward(g, pool(e0), temb);
                let mid = blocks[2].forward(g, pool(e1), temb);
                let d1 = blocks[3].forward(g, g.concat(1, &[up(mid), e1]), temb);
                blocks[4].forward(g, g.concat(1, &[up(d1), e0]), temb)
            }
        };
        let head = self.head().forward(g, out);
        let eps = match self.config.parameterization {
            Parameterization::Epsilon => head,
            Parameterization::Image => eps_from_image(g, x_t, g.sigmoid(head), t, schedule),
        };
        Ok(DenoiserOutput { eps, kl: None })
    }

    /// The VAE reconstructs x̂0 in (0, 1); the noise estimate follows from
    /// `x_t = sqrt(ᾱ) x0 + sqrt(1 - ᾱ) ε`.
    #[allow(clippy::too_many_arguments)]
    fn vae_forward(
        &self,
        g: &Graph,
        x_in: Var,
        x_t: Var,
        t: &[usize],
        temb: Var,
        schedule: &NoiseSchedule,
        latent_noise: Option<&Tensor>,
    ) -> Result<DenoiserOutput> {
        let vae = self.vae();
        let n = t.len();
        let (mu, lv) = vae.encode_graph(g, x_in, Some(temb));
        let z = match latent_noise {
            Some(eps) => {
                if eps.shape() != [n, vae.config.latent_dim] {
                    return Err(invalid("latent noise must be (N, latent_dim)"));
                }
                reparameterize_graph(g, mu, lv, eps)
            }
            None => mu,
        };
        let x0 = vae.decode_graph(g, z, Some(temb));
        let eps = eps_from_image(g, x_t, x0, t, schedule);
        let pixels = (3 * self.image_size * self.image_size * n) as f64;
        let kl = g.scale(g.kl_standard_normal(mu, lv, Reduction::Sum), 1.0 / pixels);
        Ok(DenoiserOutput { eps, kl: Some(kl) })
    }

    /// Noise regression loss, plus the weighted KL term for the VAE.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &Graph,
        x_in: Var,
        x_t: Var,
        t: &[usize],
        eps_true: &Tensor,
        schedule: &NoiseSchedule,
        latent_noise: Option<&Tensor>,
    ) -> Result<Var> {
        let out = self.forward(g, x_in, x_t, t, schedule, latent_noise)?;
        let target = g.input(eps_true.clone());
        let mse = g.mse(out.eps, target);
        Ok(match out.kl {
            Some(kl) => g.add(mse, g.scale(kl, self.config.vae.kl_weight)),
            None => mse,
        })
    }
}
