//! Restorer training, the screen → restore → re-verify loop, and restorer
//! persistence.
//!
//! Restoration starts the reverse chain from the degraded image noised to
//! step `T` (not from pure noise), so the chain keeps the image's layout
//! and only has to remove the degradation. The pooled condition is fused
//! with the chain state at every step.

use std::io::Write as _;
use std::path::Path;

use fundus_nn::{Adam, Graph, Optimizer, ParamStore, Tensor};
use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_with_meta, save_with_meta, Checkpoint};
use crate::condfeat::{AttentionConfig, ConditionalFeature, ExtractorConfig, FeatureExtractor, POOLED_NAME};
use crate::dataset::FundusSample;
use crate::diffusion::{
    gaussian_like, q_sample, sample_restore, Backbone, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig,
};
use crate::error::{invalid, Error, Result};
use crate::fusion::{ConditionMode, Fusion, FusionStrategy};
use crate::image::ImageTensor;
use crate::metrics::{MetricsRow, PerceptualNet};
use crate::readability::{preprocess, ClassifierModel, LabelKind, ReadabilityLabels};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub strategy: FusionStrategy,
    pub condition_mode: ConditionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerConfig {
    pub image_size: usize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub fusion: FusionSection,
    pub extractor: ExtractorConfig,
    /// Adam step size
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// readable images pooled into the condition at each training step
    pub condition_sources: usize,
    /// labels that must be readable for an image to count as restored
    pub target_labels: Vec<LabelKind>,
    /// draw the `sqrt(β_t)` noise term while sampling
    pub stochastic_sampling: bool,
    pub seed: u64,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig {
            image_size: 64,
            schedule: ScheduleConfig {
                steps: 50,
                ..ScheduleConfig::default()
            },
            denoiser: DenoiserConfig::default(),
            fusion: FusionSection::default(),
            extractor: ExtractorConfig {
                width: 8,
                attention: AttentionConfig { embed_dim: 32, heads: 4 },
                ..ExtractorConfig::default()
            },
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            condition_sources: 4,
            target_labels: vec![LabelKind::OpticDisc],
            stochastic_sampling: false,
            seed: 0,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size must be a multiple of 8, got {}", self.image_size)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.condition_sources == 0 {
            return Err(Error::Config("learning_rate, batch_size and condition_sources must be positive".into()));
        }
        if self.target_labels.is_empty() {
            return Err(Error::Config("target_labels must name at least one label".into()));
        }
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.parts().map(|_| ())
    }

    fn parts(&self) -> Result<(Denoiser, Fusion, FeatureExtractor)> {
        let as_config = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Fusion(m) => Error::Config(m),
            other => other,
        };
        let fx = FeatureExtractor::new(self.extractor.clone())?;
        let src = fx.output_size(self.image_size).map_err(as_config)?;
        let fusion = Fusion::new(
            self.fusion.strategy,
            self.fusion.condition_mode,
            self.extractor.attention.embed_dim,
            src,
            self.image_size,
        )
        .map_err(as_config)?;
        let den = Denoiser::new(
            self.denoiser.clone(),
            self.fusion.condition_mode.input_channels(),
            self.image_size,
        )
        .map_err(as_config)?;
        Ok((den, fusion, fx))
    }

    pub fn with_backbone(&self, backbone: Backbone) -> Self {
        let mut c = self.clone();
        c.denoiser.backbone = backbone;
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RestorerMeta {
    config: RestorerConfig,
    n_sources: usize,
    loss_history: Vec<f64>,
}

/// A trained restorer: denoiser, fusion and extractor parameters plus the
/// pooled condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Restorer {
    pub config: RestorerConfig,
    pub params: ParamStore,
    pub condition: ConditionalFeature,
    pub loss_history: Vec<f64>,
    schedule: NoiseSchedule,
}

/// Per-sample `q_sample` with individual steps `ts`.
fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let mut out = Tensor::zeros(x0.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let row = q_sample(
            &x0.index_axis(Axis(0), i).to_owned(),
            t,
            &eps.index_axis(Axis(0), i).to_owned(),
            schedule,
        )?;
        out.index_axis_mut(Axis(0), i).assign(&row);
    }
    Ok(out)
}

pub(crate) fn fit(image: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if image.height() == size && image.width() == size {
        Ok(image.clone())
    } else {
        preprocess(image, size)
    }
}

impl Restorer {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// ε̂ for a batch of chain states (N, 3, S, S) at step `t`.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let (den, fusion, _) = self.config.parts()?;
        let g = Graph::new(&self.params);
        let c = g.input(self.condition.batched());
        let xt = g.input(x_t.clone());
        let x_in = fusion.condition(&g, c, xt)?;
        let ts = vec![t; x_t.shape()[0]];
        let out = den.forward(&g, x_in, xt, &ts, &self.schedule, None)?;
        Ok((*g.value(out.eps)).clone())
    }

    /// Noises the images to step `T` and runs the conditioned reverse
    /// chain; outputs are clamped to [0, 1].
    pub fn run_chain<R: Rng + ?Sized>(&self, images: &[&ImageTensor], rng: &mut R) -> Result<Vec<ImageTensor>> {
        let s = self.config.image_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let fitted = chunk.iter().map(|im| fit(im, s)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageTensor> = fitted.iter().collect();
            let x = ImageTensor::batch(&refs)?;
            let eps = gaussian_like(x.shape(), rng);
            let x_t = q_sample(&x, self.schedule.steps(), &eps, &self.schedule)?;
            let x0 = sample_restore(
                &x_t,
                |x, t| self.predict_noise(x, t),
                &self.schedule,
                rng,
                self.config.stochastic_sampling,
            )?;
            out.extend(ImageTensor::unbatch(&x0)?.into_iter().map(|im| im.clamp01()));
        }
        Ok(out)
    }

    /// A schedule from a configuration must match the one the model was
    /// trained with.
    pub fn check_schedule(&self, config: &ScheduleConfig) -> Result<()> {
        let other = config.build()?;
        if other.steps() != self.schedule.steps() {
            return Err(Error::Compatibility(format!(
                "model was trained with T = {}, configuration asks for T = {}",
                self.schedule.steps(),
                other.steps()
            )));
        }
        let same = other
            .betas()
            .iter()
            .zip(self.schedule.betas())
            .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1e-12));
        if !same {
            return Err(Error::Compatibility("noise schedule differs from the trained one".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.add_params(&self.params);
        ckpt.insert_f64(POOLED_NAME, &self.condition.batched());
        let betas = self.schedule.betas();
        ckpt.insert_f64("sched/beta", &Tensor::from_shape_vec(IxDyn(&[betas.len()]), betas.to_vec()).expect("1-D"));
        let ab = self.schedule.alpha_bars();
        ckpt.insert_f64("sched/alpha_bar", &Tensor::from_shape_vec(IxDyn(&[ab.len()]), ab.to_vec()).expect("1-D"));
        ckpt
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = RestorerMeta {
            config: self.config.clone(),
            n_sources: self.condition.n_sources,
            loss_history: self.loss_history.clone(),
        };
        save_with_meta(path, &self.to_checkpoint(), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, meta): (Checkpoint, RestorerMeta) = load_with_meta(path)?;
        let config = meta.config;
        config.validate()?;
        let (den, fusion, fx) = config.parts()?;
        let mut expected = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        den.init(&mut expected, &mut rng);
        fusion.init(&mut expected, &mut rng);
        fx.init(&mut expected, &mut rng);
        let mut params = ParamStore::new();
        for (name, p) in expected.iter() {
            let v = ckpt.require(name)?;
            if v.shape() != p.value.shape() {
                return Err(Error::Compatibility(format!(
                    "{name}: stored shape {:?}, configuration expects {:?}",
                    v.shape(),
                    p.value.shape()
                )));
            }
            params.insert(name.clone(), v);
        }
        let stored_beta = ckpt.require("sched/beta")?;
        let schedule = NoiseSchedule::from_betas(stored_beta.iter().copied().collect())
            .map_err(|e| Error::Compatibility(format!("stored schedule: {e}")))?;
        let restorer_schedule = config.schedule.build()?;
        if restorer_schedule.steps() != schedule.steps() {
            return Err(Error::Compatibility(format!(
                "stored schedule has T = {}, its configuration says T = {}",
                schedule.steps(),
                restorer_schedule.steps()
            )));
        }
        let condition = ConditionalFeature::from_batched(&ckpt.require(POOLED_NAME)?, meta.n_sources)?;
        Ok(Restorer {
            config,
            params,
            condition,
            loss_history: meta.loss_history,
            // the exact f64 schedule, not its f32 copy
            schedule: restorer_schedule,
        })
    }
}

/// Trains a restorer on the samples at `train`. Denoising targets are the
/// clean images; the condition is pooled from the fully readable ones.
/// Returns the restorer with its per-epoch mean loss in `loss_history`.
pub fn train_restorer(config: &RestorerConfig, corpus: &[FundusSample], train: &[usize]) -> Result<Restorer> {
    config.validate()?;
    let (den, fusion, fx) = config.parts()?;
    let schedule = config.schedule.build()?;
    let s = config.image_size;
    let samples = train
        .iter()
        .map(|&i| corpus.get(i).ok_or_else(|| invalid(format!("training index {i} out of range"))))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let targets = samples.iter().map(|s_| fit(&s_.clean, s)).collect::<Result<Vec<_>>>()?;
    let readable: Vec<(&str, ImageTensor)> = samples
        .iter()
        .filter(|s_| s_.labels == ReadabilityLabels::ALL_TRUE)
        .map(|s_| Ok((s_.id.as_str(), fit(&s_.image, s)?)))
        .collect::<Result<_>>()?;
    if readable.is_empty() {
        return Err(Error::Pipeline("training data has no readable images to build the condition from".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    den.init(&mut params, &mut rng);
    fusion.init(&mut params, &mut rng);
    fx.init(&mut params, &mut rng);
    if config.extractor.freeze {
        params.set_frozen("cond/", true);
    }
    let mut opt = Adam::new(config.learning_rate);
    let k = config.condition_sources.min(readable.len());
    let latent = (config.denoiser.backbone == Backbone::Vae).then_some(config.denoiser.vae.latent_dim);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let n = batch.len();
            let refs: Vec<&ImageTensor> = batch.iter().map(|&i| &targets[i]).collect();
            let x0 = ImageTensor::batch(&refs)?;
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let eps = gaussian_like(x0.shape(), &mut rng);
            let x_t = q_sample_batch(&x0, &ts, &eps, &schedule)?;
            let picks = rand::seq::index::sample(&mut rng, readable.len(), k);
            let src: Vec<&ImageTensor> = picks.iter().map(|i| &readable[i].1).collect();
            let latent_noise = latent.map(|d| gaussian_like(&[n, d], &mut rng));

            let g = Graph::new(&params);
            let feats = fx.features_graph(&g, g.input(ImageTensor::batch(&src)?))?;
            let parts: Vec<_> = (0..k).map(|i| g.narrow(feats, 0, i, 1)).collect();
            let c = g.scale(g.sum_of(&parts), 1.0 / k as f64);
            let xt = g.input(x_t);
            let x_in = fusion.condition(&g, c, xt)?;
            let loss = den.loss(&g, x_in, xt, &ts, &eps, &schedule, latent_noise.as_ref())?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("restorer loss became {value}"),
                });
            }
            total += value * n as f64;
            let grads = g.backward(loss).params();
            drop(g);
            opt.step(&mut params, &grads);
        }
        let mean = total / targets.len() as f64;
        log::info!("restorer epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }

    let pairs: Vec<(&str, &ImageTensor)> = readable.iter().map(|(id, im)| (*id, im)).collect();
    let condition = fx.static_condition(&params, &pairs)?;
    params.set_frozen("cond/", false);
    Ok(Restorer {
        config: config.clone(),
        params,
        condition,
        loss_history: history,
        schedule,
    })
}

pub fn write_history_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,loss").expect("write to memory");
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{i},{l:.8}").expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestorationResult {
    pub id: String,
    #[serde(skip)]
    pub restored: ImageTensor,
    pub labels_before: ReadabilityLabels,
    pub labels_after: ReadabilityLabels,
    /// the target labels are readable after restoration
    pub verified: bool,
    /// false when screening found the image readable and skipped diffusion
    pub diffused: bool,
    /// against the clean image, when one is known
    pub metrics: Option<MetricsRow>,
}

pub struct RestoreItem<'a> {
    pub id: &'a str,
    pub image: &'a ImageTensor,
    pub clean: Option<&'a ImageTensor>,
}

/// Screens every image with `classifier`, restores the ones whose target
/// labels are not all readable, and re-classifies the results with the
/// same classifier.
pub fn restore_batch(
    items: &[RestoreItem],
    classifier: &ClassifierModel,
    restorer: &Restorer,
    net: &PerceptualNet,
    seed: u64,
) -> Result<Vec<RestorationResult>> {
    let targets = &restorer.config.target_labels;
    let s = restorer.config.image_size;
    let fitted = items.iter().map(|it| fit(it.image, s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = fitted.iter().collect();
    let before = labels_of(&classifier.predict(&refs)?);
    let todo: Vec<usize> = (0..items.len()).filter(|&i| !before[i].all_readable(targets)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let todo_refs: Vec<&ImageTensor> = todo.iter().map(|&i| &fitted[i]).collect();
    let restored = restorer.run_chain(&todo_refs, &mut rng)?;
    let after = if restored.is_empty() {
        Vec::new()
    } else {
        labels_of(&classifier.predict(&restored.iter().collect::<Vec<_>>())?)
    };

    let mut by_index = todo.into_iter().zip(restored.into_iter().zip(after)).collect::<std::collections::BTreeMap<_, _>>();
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let (restored, labels_after, diffused) = match by_index.remove(&i) {
                Some((img, lab)) => (img, lab, true),
                None => (fitted[i].clone(), before[i], false),
            };
            let metrics = it
                .clean
                .map(|c| MetricsRow::compute(it.id, &fit(c, s)?, &restored, net))
                .transpose()?;
            Ok(RestorationResult {
                id: it.id.to_string(),
                verified: labels_after.all_readable(targets),
                restored,
                labels_before: before[i],
                labels_after,
                diffused,
                metrics,
            })
        })
        .collect()
}

pub fn restore(
    item: &RestoreItem,
    classifier: &ClassifierModel,
    restorer: &Restorer,
    net: &PerceptualNet,
    seed: u64,
) -> Result<RestorationResult> {
    Ok(restore_batch(std::slice::from_ref(item), classifier, restorer, net, seed)?
        .pop()
        .expect("one result per item"))
}

fn labels_of(probs: &ndarray::Array2<f64>) -> Vec<ReadabilityLabels> {
    probs
        .rows()
        .into_iter()
        .map(|r| ReadabilityLabels::from_probs(&r.to_vec()))
        .collect()
}
