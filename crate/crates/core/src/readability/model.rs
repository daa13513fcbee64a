use std::path::Path;

use fundus_nn::{resize_bilinear_array, Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_with_meta, save_with_meta, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;

use super::labels::ReadabilityLabels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierArch {
    /// stem plus three stages of parallel 1x1 / 3x3 / 5x5 / pooling branches
    InceptionSmall,
    /// three stride-2 convolutions
    PlainCnn,
}

/// Photometric and geometric training-time augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub arch: ClassifierArch,
    /// channel count of the first stage; later stages scale from it
    pub width: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// per label `(w_pos, w_neg)`; computed from the training labels when absent
    pub class_weights: Option<[(f64, f64); 4]>,
    pub augment: AugmentConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_size: 224,
            arch: ClassifierArch::InceptionSmall,
            width: 8,
            learning_rate: 1e-4,
            optimizer: "rmsprop".into(),
            epochs: 10,
            batch_size: 16,
            class_weights: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 {
            return Err(Error::Config(format!("input_size must be >= 8, got {}", self.input_size)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.optimizer != "rmsprop" {
            return Err(Error::Config(format!("unsupported optimizer {:?}; only rmsprop", self.optimizer)));
        }
        if self.width == 0 || self.batch_size == 0 {
            return Err(Error::Config("width and batch_size must be >= 1".into()));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob)
            || a.brightness.0 > a.brightness.1
            || a.contrast.0 > a.contrast.1
            || a.brightness.0 < 0.0
            || a.contrast.0 < 0.0
        {
            return Err(Error::Config("invalid augmentation ranges".into()));
        }
        Ok(())
    }
}

/// Where and how long a model was trained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    training: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    pub training: TrainingMeta,
}

const HEAD: &str = "cls/head";

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let feat = match config.arch {
            ClassifierArch::PlainCnn => {
                let w = config.width;
                for (i, (cin, cout)) in [(3, w), (w, 2 * w), (2 * w, 4 * w)].into_iter().enumerate() {
                    Conv2d::new(format!("cls/conv{i}"), cin, cout, 3).stride(2).init(&mut params, &mut rng);
                }
                4 * w
            }
            ClassifierArch::InceptionSmall => {
                let w = config.width;
                Conv2d::new("cls/stem", 3, w, 3).stride(2).init(&mut params, &mut rng);
                let mut cin = w;
                for (i, b) in inception_widths(w).into_iter().enumerate() {
                    let p = format!("cls/mix{i}");
                    let half = (b / 2).max(1);
                    Conv2d::new(format!("{p}/b1"), cin, b, 1).init(&mut params, &mut rng);
                    Conv2d::new(format!("{p}/b3r"), cin, half, 1).init(&mut params, &mut rng);
                    Conv2d::new(format!("{p}/b3"), half, b, 3).init(&mut params, &mut rng);
                    Conv2d::new(format!("{p}/b5r"), cin, half, 1).init(&mut params, &mut rng);
                    Conv2d::new(format!("{p}/b5"), half, b, 5).init(&mut params, &mut rng);
                    Conv2d::new(format!("{p}/bp"), cin, b, 1).init(&mut params, &mut rng);
                    cin = 4 * b;
                }
                cin
            }
        };
        Linear::new(HEAD, feat, 4).init(&mut params, &mut rng);
        Ok(ClassifierModel {
            config,
            params,
            training: TrainingMeta { seed, ..TrainingMeta::default() },
        })
    }

    /// Records the forward pass on `g` and returns the (N, 4) logits.
    pub fn logits(&self, g: &Graph, x: Var) -> Var {
        let relu_conv = |name: &str, x: Var, cin: usize, cout: usize, k: usize, stride: usize| {
            g.relu(Conv2d::new(name, cin, cout, k).stride(stride).forward(g, x))
        };
        let w = self.config.width;
        let pooled = match self.config.arch {
            ClassifierArch::PlainCnn => {
                let mut h = x;
                for (i, (cin, cout)) in [(3, w), (w, 2 * w), (2 * w, 4 * w)].into_iter().enumerate() {
                    h = relu_conv(&format!("cls/conv{i}"), h, cin, cout, 3, 2);
                }
                g.global_avg_pool(h)
            }
            ClassifierArch::InceptionSmall => {
                let mut h = relu_conv("cls/stem", x, 3, w, 3, 2);
                let mut cin = w;
                let widths = inception_widths(w);
                for (i, &b) in widths.iter().enumerate() {
                    let p = format!("cls/mix{i}");
                    let half = (b / 2).max(1);
                    let b1 = relu_conv(&format!("{p}/b1"), h, cin, b, 1, 1);
                    let b3 = relu_conv(&format!("{p}/b3r"), h, cin, half, 1, 1);
                    let b3 = relu_conv(&format!("{p}/b3"), b3, half, b, 3, 1);
                    let b5 = relu_conv(&format!("{p}/b5r"), h, cin, half, 1, 1);
                    let b5 = relu_conv(&format!("{p}/b5"), b5, half, b, 5, 1);
                    let bp = g.avg_pool2d(h, 3, 1, 1);
                    let bp = relu_conv(&format!("{p}/bp"), bp, cin, b, 1, 1);
                    h = g.concat(1, &[b1, b3, b5, bp]);
                    cin = 4 * b;
                    if i + 1 < widths.len() && g.shape(h)[2] >= 2 {
                        h = g.max_pool2d(h, 2, 2);
                    }
                }
                g.global_avg_pool(h)
            }
        };
        Linear::new(HEAD, 0, 4).forward(g, pooled)
    }

    /// Probabilities for a batch of images already at the model's input size.
    pub fn forward(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        let s = self.config.input_size;
        if let Some(bad) = images.iter().find(|im| im.height() != s || im.width() != s) {
            return Err(invalid(format!(
                "classifier expects {s}x{s} inputs, got {}x{}",
                bad.height(),
                bad.width()
            )));
        }
        let x = ImageTensor::batch(images)?;
        let g = Graph::new(&self.params);
        let p = g.sigmoid(self.logits(&g, g.input(x)));
        let out = g.value(p);
        Ok(out
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("(N, 4) output")
            .to_owned())
    }

    /// Preprocesses arbitrary-size images, then runs [`ClassifierModel::forward`].
    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        let prepared = images
            .iter()
            .map(|im| preprocess(im, self.config.input_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = prepared.iter().collect();
        let mut out = Array2::zeros((images.len(), 4));
        // bounded batches keep the activation memory flat
        for (i, chunk) in refs.chunks(32).enumerate() {
            let p = self.forward(chunk)?;
            out.slice_mut(ndarray::s![i * 32..i * 32 + chunk.len(), ..]).assign(&p);
        }
        Ok(out)
    }

    pub fn classify(&self, image: &ImageTensor) -> Result<ReadabilityLabels> {
        let p = self.predict(&[image])?;
        Ok(ReadabilityLabels::from_probs(p.row(0).as_slice().expect("contiguous row")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.add_params(&self.params);
        let meta = ClassifierMeta {
            config: self.config.clone(),
            training: self.training.clone(),
        };
        save_with_meta(path, &ckpt, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, meta): (Checkpoint, ClassifierMeta) = load_with_meta(path)?;
        let mut model = ClassifierModel::new(meta.config, meta.training.seed)?;
        for name in model.params.names().cloned().collect::<Vec<_>>() {
            let value = ckpt.require(&name)?;
            let slot = model.params.value_mut(&name).expect("listed name");
            if slot.shape() != value.shape() {
                return Err(Error::Compatibility(format!(
                    "{name}: stored shape {:?}, architecture expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        model.training = meta.training;
        Ok(model)
    }
}

fn inception_widths(w: usize) -> [usize; 3] {
    [w, 2 * w, 2 * w]
}

/// Bilinear resize to `target` x `target` (pixel-centre aligned), clamped
/// to [0, 1].
pub fn preprocess(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if image.is_empty() {
        return Err(invalid("cannot preprocess an empty image"));
    }
    if target == 0 {
        return Err(invalid("target size must be >= 1"));
    }
    let t: Tensor = resize_bilinear_array(&image.to_tensor(), target, target);
    let out = ImageTensor::unbatch(&t)?.pop().expect("one image");
    Ok(out.clamp01())
}

/// Random horizontal flip, brightness scaling and contrast stretch about
/// the image mean, then clamping. Factors of exactly 1 are skipped so the
/// identity configuration returns the input bit for bit.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, config: &AugmentConfig, rng: &mut R) -> ImageTensor {
    let flip = rng.random::<f64>() < config.flip_prob;
    let b = rng.random_range(config.brightness.0..=config.brightness.1);
    let c = rng.random_range(config.contrast.0..=config.contrast.1);
    let mut out = if flip { image.flip_horizontal() } else { image.clone() };
    if b != 1.0 {
        out.array_mut().mapv_inplace(|v| v * b);
    }
    if c != 1.0 {
        let m = out.mean();
        out.array_mut().mapv_inplace(|v| (v - m) * c + m);
    }
    if b != 1.0 || c != 1.0 {
        out = out.clamp01();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: ClassifierArch) -> ClassifierModel {
        let cfg = ClassifierConfig {
            input_size: 32,
            arch,
            width: 4,
            ..ClassifierConfig::default()
        };
        ClassifierModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn preprocess_identity_and_constants() {
        let img = ImageTensor::from_fn(24, 24, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        assert_eq!(preprocess(&img, 24).unwrap(), img);
        let flat = ImageTensor::constant(19, 19, 0.3);
        let out = preprocess(&flat, 40).unwrap();
        assert!(out.array().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(preprocess(&ImageTensor::zeros(0, 0), 8).is_err());
    }

    #[test]
    fn output_shape_and_range() {
        for arch in [ClassifierArch::PlainCnn, ClassifierArch::InceptionSmall] {
            let m = small(arch);
            let imgs: Vec<ImageTensor> = (0..7).map(|i| ImageTensor::constant(32, 32, i as f64 / 7.0)).collect();
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            let p = m.forward(&refs).unwrap();
            assert_eq!(p.dim(), (7, 4));
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(m.forward(&[&ImageTensor::zeros(16, 16)]).is_err());
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = small(ClassifierArch::InceptionSmall);
        for name in ["cls/head/weight", "cls/head/bias"] {
            m.params.value_mut(name).unwrap().fill(0.0);
        }
        let img = ImageTensor::from_fn(32, 32, |y, x, _| ((x + y) % 2) as f64);
        let p = m.forward(&[&img]).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_augmentation() {
        let img = ImageTensor::from_fn(9, 9, |y, x, c| ((y + 2 * x + c) % 5) as f64 / 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn flip_frequency() {
        let img = ImageTensor::from_fn(1, 2, |_, x, _| x as f64);
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| augment(&img, &cfg, &mut rng).pixel(0, 0)[0] == 1.0)
            .count();
        let rate = flips as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn augment_stays_in_range() {
        let img = ImageTensor::from_fn(8, 8, |y, x, _| (y * 8 + x) as f64 / 63.0);
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            brightness: (0.5, 1.5),
            contrast: (0.5, 2.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert!(augment(&img, &cfg, &mut rng).array().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.rrgn");
        let m = small(ClassifierArch::PlainCnn);
        m.save(&path).unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        let img = ImageTensor::constant(32, 32, 0.4);
        let (a, b) = (m.forward(&[&img]).unwrap(), back.forward(&[&img]).unwrap());
        // weights pass through f32 storage
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-5));
    }
}
