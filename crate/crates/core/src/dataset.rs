//! Procedural fundus-like images, controllable degradations, readability
//! labels derived from those degradations, splits and class weights.
//!
//! Labels are a pure function of a sample's [`DegradationSpec`] and its
//! [`Anatomy`] under [`LabelThresholds`]:
//!
//! * `valid` iff `brightness_scale >= valid_min_brightness` and
//!   `noise_std <= valid_max_noise`;
//! * `optic_disc` iff valid, `blur_sigma <= disc_max_blur` and no occlusion
//!   box intersects the disc's bounding box;
//! * `macula` likewise with the macula's bounding box;
//! * `retina` iff valid, `blur_sigma <= retina_max_blur` and
//!   `noise_std <= retina_max_noise`.
//!
//! Generation draws the labels first (at the configured positive rates) and
//! then synthesizes a degradation that produces exactly those labels, keeping
//! every continuous parameter well away from the thresholds.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::readability::{LabelKind, ReadabilityLabels};

/// Axis-aligned occlusion rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl OcclusionBox {
    pub fn intersects(&self, other: &OcclusionBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub occlusion_boxes: Vec<OcclusionBox>,
    pub brightness_scale: f64,
    pub noise_std: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl DegradationSpec {
    pub fn identity() -> Self {
        DegradationSpec {
            blur_sigma: 0.0,
            occlusion_boxes: Vec::new(),
            brightness_scale: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(invalid(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        if !(self.brightness_scale > 0.0 && self.brightness_scale <= 1.0) {
            return Err(invalid(format!(
                "brightness_scale must be in (0, 1], got {}",
                self.brightness_scale
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        for b in &self.occlusion_boxes {
            if b.w == 0 || b.h == 0 || b.x + b.w > width || b.y + b.h > height {
                return Err(invalid(format!(
                    "occlusion box {b:?} outside {width}x{height} image"
                )));
            }
        }
        Ok(())
    }
}

/// Where the landmarks of one synthetic fundus sit, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub size: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub disc_center: (f64, f64),
    /// horizontal and vertical semi-axes
    pub disc_radii: (f64, f64),
    pub macula_center: (f64, f64),
    pub macula_radius: f64,
    pub vessels: Vec<Vessel>,
    pub texture_phase: (f64, f64),
}

/// A vessel is a curved stroke leaving the optic disc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub angle: f64,
    pub curvature: f64,
    pub length: f64,
    pub width: f64,
}

impl Anatomy {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Anatomy {
        let s = size as f64;
        let center = (
            s / 2.0 + rng.random_range(-0.03..=0.03) * s,
            s / 2.0 + rng.random_range(-0.03..=0.03) * s,
        );
        let radius = s * rng.random_range(0.44..=0.47);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let disc_center = (
            center.0 + side * radius * rng.random_range(0.5..=0.58),
            center.1 + radius * rng.random_range(-0.06..=0.06),
        );
        let rx = radius * rng.random_range(0.12..=0.15);
        let disc_radii = (rx, rx * rng.random_range(1.1..=1.25));
        let macula_center = (
            center.0 - side * radius * rng.random_range(0.05..=0.12),
            center.1 + radius * rng.random_range(-0.05..=0.05),
        );
        let macula_radius = radius * rng.random_range(0.15..=0.19);
        let n_vessels = rng.random_range(4..=6);
        let vessels = (0..n_vessels)
            .map(|i| {
                // arcs sweep above and below the macula towards the far side
                let upper = i % 2 == 0;
                let base = if side > 0.0 { PI } else { 0.0 };
                let spread = rng.random_range(0.35..=1.1);
                let angle = base + if upper { -spread } else { spread } * side;
                Vessel {
                    angle,
                    curvature: rng.random_range(0.4..=1.0) * if upper { 1.0 } else { -1.0 } * side,
                    length: radius * rng.random_range(0.9..=1.5),
                    width: (s / 64.0) * rng.random_range(0.7..=1.2),
                }
            })
            .collect();
        Anatomy {
            size,
            center,
            radius,
            disc_center,
            disc_radii,
            macula_center,
            macula_radius,
            vessels,
            texture_phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
        }
    }

    fn bbox(&self, c: (f64, f64), rx: f64, ry: f64) -> OcclusionBox {
        let s = self.size as f64;
        let x0 = (c.0 - rx).floor().clamp(0.0, s - 1.0) as usize;
        let y0 = (c.1 - ry).floor().clamp(0.0, s - 1.0) as usize;
        let x1 = (c.0 + rx).ceil().clamp(1.0, s) as usize;
        let y1 = (c.1 + ry).ceil().clamp(1.0, s) as usize;
        OcclusionBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(1),
            h: (y1 - y0).max(1),
        }
    }

    pub fn disc_box(&self) -> OcclusionBox {
        self.bbox(self.disc_center, self.disc_radii.0, self.disc_radii.1)
    }

    pub fn macula_box(&self) -> OcclusionBox {
        self.bbox(self.macula_center, self.macula_radius, self.macula_radius)
    }

    /// Renders the clean image.
    pub fn render(&self) -> ImageTensor {
        let n = self.size;
        let strokes: Vec<(Vec<(f64, f64)>, f64)> = self
            .vessels
            .iter()
            .map(|v| {
                let steps = 48;
                let pts = (0..=steps)
                    .map(|i| {
                        let t = i as f64 / steps as f64;
                        let a = v.angle + v.curvature * t;
                        (
                            self.disc_center.0 + t * v.length * a.cos(),
                            self.disc_center.1 + t * v.length * a.sin(),
                        )
                    })
                    .collect();
                (pts, v.width)
            })
            .collect();

        ImageTensor::from_fn(n, n, |y, x, c| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let dx = px - self.center.0;
            let dy = py - self.center.1;
            let r = (dx * dx + dy * dy).sqrt() / self.radius;
            // soft rim over about one pixel
            let inside = ((1.0 - r) * self.radius + 0.5).clamp(0.0, 1.0);
            if inside == 0.0 {
                return 0.0;
            }
            let base = [0.80, 0.36, 0.16][c];
            let vignette = 1.0 - 0.35 * r * r;
            let texture = 1.0
                + 0.03
                    * ((px / n as f64 * 9.0 * PI + self.texture_phase.0).sin()
                        * (py / n as f64 * 7.0 * PI + self.texture_phase.1).cos());
            let mut v = base * vignette * texture;

            let mdx = px - self.macula_center.0;
            let mdy = py - self.macula_center.1;
            let sigma = self.macula_radius / 1.5;
            v *= 1.0 - 0.5 * (-(mdx * mdx + mdy * mdy) / (2.0 * sigma * sigma)).exp();

            let mut vessel = 0.0f64;
            for (pts, width) in &strokes {
                let d2 = pts
                    .iter()
                    .map(|(qx, qy)| (px - qx).powi(2) + (py - qy).powi(2))
                    .fold(f64::INFINITY, f64::min);
                vessel = vessel.max((-d2 / (width * width)).exp());
            }
            v *= 1.0 - vessel * [0.45, 0.7, 0.6][c];

            let ex = (px - self.disc_center.0) / self.disc_radii.0;
            let ey = (py - self.disc_center.1) / self.disc_radii.1;
            let e = (ex * ex + ey * ey).sqrt();
            let disc = 1.0 / (1.0 + ((e - 1.0) * 6.0).exp());
            v = v * (1.0 - disc) + [0.98, 0.88, 0.60][c] * disc;

            (v * inside).clamp(0.0, 1.0)
        })
    }
}

/// Degradation levels at which each label flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelThresholds {
    pub valid_min_brightness: f64,
    pub valid_max_noise: f64,
    pub macula_max_blur: f64,
    pub disc_max_blur: f64,
    pub retina_max_blur: f64,
    pub retina_max_noise: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            valid_min_brightness: 0.45,
            valid_max_noise: 0.2,
            macula_max_blur: 1.5,
            disc_max_blur: 1.5,
            retina_max_blur: 1.5,
            retina_max_noise: 0.08,
        }
    }
}

pub fn derive_labels(spec: &DegradationSpec, anatomy: &Anatomy, th: &LabelThresholds) -> ReadabilityLabels {
    let valid = spec.brightness_scale >= th.valid_min_brightness && spec.noise_std <= th.valid_max_noise;
    let disc = anatomy.disc_box();
    let macula = anatomy.macula_box();
    let hits = |region: &OcclusionBox| spec.occlusion_boxes.iter().any(|b| b.intersects(region));
    ReadabilityLabels {
        valid,
        macula: valid && spec.blur_sigma <= th.macula_max_blur && !hits(&macula),
        optic_disc: valid && spec.blur_sigma <= th.disc_max_blur && !hits(&disc),
        retina: valid && spec.blur_sigma <= th.retina_max_blur && spec.noise_std <= th.retina_max_noise,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// every degradation type, labels at `label_rates`
    Standard,
    /// only global blur and darkening with wide margins around the thresholds
    Separable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: CorpusKind,
    /// Marginal positive rates in label order (valid, macula, optic_disc, retina).
    /// Region rates may not exceed the valid rate.
    pub label_rates: [f64; 4],
    /// Fraction of fully readable samples left untouched; the rest receive
    /// mild degradations that keep every label positive.
    pub pristine_fraction: f64,
    pub thresholds: LabelThresholds,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: CorpusKind::Standard,
            label_rates: [0.9, 0.7, 0.6, 0.7],
            pristine_fraction: 0.5,
            thresholds: LabelThresholds::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [v, rest @ ..] = self.label_rates;
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("valid rate {v} outside [0, 1]")));
        }
        for r in rest {
            if !(0.0..=v).contains(&r) {
                return Err(invalid(format!("region rate {r} must lie in [0, valid rate {v}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.pristine_fraction) {
            return Err(invalid("pristine_fraction outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    /// the degraded image
    pub image: ImageTensor,
    /// ground truth before degradation
    pub clean: ImageTensor,
    pub labels: ReadabilityLabels,
    pub degradation: DegradationSpec,
    pub anatomy: Anatomy,
    /// seed of the additive noise draw inside [`degrade`]
    pub noise_seed: u64,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_synthetic_fundus(
    seed: u64,
    count: usize,
    size: usize,
    config: &GeneratorConfig,
) -> Result<Vec<FundusSample>> {
    if count < 1 {
        return Err(invalid("count must be >= 1"));
    }
    if size < 32 {
        return Err(invalid(format!("size must be >= 32, got {size}")));
    }
    config.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let anatomy = Anatomy::sample(&mut rng, size);
            let clean = anatomy.render();
            let wanted = draw_labels(&mut rng, config);
            let degradation = synthesize_degradation(&mut rng, &anatomy, wanted, config);
            let labels = derive_labels(&degradation, &anatomy, &config.thresholds);
            debug_assert_eq!(labels, wanted);
            let noise_seed = rng.random();
            let image = degrade(&clean, &degradation, noise_seed)?;
            Ok(FundusSample {
                id: format!("s{seed}_{i:05}"),
                image,
                clean,
                labels,
                degradation,
                anatomy,
                noise_seed,
            })
        })
        .collect()
}

fn draw_labels<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> ReadabilityLabels {
    let [pv, pm, po, pr] = config.label_rates;
    let valid = rng.random::<f64>() < pv;
    if !valid {
        return ReadabilityLabels::default();
    }
    let cond = |p: f64| if pv > 0.0 { p / pv } else { 0.0 };
    match config.kind {
        CorpusKind::Standard => ReadabilityLabels {
            valid,
            macula: rng.random::<f64>() < cond(pm),
            optic_disc: rng.random::<f64>() < cond(po),
            retina: rng.random::<f64>() < cond(pr),
        },
        CorpusKind::Separable => {
            // one sharp/blurred draw decides all region labels
            let sharp = rng.random::<f64>() < cond(po);
            ReadabilityLabels {
                valid,
                macula: sharp,
                optic_disc: sharp,
                retina: sharp,
            }
        }
    }
}

fn synthesize_degradation<R: Rng + ?Sized>(
    rng: &mut R,
    anatomy: &Anatomy,
    labels: ReadabilityLabels,
    config: &GeneratorConfig,
) -> DegradationSpec {
    let th = &config.thresholds;
    let mut spec = DegradationSpec::identity();

    if config.kind == CorpusKind::Separable {
        if !labels.valid {
            spec.brightness_scale = rng.random_range(0.15..=0.3);
        } else if rng.random_bool(0.5) {
            spec.brightness_scale = rng.random_range(0.7..=1.0);
        }
        spec.blur_sigma = if labels.optic_disc || (!labels.valid && rng.random_bool(0.5)) {
            rng.random_range(0.0..=0.6)
        } else {
            rng.random_range(2.5..=4.0)
        };
        return spec;
    }

    if !labels.valid {
        let mode = rng.random_range(0..3);
        if mode != 1 {
            spec.brightness_scale = rng.random_range(0.15f64..=0.35).min(th.valid_min_brightness - 0.1);
        }
        if mode != 0 {
            spec.noise_std = rng.random_range(0.25f64..=0.35).max(th.valid_max_noise + 0.05);
        }
        if rng.random_bool(0.5) {
            spec.blur_sigma = rng.random_range(0.0..=3.0);
        }
        return spec;
    }

    let all_good = labels == ReadabilityLabels::ALL_TRUE;
    if all_good && rng.random::<f64>() < config.pristine_fraction {
        return spec;
    }
    if rng.random_bool(0.5) {
        spec.brightness_scale = rng.random_range(0.6f64..=1.0).max(th.valid_min_brightness + 0.1);
    }
    let no_region = !labels.macula && !labels.optic_disc && !labels.retina;
    if no_region && rng.random_bool(0.5) {
        let floor = th.macula_max_blur.max(th.disc_max_blur).max(th.retina_max_blur) + 1.0;
        spec.blur_sigma = rng.random_range(floor..=floor + 1.5);
        return spec;
    }
    let ceiling = th.macula_max_blur.min(th.disc_max_blur).min(th.retina_max_blur) - 0.5;
    if rng.random_bool(0.5) {
        spec.blur_sigma = rng.random_range(0.0..=ceiling.max(0.0));
    }
    if !labels.retina {
        let lo = th.retina_max_noise + 0.02;
        spec.noise_std = rng.random_range(lo..=(th.valid_max_noise - 0.02).max(lo));
    } else if rng.random_bool(0.3) {
        spec.noise_std = rng.random_range(0.0..=(th.retina_max_noise - 0.03).max(0.0));
    }
    let disc = anatomy.disc_box();
    let macula = anatomy.macula_box();
    if !labels.macula {
        spec.occlusion_boxes.push(cover(rng, &macula, &disc, labels.optic_disc, anatomy.size));
    }
    if !labels.optic_disc {
        spec.occlusion_boxes.push(cover(rng, &disc, &macula, labels.macula, anatomy.size));
    }
    spec
}

/// A box over `target`, grown by a random margin but never touching `keep`
/// when that region must stay readable.
fn cover<R: Rng + ?Sized>(
    rng: &mut R,
    target: &OcclusionBox,
    keep: &OcclusionBox,
    keep_clear: bool,
    size: usize,
) -> OcclusionBox {
    let grow = |rng: &mut R| rng.random_range(1..=3usize);
    let x0 = target.x.saturating_sub(grow(rng));
    let y0 = target.y.saturating_sub(grow(rng));
    let x1 = (target.x + target.w + grow(rng)).min(size);
    let y1 = (target.y + target.h + grow(rng)).min(size);
    let grown = OcclusionBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    };
    if keep_clear && grown.intersects(keep) {
        *target
    } else {
        grown
    }
}

/// Applies blur, brightness scaling, occlusion and additive Gaussian noise,
/// in that order. Noise is drawn from `seed`; the result is clamped to [0, 1].
pub fn degrade(image: &ImageTensor, spec: &DegradationSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate(image.height(), image.width())?;
    let mut out = if spec.blur_sigma > 0.0 {
        gaussian_blur(image, spec.blur_sigma)
    } else {
        image.clone()
    };
    if spec.brightness_scale != 1.0 {
        out.array_mut().mapv_inplace(|v| v * spec.brightness_scale);
    }
    for b in &spec.occlusion_boxes {
        out.array_mut()
            .slice_mut(ndarray::s![b.y..b.y + b.h, b.x..b.x + b.w, ..])
            .fill(0.0);
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| invalid(e.to_string()))?;
        out.array_mut()
            .mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and clamped edges.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (image.height() as isize, image.width() as isize);
    let src = image.array();
    let horizontal = ImageTensor::from_fn(h as usize, w as usize, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let xx = (x as isize + i as isize - radius).clamp(0, w - 1) as usize;
                k * src[[y, xx, c]]
            })
            .sum()
    });
    let src = horizontal.array();
    ImageTensor::from_fn(h as usize, w as usize, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let yy = (y as isize + i as isize - radius).clamp(0, h - 1) as usize;
                k * src[[yy, x, c]]
            })
            .sum()
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it at largest-remainder sizes; on
/// equal remainders train wins over val over test.
pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid(format!("split ratios must be positive, got {r:?}")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must sum to 1, got {r:?}")));
    }
    let sizes = largest_remainder(n, &r);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(sizes[0] + sizes[1]);
    let val = order.split_off(sizes[0]);
    Ok(DatasetSplit {
        train: order,
        val,
        test,
    })
}

fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // stable sort keeps the train > val > test priority on ties
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap()
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Per-label `(w_pos, w_neg)` with the balanced scheme
/// `w_pos = N / (2 N_pos)`, `w_neg = N / (2 N_neg)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [(f64, f64); 4],
    /// set for labels that lacked one of the two classes and fell back to (1, 1)
    pub degenerate: [bool; 4],
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            weights: [(1.0, 1.0); 4],
            degenerate: [false; 4],
        }
    }
}

impl ClassWeights {
    pub fn has_warning(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

pub fn compute_class_weights(labels: &[ReadabilityLabels]) -> ClassWeights {
    let n = labels.len() as f64;
    let mut out = ClassWeights::default();
    for kind in LabelKind::ALL {
        let pos = labels.iter().filter(|l| l.get(kind)).count() as f64;
        let neg = n - pos;
        let i = kind.index();
        if pos == 0.0 || neg == 0.0 {
            out.degenerate[i] = true;
            log::warn!("label {} has a single class; using weights (1, 1)", kind.name());
        } else {
            out.weights[i] = (n / (2.0 * pos), n / (2.0 * neg));
        }
    }
    out
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: String,
    pub degradation: DegradationSpec,
    pub path: String,
    pub clean_path: String,
    pub anatomy: Anatomy,
    pub noise_seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `<id>.png`, `<id>_clean.png` and a JSON-lines manifest into `dir`.
pub fn write_corpus(dir: &Path, samples: &[FundusSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for s in samples {
        let path = format!("{}.png", s.id);
        let clean_path = format!("{}_clean.png", s.id);
        s.image.save_png(&dir.join(&path))?;
        s.clean.save_png(&dir.join(&clean_path))?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            labels: s.labels.to_bit_string(),
            degradation: s.degradation.clone(),
            path,
            clean_path,
            anatomy: s.anatomy.clone(),
            noise_seed: s.noise_seed,
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

/// Loads a corpus written by [`write_corpus`]; pixels come back 8-bit quantized.
pub fn read_corpus(dir: &Path) -> Result<Vec<FundusSample>> {
    let manifest = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        samples.push(FundusSample {
            image: ImageTensor::load_png(&dir.join(&entry.path))?,
            clean: ImageTensor::load_png(&dir.join(&entry.clean_path))?,
            labels: ReadabilityLabels::parse_bit_string(&entry.labels)?,
            id: entry.id,
            degradation: entry.degradation,
            anatomy: entry.anatomy,
            noise_seed: entry.noise_seed,
        });
    }
    if samples.is_empty() {
        return Err(invalid(format!("{} lists no samples", manifest.display())));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn corpus(seed: u64, count: usize) -> Vec<FundusSample> {
        generate_synthetic_fundus(seed, count, 64, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(corpus(7, 10), corpus(7, 10));
        assert_ne!(corpus(7, 3)[0].clean, corpus(8, 3)[0].clean);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = GeneratorConfig::default();
        assert!(generate_synthetic_fundus(1, 0, 64, &cfg).is_err());
        assert!(generate_synthetic_fundus(1, 4, 31, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.label_rates = [0.5, 0.7, 0.5, 0.5];
        assert!(generate_synthetic_fundus(1, 4, 64, &bad).is_err());
    }

    #[test]
    fn identity_spec_keeps_every_label() {
        for s in corpus(3, 20) {
            let labels = derive_labels(&DegradationSpec::identity(), &s.anatomy, &LabelThresholds::default());
            assert_eq!(labels, ReadabilityLabels::ALL_TRUE);
        }
    }

    #[test]
    fn stored_labels_follow_from_stored_spec() {
        for s in corpus(11, 200) {
            assert_eq!(derive_labels(&s.degradation, &s.anatomy, &LabelThresholds::default()), s.labels);
            assert_eq!(degrade(&s.clean, &s.degradation, s.noise_seed).unwrap(), s.image);
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for s in corpus(5, 30) {
            for img in [&s.image, &s.clean] {
                assert!(img.array().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn clean_image_shows_landmarks() {
        let s = &corpus(2, 1)[0];
        let a = &s.anatomy;
        let at = |p: (f64, f64)| s.clean.pixel(p.1 as usize, p.0 as usize);
        let disc = at(a.disc_center);
        let macula = at(a.macula_center);
        assert!(disc[1] > 0.7, "disc should be bright: {disc:?}");
        assert!(macula[0] < disc[0] && macula[1] < disc[1]);
        assert_eq!(s.clean.pixel(0, 0), [0.0; 3], "corners are outside the fundus");
    }

    #[test]
    fn identity_degradation_is_exact() {
        let img = corpus(4, 1)[0].clean.clone();
        assert_eq!(degrade(&img, &DegradationSpec::identity(), 9).unwrap(), img);
    }

    #[test]
    fn brightness_only_scales() {
        let img = ImageTensor::constant(8, 8, 0.8);
        let spec = DegradationSpec {
            brightness_scale: 0.5,
            ..DegradationSpec::identity()
        };
        let out = degrade(&img, &spec, 0).unwrap();
        assert!(out.array().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn noise_has_requested_spread() {
        // mid-grey keeps clamping out of play for std 0.1
        let img = ImageTensor::constant(58, 58, 0.5);
        let spec = DegradationSpec {
            noise_std: 0.1,
            ..DegradationSpec::identity()
        };
        let out = degrade(&img, &spec, 42).unwrap();
        let diffs: Vec<f64> = out.array().iter().map(|v| v - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(n >= 1e4);
        assert!((0.09..=0.11).contains(&std), "std {std}");
    }

    #[test]
    fn rejects_out_of_bounds_boxes() {
        let img = ImageTensor::constant(16, 16, 0.5);
        let spec = DegradationSpec {
            occlusion_boxes: vec![OcclusionBox { x: 10, y: 0, w: 7, h: 2 }],
            ..DegradationSpec::identity()
        };
        assert!(matches!(degrade(&img, &spec, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn psnr_falls_as_degradation_grows() {
        let clean = corpus(6, 1)[0].clean.clone();
        let levels: Vec<f64> = (1..=20).map(|i| i as f64 * 0.2).collect();
        let blur: Vec<f64> = levels
            .iter()
            .map(|&s| {
                let spec = DegradationSpec {
                    blur_sigma: s,
                    ..DegradationSpec::identity()
                };
                psnr(&clean, &degrade(&clean, &spec, 0).unwrap(), 1.0).unwrap()
            })
            .collect();
        assert!(blur.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{blur:?}");

        let noise: Vec<f64> = levels
            .iter()
            .map(|&s| {
                let spec = DegradationSpec {
                    noise_std: s * 0.05,
                    ..DegradationSpec::identity()
                };
                // average over several draws to smooth the Monte Carlo estimate
                (0..5)
                    .map(|k| psnr(&clean, &degrade(&clean, &spec, k).unwrap(), 1.0).unwrap())
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(noise.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{noise:?}");
    }

    #[test]
    fn label_rates_match_configuration() {
        let cfg = GeneratorConfig::default();
        let samples = generate_synthetic_fundus(13, 1000, 32, &cfg).unwrap();
        for kind in LabelKind::ALL {
            let rate = samples.iter().filter(|s| s.labels.get(kind)).count() as f64 / 1000.0;
            let want = cfg.label_rates[kind.index()];
            assert!((rate - want).abs() <= 0.05, "{}: {rate} vs {want}", kind.name());
        }
    }

    #[test]
    fn separable_corpus_labels_follow_blur_and_brightness() {
        let cfg = GeneratorConfig {
            kind: CorpusKind::Separable,
            ..GeneratorConfig::default()
        };
        for s in generate_synthetic_fundus(17, 200, 32, &cfg).unwrap() {
            let d = &s.degradation;
            assert!(d.occlusion_boxes.is_empty() && d.noise_std == 0.0);
            assert_eq!(s.labels.valid, d.brightness_scale >= 0.7);
            if s.labels.valid {
                assert_eq!(s.labels.optic_disc, d.blur_sigma <= 0.6);
                assert_eq!(s.labels.macula, s.labels.optic_disc);
                assert_eq!(s.labels.retina, s.labels.optic_disc);
            }
        }
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let s = split_dataset(100, (0.64, 0.16, 0.20), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let one = split_dataset(1, (0.64, 0.16, 0.20), 1).unwrap();
        assert_eq!((one.train.len(), one.val.len(), one.test.len()), (1, 0, 0));
        assert!(split_dataset(10, (0.5, 0.3, 0.3), 1).is_err());
        assert!(split_dataset(10, (1.0, 0.0, 0.0), 1).is_err());
        assert_eq!(split_dataset(37, (0.6, 0.2, 0.2), 9).unwrap(), split_dataset(37, (0.6, 0.2, 0.2), 9).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn splits_cover_every_index_once(n in 1usize..300, seed in 0u64..1_000_000, a in 1u32..100, b in 1u32..100, c in 1u32..100) {
            let total = f64::from(a + b + c);
            let ratios = (f64::from(a) / total, f64::from(b) / total, 1.0 - f64::from(a + b) / total);
            let s = split_dataset(n, ratios, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (len, r) in [(s.train.len(), ratios.0), (s.val.len(), ratios.1), (s.test.len(), ratios.2)] {
                proptest::prop_assert!((len as f64 - r * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn class_weights_balanced_scheme() {
        let mk = |pos: usize, n: usize| -> Vec<ReadabilityLabels> {
            (0..n)
                .map(|i| ReadabilityLabels::from_bits([i < pos, true, i % 2 == 0, i < pos]))
                .collect()
        };
        let w = compute_class_weights(&mk(10, 100));
        assert!((w.weights[0].0 - 5.0).abs() < 1e-12);
        assert!((w.weights[0].1 - 0.5556).abs() < 5e-5);
        // alternating label: exact 50/50
        assert_eq!(w.weights[2], (1.0, 1.0));
        // all-positive label falls back with a warning
        assert_eq!(w.weights[1], (1.0, 1.0));
        assert!(w.degenerate[1] && !w.degenerate[0]);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = corpus(21, 3);
        write_corpus(dir.path(), &samples).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.degradation, b.degradation);
            assert_eq!(b.image, a.image.quantized());
        }
    }
}
