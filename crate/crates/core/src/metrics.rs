//! Image quality scores: PSNR, windowed SSIM and an LPIPS-style feature
//! distance.

use std::io::Write;
use std::path::Path;

use fundus_nn::{Graph, Tensor};
use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.array().shape(),
            b.array().shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    Ok(a.array()
        .iter()
        .zip(b.array().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(max_val^2 / MSE)` in dB; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// Mean SSIM over non-overlapping 8x8 windows of the channel-mean images,
/// using uniform weights and population (co)variances. Pixels beyond the
/// last whole window are ignored.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let (wy, wx) = (a.height() / SSIM_WINDOW, a.width() / SSIM_WINDOW);
    let mut total = 0.0;
    for by in 0..wy {
        for bx in 0..wx {
            let win = s![
                by * SSIM_WINDOW..(by + 1) * SSIM_WINDOW,
                bx * SSIM_WINDOW..(bx + 1) * SSIM_WINDOW
            ];
            total += window_ssim(&ga.slice(win).to_owned(), &gb.slice(win).to_owned());
        }
    }
    Ok(total / (wy * wx) as f64)
}

fn window_ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Feature stack behind [`perceptual_distance`].
///
/// Each layer is a 3x3 stride-1 zero-padded convolution without bias,
/// followed by ReLU; the next layer sees the 2x2 average-pooled activations.
/// The default filters are seeded random draws made mirror-symmetric left to
/// right, so the distance does not change when both images are flipped.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet {
    /// (out, in, 3, 3) kernels, first layer taking RGB
    pub layers: Vec<Tensor>,
}

pub const PERCEPTUAL_SEED: u64 = 0x5eed_1f1f;
const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 32];
const NORM_EPS: f64 = 1e-10;

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::fixed_random(PERCEPTUAL_SEED)
    }
}

impl PerceptualNet {
    pub fn fixed_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let layers = PERCEPTUAL_WIDTHS
            .iter()
            .map(|&out| {
                let raw = fundus_nn::params::he_uniform(&mut rng, &[out, in_ch, 3, 3], in_ch * 9, 1.0);
                let mirrored = raw.slice(s![.., .., .., ..;-1]).to_owned();
                in_ch = out;
                (raw + mirrored) * 0.5
            })
            .collect();
        PerceptualNet { layers }
    }

    /// Loads kernels stored as `lpips/layer{i}` in a checkpoint container.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut layers = Vec::new();
        while let Some(w) = ckpt.get_f64(&format!("lpips/layer{}", layers.len())) {
            layers.push(w);
        }
        if layers.is_empty() {
            return Err(invalid(format!("{} holds no lpips/layer0 array", path.display())));
        }
        let mut in_ch = 3;
        for (i, w) in layers.iter().enumerate() {
            let sh = w.shape();
            if sh.len() != 4 || sh[1] != in_ch || sh[2] != 3 || sh[3] != 3 {
                return Err(invalid(format!("lpips/layer{i} has shape {sh:?}, expected (_, {in_ch}, 3, 3)")));
            }
            in_ch = sh[0];
        }
        Ok(PerceptualNet { layers })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (i, w) in self.layers.iter().enumerate() {
            c.insert_f64(format!("lpips/layer{i}"), w);
        }
        c
    }

    /// Per-layer ReLU activations of an image mapped to [-1, 1].
    pub fn features(&self, img: &ImageTensor) -> Vec<Tensor> {
        let g = Graph::detached();
        let mut x = g.input(img.to_tensor().mapv(|v| 2.0 * v - 1.0));
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, w) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool2d(x, 2, 2, 0);
            }
            x = g.relu(g.conv2d(x, g.input(w.clone()), None, 1, 1, 1));
            out.push((*g.value(x)).clone());
        }
        out
    }
}

/// Scales each spatial position of an (1, C, H, W) map to unit length
/// across channels.
fn unit_normalize(f: &Tensor) -> Tensor {
    let norm = f.map_axis(Axis(1), |c| c.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS);
    let norm = norm.insert_axis(Axis(1));
    f / &norm
}

/// LPIPS-style distance: sum over layers of the spatial mean of the squared
/// differences of unit-normalized features. Not calibrated to human
/// judgements.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, net: &PerceptualNet) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < 1 << (net.layers.len() - 1) || a.width() < 1 << (net.layers.len() - 1) {
        return Err(invalid("image too small for the perceptual feature stack"));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = net.features(a);
    let fb = net.features(b);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let d = unit_normalize(x) - unit_normalize(y);
        let positions = (d.shape()[2] * d.shape()[3]) as f64;
        total += d.iter().map(|v| v * v).sum::<f64>() / positions;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl MetricsRow {
    pub fn compute(id: impl Into<String>, reference: &ImageTensor, img: &ImageTensor, net: &PerceptualNet) -> Result<Self> {
        Ok(MetricsRow {
            id: id.into(),
            psnr: psnr(reference, img, 1.0)?,
            ssim: ssim(reference, img)?,
            lpips: perceptual_distance(reference, img, net)?,
        })
    }
}

pub const METRICS_HEADER: &str = "id,psnr,ssim,lpips";

/// Six-decimal fixed point; an infinite value prints as `inf`.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_HEADER}").expect("write to memory");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.id, fmt6(r.psnr), fmt6(r.ssim), fmt6(r.lpips)).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean of each column; infinite PSNRs are kept, so the mean may be `inf`.
pub fn mean_row(id: &str, rows: &[MetricsRow]) -> MetricsRow {
    let n = rows.len().max(1) as f64;
    MetricsRow {
        id: id.to_string(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lpips: rows.iter().map(|r| r.lpips).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageTensor {
        let values: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
        ImageTensor::from_array(ndarray::Array3::from_shape_vec((h, w, 3), values).unwrap()).unwrap()
    }

    #[test]
    fn psnr_spot_values() {
        let a = ImageTensor::zeros(8, 8);
        let b = ImageTensor::constant(8, 8, 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(fmt6(f64::INFINITY), "inf");
        assert!(psnr(&a, &ImageTensor::zeros(8, 9), 1.0).is_err());
    }

    #[test]
    fn ssim_spot_values() {
        let a = ImageTensor::zeros(16, 16);
        let b = ImageTensor::constant(16, 16, 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 9.999e-5).abs() < 1e-8);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
        assert!(ssim(&ImageTensor::zeros(7, 16), &ImageTensor::zeros(7, 16)).is_err());
    }

    #[test]
    fn perceptual_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PerceptualNet::default();
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        assert_eq!(perceptual_distance(&a, &a, &net).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b, &net).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_distance(&b, &a, &net).unwrap());
    }

    #[test]
    fn metrics_ignore_joint_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PerceptualNet::default();
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let (fa, fb) = (a.flip_horizontal(), b.flip_horizontal());
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr(&fa, &fb, 1.0).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-12);
        let d = perceptual_distance(&a, &b, &net).unwrap();
        assert!((d - perceptual_distance(&fa, &fb, &net).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn external_weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lpips.rrgn");
        assert!(matches!(PerceptualNet::from_checkpoint(&path), Err(Error::Io { .. })));
        let net = PerceptualNet::fixed_random(9);
        net.to_checkpoint().save(&path).unwrap();
        let loaded = PerceptualNet::from_checkpoint(&path).unwrap();
        assert_eq!(loaded.layers.len(), 3);
        for (a, b) in loaded.layers.iter().zip(&net.layers) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![MetricsRow {
            id: "a".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
            lpips: 0.0,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "id,psnr,ssim,lpips\na,inf,1.000000,0.000000\n");
    }
}
