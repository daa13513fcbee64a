//! Three-channel images with real-valued pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fundus_nn::Tensor;
use ndarray::{s, Array3, Axis, IxDyn};

use crate::error::{invalid, Error, Result};

/// H x W x 3 image stored row-major; pixel values are nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            data: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(invalid(format!("image must have 3 channels, got {}", data.shape()[2])));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        ImageTensor {
            data: Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[[y, x, c]] = v;
        }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.data.shape() == other.data.shape()
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn clamp01(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    /// Per-pixel channel mean.
    pub fn grayscale(&self) -> ndarray::Array2<f64> {
        self.data.mean_axis(Axis(2)).expect("three channels")
    }

    /// Rounds every value to the nearest representable 8-bit level.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| f64::from(to_u8(v)) / 255.0),
        }
    }

    /// Stacks images into an (N, 3, H, W) tensor.
    pub fn batch(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
        let (h, w) = (first.height(), first.width());
        let mut out = Tensor::zeros(IxDyn(&[images.len(), 3, h, w]));
        for (n, img) in images.iter().enumerate() {
            if !img.same_shape(first) {
                return Err(invalid("images in a batch must share one shape"));
            }
            let chw = img.data.view().permuted_axes([2, 0, 1]);
            out.slice_mut(s![n, .., .., ..]).assign(&chw);
        }
        Ok(out)
    }

    /// Splits an (N, 3, H, W) tensor back into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<ImageTensor>> {
        if t.ndim() != 4 || t.shape()[1] != 3 {
            return Err(invalid(format!("expected (N, 3, H, W), got {:?}", t.shape())));
        }
        Ok(t.axis_iter(Axis(0))
            .map(|chw| ImageTensor {
                data: chw
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .permuted_axes([1, 2, 0])
                    .as_standard_layout()
                    .into_owned(),
            })
            .collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Self::batch(&[self]).expect("single image")
    }

    /// Writes an 8-bit RGB PNG; stored value is `round(p * 255)` after clamping.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<ImageTensor> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        Ok(ImageTensor::from_fn(h, w, |y, x, c| {
            let base = (y * w + x) * channels;
            let v = match channels {
                1 | 2 => bytes[base],
                _ => bytes[base + c],
            };
            f64::from(v) / 255.0
        }))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
