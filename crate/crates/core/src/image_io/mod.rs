//! Greyscale images, binary masks and their file formats.
//!
//! Grey values live in `[0, 1]` once loaded; 8-bit files are scaled by
//! `1/255` and 16-bit files by `1/65535`. Masks mark known pixels with `1`
//! and the inpainting domain with `0`.

mod instances;
mod metrics;

use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use instances::{make_shape_instance, EdgeQuality, ShapeInstance, ShapeKind};
pub use metrics::{checkerboard_score, mae, mse, Region};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major greyscale image sampled on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
    spacing: f64,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!(
                    "{height}x{width} image needs {} values, got {}",
                    height * width,
                    data.len()
                ),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite grey value at index {i}")));
        }
        Ok(ImageGrid {
            height,
            width,
            data,
            spacing: 1.0,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width)).collect();
        ImageGrid {
            height,
            width,
            data,
            spacing: 1.0,
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("image dims")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); accepts `[1, H, W]` or `[H, W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => {
                return Err(Error::InvalidShape {
                    op: "image",
                    detail: format!("expected [1, H, W], got {s:?}"),
                })
            }
        };
        Self::new(h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Binary indicator of known pixels (`true` = known).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    known: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, known: Vec<bool>) -> Result<Self> {
        if known.len() != height * width {
            return Err(Error::InvalidShape {
                op: "mask",
                detail: format!(
                    "{height}x{width} mask needs {} values, got {}",
                    height * width,
                    known.len()
                ),
            });
        }
        Ok(MaskGrid { height, width, known })
    }

    /// Builds a mask from numeric values, which must be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let known = values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == 1.0 {
                    Ok(true)
                } else if value == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::NonBinaryMask { value, index })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, known)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let known = (0..height * width).map(|k| f(k / width, k % width)).collect();
        MaskGrid { height, width, known }
    }

    pub fn all_known(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| true)
    }

    pub fn all_unknown(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn is_known(&self, row: usize, col: usize) -> bool {
        self.known[row * self.width + col]
    }

    pub fn count_known(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    pub fn count_unknown(&self) -> usize {
        self.known.len() - self.count_known()
    }

    /// `c` as a `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.indicator(true)
    }

    /// `1 - c` as a `[1, H, W]` tensor: ones on the inpainting domain.
    pub fn unknown_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.indicator(false)
    }

    fn indicator<T: Scalar>(&self, known: bool) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.known
                .iter()
                .map(|&k| if k == known { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dims")
    }

    /// Mean of the image over known pixels; 0.5 when nothing is known.
    pub fn known_mean(&self, image: &ImageGrid) -> f64 {
        let (sum, n) = image
            .data()
            .iter()
            .zip(&self.known)
            .filter(|(_, &k)| k)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        if n == 0 {
            0.5
        } else {
            sum / n as f64
        }
    }
}

/// Sample depth used when writing images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Grey value at or above which a mask file pixel counts as known.
pub const MASK_THRESHOLD: f64 = 128.0 / 255.0;

/// Loads an 8- or 16-bit greyscale PGM or PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.into(),
                detail: other.to_string(),
            },
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("only greyscale images are supported, got {:?}", other.color()),
            })
        }
    };
    ImageGrid::new(h, w, data)
}

/// Writes `img` as PGM (`.pgm`, `.pnm`) or PNG (`.png`), clamping to `[0, 1]`.
pub fn save_image(img: &ImageGrid, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if !matches!(ext.as_str(), "pgm" | "pnm" | "png") {
        return Err(Error::Format {
            path: path.into(),
            detail: "unsupported extension; use .pgm, .pnm or .png".into(),
        });
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let out = std::io::BufWriter::new(file);
    let quantise = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
    let result = match (ext.as_str(), depth) {
        ("pgm" | "pnm", _) => write_pgm(img, out, depth).map_err(image::ImageError::IoError),
        ("png", BitDepth::Eight) => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantise(v, 255.0) as u8).collect();
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("dims");
            buf.write_with_encoder(image::codecs::png::PngEncoder::new(out))
        }
        ("png", BitDepth::Sixteen) => {
            let raw: Vec<u16> = img.data.iter().map(|&v| quantise(v, 65535.0) as u16).collect();
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, raw).expect("dims");
            buf.write_with_encoder(image::codecs::png::PngEncoder::new(out))
        }
        _ => unreachable!("extension checked above"),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            detail: other.to_string(),
        },
    })
}

/// Binary PGM with a `P5\nW H\nMAX\n` header; 16-bit samples are big-endian.
fn write_pgm(img: &ImageGrid, mut out: impl Write, depth: BitDepth) -> std::io::Result<()> {
    let max = match depth {
        BitDepth::Eight => 255u16,
        BitDepth::Sixteen => 65535,
    };
    write!(out, "P5\n{} {}\n{}\n", img.width, img.height, max)?;
    let samples = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * max as f64).round() as u16);
    let bytes: Vec<u8> = match depth {
        BitDepth::Eight => samples.map(|v| v as u8).collect(),
        BitDepth::Sixteen => samples.flat_map(u16::to_be_bytes).collect(),
    };
    out.write_all(&bytes)?;
    out.flush()
}

/// Loads a mask image; pixels at or above [`MASK_THRESHOLD`] are known.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskGrid> {
    let img = load_image(path)?;
    let known = img.data.iter().map(|&v| v >= MASK_THRESHOLD).collect();
    MaskGrid::new(img.height, img.width, known)
}

/// Writes a mask as a black (unknown) and white (known) image.
pub fn save_mask(mask: &MaskGrid, path: impl AsRef<Path>) -> Result<()> {
    let img = ImageGrid {
        height: mask.height,
        width: mask.width,
        data: mask.known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        spacing: 1.0,
    };
    save_image(&img, path, BitDepth::Eight)
}

/// Mask with exactly `round(density * H * W)` known pixels, drawn uniformly
/// without replacement from a seeded generator.
pub fn make_random_mask(height: usize, width: usize, density: f64, seed: u64) -> Result<MaskGrid> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask density must lie in (0, 1], got {density}"
        )));
    }
    let n = height * width;
    let count = ((density * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut known = vec![false; n];
    for i in index::sample(&mut rng, n, count) {
        known[i] = true;
    }
    MaskGrid::new(height, width, known)
}
