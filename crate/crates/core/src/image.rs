//! Image tensors: `[3, h, w]` arrays with values in `[-1, 1]`, plus PNG/JPEG
//! I/O (8-bit, mapped linearly) and small composition helpers.

use crate::ad::Arr;
use crate::error::{Error, Result};
use ndarray::{Array3, Axis, Ix4};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wrap a `[3, r, r]` array.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let sh = data.shape();
        if sh[0] != 3 || sh[1] != sh[2] {
            return Err(Error::domain(format!(
                "image tensor must be [3, r, r], got {sh:?}"
            )));
        }
        Ok(ImageTensor { data })
    }

    pub fn zeros(resolution: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((3, resolution, resolution)),
        }
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Box-average downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let r = self.resolution();
        if factor == 0 || r % factor != 0 {
            return Err(Error::domain(format!(
                "downsample factor {factor} does not divide resolution {r}"
            )));
        }
        let o = r / factor;
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Array3::<f64>::zeros((3, o, o));
        for c in 0..3 {
            for i in 0..r {
                for j in 0..r {
                    out[(c, i / factor, j / factor)] += self.data[(c, i, j)] * norm;
                }
            }
        }
        Ok(ImageTensor { data: out })
    }

    /// Map `[-1, 1]` linearly onto 8-bit and encode as PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let sh = self.data.shape();
        let (h, w) = (sh[1] as u32, sh[2] as u32);
        let mut img = image::RgbImage::new(w, h);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.data[(c, y as usize, x as usize)];
                let q = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8;
                px.0[c] = q;
            }
        }
        img.save(path.as_ref())
            .map_err(|e| Error::Image(e.to_string()))
    }

    /// Decode a PNG/JPEG, center-crop to square, resize to `resolution`.
    pub fn load(path: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(|e| Error::Image(e.to_string()))?;
        Ok(Self::from_dynamic(img, resolution))
    }

    pub fn from_dynamic(img: image::DynamicImage, resolution: usize) -> Self {
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
        let resized = if side == resolution as u32 {
            cropped
        } else {
            cropped.resize_exact(
                resolution as u32,
                resolution as u32,
                image::imageops::FilterType::Triangle,
            )
        };
        let rgb = resized.to_rgb8();
        let mut data = Array3::<f64>::zeros((3, resolution, resolution));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        ImageTensor { data }
    }
}

/// Stack images into a `[b, 3, r, r]` batch array.
pub fn stack_batch(images: &[&ImageTensor]) -> Result<Arr> {
    if images.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let r = images[0].resolution();
    if images.iter().any(|im| im.resolution() != r) {
        return Err(Error::domain("batch images must share a resolution"));
    }
    let mut out = ndarray::Array4::<f64>::zeros((images.len(), 3, r, r));
    for (i, im) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(im.data());
    }
    Ok(out.into_dyn())
}

/// Split a `[b, 3, r, r]` batch back into images.
pub fn unstack_batch(batch: &Arr) -> Result<Vec<ImageTensor>> {
    let b4 = batch
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::domain("batch must be 4-d"))?;
    (0..b4.shape()[0])
        .map(|i| ImageTensor::new(b4.index_axis(Axis(0), i).to_owned()))
        .collect()
}

/// Compose images into a grid image (white background). `cells` is row-major
/// with `None` for blanks; every image must share one resolution. The result
/// is generally non-square and is only meant for [`ImageTensor::save_png`].
pub fn compose_grid(
    cells: &[Option<&ImageTensor>],
    rows: usize,
    cols: usize,
    pad: usize,
) -> Result<ImageTensor> {
    if cells.len() != rows * cols {
        return Err(Error::domain("grid cell count mismatch"));
    }
    let r = cells
        .iter()
        .flatten()
        .map(|im| im.resolution())
        .next()
        .ok_or_else(|| Error::domain("grid needs at least one image"))?;
    if cells.iter().flatten().any(|im| im.resolution() != r) {
        return Err(Error::domain("grid images must share a resolution"));
    }
    let cell = r + pad;
    let (h, w) = (rows * cell + pad, cols * cell + pad);
    let mut data = Array3::<f64>::from_elem((3, h, w), 1.0);
    for (k, entry) in cells.iter().enumerate() {
        if let Some(im) = entry {
            let (row, col) = (k / cols, k % cols);
            let (y0, x0) = (pad + row * cell, pad + col * cell);
            data.slice_mut(ndarray::s![.., y0..y0 + r, x0..x0 + r])
                .assign(im.data());
        }
    }
    Ok(ImageTensor { data })
}
