//! Pixel-level helpers shared by data loading, augmentation and Grad-CAM
//! rendering. Images are `C×H×W` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear sample of one `h×w` plane at fractional `(y, x)`; coordinates
/// outside the plane replicate the nearest edge pixel.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let at = |r: usize, c: usize| plane[r * w + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes every channel with pixel-centre aligned bilinear interpolation.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = img.dims3("resize")?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks_exact(h * w) {
        for oy in 0..out_h {
            let y = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = (ox as f64 + 0.5) * sx - 0.5;
                out.push(sample_bilinear(plane, h, w, y, x));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes an image file into `channels×size×size` (1 = grayscale, 3 = RGB).
pub fn load_image(path: impl AsRef<Path>, channels: usize, size: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match channels {
        1 => decoded.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let rgb = decoded.to_rgb8();
            let mut planar = vec![0.0; 3 * h * w];
            for (i, px) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    planar[ch * h * w + i] = px[ch] as f32 / 255.0;
                }
            }
            planar
        }
        n => return Err(Error::InvalidArgument(format!("unsupported channel count {n}"))),
    };
    let t = Tensor::new([channels, h, w], data)?;
    resize_bilinear(&t, size, size)
}

/// Writes the first channel as an 8-bit grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [_, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim("save_gray_png", format!("unexpected shape {:?}", img.shape()))),
    };
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(img.data()[y as usize * w + x as usize])])
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Writes a `3×H×W` tensor as an 8-bit RGB PNG.
pub fn save_rgb_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3("save_rgb_png")?;
    if c != 3 {
        return Err(Error::dim("save_rgb_png", format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Variance of the 4-neighbour Laplacian over interior pixels of the
/// first channel; a simple high-frequency energy statistic.
pub fn laplacian_variance(img: &Tensor<f32>) -> f64 {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    let mut vals = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let lap = d[i - w] + d[i + w] + d[i - 1] + d[i + 1] - 4.0 * d[i];
            vals.push(lap as f64);
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}
