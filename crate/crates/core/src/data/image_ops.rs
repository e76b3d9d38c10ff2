//! Decoding and 48x48 preprocessing of RGB face crops.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::model::INPUT_HW;
use crate::tensor::Tensor;

/// Decodes a PNG or PPM file into 8-bit RGB.
pub fn decode(path: &Path) -> Result<RgbImage> {
    let image_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    let reader = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| image_err(image::ImageError::IoError(e)))?;
    let img = reader.decode().map_err(image_err)?;
    Ok(img.to_rgb8())
}

/// Bilinear resize of one row-major plane with pixel-centre alignment.
pub fn resize_plane(src: &[f32], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), in_w * in_h, "plane size mismatch");
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let xs = axis(out_w, in_w);
    let ys = axis(out_h, in_h);
    let px = |x: usize, y: usize| src[y * in_w + x];
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
            let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize with pixel-centre alignment, returning planar RGB in `[0, 1]`.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut out = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        let plane: Vec<f32> = raw.iter().skip(c).step_by(3).map(|&v| f32::from(v) / 255.0).collect();
        out.extend(resize_plane(&plane, in_w, in_h, out_w, out_h));
    }
    out
}

/// `3 x 48 x 48` RGB tensor in `[0, 1]`.
pub fn preprocess(img: &RgbImage) -> Tensor<f32> {
    Tensor::from_vec([3, INPUT_HW, INPUT_HW], resize_bilinear(img, INPUT_HW, INPUT_HW))
        .expect("resize output matches shape")
}

pub fn load_preprocessed(path: &Path) -> Result<Tensor<f32>> {
    Ok(preprocess(&decode(path)?))
}

/// Planar `[0, 1]` tensor back to an 8-bit image.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::InvalidArgument {
            op: "tensor_to_image",
            reason: format!("expected 3 x H x W, got {:?}", t.shape()),
        });
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}
