use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::data::resize_plane;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelSpec, Task, INPUT_CHANNELS, INPUT_HW, NUM_ETHNICITIES};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub const CAM_SIZE: usize = INPUT_HW;
pub const OVERLAY_ALPHA: f32 = 0.4;

/// Class activation map on the input grid, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamHeatmap {
    pub data: Vec<f32>,
    pub head: Task,
    /// `None` for age.
    pub class_index: Option<usize>,
}

impl CamHeatmap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * CAM_SIZE + x]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(CAM_SIZE as u32, CAM_SIZE as u32, |x, y| {
            image::Luma([(self.at(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    /// Share of the top-decile mass lying in rows `< row`.
    pub fn top_decile_mass_above(&self, row: usize) -> f64 {
        let mut sorted = self.data.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[(sorted.len() / 10).max(1) - 1];
        let (mut above, mut total) = (0f64, 0f64);
        for (i, &v) in self.data.iter().enumerate() {
            if v >= cut {
                total += f64::from(v);
                if i / CAM_SIZE < row {
                    above += f64::from(v);
                }
            }
        }
        if total > 0.0 {
            above / total
        } else {
            0.0
        }
    }
}

/// Min-max normalisation; a flat map becomes all zeros.
pub fn normalize_map(map: &mut [f32]) {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > f32::EPSILON * hi.abs().max(1.0)) {
        map.fill(0.0);
        return;
    }
    for v in map {
        *v = (*v - lo) / range;
    }
}

/// Gradient-weighted activation map of one head output with respect to the last encoder
/// feature map feeding that head.
///
/// The target is the predicted age, the gender logit (negated for class 0) or the logit
/// of ethnicity `class_index`.
pub fn grad_cam<T: Scalar>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    image: &Tensor<T>,
    head: Task,
    class_index: Option<usize>,
) -> Result<CamHeatmap> {
    if !params.all_finite() {
        return Err(Error::InvalidArgument {
            op: "grad_cam",
            reason: "parameters contain non-finite values".into(),
        });
    }
    let input = match image.shape() {
        [c, h, w] if *c == INPUT_CHANNELS && *h == INPUT_HW && *w == INPUT_HW => {
            image.reshape([1, INPUT_CHANNELS, INPUT_HW, INPUT_HW])?
        }
        [1, c, h, w] if *c == INPUT_CHANNELS && *h == INPUT_HW && *w == INPUT_HW => image.clone(),
        other => {
            return Err(Error::InvalidArgument {
                op: "grad_cam",
                reason: format!("expected a single 3 x 48 x 48 image, got {other:?}"),
            })
        }
    };
    let class_index = match head {
        Task::Age => None,
        Task::Gender => Some(class_index.unwrap_or(1)),
        Task::Ethnicity => Some(class_index.ok_or_else(|| Error::InvalidArgument {
            op: "grad_cam",
            reason: "ethnicity maps need a class index".into(),
        })?),
    };
    let classes = if head == Task::Gender { 2 } else { NUM_ETHNICITIES };
    if let Some(c) = class_index.filter(|&c| c >= classes) {
        return Err(Error::ClassOutOfRange { index: c, classes });
    }

    let mut tape = Tape::new();
    params.register(&mut tape)?;
    let x = tape.constant(input);
    let heads = forward_on_tape(&mut tape, spec, x)?;
    let target = match (head, class_index) {
        (Task::Age, _) => tape.sum(heads.age),
        (Task::Gender, Some(0)) => {
            let s = tape.sum(heads.gender_logit);
            tape.scale(s, -T::one())
        }
        (Task::Gender, _) => tape.sum(heads.gender_logit),
        (Task::Ethnicity, c) => {
            let mut pick = vec![T::zero(); NUM_ETHNICITIES];
            pick[c.expect("checked above")] = T::one();
            let pick = tape.constant(Tensor::from_vec([1, NUM_ETHNICITIES], pick)?);
            let chosen = tape.mul(heads.ethnicity_logits, pick)?;
            tape.sum(chosen)
        }
    };
    let feat_var = heads.features[head.index()];
    let grads = tape.gradients(target)?;
    let fshape = tape.shape(feat_var).to_vec();
    let (ch, fh, fw) = (fshape[1], fshape[2], fshape[3]);
    let plane = fh * fw;
    let feats = tape.value(feat_var).data();
    let zero = Tensor::zeros(fshape.clone());
    let g = grads.wrt(feat_var).unwrap_or(&zero).data();

    let mut raw = vec![T::zero(); plane];
    for k in 0..ch {
        let gk = &g[k * plane..(k + 1) * plane];
        let weight = gk.iter().copied().sum::<T>() / T::from_usize(plane).expect("plane fits");
        for (r, &a) in raw.iter_mut().zip(&feats[k * plane..(k + 1) * plane]) {
            *r += weight * a;
        }
    }
    let raw: Vec<f32> = raw.into_iter().map(|v| v.max(T::zero()).to_f32().unwrap_or(0.0)).collect();
    let mut data = resize_plane(&raw, fw, fh, CAM_SIZE, CAM_SIZE);
    normalize_map(&mut data);
    Ok(CamHeatmap { data, head, class_index })
}

/// Jet colour map: 0 is dark blue, 1 is dark red.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the jet-coloured heatmap over `image` with [`OVERLAY_ALPHA`].
pub fn render_overlay(image: &RgbImage, heat: &CamHeatmap) -> Result<RgbImage> {
    if image.width() as usize != CAM_SIZE || image.height() as usize != CAM_SIZE {
        return Err(Error::ShapeMismatch {
            op: "render_overlay",
            lhs: vec![image.height() as usize, image.width() as usize],
            rhs: vec![CAM_SIZE, CAM_SIZE],
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let colour = jet(heat.at(y as usize, x as usize));
        for (c, v) in px.0.iter_mut().enumerate() {
            let blended = (1.0 - OVERLAY_ALPHA) * f32::from(*v) + OVERLAY_ALPHA * colour[c] * 255.0;
            *v = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

fn write_pnm(path: &Path, bytes: &[u8], w: u32, h: u32, colour: ExtendedColorType, subtype: PnmSubtype) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(bytes, w, h, colour)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Binary 8-bit graymap (P5).
pub fn write_heatmap_pgm(path: &Path, heat: &CamHeatmap) -> Result<()> {
    let img = heat.to_gray();
    write_pnm(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::L8,
        PnmSubtype::Graymap(SampleEncoding::Binary),
    )
}

/// Binary pixmap (P6).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_pnm(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
        PnmSubtype::Pixmap(SampleEncoding::Binary),
    )
}
