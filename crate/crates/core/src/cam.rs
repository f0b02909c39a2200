//! Grad-CAM++ maps over the last shared-encoder stage.
//!
//! With `g = ∂z/∂A` the gradient of the detection logit, the per-location
//! weights are `α = g² / (2g² + Σ_ab A_ab · g³)` (0 where the denominator
//! vanishes), the channel weights are `w_k = Σ_ij α_kij · relu(g_kij)`, and
//! the map is `relu(Σ_k w_k A_k)`, bilinearly upsampled to the input size and
//! min-max normalised.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forge::{io, Image, ManipulationMask};
use crate::model::Model;
use crate::tensor::Tensor;

/// Dense map in `[0, 1]`, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Raw (pre-upsampling, unnormalised) Grad-CAM++ map at feature resolution.
pub fn grad_cam_pp_raw(activations: &Tensor<f64>, grad: &Tensor<f64>) -> Result<Vec<f64>> {
    if activations.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "activations {:?} vs gradient {:?}",
            activations.shape(),
            grad.shape()
        )));
    }
    let (c, h, w) = activations.shape();
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for k in 0..c {
        let a = &activations.data[k * plane..(k + 1) * plane];
        let g = &grad.data[k * plane..(k + 1) * plane];
        let a_sum: f64 = a.iter().sum();
        let mut weight = 0.0;
        for &gv in g {
            let g2 = gv * gv;
            let denom = 2.0 * g2 + a_sum * g2 * gv;
            let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
            weight += alpha * gv.max(0.0);
        }
        for (o, av) in cam.iter_mut().zip(a) {
            *o += weight * av;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    Ok(cam)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Min-max normalisation; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range) as f32).collect()
}

/// Grad-CAM++ for one channel-major input image.
pub fn grad_cam_pp(model: &Model<f32>, image: &Tensor<f32>) -> Result<CamMap> {
    let acts = model.spatial_activations(std::slice::from_ref(image))?;
    let a = &acts[0].activations;
    let probe = model.probe_detection(a)?;
    let raw = grad_cam_pp_raw(&a.cast(), &probe.grad_logit.cast())?;
    let (height, width) = (model.config.height(), model.config.width());
    let up = upsample_bilinear(&raw, a.h, a.w, height, width);
    Ok(CamMap { height, width, data: normalize(&up) })
}

/// Mean CAM value inside and outside `mask`.
pub fn inside_outside_means(cam: &CamMap, mask: &ManipulationMask) -> Result<(f64, f64)> {
    if (cam.height, cam.width) != (mask.height, mask.width) {
        return Err(Error::Dimension(format!(
            "cam {}x{} vs mask {}x{}",
            cam.height, cam.width, mask.height, mask.width
        )));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in cam.data.iter().zip(&mask.data) {
        if *m == 1 {
            si += f64::from(*v);
            ni += 1;
        } else {
            so += f64::from(*v);
            no += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(si, ni), mean(so, no)))
}

/// Piecewise-linear jet colour map.
pub fn jet(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f32| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Writes the heat map to `path` and, when `image` is given, a 50/50 overlay
/// next to it as `<stem>_overlay.png`. Returns the overlay path.
pub fn save_cam(cam: &CamMap, image: Option<&Image>, path: &Path) -> Result<Option<PathBuf>> {
    let heat: Vec<u8> = cam.data.iter().flat_map(|v| jet(*v)).collect();
    io::save_rgb(heat.clone(), cam.width, cam.height, path)?;
    let Some(img) = image else { return Ok(None) };
    if (img.height, img.width) != (cam.height, cam.width) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs cam {}x{}",
            img.height, img.width, cam.height, cam.width
        )));
    }
    let rgb = img.to_u8();
    let overlay: Vec<u8> = (0..cam.height * cam.width)
        .flat_map(|i| {
            let px: [u8; 3] = if img.channels == 3 {
                [rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]]
            } else {
                [rgb[i]; 3]
            };
            let hp = [heat[3 * i], heat[3 * i + 1], heat[3 * i + 2]];
            (0..3).map(move |c| ((u16::from(px[c]) + u16::from(hp[c])) / 2) as u8)
        })
        .collect();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cam");
    let overlay_path = path.with_file_name(format!("{stem}_overlay.png"));
    io::save_rgb(overlay, cam.width, cam.height, &overlay_path)?;
    Ok(Some(overlay_path))
}
