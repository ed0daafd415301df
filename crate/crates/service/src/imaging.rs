//! Upload decoding and model-size resampling.

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};
use relit_core::color::srgb_to_linear;
use relit_core::{ColorSpace, ImagePlane, Mask};

use crate::error::{ApiError, ApiResult};

/// Largest accepted upload side.
pub const MAX_UPLOAD_SIDE: u32 = 1024;
/// Largest side fed to the model.
pub const MAX_MODEL_SIDE: u32 = 256;
pub const SIZE_MULTIPLE: u32 = 8;

fn decode(bytes: &[u8], what: &str) -> ApiResult<DynamicImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ApiError::BadRequest(format!("{what}: not a PNG ({e})")))?;
    if img.width() > MAX_UPLOAD_SIDE || img.height() > MAX_UPLOAD_SIDE {
        return Err(ApiError::TooLarge(format!(
            "{what} is {}x{}, limit is {MAX_UPLOAD_SIDE}x{MAX_UPLOAD_SIDE}",
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

/// Model input size: scaled to fit `MAX_MODEL_SIDE`, each side rounded down
/// to a multiple of 8 (at least 8).
pub fn model_size(width: u32, height: u32) -> (u32, u32) {
    let scale = (MAX_MODEL_SIDE as f64 / width.max(height) as f64).min(1.0);
    let fit = |s: u32| (((s as f64 * scale) as u32) / SIZE_MULTIPLE * SIZE_MULTIPLE).max(SIZE_MULTIPLE);
    (fit(width), fit(height))
}

/// Decodes an uploaded PNG to a linear RGB plane at model size.
pub fn decode_image(bytes: &[u8]) -> ApiResult<ImagePlane> {
    let img = decode(bytes, "image")?;
    let (w, h) = model_size(img.width(), img.height());
    let img = if (w, h) == (img.width(), img.height()) {
        img
    } else {
        img.resize_exact(w, h, FilterType::Triangle)
    };
    let rgb = img.to_rgb16();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    let srgb = ImagePlane::new(w as usize, h as usize, 3, ColorSpace::Srgb, data)?;
    Ok(srgb_to_linear(&srgb)?)
}

/// Decodes a mask PNG (foreground above 127) resampled to `width × height`.
pub fn decode_mask(bytes: &[u8], width: usize, height: usize) -> ApiResult<Mask> {
    let img = decode(bytes, "mask")?;
    let gray = img
        .resize_exact(width as u32, height as u32, FilterType::Nearest)
        .to_luma8();
    let mask = Mask::new(width, height, gray.pixels().map(|p| p.0[0] > 127).collect())?;
    if mask.count() == 0 {
        return Err(ApiError::BadRequest("mask has no foreground".into()));
    }
    Ok(mask)
}
