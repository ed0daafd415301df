//! PNG encoding for images, normal maps and masks.
//!
//! Color images are stored sRGB-encoded at 8 or 16 bits. Normal maps are
//! always 16-bit with `n ∈ [-1, 1] → round((n + 1) / 2 · 65535)` and are
//! renormalized on load. Masks are 8-bit grayscale, foreground above 127.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::color::{linear_to_srgb, srgb_to_linear};
use crate::error::{Error, Result};
use crate::image::{normalize_guarded, ColorSpace, ImagePlane, Mask, NormalMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize16(q: u16) -> f64 {
    q as f64 / 65535.0
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_normal(n: f64) -> u16 {
    quantize16((n + 1.0) / 2.0)
}

pub fn decode_normal(q: u16) -> f64 {
    dequantize16(q) * 2.0 - 1.0
}

fn to_dynamic(img: &ImagePlane, depth: BitDepth) -> Result<DynamicImage> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let d = img.data();
    Ok(match (img.channels(), depth) {
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, d.iter().map(|&v| quantize16(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, d.iter().map(|&v| quantize8(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, d.iter().map(|&v| quantize16(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, d.iter().map(|&v| quantize8(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        (c, _) => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    })
}

fn from_dynamic_rgb(img: DynamicImage) -> Result<ImagePlane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        other => other
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(dequantize16)
            .collect(),
    };
    ImagePlane::new(w, h, 3, ColorSpace::Srgb, data)
}

fn write_dynamic(path: &Path, img: &DynamicImage) -> Result<()> {
    let bytes = encode_dynamic(img);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_dynamic(img: &DynamicImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding into memory does not fail");
    buf.into_inner()
}

fn read_dynamic(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// PNG bytes of an `srgb` image.
pub fn encode_srgb_png(img: &ImagePlane, depth: BitDepth) -> Result<Vec<u8>> {
    img.expect_space(ColorSpace::Srgb)?;
    Ok(encode_dynamic(&to_dynamic(img, depth)?))
}

/// PNG bytes of a linear image: clamped to `[0, 1]`, then sRGB-encoded.
pub fn encode_linear_png(img: &ImagePlane, depth: BitDepth) -> Result<Vec<u8>> {
    encode_srgb_png(&linear_to_srgb(img)?, depth)
}

/// Decodes PNG bytes to a three-channel `srgb` image (gray and alpha are
/// expanded / dropped).
pub fn decode_srgb_png(bytes: &[u8]) -> Result<ImagePlane> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png decode: {e}")))?;
    from_dynamic_rgb(img)
}

pub fn save_srgb_png(path: &Path, img: &ImagePlane, depth: BitDepth) -> Result<()> {
    img.expect_space(ColorSpace::Srgb)?;
    write_dynamic(path, &to_dynamic(img, depth)?)
}

pub fn save_linear_png(path: &Path, img: &ImagePlane, depth: BitDepth) -> Result<()> {
    save_srgb_png(path, &linear_to_srgb(img)?, depth)
}

pub fn load_srgb_png(path: &Path) -> Result<ImagePlane> {
    from_dynamic_rgb(read_dynamic(path)?)
}

/// Loads an sRGB-encoded PNG and returns linear RGB.
pub fn load_linear_png(path: &Path) -> Result<ImagePlane> {
    srgb_to_linear(&load_srgb_png(path)?)
}

fn normals_to_dynamic(normals: &NormalMap) -> DynamicImage {
    let p = normals.plane();
    DynamicImage::ImageRgb16(
        ImageBuffer::<Rgb<u16>, _>::from_raw(
            p.width() as u32,
            p.height() as u32,
            p.data().iter().map(|&v| encode_normal(v)).collect(),
        )
        .expect("buffer length matches dimensions"),
    )
}

fn normals_from_dynamic(img: DynamicImage) -> Result<NormalMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.to_rgb16().into_raw();
    let mut data = Vec::with_capacity(raw.len());
    for q in raw.chunks_exact(3) {
        data.extend_from_slice(&normalize_guarded([
            decode_normal(q[0]),
            decode_normal(q[1]),
            decode_normal(q[2]),
        ]));
    }
    NormalMap::new(ImagePlane::new(w, h, 3, ColorSpace::NormalXyz, data)?)
}

/// Round trip of a normal map through its 16-bit storage encoding.
pub fn quantize_normals(normals: &NormalMap) -> Result<NormalMap> {
    normals_from_dynamic(normals_to_dynamic(normals))
}

pub fn encode_normals_png(normals: &NormalMap) -> Vec<u8> {
    encode_dynamic(&normals_to_dynamic(normals))
}

pub fn save_normals_png(path: &Path, normals: &NormalMap) -> Result<()> {
    write_dynamic(path, &normals_to_dynamic(normals))
}

pub fn load_normals_png(path: &Path) -> Result<NormalMap> {
    let img = read_dynamic(path)?;
    if !matches!(img, DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)) {
        return Err(Error::format(path, "normal maps must be 16-bit RGB"));
    }
    normals_from_dynamic(img)
}

fn mask_to_dynamic(mask: &Mask) -> DynamicImage {
    DynamicImage::ImageLuma8(
        GrayImage::from_raw(
            mask.width() as u32,
            mask.height() as u32,
            mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("buffer length matches dimensions"),
    )
}

fn mask_from_dynamic(img: DynamicImage) -> Result<Mask> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.to_luma8().into_raw().into_iter().map(|v| v > 127).collect();
    Mask::new(w, h, bits)
}

pub fn encode_mask_png(mask: &Mask) -> Vec<u8> {
    encode_dynamic(&mask_to_dynamic(mask))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png decode: {e}")))?;
    mask_from_dynamic(img)
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_dynamic(path, &mask_to_dynamic(mask))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    mask_from_dynamic(read_dynamic(path)?)
}
