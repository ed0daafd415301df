//! sRGB transfer curve and CIE L*a*b* (D65, sRGB primaries).

use crate::error::Result;
use crate::image::{ColorSpace, ImagePlane};

/// Linear RGB to CIE XYZ for sRGB primaries.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white, taken as the XYZ image of linear (1, 1, 1) so that
/// neutral grays land exactly on a* = b* = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

pub fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(img: &ImagePlane) -> Result<ImagePlane> {
    img.expect_space(ColorSpace::Srgb)?;
    img.map(ColorSpace::LinearRgb, srgb_decode)
}

/// Inverse of [`srgb_to_linear`]. Values are clamped to `[0, 1]` first.
pub fn linear_to_srgb(img: &ImagePlane) -> Result<ImagePlane> {
    img.expect_space(ColorSpace::LinearRgb)?;
    img.map(ColorSpace::Srgb, |v| srgb_encode(v.clamp(0.0, 1.0)))
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_prime(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        let c = t.cbrt();
        1.0 / (3.0 * c * c)
    } else {
        1.0 / (3.0 * DELTA * DELTA)
    }
}

/// L*a*b* of one linear RGB triple, clamped to `[0, 1]` beforehand.
pub fn lab_from_linear(rgb: [f64; 3]) -> [f64; 3] {
    lab_with_jacobian(rgb).0
}

/// L*a*b* of a clamped linear RGB triple together with `∂lab/∂rgb`
/// (row = lab channel, column = rgb channel). Columns of clamped channels
/// are zero.
pub fn lab_with_jacobian(rgb: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut c = [0.0; 3];
    let mut live = [0.0; 3];
    for k in 0..3 {
        let v = rgb[k];
        if v <= 0.0 {
            c[k] = 0.0;
        } else if v >= 1.0 {
            c[k] = 1.0;
        } else {
            c[k] = v;
            live[k] = 1.0;
        }
    }
    let mut f = [0.0; 3];
    let mut fp = [0.0; 3];
    for i in 0..3 {
        let xyz = RGB_TO_XYZ[i][0] * c[0] + RGB_TO_XYZ[i][1] * c[1] + RGB_TO_XYZ[i][2] * c[2];
        let t = xyz / WHITE[i];
        f[i] = lab_f(t);
        fp[i] = lab_f_prime(t) / WHITE[i];
    }
    let lab = [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ];
    // d f_i / d rgb_k = fp[i] * M[i][k]
    let mut jac = [[0.0; 3]; 3];
    for k in 0..3 {
        let dfx = fp[0] * RGB_TO_XYZ[0][k] * live[k];
        let dfy = fp[1] * RGB_TO_XYZ[1][k] * live[k];
        let dfz = fp[2] * RGB_TO_XYZ[2][k] * live[k];
        jac[0][k] = 116.0 * dfy;
        jac[1][k] = 500.0 * (dfx - dfy);
        jac[2][k] = 200.0 * (dfy - dfz);
    }
    (lab, jac)
}

/// Per-pixel L*a*b* conversion. Inputs are clamped to the `[0, 1]` gamut.
pub fn linear_rgb_to_lab(img: &ImagePlane) -> Result<ImagePlane> {
    img.expect_space(ColorSpace::LinearRgb)?;
    img.check_dims(img.width(), img.height(), 3, "lab conversion")?;
    let mut data = Vec::with_capacity(img.data().len());
    for i in 0..img.len_pixels() {
        data.extend_from_slice(&lab_from_linear(img.rgb(i)));
    }
    ImagePlane::new(img.width(), img.height(), 3, ColorSpace::Lab, data)
}

/// Rec. 601 luma of display-encoded RGB.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: [f64; 3]) -> ImagePlane {
        ImagePlane::new(1, 1, 3, ColorSpace::LinearRgb, v.to_vec()).unwrap()
    }

    #[test]
    fn transfer_fixed_points() {
        assert_eq!(srgb_decode(0.0), 0.0);
        assert_eq!(srgb_decode(1.0), 1.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transfer_midpoint_matches_high_precision_value() {
        // ((0.5 + 0.055) / 1.055)^2.4 evaluated at 40 digits.
        assert!((srgb_decode(0.5) - 0.214_041_140_482_232_4).abs() < 1e-12);
    }

    #[test]
    fn wrong_space_rejected() {
        let img = px([0.1, 0.2, 0.3]);
        assert!(srgb_to_linear(&img).is_err());
        let s = img.clone().retag(ColorSpace::Srgb).unwrap();
        assert!(linear_rgb_to_lab(&s).is_err());
        assert!(linear_to_srgb(&s).is_err());
    }

    #[test]
    fn lab_endpoints() {
        let black = linear_rgb_to_lab(&px([0.0; 3])).unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);
        let white = lab_from_linear([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 1e-3 && white[2].abs() < 1e-3);
    }

    #[test]
    fn lab_mid_gray() {
        // 116 * 0.18^(1/3) - 16 = 49.4961076...
        let g = lab_from_linear([0.18; 3]);
        assert!((g[0] - 49.50).abs() < 0.05);
        assert!((g[0] - 49.496_107_610_119_58).abs() < 1e-9);
    }

    #[test]
    fn lab_clamps_out_of_gamut() {
        assert_eq!(lab_from_linear([1.7, 2.0, 1.2]), lab_from_linear([1.0; 3]));
        assert_eq!(lab_from_linear([-0.2, 0.0, -3.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lab_jacobian_matches_central_differences() {
        for rgb in [[0.3, 0.6, 0.1], [0.004, 0.002, 0.9], [0.75, 0.75, 0.2]] {
            let (_, jac) = lab_with_jacobian(rgb);
            let h = 1e-7;
            for k in 0..3 {
                let mut p = rgb;
                let mut m = rgb;
                p[k] += h;
                m[k] -= h;
                let lp = lab_from_linear(p);
                let lm = lab_from_linear(m);
                for i in 0..3 {
                    let fd = (lp[i] - lm[i]) / (2.0 * h);
                    assert!(
                        (fd - jac[i][k]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "d lab{i}/d rgb{k}: {fd} vs {}",
                        jac[i][k]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn srgb_round_trip(x in 0.0f64..=1.0) {
            prop_assert!((srgb_encode(srgb_decode(x)) - x).abs() < 1e-6);
        }

        #[test]
        fn grays_are_neutral(g in 0.0f64..=1.0) {
            let lab = lab_from_linear([g; 3]);
            prop_assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6);
        }

        #[test]
        fn lightness_monotone_in_gray(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lab_from_linear([lo; 3])[0] <= lab_from_linear([hi; 3])[0]);
        }
    }
}
