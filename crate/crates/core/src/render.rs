//! Lambertian SH image formation: `I(p) = A(p) ∘ (Lᵀ h(n(p)))`.
//!
//! Nothing on the differentiable path is clamped; clamping happens only when
//! images are exported or prepared for the LAB losses.

use crate::error::{Error, Result};
use crate::image::{normalize_backward, ColorSpace, ImagePlane, Mask, NormalMap};
use crate::sh::{basis, basis_jacobian, ShLighting, NUM_BASIS};

/// Unit tolerance applied to foreground normals entering the renderer.
const NORMAL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub d_albedo: ImagePlane,
    /// Gradient with respect to the unnormalized normal parameters `u`,
    /// with `n = u / ‖u‖`.
    pub d_normals_raw: ImagePlane,
    pub d_lighting: [[f64; 3]; NUM_BASIS],
}

fn check_geometry(normals: &NormalMap, mask: &Mask) -> Result<()> {
    mask.check_matches(normals.plane(), "normals")?;
    normals.check_unit(mask, NORMAL_TOLERANCE)
}

fn check_albedo(albedo: &ImagePlane, mask: &Mask) -> Result<()> {
    albedo.check_dims(mask.width(), mask.height(), 3, "albedo")
}

/// `S_c(p) = Σ_k L[k, c] · h_k(n(p))` on the mask, zero elsewhere.
pub fn shading(normals: &NormalMap, light: &ShLighting, mask: &Mask) -> Result<ImagePlane> {
    check_geometry(normals, mask)?;
    let mut out = ImagePlane::zeros(mask.width(), mask.height(), 3, ColorSpace::LinearRgb);
    for i in mask.indices() {
        let s = light.shade(&basis(normals.get(i)));
        out.pixel_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}

pub fn render(
    albedo: &ImagePlane,
    normals: &NormalMap,
    light: &ShLighting,
    mask: &Mask,
) -> Result<ImagePlane> {
    check_albedo(albedo, mask)?;
    check_geometry(normals, mask)?;
    let mut out = ImagePlane::zeros(mask.width(), mask.height(), 3, ColorSpace::LinearRgb);
    for i in mask.indices() {
        let s = light.shade(&basis(normals.get(i)));
        let a = albedo.pixel(i);
        let px = out.pixel_mut(i);
        for c in 0..3 {
            px[c] = a[c] * s[c];
        }
    }
    Ok(out)
}

/// Same as [`render`] under a different lighting; used for light transfer
/// and the cross-relighting swap. Export through
/// [`crate::color::linear_to_srgb`], which clamps.
pub fn relight(
    albedo: &ImagePlane,
    normals: &NormalMap,
    target_light: &ShLighting,
    mask: &Mask,
) -> Result<ImagePlane> {
    render(albedo, normals, target_light, mask)
}

/// Gradients of `⟨grad_out, render(A, n, L)⟩` with respect to `A`, the unit
/// normals `n` and `L`. Off-mask entries are zero.
pub fn render_backward_unit(
    grad_out: &ImagePlane,
    albedo: &ImagePlane,
    normals: &NormalMap,
    light: &ShLighting,
    mask: &Mask,
) -> Result<(ImagePlane, ImagePlane, [[f64; 3]; NUM_BASIS])> {
    check_albedo(albedo, mask)?;
    mask.check_matches(normals.plane(), "normals")?;
    grad_out.check_dims(mask.width(), mask.height(), 3, "render gradient")?;
    let (w, h) = (mask.width(), mask.height());
    let mut d_albedo = ImagePlane::zeros(w, h, 3, ColorSpace::Scalar);
    let mut d_normals = ImagePlane::zeros(w, h, 3, ColorSpace::Scalar);
    let mut d_light = [[0.0; 3]; NUM_BASIS];
    for i in mask.indices() {
        let g = grad_out.pixel(i);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let n = normals.get(i);
        let hb = basis(n);
        let s = light.shade(&hb);
        let a = albedo.pixel(i);
        // upstream gradient on the shading, per channel
        let gs = [g[0] * a[0], g[1] * a[1], g[2] * a[2]];
        let da = d_albedo.pixel_mut(i);
        for c in 0..3 {
            da[c] = g[c] * s[c];
        }
        for k in 0..NUM_BASIS {
            for c in 0..3 {
                d_light[k][c] += gs[c] * hb[k];
            }
        }
        // ∂S_c/∂n = Σ_k L[k,c] ∂h_k/∂n
        let jac = basis_jacobian(n);
        let dn = d_normals.pixel_mut(i);
        for (row, lrow) in jac.iter().zip(&light.coeffs) {
            let w_k = gs[0] * lrow[0] + gs[1] * lrow[1] + gs[2] * lrow[2];
            if w_k != 0.0 {
                dn[0] += w_k * row[0];
                dn[1] += w_k * row[1];
                dn[2] += w_k * row[2];
            }
        }
    }
    Ok((d_albedo, d_normals, d_light))
}

/// Reverse-mode derivatives of [`render`] where the normals are given as
/// free 3-vectors `u` and normalized on use.
pub fn render_backward(
    grad_out: &ImagePlane,
    albedo: &ImagePlane,
    normal_params: &ImagePlane,
    light: &ShLighting,
    mask: &Mask,
) -> Result<RenderGradients> {
    normal_params.check_dims(mask.width(), mask.height(), 3, "normal parameters")?;
    if grad_out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite upstream gradient"));
    }
    let normals = NormalMap::from_raw(normal_params)?;
    let (d_albedo, d_unit, d_lighting) =
        render_backward_unit(grad_out, albedo, &normals, light, mask)?;
    let mut d_raw = d_unit;
    for i in mask.indices() {
        let u = normal_params.rgb(i);
        let g = d_raw.rgb(i);
        d_raw.pixel_mut(i).copy_from_slice(&normalize_backward(u, g));
    }
    Ok(RenderGradients {
        d_albedo,
        d_normals_raw: d_raw,
        d_lighting,
    })
}

/// Unit normals of raw parameters, with the renderer's zero-norm guard.
pub fn decode_normal_params(raw: &ImagePlane) -> Result<NormalMap> {
    NormalMap::from_raw(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::normalize_guarded as unit;
    use crate::sh::{C2, C4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(
        rng: &mut ChaCha8Rng,
        w: usize,
        h: usize,
    ) -> (ImagePlane, ImagePlane, ShLighting, Mask) {
        let albedo = ImagePlane::from_fn_rgb(w, h, ColorSpace::LinearRgb, |_, _| {
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
        })
        .unwrap();
        let raw = ImagePlane::from_fn_rgb(w, h, ColorSpace::Scalar, |_, _| {
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.3..1.5)]
        })
        .unwrap();
        let flat: Vec<f64> = (0..27).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let light = ShLighting::from_flat(&flat).unwrap();
        let mask = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.8));
        (albedo, raw, light, mask)
    }

    /// Straightforward per-pixel oracle written from the closed form.
    fn oracle_render(a: &ImagePlane, n: &NormalMap, l: &ShLighting, m: &Mask) -> Vec<f64> {
        let mut out = vec![0.0; a.data().len()];
        for y in 0..m.height() {
            for x in 0..m.width() {
                let i = y * m.width() + x;
                if !m.at(x, y) {
                    continue;
                }
                let [nx, ny, nz] = n.get(i);
                let hb = [
                    0.886227,
                    2.0 * 0.511664 * ny,
                    2.0 * 0.511664 * nz,
                    2.0 * 0.511664 * nx,
                    2.0 * 0.429043 * nx * ny,
                    2.0 * 0.429043 * ny * nz,
                    0.743125 * nz * nz - 0.247708,
                    2.0 * 0.429043 * nx * nz,
                    0.429043 * (nx * nx - ny * ny),
                ];
                for c in 0..3 {
                    let mut s = 0.0;
                    for k in 0..9 {
                        s += l.coeffs[k][c] * hb[k];
                    }
                    out[3 * i + c] = a.at(x, y, c) * s;
                }
            }
        }
        out
    }

    #[test]
    fn normalized_dc_light_gives_unit_shading() {
        let n = NormalMap::constant(4, 3, [0.3, -0.2, 0.9]).unwrap();
        let m = Mask::from_fn(4, 3, |x, _| x != 0);
        let l = ShLighting::ambient([1.0 / C4; 3]);
        let s = shading(&n, &l, &m).unwrap();
        for i in 0..12 {
            let expect = if m.get(i) { 1.0 } else { 0.0 };
            for c in 0..3 {
                assert!((s.pixel(i)[c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_basis_light() {
        let n = NormalMap::constant(2, 2, [0.0, 0.0, 1.0]).unwrap();
        let mut l = ShLighting::zero();
        l.coeffs[2] = [1.0, 0.0, 0.0];
        let s = shading(&n, &l, &Mask::full(2, 2)).unwrap();
        assert_eq!(s.rgb(3), [2.0 * C2, 0.0, 0.0]);
    }

    #[test]
    fn render_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, raw, l, m) = random_inputs(&mut rng, 9, 7);
        let n = NormalMap::from_raw(&raw).unwrap();
        let got = render(&a, &n, &l, &m).unwrap();
        for (g, o) in got.data().iter().zip(oracle_render(&a, &n, &l, &m)) {
            assert!((g - o).abs() < 1e-6);
        }
        let ones = ImagePlane::filled(9, 7, 3, ColorSpace::LinearRgb, 1.0);
        assert_eq!(render(&ones, &n, &l, &m).unwrap(), shading(&n, &l, &m).unwrap());
        let zeros = ImagePlane::zeros(9, 7, 3, ColorSpace::LinearRgb);
        assert!(render(&zeros, &n, &l, &m).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let n = NormalMap::constant(4, 4, [0.0, 0.0, 1.0]).unwrap();
        let a = ImagePlane::filled(3, 4, 3, ColorSpace::LinearRgb, 0.5);
        let l = ShLighting::ambient([1.0; 3]);
        assert!(render(&a, &n, &l, &Mask::full(4, 4)).is_err());
        assert!(shading(&n, &l, &Mask::full(5, 4)).is_err());
        let bad = NormalMap::new(ImagePlane::filled(4, 4, 3, ColorSpace::NormalXyz, 1.0)).unwrap();
        assert!(shading(&bad, &l, &Mask::full(4, 4)).is_err());
    }

    #[test]
    fn lighting_gradient_single_pixel() {
        let nvec = unit([0.2, 0.5, 0.8]);
        let n = NormalMap::constant(2, 2, nvec).unwrap();
        let raw = n.plane().clone();
        let a = ImagePlane::filled(2, 2, 3, ColorSpace::LinearRgb, 1.0);
        let m = Mask::from_fn(2, 2, |x, y| x == 1 && y == 0);
        let mut g = ImagePlane::zeros(2, 2, 3, ColorSpace::Scalar);
        g.pixel_mut(1)[0] = 1.0;
        let l = ShLighting::ambient([0.4, 0.5, 0.6]);
        let grads = render_backward(&g, &a, &raw, &l, &m).unwrap();
        let hb = basis(nvec);
        for k in 0..NUM_BASIS {
            assert!((grads.d_lighting[k][0] - hb[k]).abs() < 1e-15);
            assert_eq!(grads.d_lighting[k][1], 0.0);
            assert_eq!(grads.d_lighting[k][2], 0.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, raw, l, m) = random_inputs(&mut rng, 5, 5);
        let g = ImagePlane::zeros(5, 5, 3, ColorSpace::Scalar);
        let grads = render_backward(&g, &a, &raw, &l, &m).unwrap();
        assert!(grads.d_albedo.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_normals_raw.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_lighting.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, raw, l, m) = random_inputs(&mut rng, 5, 5);
        let g = ImagePlane::zeros(4, 5, 3, ColorSpace::Scalar);
        assert!(render_backward(&g, &a, &raw, &l, &m).is_err());
    }

    #[test]
    fn linear_in_lighting_and_albedo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, raw, l1, m) = random_inputs(&mut rng, 6, 6);
        let (_, _, l2, _) = random_inputs(&mut rng, 6, 6);
        let n = NormalMap::from_raw(&raw).unwrap();
        let mixed = render(&a, &n, &l1.combine(0.7, &l2, -1.3), &m).unwrap();
        let r1 = render(&a, &n, &l1, &m).unwrap();
        let r2 = render(&a, &n, &l2, &m).unwrap();
        for i in 0..mixed.data().len() {
            let expect = 0.7 * r1.data()[i] - 1.3 * r2.data()[i];
            assert!((mixed.data()[i] - expect).abs() < 1e-6);
        }
        let doubled = relight(&a, &n, &l1.scaled(2.0), &m).unwrap();
        let half_albedo = render(&a.scaled(0.5), &n, &l1, &m).unwrap();
        for i in 0..r1.data().len() {
            assert!((doubled.data()[i] - 2.0 * r1.data()[i]).abs() < 1e-12);
            assert!((half_albedo.data()[i] - 0.5 * r1.data()[i]).abs() < 1e-12);
        }
    }
}
