//! Compact encoder / two-branch decoder with an SH lighting head.
//!
//! ```text
//! image ─ enc(3 × conv s2 + BN + ReLU) ─ F ─┬─ res × R ─ FA ─ dec ─ sigmoid ─ albedo
//!                                          ├─ res × R ─ FN ─ dec ─ normalize ─ normals
//!                                          └─ [F, FA, FN] ─ 1×1 conv + BN + ReLU ─ pool ─ affine ─ light
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Affine, BatchNorm, BnCache, Conv, ConvCache, Pass};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::{normalize_backward, ColorSpace, ImagePlane, Mask, NormalMap};
use crate::losses::{ComponentGradients, Components};
use crate::sh::{ShLighting, NUM_BASIS};

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Input sides must be multiples of this (three stride-2 stages).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels after the first encoder stage; later stages use 2× and 4×.
    pub width: usize,
    /// Residual blocks in each of the albedo and normal branches.
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            residual_blocks: 2,
        }
    }
}

impl ModelConfig {
    /// Four-channel variant used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            width: 4,
            residual_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width > 256 {
            return Err(Error::invalid(format!("model width {} out of range 1..=256", self.width)));
        }
        if self.residual_blocks > 16 {
            return Err(Error::invalid("at most 16 residual blocks per branch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

struct CbrCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

impl ConvBnRelu {
    fn forward(&self, pass: &mut Pass, x: &Tensor) -> CbrCache {
        let (c, conv) = self.conv.forward(pass, x);
        let (mut out, bn) = self.bn.forward(pass, &c);
        relu(&mut out);
        CbrCache { conv, bn, out }
    }

    fn backward(&self, ps: &ParamStore, g: &mut [f64], cache: &CbrCache, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let d = relu_backward(dy, &cache.out);
        let d = self.bn.backward(ps, g, &cache.bn, &d);
        self.conv.backward(ps, g, &cache.conv, &d, need_dx)
    }
}

/// Pre-activation block: `x + conv(relu(bn(conv(relu(bn(x))))))`.
struct ResBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
}

struct ResCache {
    bn1: BnCache,
    r1: Tensor,
    conv1: ConvCache,
    bn2: BnCache,
    r2: Tensor,
    conv2: ConvCache,
}

impl ResBlock {
    fn forward(&self, pass: &mut Pass, x: &Tensor) -> (Tensor, ResCache) {
        let (mut r1, bn1) = self.bn1.forward(pass, x);
        relu(&mut r1);
        let (c1, conv1) = self.conv1.forward(pass, &r1);
        let (mut r2, bn2) = self.bn2.forward(pass, &c1);
        relu(&mut r2);
        let (mut y, conv2) = self.conv2.forward(pass, &r2);
        y.add_assign(x);
        (
            y,
            ResCache {
                bn1,
                r1,
                conv1,
                bn2,
                r2,
                conv2,
            },
        )
    }

    fn backward(&self, ps: &ParamStore, g: &mut [f64], cache: &ResCache, dy: Tensor) -> Tensor {
        let d = self.conv2.backward(ps, g, &cache.conv2, &dy, true).unwrap();
        let d = relu_backward(d, &cache.r2);
        let d = self.bn2.backward(ps, g, &cache.bn2, &d);
        let d = self.conv1.backward(ps, g, &cache.conv1, &d, true).unwrap();
        let d = relu_backward(d, &cache.r1);
        let mut dx = self.bn1.backward(ps, g, &cache.bn1, &d);
        dx.add_assign(&dy);
        dx
    }
}

struct Decoder {
    up: Vec<ConvBnRelu>,
    last: Conv,
}

struct DecCache {
    up: Vec<CbrCache>,
    last: ConvCache,
}

impl Decoder {
    fn forward(&self, pass: &mut Pass, x: &Tensor) -> (Tensor, DecCache) {
        let mut caches: Vec<CbrCache> = Vec::with_capacity(self.up.len());
        for layer in &self.up {
            let c = layer.forward(pass, caches.last().map_or(x, |c| &c.out));
            caches.push(c);
        }
        let (y, last) = self.last.forward(pass, &caches.last().unwrap().out);
        (y, DecCache { up: caches, last })
    }

    fn backward(&self, ps: &ParamStore, g: &mut [f64], cache: &DecCache, dy: &Tensor) -> Tensor {
        let mut d = self.last.backward(ps, g, &cache.last, dy, true).unwrap();
        for (layer, c) in self.up.iter().zip(&cache.up).rev() {
            d = layer.backward(ps, g, c, d, true).unwrap();
        }
        d
    }
}

struct Arch {
    encoder: Vec<ConvBnRelu>,
    albedo_branch: Vec<ResBlock>,
    normal_branch: Vec<ResBlock>,
    albedo_dec: Decoder,
    normal_dec: Decoder,
    light_conv: ConvBnRelu,
    light_fc: Affine,
}

/// Activations recorded by a train-mode forward, consumed by
/// [`Model::backward`].
pub struct Tape {
    model_id: u64,
    version: u64,
    n: usize,
    h: usize,
    w: usize,
    enc: Vec<CbrCache>,
    albedo_branch: Vec<ResCache>,
    normal_branch: Vec<ResCache>,
    albedo_dec: DecCache,
    normal_dec: DecCache,
    light_conv: CbrCache,
    pooled: Vec<f64>,
    albedo: Tensor,
    normals_raw: Tensor,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.n
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    arch: Arch,
    id: u64,
    version: u64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        // Rebuilding from the config reproduces the identical layout.
        let mut m = Model::new(self.config, 0).expect("config was validated");
        m.params = self.params.clone();
        m.buffers = self.buffers.clone();
        m
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .field("version", &self.version)
            .finish()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Model {
    /// Builds a freshly initialized model. Weights are He-uniform; the last
    /// decoder layers start at a tenth of that so the heads begin near their
    /// biases (albedo 0.5, normals facing the camera).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut init = |fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            rng.gen_range(-bound..bound)
        };

        let cbr = |params: &mut ParamStore,
                       buffers: &mut ParamStore,
                       init: &mut dyn FnMut(usize) -> f64,
                       name: &str,
                       geom: (usize, usize, usize, usize, usize),
                       transposed: bool| ConvBnRelu {
            conv: Conv::new(params, &format!("{name}.conv"), geom, transposed, &mut |f| init(f)),
            bn: BatchNorm::new(params, buffers, &format!("{name}.bn"), geom.1),
        };

        let enc_ch = [3, w, 2 * w, 4 * w];
        let encoder = (0..3)
            .map(|i| {
                cbr(
                    &mut params,
                    &mut buffers,
                    &mut init,
                    &format!("enc.{i}"),
                    (enc_ch[i], enc_ch[i + 1], 3, 2, 1),
                    false,
                )
            })
            .collect();

        let branch = |params: &mut ParamStore, buffers: &mut ParamStore, init: &mut dyn FnMut(usize) -> f64, prefix: &str| {
            (0..config.residual_blocks)
                .map(|i| {
                    let name = format!("{prefix}.{i}");
                    let c = 4 * w;
                    ResBlock {
                        bn1: BatchNorm::new(params, buffers, &format!("{name}.bn1"), c),
                        conv1: Conv::new(params, &format!("{name}.conv1"), (c, c, 3, 1, 1), false, &mut |f| init(f)),
                        bn2: BatchNorm::new(params, buffers, &format!("{name}.bn2"), c),
                        conv2: Conv::new(params, &format!("{name}.conv2"), (c, c, 3, 1, 1), false, &mut |f| init(f)),
                    }
                })
                .collect::<Vec<_>>()
        };
        let albedo_branch = branch(&mut params, &mut buffers, &mut init, "albedo_res");
        let normal_branch = branch(&mut params, &mut buffers, &mut init, "normal_res");

        let decoder = |params: &mut ParamStore, buffers: &mut ParamStore, init: &mut dyn FnMut(usize) -> f64, prefix: &str| {
            let up = vec![
                cbr(params, buffers, init, &format!("{prefix}.0"), (4 * w, 2 * w, 4, 2, 1), true),
                cbr(params, buffers, init, &format!("{prefix}.1"), (2 * w, w, 4, 2, 1), true),
            ];
            let last = Conv::new(params, &format!("{prefix}.2.conv"), (w, 3, 4, 2, 1), true, &mut |f| init(f));
            params.get_mut(last.weight).iter_mut().for_each(|v| *v *= 0.1);
            Decoder { up, last }
        };
        let albedo_dec = decoder(&mut params, &mut buffers, &mut init, "albedo_dec");
        let normal_dec = decoder(&mut params, &mut buffers, &mut init, "normal_dec");
        params.get_mut(normal_dec.last.bias)[2] = 1.0;

        let light_conv = cbr(
            &mut params,
            &mut buffers,
            &mut init,
            "light.conv",
            (12 * w, 4 * w, 1, 1, 0),
            false,
        );
        let fc_in = 4 * w;
        let fc_bound = 1.0 / (fc_in as f64).sqrt();
        let light_fc = Affine {
            weight: params.add("light.fc.weight", &[3 * NUM_BASIS, fc_in], || {
                init(1) / 6f64.sqrt() * fc_bound
            }),
            // DC term starts at unit irradiance in every channel
            bias: params.add("light.fc.bias", &[3 * NUM_BASIS], || 0.0),
            inputs: fc_in,
            outputs: 3 * NUM_BASIS,
        };
        params.get_mut(light_fc.bias)[..3].copy_from_slice(&[1.0; 3]);

        Ok(Self {
            config,
            params,
            buffers,
            arch: Arch {
                encoder,
                albedo_branch,
                normal_branch,
                albedo_dec,
                normal_dec,
                light_conv,
                light_fc,
            },
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    /// Mutable access to the trainable values. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        self.params.data_mut()
    }

    pub(crate) fn params_store_mut(&mut self) -> &mut ParamStore {
        self.version += 1;
        &mut self.params
    }

    pub(crate) fn buffers_store_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn input_tensor(images: &[&ImagePlane], masks: &[&Mask]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        if images.len() != masks.len() {
            return Err(Error::invalid("one mask per image is required"));
        }
        let (w, h) = (first.width(), first.height());
        if w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 || w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "image size {w}x{h} is not a positive multiple of {SIZE_MULTIPLE}"
            )));
        }
        let mut x = Tensor::zeros(images.len(), 3, h, w);
        let p = w * h;
        for (b, (img, mask)) in images.iter().zip(masks).enumerate() {
            img.check_dims(w, h, 3, "image")?;
            img.expect_space(ColorSpace::LinearRgb)?;
            mask.check_matches(img, "mask")?;
            let dst = x.item_mut(b);
            for i in mask.indices() {
                let px = img.pixel(i);
                for c in 0..3 {
                    if !px[c].is_finite() {
                        return Err(Error::invalid(format!("non-finite input at pixel {i}")));
                    }
                    dst[c * p + i] = px[c];
                }
            }
        }
        Ok(x)
    }

    fn run(&self, pass: &mut Pass, x: &Tensor) -> Tape {
        let a = &self.arch;
        let mut enc: Vec<CbrCache> = Vec::with_capacity(a.encoder.len());
        for layer in &a.encoder {
            let c = layer.forward(pass, enc.last().map_or(x, |c| &c.out));
            enc.push(c);
        }
        let f = &enc.last().unwrap().out;

        let run_branch = |blocks: &[ResBlock], pass: &mut Pass| {
            let mut caches = Vec::with_capacity(blocks.len());
            let mut cur = f.clone();
            for b in blocks {
                let (y, c) = b.forward(pass, &cur);
                caches.push(c);
                cur = y;
            }
            (cur, caches)
        };
        let (fa, albedo_branch) = run_branch(&a.albedo_branch, pass);
        let (fnm, normal_branch) = run_branch(&a.normal_branch, pass);

        let (mut albedo, albedo_dec) = a.albedo_dec.forward(pass, &fa);
        albedo.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let (normals_raw, normal_dec) = a.normal_dec.forward(pass, &fnm);

        let cat = Tensor::concat_channels(&[f, &fa, &fnm]).expect("branch shapes agree");
        let light_conv = a.light_conv.forward(pass, &cat);
        let lc = &light_conv.out;
        let p = lc.plane_len();
        let mut pooled = vec![0.0; lc.n * lc.c];
        for b in 0..lc.n {
            for (c, plane) in lc.item(b).chunks_exact(p).enumerate() {
                pooled[b * lc.c + c] = plane.iter().sum::<f64>() / p as f64;
            }
        }
        Tape {
            model_id: self.id,
            version: self.version,
            n: x.n,
            h: x.h,
            w: x.w,
            enc,
            albedo_branch,
            normal_branch,
            albedo_dec,
            normal_dec,
            light_conv,
            pooled,
            albedo,
            normals_raw,
        }
    }

    fn outputs(&self, tape: &Tape) -> Result<Vec<Components>> {
        let light = self.arch.light_fc.forward(&self.params, &tape.pooled, tape.n);
        let p = tape.h * tape.w;
        let mut out = Vec::with_capacity(tape.n);
        for b in 0..tape.n {
            let (a, u) = (tape.albedo.item(b), tape.normals_raw.item(b));
            let albedo = ImagePlane::from_fn_rgb(tape.w, tape.h, ColorSpace::LinearRgb, |x, y| {
                let i = y * tape.w + x;
                [a[i], a[p + i], a[2 * p + i]]
            })?;
            let raw = ImagePlane::from_fn_rgb(tape.w, tape.h, ColorSpace::NormalXyz, |x, y| {
                let i = y * tape.w + x;
                [u[i], u[p + i], u[2 * p + i]]
            })?;
            let lv = &light[b * 3 * NUM_BASIS..(b + 1) * 3 * NUM_BASIS];
            if lv.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidState("network produced a non-finite lighting".into()));
            }
            out.push(Components {
                albedo,
                normals: NormalMap::from_raw(&raw)?,
                light: ShLighting::from_flat(lv)?,
            });
        }
        Ok(out)
    }

    /// Forward pass over a batch. Train mode uses batch statistics, updates
    /// the running averages and returns a tape for [`Model::backward`].
    ///
    /// Inputs must be linear RGB with sides divisible by 8; pixels outside
    /// each mask are zeroed before entering the network.
    pub fn forward(
        &mut self,
        images: &[&ImagePlane],
        masks: &[&Mask],
        mode: Mode,
    ) -> Result<(Vec<Components>, Option<Tape>)> {
        if mode == Mode::Eval {
            return Ok((self.forward_eval(images, masks)?, None));
        }
        let x = Self::input_tensor(images, masks)?;
        let mut pass = Pass {
            params: &self.params,
            buffers: &self.buffers,
            train: true,
            stats: Vec::new(),
        };
        let tape = self.run(&mut pass, &x);
        let stats = pass.stats;
        let outputs = self.outputs(&tape)?;
        for s in stats {
            for (r, v) in self.buffers.get_mut(s.mean_id).iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            for (r, v) in self.buffers.get_mut(s.var_id).iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok((outputs, Some(tape)))
    }

    /// Eval-mode forward with running batch-norm statistics; no state changes.
    pub fn forward_eval(&self, images: &[&ImagePlane], masks: &[&Mask]) -> Result<Vec<Components>> {
        let x = Self::input_tensor(images, masks)?;
        let mut pass = Pass {
            params: &self.params,
            buffers: &self.buffers,
            train: false,
            stats: Vec::new(),
        };
        let tape = self.run(&mut pass, &x);
        self.outputs(&tape)
    }

    /// Single-image inference.
    pub fn decompose_single(&self, image: &ImagePlane, mask: &Mask) -> Result<Components> {
        Ok(self.forward_eval(&[image], &[mask])?.remove(0))
    }

    /// Parameter gradients given the loss gradients with respect to each
    /// item's decoded heads (albedo values, unit normals, lighting).
    pub fn backward(&self, tape: &Tape, head_grads: &[ComponentGradients]) -> Result<Vec<f64>> {
        if tape.model_id != self.id || tape.version != self.version {
            return Err(Error::InvalidState(
                "tape was recorded before the parameters last changed".into(),
            ));
        }
        if head_grads.len() != tape.n {
            return Err(Error::invalid(format!(
                "expected {} head gradients, got {}",
                tape.n,
                head_grads.len()
            )));
        }
        let (h, w) = (tape.h, tape.w);
        let p = h * w;
        for g in head_grads {
            g.d_albedo.check_dims(w, h, 3, "albedo gradient")?;
            g.d_normals.check_dims(w, h, 3, "normal gradient")?;
        }
        let a = &self.arch;
        let ps = &self.params;
        let mut grads = vec![0.0; ps.len()];

        let mut d_albedo = Tensor::zeros(tape.n, 3, h, w);
        let mut d_normals = Tensor::zeros(tape.n, 3, h, w);
        let mut d_light = vec![0.0; tape.n * 3 * NUM_BASIS];
        for (b, g) in head_grads.iter().enumerate() {
            let av = tape.albedo.item(b);
            let u = tape.normals_raw.item(b);
            let da = d_albedo.item_mut(b);
            for i in 0..p {
                let ga = g.d_albedo.pixel(i);
                for c in 0..3 {
                    let s = av[c * p + i];
                    da[c * p + i] = ga[c] * s * (1.0 - s);
                }
            }
            let dn = d_normals.item_mut(b);
            for i in 0..p {
                let gn = g.d_normals.pixel(i);
                let d = normalize_backward([u[i], u[p + i], u[2 * p + i]], [gn[0], gn[1], gn[2]]);
                for c in 0..3 {
                    dn[c * p + i] = d[c];
                }
            }
            for k in 0..NUM_BASIS {
                for c in 0..3 {
                    d_light[b * 3 * NUM_BASIS + 3 * k + c] = g.d_light[k][c];
                }
            }
        }

        // lighting head
        let d_pooled = a.light_fc.backward(ps, &mut grads, &tape.pooled, &d_light, tape.n);
        let lc = &tape.light_conv.out;
        let lp = lc.plane_len();
        let mut d_lc = Tensor::zeros_like(lc);
        for b in 0..lc.n {
            for (c, plane) in d_lc.item_mut(b).chunks_exact_mut(lp).enumerate() {
                let v = d_pooled[b * lc.c + c] / lp as f64;
                plane.iter_mut().for_each(|x| *x = v);
            }
        }
        let d_cat = a
            .light_conv
            .backward(ps, &mut grads, &tape.light_conv, d_lc, true)
            .unwrap();
        let c4 = 4 * self.config.width;
        let mut parts = d_cat.split_channels(&[c4, c4, c4]).into_iter();
        let (mut d_f, mut d_fa, mut d_fn) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );

        // decoders and branches
        d_fa.add_assign(&a.albedo_dec.backward(ps, &mut grads, &tape.albedo_dec, &d_albedo));
        d_fn.add_assign(&a.normal_dec.backward(ps, &mut grads, &tape.normal_dec, &d_normals));
        for (blk, c) in a.albedo_branch.iter().zip(&tape.albedo_branch).rev() {
            d_fa = blk.backward(ps, &mut grads, c, d_fa);
        }
        for (blk, c) in a.normal_branch.iter().zip(&tape.normal_branch).rev() {
            d_fn = blk.backward(ps, &mut grads, c, d_fn);
        }
        d_f.add_assign(&d_fa);
        d_f.add_assign(&d_fn);

        // encoder
        let mut d = d_f;
        for (i, (layer, c)) in a.encoder.iter().zip(&tape.enc).enumerate().rev() {
            match layer.backward(ps, &mut grads, c, d, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(grads)
    }
}
