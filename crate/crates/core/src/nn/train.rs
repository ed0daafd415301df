//! Training loop over multi-lit pairs, and dataset evaluation of a model.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{store_tensors, Checkpoint, RngState};
use super::model::{Mode, Model, ModelConfig};
use crate::dataset::LoadedScene;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, ComponentGradients, LossBreakdown, LossWeights, PairEstimate, Supervision};
use crate::metrics::{angular_errors, evaluate_pair, summarize_angles, PairMetrics, RelightReport};
use crate::synth::{enumerate_pairs, MultiLitSample, PairMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    /// Albedo, normal and light supervision plus the image terms.
    Full,
    /// Light supervision plus the image terms; albedo and normal weights are
    /// forced to zero.
    LightOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: SupervisionMode,
    pub use_relit: bool,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Pairs per step; each contributes two images to the batch.
    pub batch_pairs: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_pair_mode")]
    pub pairs: PairMode,
}

fn default_pair_mode() -> PairMode {
    PairMode::All
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: SupervisionMode::LightOnly,
            use_relit: true,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_pairs: 8,
            steps: 2000,
            seed: 0,
            model: ModelConfig::default(),
            pairs: PairMode::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_pairs == 0 {
            return Err(Error::invalid("batch_pairs must be positive"));
        }
        Ok(())
    }

    /// Weights after applying the supervision mode and the relit switch.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.mode == SupervisionMode::LightOnly {
            w.lambda_albedo = 0.0;
            w.lambda_normal = 0.0;
        }
        if !self.use_relit {
            w.lambda_relit = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Scenes and the flattened `(scene, i, j)` pair list.
pub struct TrainData {
    pub scenes: Vec<MultiLitSample>,
    pub pairs: Vec<(usize, usize, usize)>,
}

impl TrainData {
    pub fn new(scenes: Vec<MultiLitSample>, mode: PairMode) -> Result<Self> {
        let mut pairs = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            for (i, j) in enumerate_pairs(scene.k(), mode)? {
                pairs.push((s, i, j));
            }
        }
        if pairs.is_empty() {
            return Err(Error::insufficient("dataset has no pairs"));
        }
        Ok(Self { scenes, pairs })
    }

    pub fn from_loaded(scenes: Vec<LoadedScene>, mode: PairMode) -> Result<Self> {
        Self::new(scenes.into_iter().map(|s| s.sample).collect(), mode)
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let opt = Adam::new(config.adam, model.num_params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        let params = ckpt.flat("param", t.model.params())?;
        let specs = t.model.params().specs().to_vec();
        t.model.params_store_mut().load(&specs, params)?;
        let buffers = ckpt.flat("buffer", t.model.buffers())?;
        let specs = t.model.buffers().specs().to_vec();
        t.model.buffers_store_mut().load(&specs, buffers)?;
        t.opt.m = ckpt.flat("adam_m", t.model.params())?;
        t.opt.v = ckpt.flat("adam_v", t.model.params())?;
        t.opt.t = ckpt.adam_t;
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let p = self.model.params();
        let mut tensors = store_tensors("param", p, p.data());
        let b = self.model.buffers();
        tensors.extend(store_tensors("buffer", b, b.data()));
        tensors.extend(store_tensors("adam_m", p, &self.opt.m));
        tensors.extend(store_tensors("adam_v", p, &self.opt.v));
        Checkpoint {
            step: self.step as u64,
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
            adam_t: self.opt.t,
            tensors,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One optimizer step on a freshly drawn batch. The model is left
    /// untouched when the loss is non-finite.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LogEntry> {
        let w = self.config.effective_weights();
        let batch: Vec<(usize, usize, usize)> = (0..self.config.batch_pairs)
            .map(|_| data.pairs[self.rng.gen_range(0..data.pairs.len())])
            .collect();
        let mut images = Vec::with_capacity(2 * batch.len());
        let mut masks = Vec::with_capacity(2 * batch.len());
        for &(s, i, j) in &batch {
            let sc = &data.scenes[s];
            images.extend([&sc.images[i], &sc.images[j]]);
            masks.extend([&sc.mask, &sc.mask]);
        }
        let (outputs, tape) = self.model.forward(&images, &masks, Mode::Train)?;
        let tape = tape.expect("train mode records a tape");
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut head_grads: Vec<ComponentGradients> = Vec::with_capacity(outputs.len());
        let mut outputs = outputs.into_iter();
        for &(s, i, j) in &batch {
            let sc = &data.scenes[s];
            let est = PairEstimate::new(outputs.next().unwrap(), outputs.next().unwrap());
            let sup = Supervision {
                albedo: &sc.albedo,
                normals: &sc.normals,
                lights: [&sc.lightings[i], &sc.lightings[j]],
            };
            let (loss, grads) = total_loss_with_grad(&est, [&sc.images[i], &sc.images[j]], &sc.mask, Some(&sup), &w)?;
            mean.add_scaled(&loss, scale);
            for mut g in grads {
                g.scale(scale);
                head_grads.push(g);
            }
        }
        if !mean.is_finite() {
            return Err(Error::OptimizationFailed {
                step: self.step,
                reason: "training loss became non-finite".into(),
                last_finite: None,
            });
        }
        let grads = self.model.backward(&tape, &head_grads)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::OptimizationFailed {
                step: self.step,
                reason: "parameter gradient became non-finite".into(),
                last_finite: None,
            });
        }
        self.opt.step(self.model.params_mut(), &grads);
        let entry = LogEntry {
            step: self.step,
            loss: mean,
            lr: self.opt.config.lr,
        };
        self.step += 1;
        Ok(entry)
    }

    /// Trains until `config.steps`, appending JSON lines to `log` and
    /// saving a checkpoint every `checkpoint_every` steps (and at the end)
    /// when `ckpt_path` is set.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut log: Option<&mut dyn Write>,
        ckpt_path: Option<&Path>,
        checkpoint_every: usize,
    ) -> Result<Vec<LogEntry>> {
        let mut entries = Vec::new();
        while self.step < self.config.steps {
            let e = self.train_step(data)?;
            if let Some(l) = log.as_deref_mut() {
                let line = serde_json::to_string(&e).expect("log entry serializes");
                writeln!(l, "{line}").map_err(|err| Error::io("training log", err))?;
            }
            if e.step % 100 == 0 {
                log::info!("step {} loss {:.5}", e.step, e.loss.total);
            }
            entries.push(e);
            if let Some(p) = ckpt_path {
                if checkpoint_every > 0 && self.step % checkpoint_every == 0 && self.step < self.config.steps {
                    self.checkpoint().save(p)?;
                }
            }
        }
        if let Some(p) = ckpt_path {
            self.checkpoint().save(p)?;
        }
        Ok(entries)
    }
}

/// Loads an inference model from a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Trainer::from_checkpoint(&Checkpoint::load(path)?)?.into_model())
}

#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub report: RelightReport,
    pub pairs: Vec<PairMetrics>,
    /// Per-pixel normal errors pooled over every decomposed image.
    pub angles: Vec<f64>,
}

/// Decomposes every image of every scene in eval mode and scores all pairs
/// plus pooled normal errors.
pub fn evaluate_model(model: &Model, scenes: &[MultiLitSample], mode: PairMode, name: &str) -> Result<ModelEvaluation> {
    let mut pairs = Vec::new();
    let mut angles = Vec::new();
    for sc in scenes {
        let outs = sc
            .images
            .iter()
            .map(|img| model.decompose_single(img, &sc.mask))
            .collect::<Result<Vec<_>>>()?;
        for o in &outs {
            angles.extend(angular_errors(&o.normals, &sc.normals, &sc.mask)?);
        }
        for (i, j) in enumerate_pairs(sc.k(), mode)? {
            let est = PairEstimate::new(outs[i].clone(), outs[j].clone());
            pairs.push(evaluate_pair(&est, &sc.images[i], &sc.images[j], &sc.mask)?);
        }
    }
    let normals = summarize_angles(&angles)?;
    Ok(ModelEvaluation {
        report: RelightReport::from_pairs(name, &pairs, Some(normals))?,
        pairs,
        angles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_scene, DatasetConfig};

    fn data(n: usize, size: usize) -> TrainData {
        let cfg = DatasetConfig {
            scenes: n,
            k: 3,
            size,
            seed: 4,
            ..Default::default()
        };
        let scenes = (0..n).map(|i| synthesize_scene(&cfg, i).unwrap().1).collect();
        TrainData::new(scenes, PairMode::All).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_pairs: 2,
            steps: 6,
            seed: 9,
            model: ModelConfig::micro(),
            ..Default::default()
        }
    }

    #[test]
    fn light_only_zeroes_component_weights() {
        let mut c = small_config();
        c.use_relit = false;
        let w = c.effective_weights();
        assert_eq!((w.lambda_albedo, w.lambda_normal, w.lambda_relit), (0.0, 0.0, 0.0));
        assert_eq!(w.lambda_light, 0.1);
        c.mode = SupervisionMode::Full;
        c.use_relit = true;
        assert_eq!(c.effective_weights(), c.weights);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(2, 16);
        let mut a = Trainer::new(small_config()).unwrap();
        let full = a.run(&d, None, None, 0).unwrap();

        let mut b = Trainer::new(small_config()).unwrap();
        for _ in 0..3 {
            b.train_step(&d).unwrap();
        }
        let bytes = b.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let mut c = Trainer::from_checkpoint(&ck).unwrap();
        let rest = c.run(&d, None, None, 0).unwrap();
        assert_eq!(&full[3..], &rest[..]);
        assert_eq!(a.model().params().data(), c.model().params().data());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(b"nope", p), Err(Error::Format { .. })));
        let t = Trainer::new(small_config()).unwrap();
        let mut bytes = t.checkpoint().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::Format { .. })));
    }

    #[test]
    fn evaluation_covers_all_pairs() {
        let d = data(2, 32);
        let m = Model::new(ModelConfig::micro(), 1).unwrap();
        let e = evaluate_model(&m, &d.scenes, PairMode::All, "init").unwrap();
        assert_eq!(e.pairs.len(), 6);
        assert_eq!(e.report.pairs, 6);
        assert!(e.report.normals.is_some());
    }
}
