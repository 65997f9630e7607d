//! SGD training loop with momentum, weight decay, and per-group
//! learning rates, plus the checkpoint container.

use crate::data::{
    augment, derive_seed, load_image, resample_area, sample_rng, AugmentationConfig,
    DatasetManifest, Sample,
};
use crate::backbone::FeatureField;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossValue};
use crate::model::{EgsModel, ModelConfig};
use crate::retrieval::View;
use crate::tape::Graph;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Per-group learning rates, assigned by tensor-name prefix: the
/// pretrainable encoder runs slower than the freshly initialized
/// graph and classifier layers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrGroups {
    pub backbone: f64,
    pub new_layers: f64,
}

impl Default for LrGroups {
    fn default() -> Self {
        LrGroups {
            backbone: 0.001,
            new_layers: 0.01,
        }
    }
}

impl LrGroups {
    /// Total and disjoint: every trainable tensor lands in exactly one
    /// group or the lookup is an error.
    pub fn lr_for(&self, name: &str) -> Result<f64> {
        if name.starts_with("backbone.") {
            Ok(self.backbone)
        } else if name.starts_with("gnn.") || name.starts_with("head.") {
            Ok(self.new_layers)
        } else {
            Err(Error::Config(format!("tensor {} belongs to no lr group", name)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: LrGroups,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: LrGroups, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            lr,
            velocity: BTreeMap::new(),
        }
    }
}

/// One SGD update: g' = g + λp, v ← μv + g', p ← p − lr·v. Weight decay
/// is folded into the momentum buffer, not applied after it.
pub fn sgd_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let mu = T::from_f64(state.momentum);
    let wd = T::from_f64(state.weight_decay);
    for (name, p) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("no gradient for {}", name)))?;
        if grad.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                grad.shape(),
                name,
                p.shape()
            )));
        }
        let lr = T::from_f64(state.lr.lr_for(name)?);
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if v.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "velocity {:?} for parameter {} of shape {:?}",
                v.shape(),
                name,
                p.shape()
            )));
        }
        let n = p.values().len();
        let mut new_v = Vec::with_capacity(n);
        let mut new_p = Vec::with_capacity(n);
        for i in 0..n {
            let decayed = grad.values()[i].add(wd.mul(p.values()[i]));
            let vel = mu.mul(v.values()[i]).add(decayed);
            new_v.push(vel);
            new_p.push(p.values()[i].sub(lr.mul(vel)));
        }
        *v = Tensor::new(p.shape().to_vec(), new_v)?;
        *p = Tensor::new(p.shape().to_vec(), new_p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub temperature: f64,
    pub lr: LrGroups,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_pairs: 16,
            temperature: crate::loss::DEFAULT_TEMPERATURE,
            lr: LrGroups::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            augment: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossValue,
}

/// Loss log line; the log is an append-only sequence of these.
pub fn format_log_line(r: &StepRecord) -> String {
    format!(
        "{},{:.6},{:.6},{:.6}",
        r.step, r.loss.total, r.loss.infonce, r.loss.ce
    )
}

struct ClassImages {
    id: u64,
    drone: Vec<Arc<Tensor<f32>>>,
    satellite: Vec<Arc<Tensor<f32>>>,
}

const ROLE_BATCH: u64 = 21;

/// Owns the model, optimizer, and a decoded in-memory dataset; drives
/// the per-step sampling, forward/backward, and update sequence.
pub struct Trainer {
    pub model: EgsModel<f32>,
    pub opt: OptimizerState<f32>,
    pub config: TrainConfig,
    pub step: u64,
    classes: Vec<ClassImages>,
}

fn load_square(path: &Path, side: usize) -> Result<Arc<Tensor<f32>>> {
    let img = load_image(path)?;
    let s = img.shape();
    if s[1] != s[2] {
        return Err(Error::Geometry(format!(
            "{}: training images must be square, got {}x{}",
            path.display(),
            s[1],
            s[2]
        )));
    }
    let sized = if s[1] == side {
        img
    } else {
        resample_area(&img, side, side)?
    };
    Ok(Arc::new(sized))
}

impl Trainer {
    pub fn new(model: EgsModel<f32>, config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        if manifest.is_empty() {
            return Err(Error::Data("manifest has no paired classes".into()));
        }
        if config.batch_pairs > manifest.len() {
            return Err(Error::Config(format!(
                "batch of {} pairs needs at least that many classes, found {}",
                config.batch_pairs,
                manifest.len()
            )));
        }
        if manifest.len() != model.config.classes {
            return Err(Error::Config(format!(
                "model head has {} classes, manifest has {}",
                model.config.classes,
                manifest.len()
            )));
        }
        let side = model.config.image_side;
        let mut classes = Vec::with_capacity(manifest.len());
        for entry in &manifest.classes {
            let drone = entry
                .drone
                .iter()
                .map(|p| load_square(p, side))
                .collect::<Result<Vec<_>>>()?;
            let satellite = entry
                .satellite
                .iter()
                .map(|p| load_square(p, side))
                .collect::<Result<Vec<_>>>()?;
            classes.push(ClassImages {
                id: entry.id,
                drone,
                satellite,
            });
        }
        let opt = OptimizerState::new(config.lr, config.momentum, config.weight_decay);
        Ok(Trainer {
            model,
            opt,
            config,
            step: 0,
            classes,
        })
    }

    /// Replace the schedule after a resume: hyperparameters take effect
    /// from the next step, velocity and step counter are kept.
    pub fn set_schedule(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        if config.batch_pairs > self.classes.len() {
            return Err(Error::Config(format!(
                "batch of {} pairs needs at least that many classes, found {}",
                config.batch_pairs,
                self.classes.len()
            )));
        }
        self.opt.lr = config.lr.clone();
        self.opt.momentum = config.momentum;
        self.opt.weight_decay = config.weight_decay;
        self.config = config;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.classes.len().div_ceil(self.config.batch_pairs) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// The class indices for one step: a seeded partial shuffle, so the
    /// draw depends only on (seed, step).
    fn batch_classes(&self, step: u64) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, ROLE_BATCH, step]));
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        for i in 0..self.config.batch_pairs {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(self.config.batch_pairs);
        order
    }

    fn pick_pair(&self, step: u64, slot: usize, class: usize) -> Result<(Sample, Sample)> {
        let entry = &self.classes[class];
        let mut rng = sample_rng(self.config.seed, step, slot as u64);
        let d = &entry.drone[rng.gen_range(0..entry.drone.len())];
        let s = &entry.satellite[rng.gen_range(0..entry.satellite.len())];
        let d = Sample::from_pixels(d.as_ref().clone(), entry.id, View::Drone)?;
        let s = Sample::from_pixels(s.as_ref().clone(), entry.id, View::Satellite)?;
        let d = augment(&d, &self.config.augment, &mut rng)?;
        let s = augment(&s, &self.config.augment, &mut rng)?;
        Ok((d, s))
    }

    /// One optimization step: sample a class-balanced pair batch, build
    /// the joint objective over both views, backpropagate, refresh the
    /// running statistics, and apply the SGD update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let picked = self.batch_classes(step);
        let b = picked.len();
        let mut images: Vec<FeatureField<f32>> = Vec::with_capacity(2 * b);
        let mut sats: Vec<FeatureField<f32>> = Vec::with_capacity(b);
        let mut labels: Vec<usize> = Vec::with_capacity(2 * b);
        for (slot, &class) in picked.iter().enumerate() {
            let (d, s) = self.pick_pair(step, slot, class)?;
            images.push(d.image);
            sats.push(s.image);
            labels.push(class);
        }
        images.extend(sats);
        labels.extend_from_within(..);

        let mut g: Graph<f32> = Graph::new();
        let bound = self.model.bind(&mut g)?;
        let out = self.model.forward(&mut g, &bound, &images)?;
        let d = self.model.config.descriptor_dim();
        let take = |g: &mut Graph<f32>, lo: usize| {
            let index: Vec<usize> = (lo * d..(lo + b) * d).collect();
            g.gather(out.descriptors, Arc::new(index), vec![b, d])
        };
        let u = take(&mut g, 0)?;
        let v = take(&mut g, b)?;
        let (loss_var, loss) = total_loss(&mut g, u, v, out.logits, &labels, self.config.temperature)?;
        g.backward(loss_var)?;

        let mut grads = BTreeMap::new();
        for (name, &var) in &bound.vars {
            let grad = g
                .grad_tensor(var)
                .ok_or_else(|| Error::Eval(format!("no gradient reached {}", name)))?;
            grads.insert(name.clone(), grad);
        }
        self.model.update_stats(&g, &out.node_features)?;
        sgd_step(&mut self.model.params, &grads, &mut self.opt)?;
        self.step += 1;
        Ok(StepRecord { step, loss })
    }

    /// Run until `total_steps`, reporting each step to the callback.
    pub fn run<F: FnMut(&StepRecord) -> Result<()>>(
        &mut self,
        total_steps: u64,
        mut on_step: F,
    ) -> Result<()> {
        while self.step < total_steps {
            let record = self.train_step()?;
            on_step(&record)?;
        }
        Ok(())
    }
}

// ── checkpoint container ─────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"EGSC";
const CKPT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "opt.velocity.";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config: ModelConfig,
    train: TrainConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

/// A deserialized checkpoint: everything needed to resume training or
/// run inference.
pub struct Checkpoint {
    pub step: u64,
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub buffers: BTreeMap<String, Tensor<f32>>,
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn into_trainer(self, manifest: &DatasetManifest) -> Result<Trainer> {
        let model = EgsModel::from_parts(self.config, self.params, self.buffers)?;
        let mut trainer = Trainer::new(model, self.train, manifest)?;
        trainer.opt.velocity = self.velocity;
        trainer.step = self.step;
        Ok(trainer)
    }

    pub fn into_model(self) -> Result<EgsModel<f32>> {
        EgsModel::from_parts(self.config, self.params, self.buffers)
    }
}

/// Serialize model parameters, running statistics, and optimizer
/// buffers. Layout: magic, u32 version, u64 metadata length, JSON
/// metadata mapping tensor names to dtype/shape/offset, then raw f32
/// little-endian payloads in offset order. Atomic via temp file.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    save_checkpoint_parts(
        path,
        trainer.step,
        &trainer.model.config,
        &trainer.config,
        &trainer.model.params,
        &trainer.model.buffers,
        &trainer.opt.velocity,
    )
}

pub fn save_checkpoint_parts(
    path: &Path,
    step: u64,
    config: &ModelConfig,
    train: &TrainConfig,
    params: &BTreeMap<String, Tensor<f32>>,
    buffers: &BTreeMap<String, Tensor<f32>>,
    velocity: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut named: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    for (k, v) in params {
        named.insert(k.clone(), v);
    }
    for (k, v) in buffers {
        named.insert(k.clone(), v);
    }
    for (k, v) in velocity {
        named.insert(format!("{}{}", VELOCITY_PREFIX, k), v);
    }

    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += (t.values().len() * 4) as u64;
    }
    let meta = CheckpointMeta {
        step,
        config: config.clone(),
        train: train.clone(),
        tensors,
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("metadata: {}", e)))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let w = tmp.as_file_mut();
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        for t in named.values() {
            let mut buf = Vec::with_capacity(t.values().len() * 4);
            for &x in t.values() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 4 + 4 + 8];
    f.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated checkpoint header", path.display())))?;
    if &head[0..4] != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let meta_len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    if meta_len > (1 << 30) {
        return Err(Error::Format(format!(
            "{}: implausible metadata length {}",
            path.display(),
            meta_len
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("{}: metadata: {}", path.display(), e)))?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for (name, entry) in &meta.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "{}: tensor {} has unsupported dtype {}",
                path.display(),
                name,
                entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "{}: tensor {} extends past the payload",
                path.display(),
                name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let off = start + i * 4;
            values.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        let t = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| Error::Format(format!("{}: tensor {}: {}", path.display(), name, e)))?;
        if let Some(stripped) = name.strip_prefix(VELOCITY_PREFIX) {
            velocity.insert(stripped.to_string(), t);
        } else if name.starts_with("norm.") {
            buffers.insert(name.clone(), t);
        } else {
            params.insert(name.clone(), t);
        }
    }
    Ok(Checkpoint {
        step: meta.step,
        config: meta.config,
        train: meta.train,
        params,
        buffers,
        velocity,
    })
}
