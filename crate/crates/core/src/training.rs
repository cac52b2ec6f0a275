//! Teacher–student self-distillation of the prototype bank and projection
//! head over the union of several datasets.
//!
//! Each image yields two global and `V` local views. The student sees every
//! view, the momentum teacher only the globals; the loss is the mean
//! cross-entropy `H(P_t(x), P_s(x'))` over all teacher/student view pairs
//! with `x != x'`. The student assigns softly with Gumbel noise for the first
//! `soft_epochs` epochs and switches to straight-through hard assignment
//! afterwards.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::prototype_diversity;
use crate::augment::{multi_crop, AugmentConfig, MultiCropBatch};
use crate::backbone::BackboneHandle;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{parse_range, parse_value, KeyValueConfig};
use crate::data::{check_unique_ids, DatasetDescriptor, ImageSource};
use crate::error::{Error, Result};
use crate::image_ops::{stack_images, ImageTensor};
use crate::model::{init_params, model_forward, HeadConfig, HeadInput, ModelSpec, BACKBONE_PREFIX, BANK};
use crate::params::Params;
use crate::protosim::{gumbel_tensor, softmax_last_dim, AssignMode, PrototypeBank};

/// Floor applied to student probabilities inside `H` so the log stays finite.
pub const LOG_FLOOR: f64 = 1e-8;
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub soft_epochs: usize,
    pub num_prototypes: usize,
    pub local_crops: usize,
    pub teacher_momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub head_output_dim: usize,
    pub head_input: HeadInput,
    /// Teacher switches to hard assignment together with the student.
    pub teacher_hard: bool,
    /// Gumbel noise on the teacher's assignment.
    pub teacher_noise: bool,
    /// Optimize the backbone jointly (teacher then tracks it by EMA too).
    pub train_backbone: bool,
    pub backbone: String,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 5e-5,
            epochs: 20,
            soft_epochs: 15,
            num_prototypes: 8192,
            local_crops: 8,
            teacher_momentum: 0.996,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            head_hidden_dim: 512,
            head_bottleneck_dim: 128,
            head_output_dim: 256,
            head_input: HeadInput::ClassPlusMeanPatch,
            teacher_hard: false,
            teacher_noise: true,
            train_backbone: false,
            backbone: "toy-vit-s8-d64,seed=0".to_string(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.soft_epochs > self.epochs {
            return bad(format!(
                "soft_epochs ({}) exceeds epochs ({})",
                self.soft_epochs, self.epochs
            ));
        }
        if self.num_prototypes < 2 {
            return bad("need at least 2 prototypes".into());
        }
        if !(self.teacher_momentum > 0.0 && self.teacher_momentum < 1.0) {
            return bad(format!(
                "teacher momentum must lie in (0, 1), got {}",
                self.teacher_momentum
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.teacher_temp <= 0.0 || self.student_temp <= 0.0 {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("center momentum must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            hidden_dim: self.head_hidden_dim,
            bottleneck_dim: self.head_bottleneck_dim,
            output_dim: self.head_output_dim,
        }
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "soft_epochs" => self.soft_epochs = parse_value(key, value)?,
            "num_prototypes" | "k" | "K" => self.num_prototypes = parse_value(key, value)?,
            "local_crops" => self.local_crops = parse_value(key, value)?,
            "teacher_momentum" => self.teacher_momentum = parse_value(key, value)?,
            "teacher_temp" => self.teacher_temp = parse_value(key, value)?,
            "student_temp" => self.student_temp = parse_value(key, value)?,
            "center_momentum" => self.center_momentum = parse_value(key, value)?,
            "head_hidden_dim" => self.head_hidden_dim = parse_value(key, value)?,
            "head_bottleneck_dim" => self.head_bottleneck_dim = parse_value(key, value)?,
            "head_output_dim" => self.head_output_dim = parse_value(key, value)?,
            "head_input" => self.head_input = value.parse()?,
            "teacher_hard" => self.teacher_hard = parse_value(key, value)?,
            "teacher_noise" => self.teacher_noise = parse_value(key, value)?,
            "train_backbone" => self.train_backbone = parse_value(key, value)?,
            "backbone" => self.backbone = value.to_string(),
            "seed" => self.seed = parse_value(key, value)?,
            "global_scale" => a.global_scale = parse_range(key, value)?,
            "local_scale" => a.local_scale = parse_range(key, value)?,
            "flip_prob" => a.flip_prob = parse_value(key, value)?,
            "jitter_prob" => a.jitter_prob = parse_value(key, value)?,
            "brightness" => a.brightness = parse_value(key, value)?,
            "contrast" => a.contrast = parse_value(key, value)?,
            "saturation" => a.saturation = parse_value(key, value)?,
            "blur_sigma" => a.blur_sigma = parse_range(key, value)?,
            "solarize_prob" => a.solarize_prob = parse_value(key, value)?,
            "min_image_side" => a.min_image_side = parse_value(key, value)?,
            "blur_prob" => {
                let v: Vec<f64> = value
                    .split(':')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(Error::InvalidArgument(
                        "blur_prob expects global1:global2:local".into(),
                    ));
                }
                a.blur_prob = (v[0], v[1], v[2]);
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown training config key `{key}`"
                )))
            }
        }
        Ok(())
    }
}

/// Student assignment mode for an epoch.
pub fn schedule_mode(epoch: usize, config: &TrainConfig) -> Result<AssignMode> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            config.epochs
        )));
    }
    Ok(if epoch < config.soft_epochs {
        AssignMode::Soft
    } else {
        AssignMode::Hard
    })
}

pub struct StudentState {
    /// Every parameter the forward pass reads; trainable ones are `Var`s.
    pub params: Params,
    pub trainable: Vec<(String, Var)>,
}

pub struct TeacherState {
    pub params: Params,
    /// `1×O` running mean of teacher head outputs.
    pub center: Tensor,
}

impl StudentState {
    pub fn bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::new(self.params.get(BANK)?.detach())
    }
}

/// Splits a fresh parameter set into a student (trainable entries wrapped in
/// vars) and a teacher initialized as an exact copy.
pub fn init_states(
    params: Params,
    train_backbone: bool,
    output_dim: usize,
) -> Result<(StudentState, TeacherState)> {
    let is_trainable = |name: &str| train_backbone || !name.starts_with(BACKBONE_PREFIX);
    let mut frozen = Params::new();
    let mut trainable = Params::new();
    for (k, v) in params {
        if is_trainable(&k) {
            trainable.insert(k, v);
        } else {
            frozen.insert(k, v);
        }
    }
    let teacher_own = trainable.detached_copy()?;
    let (view, vars) = trainable.into_vars()?;
    let mut student_params = frozen.clone();
    for (k, v) in view.iter() {
        student_params.insert(k.clone(), v.clone());
    }
    let mut teacher_params = frozen;
    for (k, v) in teacher_own.iter() {
        teacher_params.insert(k.clone(), v.clone());
    }
    Ok((
        StudentState {
            params: student_params,
            trainable: vars,
        },
        TeacherState {
            params: teacher_params,
            center: Tensor::zeros((1, output_dim), DType::F32, &Device::Cpu)?,
        },
    ))
}

/// Student output distribution per view: `softmax(head / student_temp)`.
pub fn student_distribution(
    student: &StudentState,
    spec: &ModelSpec,
    crops: &Tensor,
    mode: AssignMode,
    student_temp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, ..) = crops.dims4()?;
    let noise = gumbel_tensor(
        &[b, spec.patch.num_tokens(), spec.num_prototypes],
        DType::F32,
        rng,
    )?;
    let out = model_forward(&student.params, spec, crops, mode, Some(&noise), true)?;
    softmax_last_dim(&(out.head / student_temp)?)
}

/// Centered, sharpened teacher distribution:
/// `softmax((head - center) / teacher_temp)`.
pub fn teacher_probabilities(head: &Tensor, center: &Tensor, teacher_temp: f64) -> Result<Tensor> {
    softmax_last_dim(&(head.broadcast_sub(center)? / teacher_temp)?)
}

/// Teacher head outputs (no gradient) and its distribution for global views.
pub fn teacher_distribution(
    teacher: &TeacherState,
    spec: &ModelSpec,
    global_crops: &Tensor,
    mode: AssignMode,
    teacher_temp: f64,
    noise: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let out = model_forward(&teacher.params, spec, global_crops, mode, noise, true)?;
    let head = out.head.detach();
    let probs = teacher_probabilities(&head, &teacher.center, teacher_temp)?;
    Ok((head, probs))
}

/// `center ← m·center + (1−m)·mean(head)`.
pub fn update_center(center: &Tensor, head: &Tensor, momentum: f64) -> Result<Tensor> {
    let batch_mean = head.detach().mean_keepdim(0)?;
    Ok(((center * momentum)? + (batch_mean * (1.0 - momentum))?)?)
}

/// `H(a, b) = −Σ a log max(b, floor)`, averaged over the batch.
pub fn cross_entropy(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    let log_s = student.clamp(LOG_FLOOR, f64::INFINITY)?.log()?;
    Ok((teacher * log_s)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// View pairs `(teacher view, student view)` with distinct indices. Views
/// are numbered globals first, so teacher view `i` is student view `i`.
pub fn loss_pairs(num_teacher: usize, num_student: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..num_teacher {
        for j in 0..num_student {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean cross-entropy over all valid teacher/student view pairs.
pub fn dino_loss(teacher_probs: &[Tensor], student_probs: &[Tensor]) -> Result<Tensor> {
    let pairs = loss_pairs(teacher_probs.len(), student_probs.len());
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no valid view pairs for {} teacher and {} student views",
            teacher_probs.len(),
            student_probs.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for &(i, j) in &pairs {
        let h = cross_entropy(&teacher_probs[i], &student_probs[j])?;
        total = Some(match total {
            Some(t) => (t + h)?,
            None => h,
        });
    }
    Ok((total.expect("non-empty pairs") / pairs.len() as f64)?)
}

/// `θ_t ← λθ_t + (1−λ)θ_s` for every trainable parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &StudentState, momentum: f64) -> Result<()> {
    for (name, var) in &student.trainable {
        let t = teacher.params.get(name)?;
        let s = var.as_tensor();
        if t.dims() != s.dims() {
            return Err(Error::mismatch(
                "ema_update",
                format!("teacher {name} {:?}", t.dims()),
                format!("student {:?}", s.dims()),
            ));
        }
        // Blend in f64 and round once, so small student contributions are
        // not lost to f32 rounding of the two products.
        let dtype = t.dtype();
        let blended = ((t.to_dtype(DType::F64)? * momentum)?
            + (s.detach().to_dtype(DType::F64)? * (1.0 - momentum))?)?;
        let updated = blended.to_dtype(dtype)?;
        teacher.params.insert(name.clone(), updated);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub avg_cosine_sim: f64,
    pub mode: AssignMode,
}

#[derive(Debug)]
pub struct StepReport {
    pub loss: f64,
    /// Teacher parameters that received a gradient (must be zero).
    pub teacher_grads: usize,
    /// Student vars that received a gradient.
    pub student_grads: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub student: StudentState,
    pub teacher: TeacherState,
    pub backbone_descriptor: String,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, backbone: &BackboneHandle) -> Result<Self> {
        config.validate()?;
        let head = config.head_config();
        let spec = ModelSpec {
            patch: backbone.config.clone(),
            normalization: backbone.normalization.clone(),
            num_prototypes: config.num_prototypes,
            head: head.clone(),
            head_input: config.head_input,
        };
        let params = init_params(backbone, config.num_prototypes, &head, config.seed)?;
        let (student, teacher) = init_states(params, config.train_backbone, head.output_dim)?;
        let optimizer = AdamW::new(
            student.trainable.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        Ok(Self {
            config,
            spec,
            student,
            teacher,
            backbone_descriptor: backbone.descriptor.clone(),
            optimizer,
            rng,
            epochs_done: 0,
        })
    }

    fn normalized(&self, img: &ImageTensor) -> ImageTensor {
        let n = &self.spec.normalization;
        img.normalized(&n.mean, &n.std)
    }

    fn views(&mut self, images: &[(String, ImageTensor)]) -> Result<Vec<MultiCropBatch>> {
        let out = (self.spec.patch.image_height, self.spec.patch.image_width);
        images
            .iter()
            .map(|(id, img)| {
                multi_crop(id, img, &self.config.augment, self.config.local_crops, out, &mut self.rng)
            })
            .collect()
    }

    /// One optimization step on a batch of source images.
    pub fn step(&mut self, images: &[(String, ImageTensor)], mode: AssignMode) -> Result<StepReport> {
        let n = images.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let batches = self.views(images)?;
        let v = self.config.local_crops;
        let mut globals = Vec::with_capacity(2 * n);
        for g in 0..2 {
            for b in &batches {
                globals.push(self.normalized(&b.global_crops[g]));
            }
        }
        let mut all = globals.clone();
        for l in 0..v {
            for b in &batches {
                all.push(self.normalized(&b.local_crops[l]));
            }
        }
        let global_t = stack_images(&globals)?;
        let all_t = stack_images(&all)?;

        let s_probs = student_distribution(
            &self.student,
            &self.spec,
            &all_t,
            mode,
            self.config.student_temp,
            &mut self.rng,
        )?;
        let teacher_mode = if self.config.teacher_hard {
            mode
        } else {
            AssignMode::Soft
        };
        let t_noise = if self.config.teacher_noise {
            Some(gumbel_tensor(
                &[2 * n, self.spec.patch.num_tokens(), self.spec.num_prototypes],
                DType::F32,
                &mut self.rng,
            )?)
        } else {
            None
        };
        let (t_head, t_probs) = teacher_distribution(
            &self.teacher,
            &self.spec,
            &global_t,
            teacher_mode,
            self.config.teacher_temp,
            t_noise.as_ref(),
        )?;
        let s_views: Vec<Tensor> = (0..2 + v)
            .map(|i| s_probs.narrow(0, i * n, n))
            .collect::<candle_core::Result<_>>()?;
        let t_views: Vec<Tensor> = (0..2)
            .map(|i| t_probs.narrow(0, i * n, n))
            .collect::<candle_core::Result<_>>()?;
        let loss = dino_loss(&t_views, &s_views)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                stage: "loss".into(),
            });
        }
        let grads = loss.backward()?;
        let report = self.grad_report(&grads, loss_value);
        self.optimizer.step(&grads)?;
        ema_update(&mut self.teacher, &self.student, self.config.teacher_momentum)?;
        self.teacher.center =
            update_center(&self.teacher.center, &t_head, self.config.center_momentum)?;
        Ok(report)
    }

    fn grad_report(&self, grads: &GradStore, loss: f64) -> StepReport {
        let teacher_grads = self
            .teacher
            .params
            .iter()
            .filter(|(_, t)| grads.get(t).is_some())
            .count();
        let student_grads = self
            .student
            .trainable
            .iter()
            .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
            .count();
        StepReport {
            loss,
            teacher_grads,
            student_grads,
        }
    }

    /// One pass over `source` in a seeded random order.
    pub fn run_epoch(&mut self, source: &ImageSource) -> Result<EpochLog> {
        let epoch = self.epochs_done;
        let mode = schedule_mode(epoch, &self.config)?;
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let images = chunk
                .iter()
                .map(|&i| Ok((source.entry(i).image_id.clone(), source.get(i)?)))
                .collect::<Result<Vec<_>>>()?;
            let report = self.step(&images, mode)?;
            total += report.loss;
            steps += 1;
        }
        self.epochs_done += 1;
        let (avg_cosine_sim, _) = prototype_diversity(&self.student.bank()?)?;
        Ok(EpochLog {
            epoch,
            loss: total / steps.max(1) as f64,
            avg_cosine_sim,
            mode,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut student = Params::new();
        for (k, v) in self.student.params.iter() {
            student.insert(k.clone(), v.detach());
        }
        let teacher: Params = self
            .student
            .trainable
            .iter()
            .map(|(k, _)| Ok((k.clone(), self.teacher.params.get(k)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            config: self.config.clone(),
            spec: self.spec.clone(),
            backbone_descriptor: self.backbone_descriptor.clone(),
            student,
            teacher,
            center: self.teacher.center.clone(),
            epoch: self.epochs_done,
            rng: self.rng_state(),
        })
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Trains on the union of `datasets`. With `out_dir`, a checkpoint and a
/// JSON-lines log entry are written atomically after every epoch; a failing
/// epoch leaves the previous checkpoint in place.
pub fn train(
    datasets: &[DatasetDescriptor],
    config: TrainConfig,
    backbone: &BackboneHandle,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("no datasets given".into()));
    }
    check_unique_ids(datasets)?;
    let mut entries = Vec::new();
    for d in datasets {
        let imgs = d.list_images()?;
        if imgs.is_empty() {
            return Err(Error::Data(format!("dataset `{}` has no images", d.dataset_id)));
        }
        entries.extend(imgs);
    }
    let source = ImageSource::new(entries)?;
    let mut trainer = Trainer::new(config, backbone)?;
    let ckpt_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log_path = dir.join(TRAIN_LOG_FILE);
            std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
            Some(dir.join(CHECKPOINT_FILE))
        }
        None => None,
    };
    let mut log = Vec::new();
    for _ in 0..trainer.config.epochs {
        let entry = trainer.run_epoch(&source)?;
        if let (Some(dir), Some(path)) = (out_dir, &ckpt_path) {
            trainer.to_checkpoint()?.save(path)?;
            let log_path = dir.join(TRAIN_LOG_FILE);
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoint_path: ckpt_path,
    })
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
