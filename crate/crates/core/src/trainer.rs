//! Pretraining, alternating adversarial updates, evaluation and run I/O.
//!
//! One adversarial step is three calls: [`Trainer::generator_forward`]
//! records both generator passes on a tape, [`Trainer::discriminator_update`]
//! scores detached copies and moves the discriminator, and
//! [`Trainer::generator_update`] re-runs the moved discriminator on the
//! recorded tape and moves the generator.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{write_atomic, Checkpoint, CheckpointError, RngState};
use crate::config::Config;
use crate::corpus::{batch_iter, Batch, CorpusError, Dataset, Split};
use crate::discriminator::{self, Discriminator};
use crate::generator::{GenBatch, GenOutput, Generator};
use crate::losses::{self, Constituents, Fs2Target, Fs2Terms, LossError, LossReport};
use crate::speaker::{self, SpeakerEncoder};
use crate::tensor::{Optimizer, Result as TResult, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: u64, term: String },
    #[error("invalid run setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loss terms available to a discriminator objective.
#[derive(Clone, Copy, Debug)]
pub struct DTerms {
    pub gan_d: Var,
    pub acai_c: Option<Var>,
}

/// Loss terms available to a generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GTerms {
    pub fs2: Var,
    pub gan_g: Option<Var>,
    pub fm: Option<Var>,
    pub lambda_fm: f64,
    pub acai_g: Option<Var>,
}

/// Training objective selected by `train.mode`.
pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether steps after pretraining update a discriminator.
    fn adversarial(&self) -> bool;
    /// Whether interpolated speakers are generated and scored.
    fn interpolates(&self) -> bool;
    fn discriminator_loss(&self, tape: &mut Tape, t: &DTerms) -> TResult<Var>;
    fn generator_loss(&self, tape: &mut Tape, t: &GTerms) -> TResult<Var>;
}

fn adversarial_g(tape: &mut Tape, t: &GTerms) -> TResult<Var> {
    let (Some(gan_g), Some(fm)) = (t.gan_g, t.fm) else {
        return Err(TensorError::InvalidShape {
            op: "generator objective",
            detail: "adversarial terms missing".into(),
        });
    };
    let l = tape.add(t.fs2, gan_g)?;
    let fm = tape.scale(fm, t.lambda_fm);
    tape.add(l, fm)
}

/// Reconstruction only, for the whole run.
pub struct Fs2Only;

impl Objective for Fs2Only {
    fn name(&self) -> &'static str {
        "fs2"
    }
    fn adversarial(&self) -> bool {
        false
    }
    fn interpolates(&self) -> bool {
        false
    }
    fn discriminator_loss(&self, _: &mut Tape, t: &DTerms) -> TResult<Var> {
        Ok(t.gan_d)
    }
    fn generator_loss(&self, _: &mut Tape, t: &GTerms) -> TResult<Var> {
        Ok(t.fs2)
    }
}

/// Joint conditional/unconditional LSGAN plus feature matching.
pub struct GanSpeech;

impl Objective for GanSpeech {
    fn name(&self) -> &'static str {
        "gan"
    }
    fn adversarial(&self) -> bool {
        true
    }
    fn interpolates(&self) -> bool {
        false
    }
    fn discriminator_loss(&self, _: &mut Tape, t: &DTerms) -> TResult<Var> {
        Ok(t.gan_d)
    }
    fn generator_loss(&self, tape: &mut Tape, t: &GTerms) -> TResult<Var> {
        adversarial_g(tape, t)
    }
}

/// GAN objective plus the interpolation critic and its generator penalty.
pub struct MultiTask {
    pub lambda_acai: f64,
    pub critic_in_discriminator: bool,
}

impl Objective for MultiTask {
    fn name(&self) -> &'static str {
        "mt"
    }
    fn adversarial(&self) -> bool {
        true
    }
    fn interpolates(&self) -> bool {
        true
    }
    fn discriminator_loss(&self, tape: &mut Tape, t: &DTerms) -> TResult<Var> {
        match (self.critic_in_discriminator, t.acai_c) {
            (true, Some(c)) => tape.add(t.gan_d, c),
            _ => Ok(t.gan_d),
        }
    }
    fn generator_loss(&self, tape: &mut Tape, t: &GTerms) -> TResult<Var> {
        let l = adversarial_g(tape, t)?;
        match t.acai_g {
            Some(a) if self.lambda_acai != 0.0 => {
                let a = tape.scale(a, self.lambda_acai);
                tape.add(l, a)
            }
            _ => Ok(l),
        }
    }
}

type ObjectiveFactory = fn(&crate::config::TrainConfig) -> Box<dyn Objective>;

const OBJECTIVES: &[(&str, ObjectiveFactory)] = &[
    ("fs2", |_| Box::new(Fs2Only)),
    ("gan", |_| Box::new(GanSpeech)),
    ("mt", |t| {
        Box::new(MultiTask {
            lambda_acai: t.lambda_acai,
            critic_in_discriminator: t.critic_in_discriminator,
        })
    }),
];

pub fn objective_names() -> Vec<&'static str> {
    OBJECTIVES.iter().map(|(n, _)| *n).collect()
}

pub fn build_objective(cfg: &crate::config::TrainConfig) -> Option<Box<dyn Objective>> {
    OBJECTIVES.iter().find(|(n, _)| *n == cfg.mode).map(|(_, f)| f(cfg))
}

/// Independent sub-seeds of the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

const TAG_GEN: u64 = 1;
const TAG_DISC: u64 = 2;
const TAG_ENCODER: u64 = 3;
const TAG_ALPHA: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_EPOCH: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adversarial,
    /// Post-pretraining steps of the reconstruction-only objective.
    Fs2,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
            Phase::Fs2 => "fs2",
        }
    }
}

/// Generator passes of one adversarial step, still on their tape.
pub struct GenPass {
    pub tape: Tape,
    pub y_hat: GenOutput,
    pub y_tilde: Option<GenOutput>,
    /// `[d_z, M]`
    pub z: Tensor,
    pub alpha: Option<Vec<f64>>,
    pub fs2: Fs2Terms,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DStats {
    pub l_gan_d: f64,
    pub l_acai_c: f64,
}

pub struct Trainer {
    pub config: Config,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: SpeakerEncoder,
    objective: Box<dyn Objective>,
    g_opt: Box<dyn Optimizer>,
    d_opt: Box<dyn Optimizer>,
    alpha_seed: u64,
    alpha_rng: ChaCha8Rng,
    step: u64,
    epoch: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
        let seed = config.train.seed;
        let generator = Generator::new(config.generator.clone(), derive_seed(seed, TAG_GEN));
        let discriminator = Discriminator::new(
            config.discriminator.clone(),
            config.generator.d_z,
            derive_seed(seed, TAG_DISC),
        );
        let encoder = SpeakerEncoder::new(config.generator.d_z, derive_seed(seed, TAG_ENCODER));
        let objective = build_objective(&config.train)
            .ok_or_else(|| TrainError::Setup(format!("unknown mode {}", config.train.mode)))?;
        let g_opt = config.train.optimizer.build(&generator.params)?;
        let d_opt = config.train.optimizer.build(&discriminator.params)?;
        let alpha_seed = derive_seed(seed, TAG_ALPHA);
        Ok(Self {
            config,
            generator,
            discriminator,
            encoder,
            objective,
            g_opt,
            d_opt,
            alpha_seed,
            alpha_rng: ChaCha8Rng::seed_from_u64(alpha_seed),
            step: 0,
            epoch: None,
        })
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.pretrain_steps + self.config.train.adversarial_steps
    }

    pub fn phase_of(&self, step: u64) -> Phase {
        if step < self.config.train.pretrain_steps {
            Phase::Pretrain
        } else if self.objective.adversarial() {
            Phase::Adversarial
        } else {
            Phase::Fs2
        }
    }

    /// Batch for the next step; epochs reshuffle with a seed derived from
    /// the run seed and the epoch index. Every epoch has the same number of
    /// batches because pairing depends only on per-speaker counts.
    pub fn next_batch(&mut self, ds: &Dataset) -> Result<Batch> {
        let per_epoch = self.epoch_batches(ds, 0)?.len() as u64;
        if per_epoch == 0 {
            return Err(TrainError::Setup(format!(
                "training split yields no batch of {}",
                self.config.train.batch_size
            )));
        }
        let batches = self.epoch_batches(ds, self.step / per_epoch)?;
        Ok(Batch::new(ds, &batches[(self.step % per_epoch) as usize]))
    }

    fn epoch_batches(&mut self, ds: &Dataset, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if let Some((e, b)) = &self.epoch {
            if *e == epoch {
                return Ok(b.clone());
            }
        }
        let seed = derive_seed(self.config.train.seed, TAG_EPOCH + epoch);
        let b = batch_iter(ds, Split::Train, self.config.train.batch_size, seed)?;
        self.epoch = Some((epoch, b.clone()));
        Ok(b)
    }

    pub fn embed_batch(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        batch
            .mels
            .iter()
            .map(|m| Ok(self.encoder.embed(m)?.0))
            .collect()
    }

    fn non_finite(&self, term: &str) -> TrainError {
        TrainError::NonFinite {
            step: self.step + 1,
            term: term.to_string(),
        }
    }

    fn check(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.non_finite(name))
        }
    }

    fn optimizer_step(&mut self, which: &str) -> Result<()> {
        let r = if which == "gen" {
            self.g_opt.step(&mut self.generator.params)
        } else {
            self.d_opt.step(&mut self.discriminator.params)
        };
        r.map_err(|e| match e {
            TensorError::NonFiniteGradient(p) => self.non_finite(&format!("gradient of {which}/{p}")),
            other => other.into(),
        })
    }

    fn compose(&self, c: Constituents) -> Result<LossReport> {
        losses::compose(c, self.config.train.lambda_acai).map_err(|e| match e {
            LossError::NonFinite(t) => self.non_finite(t),
            other => TrainError::Setup(other.to_string()),
        })
    }

    fn teacher_forward(&self, tape: &mut Tape, batch: &Batch, z: Tensor) -> Result<GenOutput> {
        let phonemes = batch.phoneme_refs();
        let durations = batch.duration_refs();
        let gb = GenBatch {
            phonemes: &phonemes,
            z,
            durations: Some(&durations),
            teacher_feat: Some(&batch.feat),
        };
        Ok(self.generator.forward(tape, &gb)?)
    }

    fn fs2_terms(tape: &mut Tape, batch: &Batch, y: &GenOutput) -> Result<Fs2Terms> {
        let target = Fs2Target {
            log_dur: tape.constant(batch.log_dur.clone()),
            feat: tape.constant(batch.feat.clone()),
            mel: tape.constant(batch.mel.clone()),
        };
        Ok(losses::fs2_loss(
            tape,
            y.log_dur,
            y.feat,
            y.mel,
            &target,
            &y.phoneme_segments,
            &y.frame_segments,
        )?)
    }

    fn fs2_constituents(&self, tape: &Tape, t: &Fs2Terms) -> Result<Constituents> {
        Ok(Constituents {
            l_fs2: self.check("l_fs2", tape.value(t.total).item())?,
            l_dur: tape.value(t.dur).item(),
            l_feat: tape.value(t.feat).item(),
            l_mel: tape.value(t.mel).item(),
            ..Constituents::default()
        })
    }

    /// Generator-only update on the reconstruction loss.
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let z = speaker::stack_columns(&self.embed_batch(batch)?);
        let mut tape = Tape::new();
        let y = self.teacher_forward(&mut tape, batch, z)?;
        let t = Self::fs2_terms(&mut tape, batch, &y)?;
        let c = self.fs2_constituents(&tape, &t)?;
        tape.backward(t.total, &mut [&mut self.generator.params])?;
        self.optimizer_step("gen")?;
        self.step += 1;
        self.compose(c)
    }

    /// Embeds, interpolates and runs both teacher-forced generator passes.
    pub fn generator_forward(&mut self, batch: &Batch) -> Result<GenPass> {
        let z_list = self.embed_batch(batch)?;
        let z = speaker::stack_columns(&z_list);
        let mut tape = Tape::new();
        tape.freeze(discriminator::NAMESPACE);
        let y_hat = self.teacher_forward(&mut tape, batch, z.clone())?;
        let fs2 = Self::fs2_terms(&mut tape, batch, &y_hat)?;
        let (y_tilde, alpha) = if self.objective.interpolates() {
            let alpha = speaker::sample_alpha(batch.len(), &mut self.alpha_rng);
            let interp = speaker::interpolate(&z_list, &alpha)?;
            let z_t = speaker::stack_columns(&interp.tilde_z);
            (Some(self.teacher_forward(&mut tape, batch, z_t)?), Some(alpha))
        } else {
            (None, None)
        };
        Ok(GenPass {
            tape,
            y_hat,
            y_tilde,
            z,
            alpha,
            fs2,
        })
    }

    fn alpha_row(tape: &mut Tape, alpha: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![1, alpha.len()], alpha.to_vec()).expect("nonempty batch"))
    }

    /// Discriminator update on detached generator outputs.
    pub fn discriminator_update(&mut self, batch: &Batch, pass: &GenPass) -> Result<DStats> {
        let d = &self.discriminator;
        let segs = &batch.frame_segments;
        let mut tape = Tape::new();
        let y = tape.constant(batch.mel.clone());
        let y_hat = tape.constant(pass.tape.value(pass.y_hat.mel).clone());
        let z = tape.constant(pass.z.clone());
        let nat = d.shared_forward(&mut tape, y, segs)?;
        let t_c = d.conditional_head(&mut tape, &nat, z)?;
        let t_u = d.unconditional_head(&mut tape, &nat)?;
        let fake = d.shared_forward(&mut tape, y_hat, segs)?;
        let f_c = d.conditional_head(&mut tape, &fake, z)?;
        let f_u = d.unconditional_head(&mut tape, &fake)?;
        let gan_d = losses::gan_d(&mut tape, t_c, t_u, f_c, f_u)?;
        let acai_c = match (&pass.y_tilde, &pass.alpha) {
            (Some(yt), Some(alpha)) => {
                let y_t = tape.constant(pass.tape.value(yt.mel).clone());
                let pure = d.critic_head(&mut tape, &nat)?;
                let interp_trunk = d.shared_forward(&mut tape, y_t, segs)?;
                let interp = d.critic_head(&mut tape, &interp_trunk)?;
                let a = Self::alpha_row(&mut tape, alpha);
                Some(losses::acai_critic(&mut tape, pure, interp, a)?)
            }
            _ => None,
        };
        let terms = DTerms { gan_d, acai_c };
        let loss = self.objective.discriminator_loss(&mut tape, &terms)?;
        let stats = DStats {
            l_gan_d: self.check("l_gan_d", tape.value(gan_d).item())?,
            l_acai_c: match acai_c {
                Some(v) => self.check("l_acai_c", tape.value(v).item())?,
                None => 0.0,
            },
        };
        self.check("l_mt_d", tape.value(loss).item())?;
        tape.backward(loss, &mut [&mut self.discriminator.params])?;
        self.optimizer_step("disc")?;
        Ok(stats)
    }

    /// Generator update against the current discriminator weights.
    pub fn generator_update(&mut self, batch: &Batch, pass: GenPass, d: DStats) -> Result<LossReport> {
        let GenPass {
            mut tape,
            y_hat,
            y_tilde,
            z,
            fs2,
            ..
        } = pass;
        let disc = &self.discriminator;
        let segs = &batch.frame_segments;
        let y = tape.constant(batch.mel.clone());
        let z = tape.constant(z);
        let nat = disc.shared_forward(&mut tape, y, segs)?;
        let fake = disc.shared_forward(&mut tape, y_hat.mel, segs)?;
        let f_c = disc.conditional_head(&mut tape, &fake, z)?;
        let f_u = disc.unconditional_head(&mut tape, &fake)?;
        let gan_g = losses::gan_g(&mut tape, f_c, f_u)?;
        let fm = losses::feature_matching(&mut tape, &nat, &fake)?;
        let acai_g = match &y_tilde {
            Some(yt) => {
                let trunk = disc.shared_forward(&mut tape, yt.mel, segs)?;
                let a = disc.critic_head(&mut tape, &trunk)?;
                Some(losses::acai_generator(&mut tape, a))
            }
            None => None,
        };
        let mut c = self.fs2_constituents(&tape, &fs2)?;
        c.l_gan_d = d.l_gan_d;
        c.l_acai_c = d.l_acai_c;
        c.l_gan_g = self.check("l_gan_g", tape.value(gan_g).item())?;
        c.l_fm = self.check("l_fm", tape.value(fm).item())?;
        c.l_acai_g = match acai_g {
            Some(v) => self.check("l_acai_g", tape.value(v).item())?,
            None => 0.0,
        };
        c.lambda_fm = if self.step == self.config.train.pretrain_steps {
            1.0
        } else {
            losses::lambda_fm(c.l_fs2, c.l_fm).map_err(|e| TrainError::Setup(e.to_string()))?
        };
        let terms = GTerms {
            fs2: fs2.total,
            gan_g: Some(gan_g),
            fm: Some(fm),
            lambda_fm: c.lambda_fm,
            acai_g,
        };
        let loss = self.objective.generator_loss(&mut tape, &terms)?;
        self.check("l_mt_g", tape.value(loss).item())?;
        tape.backward(loss, &mut [&mut self.generator.params])?;
        self.optimizer_step("gen")?;
        self.step += 1;
        self.compose(c)
    }

    pub fn adversarial_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let pass = self.generator_forward(batch)?;
        let d = self.discriminator_update(batch, &pass)?;
        self.generator_update(batch, pass, d)
    }

    /// Runs the next step of the schedule.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<(Phase, LossReport)> {
        let phase = self.phase_of(self.step);
        let batch = self.next_batch(ds)?;
        let report = match phase {
            Phase::Pretrain | Phase::Fs2 => self.pretrain_step(&batch)?,
            Phase::Adversarial => self.adversarial_step(&batch)?,
        };
        Ok((phase, report))
    }

    /// Runs until `until` completed steps (capped at the schedule length),
    /// logging every step and checkpointing per the configured interval, at
    /// the end of pretraining and at the final step.
    pub fn run(&mut self, ds: &Dataset, out: &RunDir, until: Option<u64>) -> Result<Option<PathBuf>> {
        let end = until.unwrap_or(u64::MAX).min(self.total_steps());
        let mut log = MetricsLog::open(&out.metrics(), self.step)?;
        let interval = self.config.train.checkpoint_interval;
        let mut last = None;
        while self.step < end {
            let (phase, report) = self.train_step(ds)?;
            log.append(self.step, phase, &report)?;
            let s = self.step;
            if (interval > 0 && s % interval == 0) || s == self.config.train.pretrain_steps || s == end {
                log.flush()?;
                last = Some(self.checkpoint().save(&out.checkpoint(s))?);
            }
        }
        log.flush()?;
        Ok(last)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            generator: self.generator.params.clone(),
            discriminator: self.discriminator.params.clone(),
            encoder: self.encoder.params.clone(),
            g_opt: self.g_opt.export(),
            d_opt: self.d_opt.export(),
            alpha_rng: RngState {
                seed: self.alpha_seed,
                word_pos: self.alpha_rng.get_word_pos().to_string(),
            },
        }
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let probe = Self::probe_config(path)?;
        let mut t = Self::new(probe)?;
        let ck = Checkpoint::load(
            path,
            [&t.generator.params, &t.discriminator.params, &t.encoder.params],
        )?;
        t.restore(ck, path)?;
        Ok(t)
    }

    fn probe_config(path: &Path) -> Result<Config> {
        #[derive(Deserialize)]
        struct Probe {
            config: Config,
        }
        let text = fs::read(path).map_err(io(path))?;
        let p: Probe = serde_json::from_slice(&text).map_err(|e| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(p.config)
    }

    fn restore(&mut self, ck: Checkpoint, path: &Path) -> Result<()> {
        let corrupt = |detail: String| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        if ck.alpha_rng.seed != self.alpha_seed {
            return Err(corrupt("rng seed does not match the configured seed".into()).into());
        }
        let encoder_changed = ck
            .encoder
            .iter()
            .zip(self.encoder.params.iter())
            .any(|(a, b)| a.value != b.value);
        if encoder_changed {
            return Err(corrupt("frozen encoder weights differ from their seeded values".into()).into());
        }
        let pos: u128 = ck
            .alpha_rng
            .word_pos
            .parse()
            .map_err(|_| corrupt("bad rng word position".into()))?;
        self.generator.params = ck.generator;
        self.discriminator.params = ck.discriminator;
        self.g_opt.import(ck.g_opt).map_err(|e| corrupt(e.to_string()))?;
        self.d_opt.import(ck.d_opt).map_err(|e| corrupt(e.to_string()))?;
        self.alpha_rng.set_word_pos(pos);
        self.step = ck.step;
        self.epoch = None;
        Ok(())
    }

    /// Replaces output-only settings of a resumed run.
    pub fn set_run_settings(&mut self, cfg: &Config) -> Result<()> {
        if !self.config.resume_compatible(cfg) {
            return Err(TrainError::Setup(
                "config differs from the checkpoint's config beyond out_dir and checkpoint_interval".into(),
            ));
        }
        self.config.train.out_dir = cfg.train.out_dir.clone();
        self.config.train.checkpoint_interval = cfg.train.checkpoint_interval;
        Ok(())
    }

    /// Teacher-forced reconstruction metrics and critic accuracy on `split`.
    pub fn evaluate(&self, ds: &Dataset, split: Split) -> Result<EvalMetrics> {
        let idx = ds.split_indices(split);
        if idx.is_empty() {
            return Err(TrainError::Setup(format!("split {} is empty", split.name())));
        }
        let m = self.config.train.batch_size;
        let mut sums = [0.0; 3];
        for chunk in idx.chunks(m) {
            let batch = Batch::new(ds, chunk);
            let z = speaker::stack_columns(&self.embed_batch(&batch)?);
            let mut tape = Tape::new();
            let y = self.teacher_forward(&mut tape, &batch, z)?;
            let t = Self::fs2_terms(&mut tape, &batch, &y)?;
            let w = chunk.len() as f64;
            sums[0] += w * tape.value(t.mel).item();
            sums[1] += w * tape.value(t.dur).item();
            sums[2] += w * tape.value(t.feat).item();
        }
        let n = idx.len() as f64;
        let [mel_mae, dur_mse, feat_mse] = sums.map(|s| s / n);

        let pair_batch = m.min(idx.len() - idx.len() % 2);
        let mut alpha_err = 0.0;
        let mut pairs = 0usize;
        if pair_batch >= 2 {
            let seed = derive_seed(self.config.train.seed, TAG_EVAL);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split as u64);
            for b in batch_iter(ds, split, pair_batch, seed)? {
                let batch = Batch::new(ds, &b);
                let z = self.embed_batch(&batch)?;
                let alpha = speaker::sample_alpha(batch.len(), &mut rng);
                let zt = speaker::interpolate(&z, &alpha)?;
                let mut tape = Tape::new();
                let y = self.teacher_forward(&mut tape, &batch, speaker::stack_columns(&zt.tilde_z))?;
                let trunk = self
                    .discriminator
                    .shared_forward(&mut tape, y.mel, &batch.frame_segments)?;
                let a_hat = self.discriminator.critic_head(&mut tape, &trunk)?;
                for (p, a) in tape.value(a_hat).data().iter().zip(&alpha) {
                    alpha_err += (p - a).abs();
                }
                pairs += batch.len();
            }
        }
        Ok(EvalMetrics {
            split: split.name().into(),
            step: self.step,
            items: idx.len(),
            mel_mae,
            dur_mse,
            feat_mse,
            fs2: mel_mae + dur_mse + feat_mse,
            critic_alpha_mae: if pairs > 0 { alpha_err / pairs as f64 } else { f64::NAN },
            critic_items: pairs,
        })
    }
}

/// Output of [`Trainer::evaluate`]; field names are the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: String,
    pub step: u64,
    pub items: usize,
    pub mel_mae: f64,
    pub dur_mse: f64,
    pub feat_mse: f64,
    /// Sum of the three reconstruction terms.
    pub fs2: f64,
    /// Mean |critic - alpha| over interpolated utterances.
    pub critic_alpha_mae: f64,
    pub critic_items: usize,
}

impl EvalMetrics {
    pub const KEYS: [&'static str; 9] = [
        "split",
        "step",
        "items",
        "mel_mae",
        "dur_mse",
        "feat_mse",
        "fs2",
        "critic_alpha_mae",
        "critic_items",
    ];
}

/// Layout of a run's output directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path.join("checkpoints")).map_err(io(path))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.0.join("checkpoints").join(format!("step_{step:07}.json"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.0.join("run.json")
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("step,phase");
    for c in LossReport::COLUMNS {
        h.push(',');
        h.push_str(c);
    }
    h
}

/// Shortest notation that keeps 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_row(step: u64, phase: Phase, r: &LossReport) -> String {
    let mut s = format!("{step},{}", phase.name());
    for v in r.values() {
        s.push(',');
        s.push_str(&fmt_f64(v));
    }
    s
}

/// Appends rows to `metrics.csv`. Opening at step `n` keeps the header and
/// rows `1..=n` and drops anything after, so a resumed run rewrites the
/// same tail.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path, completed: u64) -> Result<Self> {
        let mut keep = vec![csv_header()];
        if completed > 0 {
            let text = fs::read_to_string(path).map_err(io(path))?;
            let mut lines = text.lines();
            if lines.next() != Some(csv_header().as_str()) {
                return Err(TrainError::Setup(format!("{} has an unexpected header", path.display())));
            }
            for l in lines {
                let step: u64 = l.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step <= completed {
                    keep.push(l.to_string());
                }
            }
            if keep.len() as u64 != completed + 1 {
                return Err(TrainError::Setup(format!(
                    "{} holds {} rows but the checkpoint is at step {completed}",
                    path.display(),
                    keep.len() - 1
                )));
            }
        }
        let mut text = keep.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io(path))?;
        let f = fs::OpenOptions::new().append(true).open(path).map_err(io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn append(&mut self, step: u64, phase: Phase, r: &LossReport) -> Result<()> {
        writeln!(self.out, "{}", csv_row(step, phase, r)).map_err(io(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io(&self.path))
    }
}

/// Parses `metrics.csv` back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, String, LossReport)>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let bad = || TrainError::Setup(format!("malformed metrics file {}", path.display()));
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        let step = cells.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let phase = cells.next().ok_or_else(bad)?.to_string();
        let vals: Vec<f64> = cells.map(|c| c.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let vals: [f64; 13] = vals.try_into().map_err(|_| bad())?;
        rows.push((step, phase, LossReport::from_values(vals)));
    }
    Ok(rows)
}

/// Provenance record written at run start and rewritten at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub config_path: PathBuf,
    pub seed: u64,
    pub mode: String,
    pub dataset: Option<PathBuf>,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub resumed_from: Option<PathBuf>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// Stores `config_bytes` beside the manifest and hashes exactly them.
    pub fn start(run: &RunDir, config_bytes: &[u8], cfg: &Config) -> Result<Self> {
        let cpath = run.config();
        write_atomic(&cpath, config_bytes).map_err(io(&cpath))?;
        let m = Self {
            config_sha256: hex::encode(Sha256::digest(config_bytes)),
            config_path: cpath,
            seed: cfg.train.seed,
            mode: cfg.train.mode.clone(),
            dataset: None,
            metrics: run.metrics(),
            checkpoints: run.0.join("checkpoints"),
            final_checkpoint: None,
            resumed_from: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: None,
        };
        m.write(run)?;
        Ok(m)
    }

    pub fn write(&self, run: &RunDir) -> Result<()> {
        let path = run.manifest();
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&path, &json).map_err(io(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_the_three_objectives() {
        assert_eq!(objective_names(), vec!["fs2", "gan", "mt"]);
        let mut t = crate::config::TrainConfig::default();
        for name in objective_names() {
            t.mode = name.into();
            assert_eq!(build_objective(&t).unwrap().name(), name);
        }
        t.mode = "wgan".into();
        assert!(build_objective(&t).is_none());
    }

    #[test]
    fn csv_numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678901234567] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(csv_header().split(',').count(), 15);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
