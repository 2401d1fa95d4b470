//! Convolutional FastSpeech 2-style acoustic model: phoneme encoder with
//! additive speaker conditioning, duration predictor, length regulator,
//! F0/energy variance adaptors and a mel decoder.
//!
//! Batches are packed along the time axis. Phoneme-rate tensors are
//! `[c, sum(P_i)]`, frame-rate tensors `[c, sum(T_i)]`, and the segment
//! lengths travel alongside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Conv1d, ConvBlock, ScalarPredictor};
use crate::tensor::{ParamId, ParamSet, Result, Tape, Tensor, TensorError, Var};
use crate::N_MELS;

pub const NAMESPACE: &str = "gen";

/// Number of frame-level prosodic features (F0, energy).
pub const N_FEAT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub kernel: usize,
    pub variance_hidden: usize,
    pub d_z: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            hidden: 64,
            encoder_blocks: 2,
            decoder_blocks: 2,
            kernel: 3,
            variance_hidden: 32,
            d_z: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "phonemes",
                detail: "empty phoneme sequence".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidShape {
                op: "phonemes",
                detail: format!("phoneme id {bad} outside vocabulary of {vocab}"),
            });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One utterance's speech parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechParams {
    /// Log-domain durations, `ln(1 + frames)` per phoneme.
    pub dur: Vec<f64>,
    /// `[T, 2]`: F0 and energy.
    pub feat: Tensor,
    /// `[T, 80]`
    pub mel: Tensor,
}

impl SpeechParams {
    pub fn frames(&self) -> usize {
        self.mel.shape()[0]
    }
}

/// Duration regression target.
pub fn log_duration(frames: usize) -> f64 {
    (frames as f64).ln_1p()
}

/// Integer frames from a predicted log-duration.
pub fn frames_from_log(log_dur: f64) -> usize {
    (log_dur.exp() - 1.0).round().max(0.0) as usize
}

/// A packed batch as seen by the generator.
#[derive(Clone, Debug)]
pub struct GenBatch<'a> {
    pub phonemes: &'a [&'a [usize]],
    /// `[d_z, batch]`
    pub z: Tensor,
    /// Ground-truth frames per phoneme, one list per utterance.
    pub durations: Option<&'a [&'a [usize]]>,
    /// Packed `[2, sum(T_i)]` ground-truth features fed to the re-projection.
    pub teacher_feat: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    /// `[1, sum(P_i)]`
    pub log_dur: Var,
    /// `[2, sum(T_i)]`
    pub feat: Var,
    /// `[80, sum(T_i)]`
    pub mel: Var,
    pub phoneme_segments: Vec<usize>,
    pub frame_segments: Vec<usize>,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamSet,
    embed: ParamId,
    encoder: Vec<ConvBlock>,
    z_proj: Conv1d,
    duration: ScalarPredictor,
    pitch: ScalarPredictor,
    energy: ScalarPredictor,
    feat_proj: Conv1d,
    decoder: Vec<ConvBlock>,
    mel_out: Conv1d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new(NAMESPACE);
        let h = cfg.hidden;
        let mut table = Tensor::zeros(&[h, cfg.vocab_size]);
        for v in table.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let embed = p.add("embed", table);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| ConvBlock::new(&mut p, &mut rng, &format!("encoder.{i}"), h, cfg.kernel))
            .collect();
        let z_proj = Conv1d::new(&mut p, &mut rng, "z_proj", cfg.d_z, h, 1, 1, false);
        let vh = cfg.variance_hidden;
        let duration = ScalarPredictor::new(&mut p, &mut rng, "duration", h, vh, cfg.kernel);
        let pitch = ScalarPredictor::new(&mut p, &mut rng, "pitch", h, vh, cfg.kernel);
        let energy = ScalarPredictor::new(&mut p, &mut rng, "energy", h, vh, cfg.kernel);
        let feat_proj = Conv1d::new(&mut p, &mut rng, "feat_proj", N_FEAT, h, 1, 1, false);
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| ConvBlock::new(&mut p, &mut rng, &format!("decoder.{i}"), h, cfg.kernel))
            .collect();
        let mel_out = Conv1d::new(&mut p, &mut rng, "mel_out", h, N_MELS, 1, 1, true);
        Self {
            cfg,
            params: p,
            embed,
            encoder,
            z_proj,
            duration,
            pitch,
            energy,
            feat_proj,
            decoder,
            mel_out,
        }
    }

    /// Phoneme ids and speaker columns `z[d_z, batch]` to `[H, sum(P_i)]`.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        phonemes: &[&[usize]],
        z: Var,
    ) -> Result<(Var, Vec<usize>)> {
        let segs: Vec<usize> = phonemes.iter().map(|p| p.len()).collect();
        let (zd, n) = tape.value(z).dims2()?;
        if zd != self.cfg.d_z || n != phonemes.len() {
            return Err(TensorError::InvalidShape {
                op: "encode_text",
                detail: format!(
                    "speaker embeddings are {zd}x{n}, expected {}x{}",
                    self.cfg.d_z,
                    phonemes.len()
                ),
            });
        }
        if segs.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "encode_text",
                detail: "empty phoneme sequence".into(),
            });
        }
        let ids: Vec<usize> = phonemes.iter().flat_map(|p| p.iter().copied()).collect();
        let table = tape.param(&self.params, self.embed);
        let mut h = tape.embedding(table, &ids)?;
        for block in &self.encoder {
            h = block.forward(tape, &self.params, h, &segs)?;
        }
        let zp = self.z_proj.forward(tape, &self.params, z)?;
        let h = tape.add_segments(h, zp, &segs)?;
        Ok((h, segs))
    }

    /// `[H, P] -> [1, P]` log-durations.
    pub fn predict_durations(&self, tape: &mut Tape, h: Var, segs: &[usize]) -> Result<Var> {
        self.duration.forward(tape, &self.params, h, segs)
    }

    /// Repeats phoneme column `m` `durations[m]` times. Durations are flat
    /// across the batch; `segs` gives phonemes per utterance.
    pub fn length_regulate(
        &self,
        tape: &mut Tape,
        h: Var,
        durations: &[usize],
        segs: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let mut frame_segs = Vec::with_capacity(segs.len());
        let mut off = 0;
        for &p in segs {
            let t: usize = durations[off..off + p].iter().sum();
            if t == 0 {
                return Err(TensorError::InvalidShape {
                    op: "length_regulate",
                    detail: "all durations of an utterance are zero".into(),
                });
            }
            frame_segs.push(t);
            off += p;
        }
        let out = tape.repeat_columns(h, durations)?;
        Ok((out, frame_segs))
    }

    /// Predicts F0 and energy per frame and adds their re-projection back
    /// onto `h`. With `teacher` set, the re-projection consumes the
    /// ground-truth features instead of the predictions.
    pub fn variance_adapt(
        &self,
        tape: &mut Tape,
        h: Var,
        segs: &[usize],
        teacher: Option<Var>,
    ) -> Result<(Var, Var)> {
        let f0 = self.pitch.forward(tape, &self.params, h, segs)?;
        let energy = self.energy.forward(tape, &self.params, h, segs)?;
        let feat = tape.concat_rows(f0, energy)?;
        let used = teacher.unwrap_or(feat);
        let residual = self.feat_proj.forward(tape, &self.params, used)?;
        let h = tape.add(h, residual)?;
        Ok((feat, h))
    }

    pub fn decode(&self, tape: &mut Tape, mut h: Var, segs: &[usize]) -> Result<Var> {
        for block in &self.decoder {
            h = block.forward(tape, &self.params, h, segs)?;
        }
        self.mel_out.forward(tape, &self.params, h)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &GenBatch<'_>) -> Result<GenOutput> {
        let z = tape.constant(batch.z.clone());
        let (h, p_segs) = self.encode_text(tape, batch.phonemes, z)?;
        let log_dur = self.predict_durations(tape, h, &p_segs)?;
        let durations: Vec<usize> = match batch.durations {
            Some(d) => {
                if d.len() != p_segs.len() || d.iter().zip(&p_segs).any(|(d, &p)| d.len() != p) {
                    return Err(TensorError::InvalidShape {
                        op: "generate",
                        detail: "teacher durations do not match the phoneme sequences".into(),
                    });
                }
                d.iter().flat_map(|d| d.iter().copied()).collect()
            }
            None => infer_durations(tape.value(log_dur).data(), &p_segs),
        };
        let (h, t_segs) = self.length_regulate(tape, h, &durations, &p_segs)?;
        let teacher = match batch.teacher_feat {
            Some(f) => {
                let total: usize = t_segs.iter().sum();
                if f.shape() != [N_FEAT, total] {
                    return Err(TensorError::ShapeMismatch {
                        op: "generate teacher features",
                        left: vec![N_FEAT, total],
                        right: f.shape().to_vec(),
                    });
                }
                Some(tape.constant(f.clone()))
            }
            None => None,
        };
        let (feat, h) = self.variance_adapt(tape, h, &t_segs, teacher)?;
        let mel = self.decode(tape, h, &t_segs)?;
        Ok(GenOutput {
            log_dur,
            feat,
            mel,
            phoneme_segments: p_segs,
            frame_segments: t_segs,
            durations,
        })
    }

    /// Single-utterance synthesis on a private tape.
    pub fn generate(
        &self,
        x: &PhonemeSequence,
        z: &[f64],
        teacher_durations: Option<&[usize]>,
        teacher_feat: Option<&Tensor>,
    ) -> Result<SpeechParams> {
        if let Some(&bad) = x.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TensorError::InvalidShape {
                op: "generate",
                detail: format!("phoneme id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        let phonemes = [x.ids.as_slice()];
        let durs;
        let durations = match teacher_durations {
            Some(d) => {
                durs = [d];
                Some(&durs[..])
            }
            None => None,
        };
        let feat_cm = teacher_feat.map(|f| f.transpose2()).transpose()?;
        let batch = GenBatch {
            phonemes: &phonemes,
            z: Tensor::column(z.to_vec()),
            durations,
            teacher_feat: feat_cm.as_ref(),
        };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch)?;
        Ok(SpeechParams {
            dur: tape.value(out.log_dur).data().to_vec(),
            feat: tape.value(out.feat).transpose2()?,
            mel: tape.value(out.mel).transpose2()?,
        })
    }
}

/// Rounded frame counts from predicted log-durations; an utterance that
/// would come out empty gets one frame per phoneme.
fn infer_durations(log_dur: &[f64], segs: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(log_dur.len());
    let mut off = 0;
    for &p in segs {
        let mut d: Vec<usize> = log_dur[off..off + p].iter().map(|&l| frames_from_log(l)).collect();
        if d.iter().all(|&f| f == 0) {
            d.fill(1);
        }
        out.extend(d);
        off += p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Generator {
        Generator::new(
            GeneratorConfig {
                vocab_size: 8,
                hidden: 16,
                variance_hidden: 8,
                d_z: 4,
                ..GeneratorConfig::default()
            },
            7,
        )
    }

    #[test]
    fn log_duration_targets() {
        assert_eq!(log_duration(0), 0.0);
        assert!((log_duration(4) - 5f64.ln()).abs() < 1e-15);
        assert!((log_duration(4) - 1.609).abs() < 1e-3);
        assert_eq!(frames_from_log(log_duration(4)), 4);
    }

    #[test]
    fn encoder_shape_and_conditioning() {
        let g = tiny();
        for p in [1, 3, 9] {
            let ids: Vec<usize> = (0..p).map(|i| i % 8).collect();
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::column(vec![0.5, -0.5, 0.1, 0.2]));
            let (h, _) = g.encode_text(&mut tape, &[&ids], z).unwrap();
            assert_eq!(tape.shape(h), &[16, p]);
        }
        let ids = [1usize, 2, 3];
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::column(vec![0.0; 4]));
        let z1 = tape.constant(Tensor::column(vec![1.0, 0.0, 0.0, 0.0]));
        let (h0, _) = g.encode_text(&mut tape, &[&ids], z0).unwrap();
        let (h1, _) = g.encode_text(&mut tape, &[&ids], z1).unwrap();
        assert_ne!(tape.value(h0), tape.value(h1));

        // zero embedding equals the conv stack with no conditioning at all
        let table = tape.param(&g.params, g.embed);
        let mut h = tape.embedding(table, &ids).unwrap();
        for block in &g.encoder {
            h = block.forward(&mut tape, &g.params, h, &[3]).unwrap();
        }
        assert_eq!(tape.value(h), tape.value(h0));
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let g = tiny();
        assert!(PhonemeSequence::new(vec![1, 9], 8).is_err());
        let x = PhonemeSequence { ids: vec![1, 8] };
        assert!(g.generate(&x, &[0.0; 4], Some(&[1, 1]), None).is_err());
    }

    #[test]
    fn teacher_forced_length_and_determinism() {
        let g = tiny();
        let x = PhonemeSequence::new(vec![1, 2, 3], 8).unwrap();
        let dur = [2usize, 0, 4];
        let feat = Tensor::new(vec![6, 2], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = g.generate(&x, &[0.1, 0.2, 0.3, 0.4], Some(&dur), Some(&feat)).unwrap();
        let b = g.generate(&x, &[0.1, 0.2, 0.3, 0.4], Some(&dur), Some(&feat)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mel.shape(), &[6, 80]);
        assert_eq!(a.feat.shape(), &[6, 2]);
        assert_eq!(a.dur.len(), 3);
        let c = g.generate(&x, &[0.05, 0.3, 0.2, 0.45], Some(&dur), Some(&feat)).unwrap();
        assert_eq!(c.mel.shape(), a.mel.shape());
    }

    #[test]
    fn inference_produces_nonempty_output() {
        let g = tiny();
        let x = PhonemeSequence::new(vec![4, 5], 8).unwrap();
        let y = g.generate(&x, &[0.3; 4], None, None).unwrap();
        assert!(y.frames() >= 1);
    }

    #[test]
    fn zero_reprojection_leaves_hidden_unchanged() {
        let mut g = tiny();
        let id = g.params.id("feat_proj.weight").unwrap();
        let shape = g.params.get(id).value.shape().to_vec();
        g.params.get_mut(id).value = Tensor::zeros(&shape);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[16, 5], 0.3));
        let (feat, h2) = g.variance_adapt(&mut tape, h, &[5], None).unwrap();
        assert_eq!(tape.shape(feat), &[2, 5]);
        assert_eq!(tape.value(h2), tape.value(h));
    }

    #[test]
    fn teacher_features_cut_the_adaptor_out_of_the_mel_path() {
        let mut g = tiny();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[16, 4], 0.2));
        let teacher = tape.constant(Tensor::full(&[2, 4], 1.0));
        let (_, h2) = g.variance_adapt(&mut tape, h, &[4], Some(teacher)).unwrap();
        let loss = tape.sum(h2);
        tape.backward(loss, &mut [&mut g.params]).unwrap();
        for name in ["pitch.out.weight", "energy.conv.weight"] {
            let id = g.params.id(name).unwrap();
            assert!(g.params.get(id).grad.data().iter().all(|&v| v == 0.0), "{name}");
        }
        let id = g.params.id("feat_proj.weight").unwrap();
        assert!(g.params.get(id).grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn packed_batch_matches_single_utterances() {
        let g = tiny();
        let (a, b) = ([1usize, 2], [3usize, 4, 5]);
        let (da, db) = ([2usize, 3], [1usize, 1, 4]);
        let z = Tensor::new(vec![4, 2], vec![0.1, 0.5, 0.2, -0.3, 0.0, 0.4, 0.9, 0.1]).unwrap();
        let batch = GenBatch {
            phonemes: &[&a, &b],
            z,
            durations: Some(&[&da, &db]),
            teacher_feat: None,
        };
        let mut tape = Tape::new();
        let out = g.forward(&mut tape, &batch).unwrap();
        assert_eq!(out.frame_segments, vec![5, 6]);
        let packed = tape.value(out.mel).clone();
        let first = g
            .generate(&PhonemeSequence { ids: a.to_vec() }, &[0.1, 0.2, 0.0, 0.9], Some(&da), None)
            .unwrap();
        for t in 0..5 {
            for m in 0..80 {
                let d = packed.data()[m * 11 + t] - first.mel.data()[t * 80 + m];
                assert!(d.abs() < 1e-12);
            }
        }
    }
}
