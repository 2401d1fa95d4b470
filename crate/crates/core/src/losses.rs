//! Training objectives. Tape builders are the single implementation; the
//! `f64` entry points evaluate them on a throwaway tape.
//!
//! Score arguments are `[1, M]` rows, one entry per utterance; every
//! objective is the batch mean of its per-utterance value.

use thiserror::Error;

use crate::discriminator::Trunk;
use crate::generator::SpeechParams;
use crate::tensor::{Result as TResult, Tape, Tensor, TensorError, Var};

pub const LAMBDA_FM_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA_ACAI: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn ones_like(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    tape.constant(Tensor::full(&shape, 1.0))
}

fn sq_dist(tape: &mut Tape, a: Var, b: Var) -> TResult<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.square(d))
}

/// Per-utterance mean of `f(a - b)` over packed segments, then batch mean.
fn segmented(tape: &mut Tape, a: Var, b: Var, segs: &[usize], squared: bool) -> TResult<Var> {
    let d = tape.sub(a, b)?;
    let e = if squared { tape.square(d) } else { tape.abs(d) };
    let per_item = tape.segment_mean(e, segs)?;
    Ok(tape.mean(per_item))
}

/// Targets for one packed batch, in generator layout.
#[derive(Clone, Debug)]
pub struct Fs2Target {
    /// `[1, sum(P_i)]` of `ln(1 + frames)`.
    pub log_dur: Var,
    /// `[2, sum(T_i)]`
    pub feat: Var,
    /// `[80, sum(T_i)]`
    pub mel: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Fs2Terms {
    pub dur: Var,
    pub feat: Var,
    pub mel: Var,
    pub total: Var,
}

/// Duration MSE + feature MSE + mel MAE.
#[allow(clippy::too_many_arguments)]
pub fn fs2_loss(
    tape: &mut Tape,
    log_dur: Var,
    feat: Var,
    mel: Var,
    target: &Fs2Target,
    phoneme_segs: &[usize],
    frame_segs: &[usize],
) -> TResult<Fs2Terms> {
    let dur = segmented(tape, log_dur, target.log_dur, phoneme_segs, true)?;
    let feat = segmented(tape, feat, target.feat, frame_segs, true)?;
    let mel = segmented(tape, mel, target.mel, frame_segs, false)?;
    let s = tape.add(dur, feat)?;
    let total = tape.add(s, mel)?;
    Ok(Fs2Terms {
        dur,
        feat,
        mel,
        total,
    })
}

pub fn gan_d(tape: &mut Tape, t_c: Var, t_u: Var, fake_c: Var, fake_u: Var) -> TResult<Var> {
    let one = ones_like(tape, t_c);
    let a = sq_dist(tape, t_c, one)?;
    let b = sq_dist(tape, t_u, one)?;
    let c = tape.square(fake_c);
    let d = tape.square(fake_u);
    let real = tape.add(a, b)?;
    let fake = tape.add(c, d)?;
    let per_item = tape.add(real, fake)?;
    let per_item = tape.scale(per_item, 0.5);
    Ok(tape.mean(per_item))
}

pub fn gan_g(tape: &mut Tape, fake_c: Var, fake_u: Var) -> TResult<Var> {
    let one = ones_like(tape, fake_c);
    let a = sq_dist(tape, fake_c, one)?;
    let b = sq_dist(tape, fake_u, one)?;
    let s = tape.add(a, b)?;
    let s = tape.scale(s, 0.5);
    Ok(tape.mean(s))
}

/// Sum over trunk layers of the per-utterance mean absolute difference.
pub fn feature_matching(tape: &mut Tape, natural: &Trunk, generated: &Trunk) -> TResult<Var> {
    if natural.features.len() != generated.features.len() || natural.segments != generated.segments {
        return Err(TensorError::InvalidShape {
            op: "feature_matching",
            detail: "natural and generated trunks differ in layout".into(),
        });
    }
    let mut total: Option<Var> = None;
    for ((&h, &h_hat), segs) in natural
        .features
        .iter()
        .zip(&generated.features)
        .zip(&natural.segments)
    {
        let term = segmented(tape, h_hat, h, segs, false)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(TensorError::InvalidShape {
        op: "feature_matching",
        detail: "no feature layers".into(),
    })
}

/// `alpha` is a constant `[1, M]` row.
pub fn acai_critic(tape: &mut Tape, pure: Var, interp: Var, alpha: Var) -> TResult<Var> {
    let a = tape.square(pure);
    let b = sq_dist(tape, interp, alpha)?;
    let s = tape.add(a, b)?;
    Ok(tape.mean(s))
}

pub fn acai_generator(tape: &mut Tape, interp: Var) -> Var {
    let s = tape.square(interp);
    tape.mean(s)
}

/// Detached ratio that rescales feature matching to the reconstruction loss.
pub fn lambda_fm(l_fs2: f64, l_fm: f64) -> Result<f64> {
    for (name, value) in [("l_fs2", l_fs2), ("l_fm", l_fm)] {
        if value < 0.0 {
            return Err(LossError::Negative { name, value });
        }
    }
    Ok(l_fs2 / l_fm.max(LAMBDA_FM_EPS))
}

fn row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).expect("nonempty row"))
}

pub fn gan_d_loss(t_c: &[f64], t_u: &[f64], fake_c: &[f64], fake_u: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [t_c, t_u, fake_c, fake_u].map(|v| row(&mut tape, v));
    let l = gan_d(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(l).item())
}

pub fn gan_g_loss(fake_c: &[f64], fake_u: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (c, u) = (row(&mut tape, fake_c), row(&mut tape, fake_u));
    let l = gan_g(&mut tape, c, u)?;
    Ok(tape.value(l).item())
}

pub fn acai_critic_loss(pure: &[f64], interp: &[f64], alpha: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, i, a) = (row(&mut tape, pure), row(&mut tape, interp), row(&mut tape, alpha));
    let l = acai_critic(&mut tape, p, i, a)?;
    Ok(tape.value(l).item())
}

pub fn acai_generator_term(interp: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let i = row(&mut tape, interp);
    let l = acai_generator(&mut tape, i);
    Ok(tape.value(l).item())
}

/// Feature-matching loss for one utterance given per-layer `[c, t]` maps.
pub fn feature_matching_loss(natural: &[Tensor], generated: &[Tensor]) -> Result<f64> {
    if natural.len() != generated.len() {
        return Err(TensorError::InvalidShape {
            op: "feature_matching",
            detail: format!("{} vs {} layers", natural.len(), generated.len()),
        }
        .into());
    }
    let mut tape = Tape::new();
    let trunk = |tape: &mut Tape, layers: &[Tensor]| -> TResult<Trunk> {
        let mut features = Vec::with_capacity(layers.len());
        let mut segments = Vec::with_capacity(layers.len());
        for layer in layers {
            segments.push(vec![layer.dims2()?.1]);
            features.push(tape.constant(layer.clone()));
        }
        Ok(Trunk {
            h_s: *features.last().unwrap_or(&tape.constant(Tensor::scalar(0.0))),
            features,
            segments,
        })
    };
    let nat = trunk(&mut tape, natural)?;
    let generated = trunk(&mut tape, generated)?;
    let l = feature_matching(&mut tape, &nat, &generated)?;
    Ok(tape.value(l).item())
}

/// Values of the reconstruction loss and its three terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fs2Values {
    pub dur: f64,
    pub feat: f64,
    pub mel: f64,
    pub total: f64,
}

pub fn reconstruction_loss(y: &SpeechParams, y_hat: &SpeechParams) -> Result<Fs2Values> {
    let pairs = [
        (Tensor::column(y.dur.clone()), Tensor::column(y_hat.dur.clone()), true),
        (y.feat.clone(), y_hat.feat.clone(), true),
        (y.mel.clone(), y_hat.mel.clone(), false),
    ];
    let mut tape = Tape::new();
    let mut v = [0.0; 3];
    for (slot, (a, b, squared)) in v.iter_mut().zip(pairs) {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reconstruction_loss",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        // flattened to one row: the mean runs over every entry
        let n = a.numel();
        let a = tape.constant(Tensor::new(vec![1, n], a.into_data())?);
        let b = tape.constant(Tensor::new(vec![1, n], b.into_data())?);
        let l = segmented(&mut tape, b, a, &[n], squared)?;
        *slot = tape.value(l).item();
    }
    let [dur, feat, mel] = v;
    Ok(Fs2Values {
        dur,
        feat,
        mel,
        total: dur + feat + mel,
    })
}

/// Per-step scalar summary; one metrics CSV row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_fs2: f64,
    pub l_dur: f64,
    pub l_feat: f64,
    pub l_mel: f64,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_fm: f64,
    pub lambda_fm: f64,
    pub l_acai_c: f64,
    pub l_acai_g: f64,
    pub l_total_g: f64,
    pub l_mt_d: f64,
    pub l_mt_g: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 13] = [
        "l_fs2",
        "l_dur",
        "l_feat",
        "l_mel",
        "l_gan_d",
        "l_gan_g",
        "l_fm",
        "lambda_fm",
        "l_acai_c",
        "l_acai_g",
        "l_total_g",
        "l_mt_d",
        "l_mt_g",
    ];

    pub fn values(&self) -> [f64; 13] {
        [
            self.l_fs2,
            self.l_dur,
            self.l_feat,
            self.l_mel,
            self.l_gan_d,
            self.l_gan_g,
            self.l_fm,
            self.lambda_fm,
            self.l_acai_c,
            self.l_acai_g,
            self.l_total_g,
            self.l_mt_d,
            self.l_mt_g,
        ]
    }

    pub fn from_values(v: [f64; 13]) -> Self {
        Self {
            l_fs2: v[0],
            l_dur: v[1],
            l_feat: v[2],
            l_mel: v[3],
            l_gan_d: v[4],
            l_gan_g: v[5],
            l_fm: v[6],
            lambda_fm: v[7],
            l_acai_c: v[8],
            l_acai_g: v[9],
            l_total_g: v[10],
            l_mt_d: v[11],
            l_mt_g: v[12],
        }
    }
}

/// Measured terms a report is composed from.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Constituents {
    pub l_fs2: f64,
    pub l_dur: f64,
    pub l_feat: f64,
    pub l_mel: f64,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_fm: f64,
    pub lambda_fm: f64,
    pub l_acai_c: f64,
    pub l_acai_g: f64,
}

pub fn compose(c: Constituents, lambda_acai: f64) -> Result<LossReport> {
    let named = [
        ("l_fs2", c.l_fs2),
        ("l_dur", c.l_dur),
        ("l_feat", c.l_feat),
        ("l_mel", c.l_mel),
        ("l_gan_d", c.l_gan_d),
        ("l_gan_g", c.l_gan_g),
        ("l_fm", c.l_fm),
        ("lambda_fm", c.lambda_fm),
        ("l_acai_c", c.l_acai_c),
        ("l_acai_g", c.l_acai_g),
        ("lambda_acai", lambda_acai),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(LossError::NonFinite(name));
    }
    let l_total_g = c.l_fs2 + c.l_gan_g + c.lambda_fm * c.l_fm;
    Ok(LossReport {
        l_fs2: c.l_fs2,
        l_dur: c.l_dur,
        l_feat: c.l_feat,
        l_mel: c.l_mel,
        l_gan_d: c.l_gan_d,
        l_gan_g: c.l_gan_g,
        l_fm: c.l_fm,
        lambda_fm: c.lambda_fm,
        l_acai_c: c.l_acai_c,
        l_acai_g: c.l_acai_g,
        l_total_g,
        l_mt_d: c.l_gan_d + c.l_acai_c,
        l_mt_g: l_total_g + lambda_acai * c.l_acai_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_inputs_to_lambda_rejected() {
        assert!(lambda_fm(-1.0, 1.0).is_err());
        assert!(lambda_fm(1.0, -0.1).is_err());
    }

    #[test]
    fn compose_names_the_bad_term() {
        let c = Constituents {
            l_fm: f64::NAN,
            ..Constituents::default()
        };
        assert_eq!(compose(c, 1.0).unwrap_err(), LossError::NonFinite("l_fm"));
    }

    #[test]
    fn report_values_round_trip() {
        let r = LossReport::from_values(std::array::from_fn(|i| i as f64));
        assert_eq!(LossReport::from_values(r.values()), r);
    }

    #[test]
    fn reconstruction_rejects_mismatched_shapes() {
        let y = SpeechParams {
            dur: vec![0.0],
            feat: Tensor::zeros(&[2, 2]),
            mel: Tensor::zeros(&[2, 80]),
        };
        let mut y_hat = y.clone();
        y_hat.mel = Tensor::zeros(&[3, 80]);
        assert!(reconstruction_loss(&y, &y_hat).is_err());
    }
}
