//! Central finite-difference verification of every tape primitive and of
//! each training objective evaluated end-to-end through tiny models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::pack_channels;
use crate::discriminator::{self, Discriminator, DiscriminatorConfig, LayerSpec};
use crate::generator::{self, log_duration, GenBatch, Generator, GeneratorConfig};
use crate::losses::{self, Fs2Target};
use crate::speaker;
use crate::tensor::{ParamSet, Result, Tape, Tensor, Var, LEAKY_SLOPE};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A differentiable scalar function of a list of tensors.
pub trait GradCase {
    fn name(&self) -> &str;
    /// Point at which the gradient is checked.
    fn point(&self) -> Vec<Tensor>;
    /// Loss value and its gradient with respect to every point tensor.
    fn eval(&self, x: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type PrimFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Primitive wrapped into a scalar by a fixed random projection of its output.
struct Primitive {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: PrimFn,
    seed: u64,
}

impl GradCase for Primitive {
    fn name(&self) -> &str {
        self.name
    }

    fn point(&self) -> Vec<Tensor> {
        self.inputs.clone()
    }

    fn eval(&self, x: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = x.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.f)(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let shape = tape.shape(out).to_vec();
            let w = tape.constant(random(&shape, 1.0, self.seed));
            let p = tape.mul(out, w)?;
            tape.sum(p)
        };
        let grads = tape.gradients(loss)?;
        let g = vars
            .iter()
            .zip(x)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(loss).item(), g))
    }
}

fn random(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

fn prim(
    name: &'static str,
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Box<dyn GradCase> {
    let inputs = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random(s, 2.0, seed.wrapping_mul(31).wrapping_add(i as u64)))
        .collect();
    Box::new(Primitive {
        name,
        inputs,
        f: Box::new(f),
        seed: seed ^ 0x9e37,
    })
}

/// One entry per tape primitive.
pub fn primitive_cases(seed: u64) -> Vec<Box<dyn GradCase>> {
    let s = |i: u64| seed.wrapping_mul(1000).wrapping_add(i);
    vec![
        prim("conv1d", s(1), &[&[3, 9], &[4, 3, 3], &[4]], |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        prim("conv1d_strided", s(2), &[&[3, 11], &[2, 3, 5], &[2]], |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), 2, 2)
        }),
        prim("conv1d_segments", s(3), &[&[2, 13], &[3, 2, 5]], |t, v| {
            Ok(t.conv1d_segments(v[0], v[1], None, 2, 2, &[6, 7])?.0)
        }),
        prim("add", s(4), &[&[2, 5], &[2, 5]], |t, v| t.add(v[0], v[1])),
        prim("sub", s(5), &[&[2, 5], &[2, 5]], |t, v| t.sub(v[0], v[1])),
        prim("mul", s(6), &[&[2, 5], &[2, 5]], |t, v| t.mul(v[0], v[1])),
        prim("add_segments", s(7), &[&[3, 7], &[3, 2]], |t, v| {
            t.add_segments(v[0], v[1], &[3, 4])
        }),
        prim("segment_mean", s(8), &[&[3, 7]], |t, v| t.segment_mean(v[0], &[5, 2])),
        prim("scale", s(9), &[&[4, 3]], |t, v| Ok(t.scale(v[0], -1.7))),
        prim("leaky_relu", s(10), &[&[4, 6]], |t, v| Ok(t.leaky_relu(v[0], LEAKY_SLOPE))),
        prim("sigmoid", s(11), &[&[4, 6]], |t, v| Ok(t.sigmoid(v[0]))),
        prim("abs", s(12), &[&[4, 6]], |t, v| Ok(t.abs(v[0]))),
        prim("square", s(13), &[&[4, 6]], |t, v| Ok(t.square(v[0]))),
        prim("mean", s(14), &[&[4, 6]], |t, v| Ok(t.mean(v[0]))),
        prim("sum", s(15), &[&[4, 6]], |t, v| Ok(t.sum(v[0]))),
        prim("layer_norm", s(16), &[&[5, 4], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        prim("embedding", s(17), &[&[3, 6]], |t, v| t.embedding(v[0], &[2, 0, 2, 5])),
        prim("repeat_columns", s(18), &[&[3, 4]], |t, v| t.repeat_columns(v[0], &[2, 0, 1, 3])),
        prim("concat_rows", s(19), &[&[2, 5], &[3, 5]], |t, v| t.concat_rows(v[0], v[1])),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Gen,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Fs2,
    GanD,
    GanG,
    Fm,
    AcaiC,
    AcaiG,
    MtD,
    MtG,
}

/// Detached feature-matching weight used by the composite generator case.
const FIXED_LAMBDA_FM: f64 = 2.0;

struct Fixture {
    phonemes: Vec<Vec<usize>>,
    durations: Vec<Vec<usize>>,
    frame_segs: Vec<usize>,
    z: Tensor,
    z_tilde: Tensor,
    alpha: Tensor,
    log_dur: Tensor,
    feat: Tensor,
    mel: Tensor,
}

/// An objective differentiated through tiny generator/discriminator models.
struct ModelCase {
    name: &'static str,
    objective: Objective,
    target: Target,
    gen: Generator,
    disc: Discriminator,
    fx: std::rc::Rc<Fixture>,
}

fn tiny_models(seed: u64) -> (Generator, Discriminator) {
    let gen = Generator::new(
        GeneratorConfig {
            vocab_size: 6,
            hidden: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            kernel: 3,
            variance_hidden: 4,
            d_z: 4,
        },
        seed,
    );
    let l = |channels, kernel, stride| LayerSpec {
        channels,
        kernel,
        stride,
    };
    let disc = Discriminator::new(
        DiscriminatorConfig {
            n_mels: crate::N_MELS,
            shared: vec![l(4, 3, 1), l(6, 5, 2), l(8, 5, 2)],
            head: vec![l(4, 5, 2), l(1, 3, 1)],
        },
        4,
        seed ^ 1,
    );
    (gen, disc)
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phonemes = vec![vec![1, 2, 3], vec![4, 0]];
    let durations = vec![vec![4, 5, 3], vec![6, 7]];
    let frame_segs: Vec<usize> = durations.iter().map(|d| d.iter().sum()).collect();
    let total: usize = frame_segs.iter().sum();
    let z: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let alpha = vec![0.3, 0.2];
    let zt = speaker::interpolate(&z, &alpha).expect("even batch");
    let frames: Vec<Tensor> = frame_segs
        .iter()
        .map(|&t| random(&[t, crate::N_MELS], 1.5, rng.random()))
        .collect();
    let feats: Vec<Tensor> = frame_segs.iter().map(|&t| random(&[t, 2], 1.0, rng.random())).collect();
    let log_dur: Vec<f64> = durations.iter().flatten().map(|&d| log_duration(d)).collect();
    Fixture {
        phonemes,
        frame_segs,
        z: speaker::stack_columns(&z),
        z_tilde: speaker::stack_columns(&zt.tilde_z),
        alpha: Tensor::new(vec![1, 2], alpha).unwrap(),
        log_dur: Tensor::new(vec![1, log_dur.len()], log_dur).unwrap(),
        feat: pack_channels(&feats.iter().collect::<Vec<_>>()),
        mel: {
            let m = pack_channels(&frames.iter().collect::<Vec<_>>());
            debug_assert_eq!(m.shape(), &[crate::N_MELS, total]);
            m
        },
        durations,
    }
}

impl ModelCase {
    fn set(&self) -> &ParamSet {
        match self.target {
            Target::Gen => &self.gen.params,
            Target::Disc => &self.disc.params,
        }
    }

    fn loss(&self, tape: &mut Tape, gen: &Generator, disc: &Discriminator) -> Result<Var> {
        let fx = &*self.fx;
        let phonemes: Vec<&[usize]> = fx.phonemes.iter().map(Vec::as_slice).collect();
        let durations: Vec<&[usize]> = fx.durations.iter().map(Vec::as_slice).collect();
        let run = |tape: &mut Tape, z: &Tensor| {
            gen.forward(
                tape,
                &GenBatch {
                    phonemes: &phonemes,
                    z: z.clone(),
                    durations: Some(&durations),
                    teacher_feat: Some(&fx.feat),
                },
            )
        };
        let segs = &fx.frame_segs;
        let y_hat = run(tape, &fx.z)?;
        let y = tape.constant(fx.mel.clone());
        let z = tape.constant(fx.z.clone());
        let target = Fs2Target {
            log_dur: tape.constant(fx.log_dur.clone()),
            feat: tape.constant(fx.feat.clone()),
            mel: y,
        };
        let fs2 = |tape: &mut Tape| {
            losses::fs2_loss(
                tape,
                y_hat.log_dur,
                y_hat.feat,
                y_hat.mel,
                &target,
                &y_hat.phoneme_segments,
                &y_hat.frame_segments,
            )
            .map(|t| t.total)
        };
        let nat = disc.shared_forward(tape, y, segs)?;
        let fake = disc.shared_forward(tape, y_hat.mel, segs)?;
        let gan_d = |tape: &mut Tape| -> Result<Var> {
            let t_c = disc.conditional_head(tape, &nat, z)?;
            let t_u = disc.unconditional_head(tape, &nat)?;
            let f_c = disc.conditional_head(tape, &fake, z)?;
            let f_u = disc.unconditional_head(tape, &fake)?;
            losses::gan_d(tape, t_c, t_u, f_c, f_u)
        };
        let gan_g = |tape: &mut Tape| -> Result<Var> {
            let f_c = disc.conditional_head(tape, &fake, z)?;
            let f_u = disc.unconditional_head(tape, &fake)?;
            losses::gan_g(tape, f_c, f_u)
        };
        let interp_alpha = |tape: &mut Tape| -> Result<Var> {
            let y_t = run(tape, &fx.z_tilde)?;
            let trunk = disc.shared_forward(tape, y_t.mel, segs)?;
            disc.critic_head(tape, &trunk)
        };
        let acai_c = |tape: &mut Tape| -> Result<Var> {
            let pure = disc.critic_head(tape, &nat)?;
            let interp = interp_alpha(tape)?;
            let a = tape.constant(fx.alpha.clone());
            losses::acai_critic(tape, pure, interp, a)
        };
        match self.objective {
            Objective::Fs2 => fs2(tape),
            Objective::GanD => gan_d(tape),
            Objective::GanG => gan_g(tape),
            Objective::Fm => losses::feature_matching(tape, &nat, &fake),
            Objective::AcaiC => acai_c(tape),
            Objective::AcaiG => {
                let a = interp_alpha(tape)?;
                Ok(losses::acai_generator(tape, a))
            }
            Objective::MtD => {
                let a = gan_d(tape)?;
                let b = acai_c(tape)?;
                tape.add(a, b)
            }
            Objective::MtG => {
                let l = fs2(tape)?;
                let g = gan_g(tape)?;
                let fm = losses::feature_matching(tape, &nat, &fake)?;
                let fm = tape.scale(fm, FIXED_LAMBDA_FM);
                let a = interp_alpha(tape)?;
                let a = losses::acai_generator(tape, a);
                let a = tape.scale(a, losses::DEFAULT_LAMBDA_ACAI);
                let l = tape.add(l, g)?;
                let l = tape.add(l, fm)?;
                tape.add(l, a)
            }
        }
    }
}

impl GradCase for ModelCase {
    fn name(&self) -> &str {
        self.name
    }

    fn point(&self) -> Vec<Tensor> {
        self.set().iter().map(|p| p.value.clone()).collect()
    }

    fn eval(&self, x: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut gen = self.gen.clone();
        let mut disc = self.disc.clone();
        let mut tape = Tape::new();
        {
            let set = match self.target {
                Target::Gen => {
                    tape.freeze(discriminator::NAMESPACE);
                    &mut gen.params
                }
                Target::Disc => {
                    tape.freeze(generator::NAMESPACE);
                    &mut disc.params
                }
            };
            for (p, v) in set.iter_mut().zip(x) {
                p.value = v.clone();
            }
        }
        let loss = self.loss(&mut tape, &gen, &disc)?;
        let set = match self.target {
            Target::Gen => &mut gen.params,
            Target::Disc => &mut disc.params,
        };
        tape.backward(loss, &mut [set])?;
        Ok((tape.value(loss).item(), set.iter().map(|p| p.grad.clone()).collect()))
    }
}

/// Every objective of the training algorithm, differentiated with respect
/// to the parameters it updates.
pub fn objective_cases(seed: u64) -> Vec<Box<dyn GradCase>> {
    let (gen, disc) = tiny_models(seed);
    let fx = std::rc::Rc::new(fixture(seed));
    [
        ("eq1_fs2", Objective::Fs2, Target::Gen),
        ("eq2_gan_d", Objective::GanD, Target::Disc),
        ("eq3_gan_g", Objective::GanG, Target::Gen),
        ("eq4_feature_matching", Objective::Fm, Target::Gen),
        ("eq5_acai_critic", Objective::AcaiC, Target::Disc),
        ("acai_generator", Objective::AcaiG, Target::Gen),
        ("l_mt_d", Objective::MtD, Target::Disc),
        ("l_mt_g", Objective::MtG, Target::Gen),
    ]
    .into_iter()
    .map(|(name, objective, target)| {
        Box::new(ModelCase {
            name,
            objective,
            target,
            gen: gen.clone(),
            disc: disc.clone(),
            fx: fx.clone(),
        }) as Box<dyn GradCase>
    })
    .collect()
}

pub fn all_cases(seed: u64) -> Vec<Box<dyn GradCase>> {
    let mut v = primitive_cases(seed);
    v.extend(objective_cases(seed));
    v
}

/// Compares analytic and central-difference derivatives on up to
/// `per_tensor` sampled coordinates of every point tensor. `perturb` scales
/// the analytic gradient by `1 + 1e-2`, simulating a broken backward.
pub fn check(case: &dyn GradCase, per_tensor: usize, seed: u64, perturb: bool) -> Result<CheckResult> {
    let x0 = case.point();
    let (_, mut analytic) = case.eval(&x0)?;
    if perturb {
        for g in &mut analytic {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.0 + 1e-2);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_err, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
    let mut coords = 0;
    for (ti, t) in x0.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let mut x = x0.clone();
            let base = x[ti].data()[k];
            x[ti].data_mut()[k] = base + STEP;
            let up = case.eval(&x)?.0;
            x[ti].data_mut()[k] = base - STEP;
            let down = case.eval(&x)?.0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[ti].data()[k];
            max_err = max_err.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: case.name().to_string(),
        max_rel_error: max_err / max_a.max(max_n).max(1e-8),
        coordinates: coords,
    })
}

/// Runs every registered case; `perturb` names a case to sabotage.
pub fn run_suite(seed: u64, perturb: Option<&str>) -> Result<Vec<CheckResult>> {
    let cases = all_cases(seed);
    if let Some(p) = perturb {
        if !cases.iter().any(|c| c.name() == p) {
            return Err(crate::tensor::TensorError::InvalidShape {
                op: "gradcheck",
                detail: format!("no registered case named {p}"),
            });
        }
    }
    let n_prim = primitive_cases(seed).len();
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let per_tensor = if i < n_prim { 12 } else { 3 };
            check(c.as_ref(), per_tensor, seed ^ i as u64, perturb == Some(c.name()))
        })
        .collect()
}

pub fn case_names() -> Vec<String> {
    all_cases(0).iter().map(|c| c.name().to_string()).collect()
}
