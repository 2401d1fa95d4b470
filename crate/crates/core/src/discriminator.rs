//! Multi-task discriminator: a shared convolutional trunk feeding a
//! speaker-conditional true/fake head, an unconditional true/fake head, and
//! an interpolation critic that regresses the mixing coefficient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::Conv1d;
use crate::tensor::{conv1d_out_len, ParamSet, Result, Tape, TensorError, Var, LEAKY_SLOPE};

pub const NAMESPACE: &str = "disc";

/// One `Conv1D(channels, kernel, stride)` layer description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

const fn layer(channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        channels,
        kernel,
        stride,
    }
}

pub const SHARED_LAYERS: [LayerSpec; 3] = [layer(64, 3, 1), layer(128, 5, 2), layer(512, 5, 2)];
pub const HEAD_LAYERS: [LayerSpec; 2] = [layer(128, 5, 2), layer(1, 3, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    #[serde(default = "default_mels")]
    pub n_mels: usize,
    #[serde(default = "default_shared")]
    pub shared: Vec<LayerSpec>,
    #[serde(default = "default_head")]
    pub head: Vec<LayerSpec>,
}

fn default_mels() -> usize {
    crate::N_MELS
}
fn default_shared() -> Vec<LayerSpec> {
    SHARED_LAYERS.to_vec()
}
fn default_head() -> Vec<LayerSpec> {
    HEAD_LAYERS.to_vec()
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_mels: default_mels(),
            shared: default_shared(),
            head: default_head(),
        }
    }
}

impl DiscriminatorConfig {
    /// Shortest input the trunk accepts.
    pub fn min_frames(&self) -> usize {
        self.shared.iter().map(|l| l.kernel).max().unwrap_or(1)
    }
}

/// Scores for a packed batch plus the trunk activations used by feature
/// matching. Each score is a `[1, batch]` row, one entry per utterance.
#[derive(Clone, Debug)]
pub struct DiscOutputs {
    pub t_c: Var,
    pub t_u: Var,
    pub alpha_hat: Var,
    pub trunk: Trunk,
}

/// Output of the shared trunk for a packed batch.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub h_s: Var,
    /// Post-activation maps of every shared layer; the last one is `h_s`.
    pub features: Vec<Var>,
    /// Per-utterance time lengths of each entry of `features`.
    pub segments: Vec<Vec<usize>>,
}

impl Trunk {
    pub fn h_segments(&self) -> &[usize] {
        self.segments.last().expect("trunk has at least one layer")
    }
}

#[derive(Clone, Debug)]
struct Head {
    layers: Vec<Conv1d>,
}

impl Head {
    fn forward(&self, tape: &mut Tape, set: &ParamSet, mut x: Var, segs: &[usize]) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut segs = segs.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            (x, segs) = layer.forward_segments(tape, set, x, &segs)?;
            x = if i == last {
                tape.sigmoid(x)
            } else {
                tape.leaky_relu(x, LEAKY_SLOPE)
            };
        }
        // per-frame scores pooled over time
        tape.segment_mean(x, &segs)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet,
    shared: Vec<Conv1d>,
    cond_proj: Conv1d,
    conditional: Head,
    unconditional: Head,
    critic: Head,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, d_z: usize, seed: u64) -> Self {
        assert!(!cfg.shared.is_empty() && !cfg.head.is_empty());
        assert_eq!(cfg.head.last().unwrap().channels, 1, "heads must end in one channel");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(NAMESPACE);
        let mut c_in = cfg.n_mels;
        let mut shared = Vec::new();
        for (i, l) in cfg.shared.iter().enumerate() {
            shared.push(Conv1d::new(
                &mut params,
                &mut rng,
                &format!("shared.{i}"),
                c_in,
                l.channels,
                l.kernel,
                l.stride,
                true,
            ));
            c_in = l.channels;
        }
        let trunk_width = c_in;
        let cond_proj = Conv1d::new(
            &mut params,
            &mut rng,
            "conditional.z_proj",
            d_z,
            trunk_width,
            1,
            1,
            false,
        );
        let mut head = |name: &str, params: &mut ParamSet| {
            let mut c = trunk_width;
            let layers = cfg
                .head
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let conv = Conv1d::new(
                        params,
                        &mut rng,
                        &format!("{name}.{i}"),
                        c,
                        l.channels,
                        l.kernel,
                        l.stride,
                        true,
                    );
                    c = l.channels;
                    conv
                })
                .collect();
            Head { layers }
        };
        let conditional = head("conditional", &mut params);
        let unconditional = head("unconditional", &mut params);
        let critic = head("critic", &mut params);
        Self {
            cfg,
            params,
            shared,
            cond_proj,
            conditional,
            unconditional,
            critic,
        }
    }

    pub fn d_z(&self) -> usize {
        self.cond_proj.c_in
    }

    /// Packed `mel[n_mels, sum(segs)]` through the shared layers.
    pub fn shared_forward(&self, tape: &mut Tape, mel: Var, segs: &[usize]) -> Result<Trunk> {
        let c = tape.value(mel).dims2()?.0;
        if c != self.cfg.n_mels {
            return Err(TensorError::InvalidShape {
                op: "discriminator",
                detail: format!("expected {} mel channels, got {c}", self.cfg.n_mels),
            });
        }
        if let Some(&t) = segs.iter().find(|&&t| t < self.cfg.min_frames()) {
            return Err(TensorError::InvalidShape {
                op: "discriminator",
                detail: format!("input of {t} frames is shorter than {}", self.cfg.min_frames()),
            });
        }
        let mut x = mel;
        let mut cur = segs.to_vec();
        let mut features = Vec::with_capacity(self.shared.len());
        let mut segments = Vec::with_capacity(self.shared.len());
        for layer in &self.shared {
            (x, cur) = layer.forward_segments(tape, &self.params, x, &cur)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            features.push(x);
            segments.push(cur.clone());
        }
        Ok(Trunk {
            h_s: x,
            features,
            segments,
        })
    }

    /// `z` holds one `d_z` column per utterance.
    pub fn conditional_head(&self, tape: &mut Tape, trunk: &Trunk, z: Var) -> Result<Var> {
        let (zd, n) = tape.value(z).dims2()?;
        if zd != self.d_z() || n != trunk.h_segments().len() {
            return Err(TensorError::InvalidShape {
                op: "conditional_head",
                detail: format!(
                    "speaker embeddings are {zd}x{n}, expected {}x{}",
                    self.d_z(),
                    trunk.h_segments().len()
                ),
            });
        }
        let proj = self.cond_proj.forward(tape, &self.params, z)?;
        let x = tape.add_segments(trunk.h_s, proj, trunk.h_segments())?;
        self.conditional
            .forward(tape, &self.params, x, trunk.h_segments())
    }

    pub fn unconditional_head(&self, tape: &mut Tape, trunk: &Trunk) -> Result<Var> {
        self.unconditional
            .forward(tape, &self.params, trunk.h_s, trunk.h_segments())
    }

    pub fn critic_head(&self, tape: &mut Tape, trunk: &Trunk) -> Result<Var> {
        self.critic
            .forward(tape, &self.params, trunk.h_s, trunk.h_segments())
    }

    pub fn discriminate(&self, tape: &mut Tape, mel: Var, segs: &[usize], z: Var) -> Result<DiscOutputs> {
        let trunk = self.shared_forward(tape, mel, segs)?;
        Ok(DiscOutputs {
            t_c: self.conditional_head(tape, &trunk, z)?,
            t_u: self.unconditional_head(tape, &trunk)?,
            alpha_hat: self.critic_head(tape, &trunk)?,
            trunk,
        })
    }

    /// Time lengths of the trunk activations for a `frames`-long input.
    pub fn feature_lengths(&self, frames: usize) -> Vec<usize> {
        let mut t = frames;
        self.shared
            .iter()
            .map(|l| {
                t = conv1d_out_len(t, l.kernel, l.stride, l.padding()).unwrap_or(0);
                t
            })
            .collect()
    }

    /// Sub-module a parameter belongs to: `shared`, `conditional`,
    /// `unconditional` or `critic`.
    pub fn module_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn input(t: usize) -> Tensor {
        let data = (0..80 * t).map(|i| ((i * 7919) % 113) as f64 / 56.0 - 1.0).collect();
        Tensor::new(vec![80, t], data).unwrap()
    }

    #[test]
    fn trunk_widths_for_eighty_frames() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 8, 1);
        let mut tape = Tape::new();
        let x = tape.constant(input(80));
        let trunk = d.shared_forward(&mut tape, x, &[80]).unwrap();
        let shapes: Vec<_> = trunk.features.iter().map(|&f| tape.shape(f).to_vec()).collect();
        assert_eq!(shapes, vec![vec![64, 80], vec![128, 40], vec![512, 20]]);
        assert_eq!(d.feature_lengths(80), vec![80, 40, 20]);
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 8, 2);
        let mut tape = Tape::new();
        let x = tape.constant(input(17));
        let z = tape.constant(Tensor::column(vec![0.3; 8]));
        let out = d.discriminate(&mut tape, x, &[17], z).unwrap();
        for v in [out.t_c, out.t_u, out.alpha_hat] {
            let s = tape.value(v).item();
            assert!(s > 0.0 && s < 1.0);
        }
        assert_eq!(out.trunk.features.len(), 3);
    }

    #[test]
    fn packed_batch_matches_separate_calls() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 2, 4);
        let (a, b) = (input(9), input(14).map(|v| -0.5 * v));
        let mut packed = Vec::new();
        for ch in 0..80 {
            packed.extend_from_slice(&a.data()[ch * 9..ch * 9 + 9]);
            packed.extend_from_slice(&b.data()[ch * 14..ch * 14 + 14]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![80, 23], packed).unwrap());
        let z = tape.constant(Tensor::new(vec![2, 2], vec![0.1, 0.7, -0.4, 0.2]).unwrap());
        let both = d.discriminate(&mut tape, x, &[9, 14], z).unwrap();
        for (i, (mel, t, zc)) in [(a, 9, [0.1, -0.4]), (b, 14, [0.7, 0.2])].into_iter().enumerate() {
            let x = tape.constant(mel);
            let z = tape.constant(Tensor::column(zc.to_vec()));
            let one = d.discriminate(&mut tape, x, &[t], z).unwrap();
            for (p, s) in [(both.t_c, one.t_c), (both.t_u, one.t_u), (both.alpha_hat, one.alpha_hat)] {
                let diff = tape.value(p).data()[i] - tape.value(s).item();
                assert!(diff.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_head_depends_on_z() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(input(12));
        let trunk = d.shared_forward(&mut tape, x, &[12]).unwrap();
        let z1 = tape.constant(Tensor::column(vec![1.0, 0.0, 0.0, 0.0]));
        let z2 = tape.constant(Tensor::column(vec![0.0, 0.0, 0.0, 1.0]));
        let a = d.conditional_head(&mut tape, &trunk, z1).unwrap();
        let b = d.conditional_head(&mut tape, &trunk, z2).unwrap();
        assert_ne!(tape.value(a).item(), tape.value(b).item());
        let bad = tape.constant(Tensor::column(vec![0.0; 3]));
        assert!(d.conditional_head(&mut tape, &trunk, bad).is_err());
    }

    #[test]
    fn rejects_too_short_input() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(input(4));
        assert!(d.shared_forward(&mut tape, x, &[4]).is_err());
    }
}
