//! Small parameterized building blocks shared by the generator and the
//! discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{same_padding, ParamId, ParamSet, Result, Tape, Tensor, Var, LEAKY_SLOPE};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// 1-D convolution with same-style padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = set.add(
            format!("{name}.weight"),
            uniform(rng, &[c_out, c_in, kernel], bound),
        );
        let bias = bias.then(|| set.add(format!("{name}.bias"), uniform(rng, &[c_out], bound)));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        same_padding(self.kernel)
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(set, self.weight);
        let b = self.bias.map(|b| tape.param(set, b));
        tape.conv1d(x, w, b, self.stride, self.padding())
    }

    pub fn forward_segments(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        x: Var,
        segs: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let w = tape.param(set, self.weight);
        let b = self.bias.map(|b| tape.param(set, b));
        tape.conv1d_segments(x, w, b, self.stride, self.padding(), segs)
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.kernel + if self.bias.is_some() { self.c_out } else { 0 }
    }
}

/// Normalization over the channel axis of a `[c, t]` sequence.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: set.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: set.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(set, self.gamma);
        let b = tape.param(set, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// `h <- norm(h + leaky(conv(h)))`, stride 1.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv1d,
    norm: LayerNorm,
}

impl ConvBlock {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv: Conv1d::new(set, rng, &format!("{name}.conv"), channels, channels, kernel, 1, true),
            norm: LayerNorm::new(set, &format!("{name}.norm"), channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var, segs: &[usize]) -> Result<Var> {
        let (y, _) = self.conv.forward_segments(tape, set, x, segs)?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        let y = tape.add(x, y)?;
        self.norm.forward(tape, set, y)
    }
}

/// Per-position scalar predictor: conv, leaky ReLU, norm, then a 1x1 conv
/// down to one channel. Used for durations, F0 and energy.
#[derive(Clone, Debug)]
pub struct ScalarPredictor {
    conv: Conv1d,
    norm: LayerNorm,
    out: Conv1d,
}

impl ScalarPredictor {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv: Conv1d::new(set, rng, &format!("{name}.conv"), c_in, hidden, kernel, 1, true),
            norm: LayerNorm::new(set, &format!("{name}.norm"), hidden),
            out: Conv1d::new(set, rng, &format!("{name}.out"), hidden, 1, 1, 1, true),
        }
    }

    /// `[c_in, t] -> [1, t]`
    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var, segs: &[usize]) -> Result<Var> {
        let (y, _) = self.conv.forward_segments(tape, set, x, segs)?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        let y = self.norm.forward(tape, set, y)?;
        self.out.forward(tape, set, y)
    }
}
