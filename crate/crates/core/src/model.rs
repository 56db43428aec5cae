//! Two-head fully convolutional network.
//!
//! A UNet-style backbone (conv blocks, 2x2 max pooling, nearest upsampling
//! followed by a conv, skip concatenation) feeds two heads. Each head has
//! two 3x3 conv blocks and a 3x3 output conv with sigmoid activation: one
//! foreground channel and `layers` layering channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::Prediction;
use crate::params::ParameterSet;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of pooling levels (2, 3 or 4).
    pub depth: usize,
    pub base_channels: usize,
    /// Number of layering channels `N`.
    pub layers: usize,
    /// Width of the two conv blocks in each head.
    pub head_channels: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            layers: 4,
            head_channels: 32,
            input_channels: 1,
        }
    }
}

/// Shape of one 3x3 convolution in the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Followed by leaky ReLU and channel normalization.
    pub normalized: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} not in 2..=4", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        if self.layers < 2 {
            return Err(Error::Config("layers must be >= 2".into()));
        }
        if self.head_channels == 0 || self.input_channels != 1 {
            return Err(Error::Config("head_channels must be > 0 and input_channels 1".into()));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every convolution in forward order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let block = |name: String, i: usize, o: usize| ConvSpec {
            name,
            in_channels: i,
            out_channels: o,
            normalized: true,
        };
        let mut v = Vec::new();
        let mut prev = self.input_channels;
        for l in 0..self.depth {
            let c = self.level_channels(l);
            v.push(block(format!("enc{l}.a"), prev, c));
            v.push(block(format!("enc{l}.b"), c, c));
            prev = c;
        }
        let cb = self.level_channels(self.depth);
        v.push(block("mid.a".into(), prev, cb));
        v.push(block("mid.b".into(), cb, cb));
        prev = cb;
        for l in (0..self.depth).rev() {
            let c = self.level_channels(l);
            v.push(block(format!("dec{l}.up"), prev, c));
            v.push(block(format!("dec{l}.a"), 2 * c, c));
            v.push(block(format!("dec{l}.b"), c, c));
            prev = c;
        }
        let h = self.head_channels;
        for (head, out) in [("fg", 1), ("layer", self.layers)] {
            v.push(block(format!("{head}.a"), prev, h));
            v.push(block(format!("{head}.b"), h, h));
            v.push(ConvSpec {
                name: format!("{head}.out"),
                in_channels: h,
                out_channels: out,
                normalized: false,
            });
        }
        v
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| {
                let conv = 9 * c.in_channels * c.out_channels + c.out_channels;
                conv + if c.normalized { 2 * c.out_channels } else { 0 }
            })
            .sum()
    }
}

/// Kernels drawn from `N(0, 2 / fan_in)`, zero biases, unit norm scale and
/// zero shift. Deterministic in `seed`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParameterSet<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for c in config.convs() {
        let fan_in = (9 * c.in_channels) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[c.out_channels, c.in_channels, 3, 3], |_| dist.sample(&mut rng) as f32);
        params.insert(format!("{}.weight", c.name), w)?;
        params.insert(format!("{}.bias", c.name), Tensor::zeros(&[c.out_channels]))?;
        if c.normalized {
            params.insert(format!("{}.scale", c.name), Tensor::full(&[c.out_channels], 1.0))?;
            params.insert(format!("{}.shift", c.name), Tensor::zeros(&[c.out_channels]))?;
        }
    }
    Ok(params)
}

fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

fn conv_block<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, var(vars, &format!("{name}.weight"))?, var(vars, &format!("{name}.bias"))?)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    tape.channel_norm(y, var(vars, &format!("{name}.scale"))?, var(vars, &format!("{name}.shift"))?)
}

fn out_conv<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, var(vars, &format!("{name}.weight"))?, var(vars, &format!("{name}.bias"))?)?;
    tape.sigmoid(y)
}

/// Tape handles of the two sigmoid outputs: `[1, H, W]` and `[N, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub foreground: Var,
    pub layering: Var,
}

/// Records the forward pass of `image` (`[H, W]`) on `tape`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &NetworkConfig,
    image: &Tensor<T>,
) -> Result<OutputVars> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(crate::error::shape_err("forward", format!("image shape {s:?}"))),
    };
    let div = config.divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            required: div,
        });
    }
    let mut x = tape.input(image.clone().reshape(&[1, h, w])?)?;
    let mut skips = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        x = conv_block(tape, vars, &format!("enc{l}.a"), x)?;
        x = conv_block(tape, vars, &format!("enc{l}.b"), x)?;
        skips.push(x);
        x = tape.maxpool2(x)?;
    }
    x = conv_block(tape, vars, "mid.a", x)?;
    x = conv_block(tape, vars, "mid.b", x)?;
    for l in (0..config.depth).rev() {
        let up = tape.upsample2(x)?;
        let up = conv_block(tape, vars, &format!("dec{l}.up"), up)?;
        let cat = tape.concat(&[skips[l], up])?;
        x = conv_block(tape, vars, &format!("dec{l}.a"), cat)?;
        x = conv_block(tape, vars, &format!("dec{l}.b"), x)?;
    }
    let mut heads = [x, x];
    for (slot, head) in heads.iter_mut().zip(["fg", "layer"]) {
        let y = conv_block(tape, vars, &format!("{head}.a"), x)?;
        let y = conv_block(tape, vars, &format!("{head}.b"), y)?;
        *slot = out_conv(tape, vars, &format!("{head}.out"), y)?;
    }
    Ok(OutputVars {
        foreground: heads[0],
        layering: heads[1],
    })
}

/// Converts channel-major tape outputs into a [`Prediction`].
pub fn prediction_from_outputs<T: Scalar>(fg: &Tensor<T>, layering: &Tensor<T>) -> Result<Prediction> {
    let (n, h, w) = layering.chw();
    let foreground = Tensor::new(vec![h, w], fg.data().iter().map(|v| v.as_f64()).collect())?;
    let src = layering.data();
    let mut lay = Vec::with_capacity(n * h * w);
    for p in 0..h * w {
        for k in 0..n {
            lay.push(src[k * h * w + p].as_f64());
        }
    }
    Prediction::new(foreground, Tensor::new(vec![h, w, n], lay)?)
}

/// Converts a `[H, W, N]` gradient into the `[N, H, W]` layout of the tape.
pub fn channel_major<T: Scalar>(hwn: &Tensor<f64>) -> Tensor<T> {
    let s = hwn.shape();
    let (h, w, n) = (s[0], s[1], s[2]);
    let d = hwn.data();
    Tensor::from_fn(&[n, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        T::of(d[p * n + k])
    })
}

/// Inference forward pass.
pub fn forward<T: Scalar>(image: &Tensor<T>, params: &ParameterSet<T>, config: &NetworkConfig) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = tape.bind(params)?;
    let out = forward_on_tape(&mut tape, &vars, config, image)?;
    prediction_from_outputs(tape.value(out.foreground), tape.value(out.layering))
}
