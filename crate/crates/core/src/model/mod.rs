//! Networks: the dual-branch reconstruction network and the fusion classifier.
//!
//! Parameters live in a [`ParamSet`] owned by each network; the layer structs
//! below only hold [`ParamId`] handles, so a forward pass borrows the set
//! immutably and the optimizer can take it mutably afterwards.

mod cfnet;
mod classifier;

pub use cfnet::{CfNet, CfNetOutput};
pub use classifier::{average_scales, Classifier, ClassifierConfig, BACKBONE_PREFIX};

use crate::error::{Error, Result};
use crate::ndgrad::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;

pub const STAGES: usize = 5;

/// Channel widths of the five stride-2 encoder stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; STAGES],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: [8, 16, 32, 64, 128] }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParam(format!(
                "encoder channels must be positive and strictly increasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.channels[STAGES - 1]
    }
}

fn uniform_init(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<f32> {
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Kaiming-uniform bound for relu layers.
fn kaiming(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(ps: &mut ParamSet<f32>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = ps.insert(format!("{name}.w"), uniform_init(&[fan_in, fan_out], kaiming(fan_in), rng));
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub(crate) fn forward(&self, tape: &mut Tape<f32>, ps: &ParamSet<f32>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    fn new(ps: &mut ParamSet<f32>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        let w = ps.insert(format!("{name}.w"), uniform_init(&[cout, cin, k, k], kaiming(cin * k * k), rng));
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, stride: 1, pad: k / 2, transposed: false }
    }

    /// 2x2 stride-2 transposed convolution (exact 2x upsampling).
    fn up(ps: &mut ParamSet<f32>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let w = ps.insert(format!("{name}.w"), uniform_init(&[cin, cout, 2, 2], kaiming(cin), rng));
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, stride: 2, pad: 0, transposed: true }
    }

    fn forward(&self, tape: &mut Tape<f32>, ps: &ParamSet<f32>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        if self.transposed {
            tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
        } else {
            tape.conv2d(x, w, Some(b), self.stride, self.pad)
        }
    }
}

/// Five stride-2 3x3 conv + relu stages producing `s0..s4`.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Conv>,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet<f32>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut cin = 1;
        let stages = (0..STAGES)
            .map(|i| {
                let mut c = Conv::new(ps, &format!("{prefix}.stage{i}"), cin, cfg.channels[i], 3, rng);
                c.stride = 2;
                cin = cfg.channels[i];
                c
            })
            .collect();
        Encoder { stages }
    }

    /// `x` is `(N, 1, H, W)` with `H` and `W` divisible by 32.
    pub fn forward(&self, tape: &mut Tape<f32>, ps: &ParamSet<f32>, x: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape("encoder", format!("expected (N, 1, H, W), got {shape:?}")));
        }
        let factor = 1 << STAGES;
        if shape[2] % factor != 0 || shape[3] % factor != 0 {
            return Err(Error::shape(
                "encoder",
                format!("spatial dims {}x{} not divisible by {factor}", shape[2], shape[3]),
            ));
        }
        let mut h = x;
        let mut out = Vec::with_capacity(STAGES);
        for s in &self.stages {
            let y = s.forward(tape, ps, h)?;
            h = tape.relu(y)?;
            out.push(h);
        }
        Ok(out)
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| [s.w, s.b]).collect()
    }
}

/// Single-head scaled dot-product attention over bottleneck positions.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    channels: usize,
}

/// Fused features and the `(N, hw, hw)` attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub fused: Var,
    pub weights: Var,
}

impl Attention {
    pub fn new(ps: &mut ParamSet<f32>, prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / channels as f64).sqrt();
        let mut proj = |n: &str| ps.insert(format!("{prefix}.{n}"), uniform_init(&[channels, channels], bound, rng));
        Attention { wq: proj("wq"), wk: proj("wk"), wv: proj("wv"), wo: proj("wo"), channels }
    }

    /// Queries from `query_src`, keys and values from `kv_src`, both
    /// `(N, C, h, w)`; returns `query_src + W_O(softmax(QK^T / sqrt C) V)`.
    pub fn forward(&self, tape: &mut Tape<f32>, ps: &ParamSet<f32>, query_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let shape = tape.shape(query_src).to_vec();
        if shape != tape.shape(kv_src) || shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "cross-attention",
                format!(
                    "query {shape:?} and key/value {:?} must match (N, {}, h, w)",
                    tape.shape(kv_src),
                    self.channels
                ),
            ));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let tokens = |tape: &mut Tape<f32>, f: Var| -> Result<Var> {
            let f = tape.reshape(f, &[n, c, hw])?;
            tape.transpose(f)
        };
        let ts = tokens(tape, query_src)?;
        let tt = if kv_src == query_src { ts } else { tokens(tape, kv_src)? };
        let (wq, wk, wv, wo) = (
            tape.param(ps, self.wq),
            tape.param(ps, self.wk),
            tape.param(ps, self.wv),
            tape.param(ps, self.wo),
        );
        let q = tape.matmul(ts, wq)?;
        let k = tape.matmul(tt, wk)?;
        let v = tape.matmul(tt, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let mixed = tape.matmul(weights, v)?;
        let out = tape.matmul(mixed, wo)?;
        let out = tape.transpose(out)?;
        let out = tape.reshape(out, &shape)?;
        let fused = tape.add(query_src, out)?;
        Ok(AttentionOutput { fused, weights })
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Five 2x upsampling stages with skip concatenation, then a 3x3 conv to
/// one channel and a sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<Conv>,
    convs: Vec<Conv>,
    out: Conv,
}

impl Decoder {
    pub fn new(ps: &mut ParamSet<f32>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let ch = cfg.channels;
        let mut cin = ch[STAGES - 1];
        let (mut ups, mut convs) = (Vec::new(), Vec::new());
        for j in 0..STAGES {
            // Stage j restores the resolution of s_{3-j}; the last stage has no skip.
            let (cup, skip) = if j + 1 < STAGES { (ch[STAGES - 2 - j], ch[STAGES - 2 - j]) } else { (ch[0], 0) };
            ups.push(Conv::up(ps, &format!("{prefix}.up{j}"), cin, cup, rng));
            convs.push(Conv::new(ps, &format!("{prefix}.conv{j}"), cup + skip, cup, 3, rng));
            cin = cup;
        }
        let out = Conv::new(ps, &format!("{prefix}.out"), cin, 1, 3, rng);
        Decoder { ups, convs, out }
    }

    /// `skips` are `s0..s3` of the matching encoder.
    pub fn forward(&self, tape: &mut Tape<f32>, ps: &ParamSet<f32>, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != STAGES - 1 {
            return Err(Error::shape("decoder", format!("expected {} skips, got {}", STAGES - 1, skips.len())));
        }
        let mut h = bottleneck;
        for j in 0..STAGES {
            h = self.ups[j].forward(tape, ps, h)?;
            if j + 1 < STAGES {
                let s = skips[STAGES - 2 - j];
                let (hs, ss) = (tape.shape(h), tape.shape(s));
                if hs[0] != ss[0] || hs[2..] != ss[2..] {
                    return Err(Error::shape(
                        "decoder",
                        format!("skip s{} has shape {ss:?}, upsampled features {hs:?}", STAGES - 2 - j),
                    ));
                }
                h = tape.concat(&[h, s], 1)?;
            }
            let y = self.convs[j].forward(tape, ps, h)?;
            h = tape.relu(y)?;
        }
        let y = self.out.forward(tape, ps, h)?;
        tape.sigmoid(y)
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        self.ups.iter().chain(&self.convs).chain([&self.out]).flat_map(|c| [c.w, c.b]).collect()
    }
}

/// Adds a `(N, 1, H, W)` batch axis layout to `[H, W]` or `(N, H, W)` images.
pub fn as_batch(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = x.shape();
    let shape = match s.len() {
        2 => vec![1, 1, s[0], s[1]],
        3 => vec![s[0], 1, s[1], s[2]],
        4 if s[1] == 1 => s.to_vec(),
        _ => return Err(Error::shape("model input", format!("expected image or batch, got {s:?}"))),
    };
    x.clone().reshape(&shape)
}
