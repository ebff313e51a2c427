//! Static (RGB) and dynamic (two frames + static map) saliency networks.
//!
//! Both share one topology: a five-block VGG-style encoder (3×3 conv + ReLU
//! layers, then 2×2 max pooling), an optional stack of non-local blocks
//! after one encoder block, a five-stage transposed-convolution decoder
//! with skip concatenation, and a 1×1 sigmoid head:
//!
//! ```text
//! Y_b   = pool(block_b(Y_{b-1}))            b = 1..5, NL blocks applied to Y_k
//! O_5   = relu(convᵀ(Y_5))
//! O_l   = relu(convᵀ(concat(O_{l+1}, Y_l))) l = 4..1
//! S     = sigmoid(conv1×1(O_1))
//! ```

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::metrics::SaliencyMap;
use crate::nonlocal::{self, default_embed_width, EmbedActivation, NonLocalParams, NonLocalVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const ENCODER_BLOCKS: usize = 5;
pub const DECODER_STAGES: usize = 5;
/// Spatial reduction of the encoder; inputs are padded to multiples of this.
pub const DOWNSAMPLE: usize = 1 << ENCODER_BLOCKS;
pub const MAX_NL_COUNT: usize = 5;

pub const STATIC_INPUT_CHANNELS: usize = 3;
pub const DYNAMIC_INPUT_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub convs: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub encoder_blocks: Vec<EncoderBlock>,
    pub nl_after_block: usize,
    pub nl_count: usize,
    /// Non-local embedding width; half the block's channels when `None`.
    pub nl_embed_width: Option<usize>,
    pub embed_activation: EmbedActivation,
    pub decoder_kernel: usize,
}

impl NetworkSpec {
    pub const DESK_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
    pub const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

    pub fn static_default() -> Self {
        NetworkSpec {
            input_channels: STATIC_INPUT_CHANNELS,
            encoder_blocks: Self::blocks(&Self::DESK_WIDTHS, 2),
            nl_after_block: 5,
            nl_count: 3,
            nl_embed_width: None,
            embed_activation: EmbedActivation::Linear,
            decoder_kernel: 4,
        }
    }

    pub fn dynamic_default() -> Self {
        NetworkSpec {
            input_channels: DYNAMIC_INPUT_CHANNELS,
            ..Self::static_default()
        }
    }

    pub fn blocks(widths: &[usize], convs: usize) -> Vec<EncoderBlock> {
        widths.iter().map(|&width| EncoderBlock { convs, width }).collect()
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        let convs = self.encoder_blocks.first().map_or(2, |b| b.convs);
        self.encoder_blocks = Self::blocks(widths, convs);
        self
    }

    pub fn with_nl(mut self, after_block: usize, count: usize) -> Self {
        self.nl_after_block = after_block;
        self.nl_count = count;
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.encoder_blocks.iter().map(|b| b.width).collect()
    }

    pub fn nl_channels(&self) -> usize {
        self.encoder_blocks[self.nl_after_block - 1].width
    }

    pub fn nl_embed(&self) -> usize {
        self.nl_embed_width.unwrap_or_else(|| default_embed_width(self.nl_channels()))
    }

    pub fn validate(&self) -> Result<()> {
        if ![STATIC_INPUT_CHANNELS, DYNAMIC_INPUT_CHANNELS].contains(&self.input_channels) {
            return Err(Error::invalid(format!(
                "input_channels must be 3 or 7, got {}",
                self.input_channels
            )));
        }
        if self.encoder_blocks.len() != ENCODER_BLOCKS {
            return Err(Error::invalid(format!(
                "encoder needs {ENCODER_BLOCKS} blocks, got {}",
                self.encoder_blocks.len()
            )));
        }
        if self.encoder_blocks.iter().any(|b| b.convs == 0 || b.width == 0) {
            return Err(Error::invalid("encoder blocks need at least one conv and a nonzero width"));
        }
        if !(3..=5).contains(&self.nl_after_block) {
            return Err(Error::invalid(format!(
                "nl_after_block must be 3, 4 or 5, got {}",
                self.nl_after_block
            )));
        }
        if self.nl_count > MAX_NL_COUNT {
            return Err(Error::invalid(format!(
                "nl_count must be at most {MAX_NL_COUNT}, got {}",
                self.nl_count
            )));
        }
        if self.nl_embed_width == Some(0) {
            return Err(Error::invalid("nl_embed_width must be positive"));
        }
        if self.decoder_kernel < 2 {
            return Err(Error::invalid("decoder_kernel must be at least the upsampling stride 2"));
        }
        Ok(())
    }

    /// Spatial size the network actually runs at for an `h × w` input.
    pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(DOWNSAMPLE) * DOWNSAMPLE, w.div_ceil(DOWNSAMPLE) * DOWNSAMPLE)
    }
}

/// Named parameters in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }
}

/// Fan-in scaled uniform init for a `k_h×k_w×c_in×c_out` kernel.
pub fn he_uniform<R: Rng + ?Sized>(shape: impl Into<Shape>, rng: &mut R) -> Tensor {
    let shape = shape.into();
    he_uniform_fan(shape, shape.n * shape.h * shape.w, rng)
}

pub fn he_uniform_fan<R: Rng + ?Sized>(shape: impl Into<Shape>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub fn enc_name(block: usize, conv: usize, part: &str) -> String {
    format!("enc{block}.conv{conv}.{part}")
}

pub fn nl_name(n: usize, part: &str) -> String {
    format!("nl{n}.{part}")
}

pub fn dec_name(stage: usize, part: &str) -> String {
    format!("dec{stage}.{part}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamStore,
}

impl Network {
    /// Builds a network with freshly initialized parameters.
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut params = ParamStore::default();

        let mut c_in = spec.input_channels;
        for (b, block) in spec.encoder_blocks.iter().enumerate() {
            for i in 1..=block.convs {
                params.insert(enc_name(b + 1, i, "w"), he_uniform([3, 3, c_in, block.width], rng))?;
                params.insert(enc_name(b + 1, i, "b"), Tensor::zeros([1, 1, 1, block.width]))?;
                c_in = block.width;
            }
        }

        let (c, ce) = (spec.nl_channels(), spec.nl_embed());
        for n in 1..=spec.nl_count {
            let p = NonLocalParams::init(c, ce, spec.embed_activation, rng);
            for (part, t) in p.tensors() {
                params.insert(nl_name(n, part), t.clone())?;
            }
        }

        let k = spec.decoder_kernel;
        // Taps reaching one output of a stride-2 transposed conv.
        let taps = (k / 2) * (k / 2);
        for stage in (1..=DECODER_STAGES).rev() {
            let (d_in, d_out) = decoder_channels(&widths, stage);
            params.insert(dec_name(stage, "w"), he_uniform_fan([k, k, d_out, d_in], d_in * taps, rng))?;
            params.insert(dec_name(stage, "b"), Tensor::zeros([1, 1, 1, d_out]))?;
        }

        params.insert("head.w", he_uniform([1, 1, widths[0], 1], rng))?;
        params.insert("head.b", Tensor::zeros([1, 1, 1, 1]))?;
        Ok(Network { spec, params })
    }

    pub fn build_static<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.input_channels != STATIC_INPUT_CHANNELS {
            return Err(Error::invalid(format!(
                "static network takes 3 input channels, spec has {}",
                spec.input_channels
            )));
        }
        Network::build(spec, rng)
    }

    pub fn build_dynamic<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.input_channels != DYNAMIC_INPUT_CHANNELS {
            return Err(Error::invalid(format!(
                "dynamic network takes 7 input channels, spec has {}",
                spec.input_channels
            )));
        }
        Network::build(spec, rng)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of non-local parameter groups.
    pub fn nl_groups(&self) -> usize {
        (1..)
            .take_while(|&n| self.params.get(&nl_name(n, "theta")).is_some())
            .count()
    }

    pub fn nl_params(&self, n: usize) -> Option<NonLocalParams> {
        let get = |part| self.params.get(&nl_name(n, part)).cloned();
        Some(NonLocalParams {
            w_theta: get("theta")?,
            w_phi: get("phi")?,
            w_g: get("g")?,
            w_z: get("z")?,
            embed_activation: self.spec.embed_activation,
        })
    }

    /// Sets every non-local `W_z` to zero, turning each block into the identity.
    pub fn zero_nl_output_projections(&mut self) {
        for n in 1..=self.nl_groups() {
            if let Some(t) = self.params.get_mut(&nl_name(n, "z")) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Replaces parameters from weight-file entries. Every parameter must be
    /// present with a matching shape; unknown entries are rejected.
    pub fn load_weights(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        let mut staged = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            let i = self.params.position(&name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                msg: "not a parameter of this network".into(),
            })?;
            let expect = self.params.entries[i].1.shape();
            if t.shape() != expect {
                return Err(Error::Parameter {
                    name,
                    msg: format!("shape {} does not match expected {expect}", t.shape()),
                });
            }
            seen[i] = true;
            staged.push((i, t));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Parameter {
                name: self.params.entries[i].0.clone(),
                msg: "missing from weight file".into(),
            });
        }
        for (i, t) in staged {
            self.params.entries[i].1 = t;
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<(String, Tensor)> {
        self.params.to_entries()
    }

    /// Records all parameters on `tape`, in store order.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass for an `1×h×w×C` input; the input is
    /// replicate-padded to a multiple of 32 and the output cropped back.
    /// Returns the `1×h×w×1` probability map.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: &Tensor, vars: &[Var]) -> Result<Var> {
        let s = input.shape();
        if s.c != self.spec.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {s}",
                self.spec.input_channels
            )));
        }
        if s.n != 1 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!("network input must be 1×h×w×C, got {s}")));
        }
        let (ph, pw) = NetworkSpec::padded_size(s.h, s.w);
        let x = if (ph, pw) == (s.h, s.w) {
            tape.constant(input.clone())
        } else {
            tape.constant(input.pad_replicate(ph, pw)?)
        };
        let p = |name: &str| -> Var { vars[self.params.position(name).expect("parameter recorded")] };

        let mut skips = Vec::with_capacity(ENCODER_BLOCKS);
        let mut h = x;
        for (b, block) in self.spec.encoder_blocks.iter().enumerate() {
            for i in 1..=block.convs {
                let w = p(&enc_name(b + 1, i, "w"));
                let bias = p(&enc_name(b + 1, i, "b"));
                let conv = tape.conv2d(h, w, Some(bias), 1, Padding::Same)?;
                h = tape.relu(conv);
            }
            h = tape.maxpool2d(h, 2)?;
            if b + 1 == self.spec.nl_after_block {
                for n in 1..=self.spec.nl_count {
                    let nv = NonLocalVars {
                        w_theta: p(&nl_name(n, "theta")),
                        w_phi: p(&nl_name(n, "phi")),
                        w_g: p(&nl_name(n, "g")),
                        w_z: p(&nl_name(n, "z")),
                        embed_activation: self.spec.embed_activation,
                    };
                    h = nonlocal::block(tape, h, &nv)?;
                }
            }
            skips.push(h);
        }

        let mut o = skips[ENCODER_BLOCKS - 1];
        for stage in (1..=DECODER_STAGES).rev() {
            let inp = if stage == DECODER_STAGES {
                o
            } else {
                tape.concat_channels(&[o, skips[stage - 1]])?
            };
            let up = tape.conv2d_transpose(inp, p(&dec_name(stage, "w")), Some(p(&dec_name(stage, "b"))), 2)?;
            o = tape.relu(up);
        }

        let logits = tape.conv2d(o, p("head.w"), Some(p("head.b")), 1, Padding::Same)?;
        let out = tape.sigmoid(logits);
        if (ph, pw) == (s.h, s.w) {
            Ok(out)
        } else {
            tape.crop(out, s.h, s.w)
        }
    }

    /// Inference on an already assembled input tensor.
    pub fn predict(&self, input: &Tensor) -> Result<SaliencyMap> {
        let mut tape = Tape::new();
        let vars = self.record_params(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, input, &vars)?;
        let t = tape.value(out);
        let s = t.shape();
        // keep emitted values strictly inside (0, 1) even when the sigmoid saturates
        let values = t
            .data()
            .iter()
            .map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
            .collect();
        SaliencyMap::new(s.h, s.w, values)
    }
}

/// `(input, output)` channels of decoder stage `stage` (5 = deepest).
fn decoder_channels(widths: &[usize], stage: usize) -> (usize, usize) {
    let out = widths[stage.saturating_sub(2)];
    let d_in = if stage == DECODER_STAGES {
        widths[ENCODER_BLOCKS - 1]
    } else {
        // O_{stage+1} has widths[stage-1] channels, Y_stage too.
        2 * widths[stage - 1]
    };
    (d_in, out)
}

pub fn build_static_net<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Network> {
    Network::build_static(spec, rng)
}

pub fn build_dynamic_net<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Network> {
    Network::build_dynamic(spec, rng)
}

/// Static saliency of one RGB frame.
pub fn static_forward(net: &Network, frame: &Tensor) -> Result<SaliencyMap> {
    if net.spec().input_channels != STATIC_INPUT_CHANNELS || frame.shape().c != STATIC_INPUT_CHANNELS {
        return Err(Error::shape(format!(
            "static forward needs a 3-channel network and frame, got {}-channel network and {}",
            net.spec().input_channels,
            frame.shape()
        )));
    }
    net.predict(frame)
}

/// The 7-channel dynamic input `(I_t, I_{t+1}, S_t)`.
pub fn dynamic_input(frame_t: &Tensor, frame_t1: &Tensor, static_map: &SaliencyMap) -> Result<Tensor> {
    let (a, b) = (frame_t.shape(), frame_t1.shape());
    if a != b || a.c != 3 || a.n != 1 {
        return Err(Error::shape(format!("consecutive frames {a} and {b} must be equal 1×h×w×3")));
    }
    if (static_map.height(), static_map.width()) != (a.h, a.w) {
        return Err(Error::shape(format!(
            "static map {}×{} does not match frames {a}",
            static_map.height(),
            static_map.width()
        )));
    }
    let s = static_map.to_tensor();
    Tensor::concat_channels(&[frame_t, frame_t1, &s])
}

/// Dynamic saliency from two consecutive frames and the static map of the first.
pub fn dynamic_forward(
    net: &Network,
    frame_t: &Tensor,
    frame_t1: &Tensor,
    static_map: &SaliencyMap,
) -> Result<SaliencyMap> {
    if net.spec().input_channels != DYNAMIC_INPUT_CHANNELS {
        return Err(Error::shape("dynamic forward needs a 7-channel network"));
    }
    net.predict(&dynamic_input(frame_t, frame_t1, static_map)?)
}
