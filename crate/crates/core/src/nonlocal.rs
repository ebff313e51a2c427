//! Embedded-Gaussian non-local block.
//!
//! For a feature map `x` with `H·W` positions, every output position is an
//! attention-weighted sum over all positions:
//!
//! ```text
//! θ = x·W_θ,  φ = x·W_φ,  g = x·W_g            (1×1 convolutions, no bias)
//! A = softmax_rows(θ φᵀ)                        ((H·W) × (H·W))
//! y = A g
//! z = y·W_z + x                                 (residual)
//! ```
//!
//! With `W_z = 0` the block is exactly the identity, so it can be inserted
//! into an already trained network without changing its output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nets::he_uniform;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmbedActivation {
    /// `θ`, `φ`, `g` are plain linear embeddings.
    #[default]
    Linear,
    /// ReLU after each of the `θ`, `φ`, `g` embeddings.
    Rectified,
}

impl std::str::FromStr for EmbedActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EmbedActivation::Linear),
            "rectified" | "relu" => Ok(EmbedActivation::Rectified),
            other => Err(Error::Config(format!("unknown embed activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for EmbedActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbedActivation::Linear => "linear",
            EmbedActivation::Rectified => "rectified",
        })
    }
}

/// Embedding width used when none is configured: half the input channels, rounded up.
pub fn default_embed_width(channels: usize) -> usize {
    channels.div_ceil(2)
}

/// The four 1×1 projection kernels of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams {
    /// `1×1×C×C_e`
    pub w_theta: Tensor,
    /// `1×1×C×C_e`
    pub w_phi: Tensor,
    /// `1×1×C×C_e`
    pub w_g: Tensor,
    /// `1×1×C_e×C`
    pub w_z: Tensor,
    pub embed_activation: EmbedActivation,
}

impl NonLocalParams {
    pub fn new(
        w_theta: Tensor,
        w_phi: Tensor,
        w_g: Tensor,
        w_z: Tensor,
        embed_activation: EmbedActivation,
    ) -> Result<Self> {
        let p = NonLocalParams {
            w_theta,
            w_phi,
            w_g,
            w_z,
            embed_activation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(channels: usize, embed: usize) -> Self {
        NonLocalParams {
            w_theta: Tensor::zeros([1, 1, channels, embed]),
            w_phi: Tensor::zeros([1, 1, channels, embed]),
            w_g: Tensor::zeros([1, 1, channels, embed]),
            w_z: Tensor::zeros([1, 1, embed, channels]),
            embed_activation: EmbedActivation::Linear,
        }
    }

    /// Fan-in scaled uniform initialization of all four kernels.
    pub fn init<R: Rng + ?Sized>(channels: usize, embed: usize, act: EmbedActivation, rng: &mut R) -> Self {
        NonLocalParams {
            w_theta: he_uniform([1, 1, channels, embed], rng),
            w_phi: he_uniform([1, 1, channels, embed], rng),
            w_g: he_uniform([1, 1, channels, embed], rng),
            w_z: he_uniform([1, 1, embed, channels], rng),
            embed_activation: act,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_theta.shape().w
    }

    pub fn embed_width(&self) -> usize {
        self.w_theta.shape().c
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.w_theta.shape();
        if t.n != 1 || t.h != 1 {
            return Err(Error::shape(format!("w_theta must be a 1×1 kernel, got {t}")));
        }
        if self.w_phi.shape() != t {
            return Err(Error::shape(format!(
                "w_phi {} differs from w_theta {t}",
                self.w_phi.shape()
            )));
        }
        if self.w_g.shape() != t {
            return Err(Error::shape(format!("w_g {} differs from w_theta {t}", self.w_g.shape())));
        }
        let z = self.w_z.shape();
        if z != Shape::new(1, 1, t.c, t.w) {
            return Err(Error::shape(format!(
                "w_z {z} must map {} embedding channels back to {} input channels",
                t.c, t.w
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("theta", &self.w_theta),
            ("phi", &self.w_phi),
            ("g", &self.w_g),
            ("z", &self.w_z),
        ]
    }
}

/// Row-stochastic `(H·W) × (H·W)` attention, rows indexed by query position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    positions: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.data[query * self.positions..][..self.positions]
    }

    pub fn get(&self, query: usize, key: usize) -> f64 {
        self.data[query * self.positions + key]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Tape handles for one block's kernels.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalVars {
    pub w_theta: Var,
    pub w_phi: Var,
    pub w_g: Var,
    pub w_z: Var,
    pub embed_activation: EmbedActivation,
}

impl NonLocalVars {
    pub fn record(tape: &mut Tape, p: &NonLocalParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        NonLocalVars {
            w_theta: leaf(&p.w_theta),
            w_phi: leaf(&p.w_phi),
            w_g: leaf(&p.w_g),
            w_z: leaf(&p.w_z),
            embed_activation: p.embed_activation,
        }
    }
}

/// Output of [`attend`] on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttendVars {
    pub y: Var,
    pub attention: Var,
}

/// The non-local operation `y = softmax_rows(θ φᵀ) g`, recorded on `tape`.
pub fn attend(tape: &mut Tape, x: Var, p: &NonLocalVars) -> Result<AttendVars> {
    let s = tape.shape(x);
    if s.n != 1 {
        return Err(Error::shape(format!("non-local block expects batch 1, got {s}")));
    }
    let c_in = tape.shape(p.w_theta).w;
    if s.c != c_in {
        return Err(Error::shape(format!(
            "non-local block built for {c_in} channels, input {s} has {}",
            s.c
        )));
    }
    let embed = |tape: &mut Tape, w: Var| -> Result<Var> {
        let e = tape.conv2d(x, w, None, 1, Padding::Same)?;
        Ok(match p.embed_activation {
            EmbedActivation::Linear => e,
            EmbedActivation::Rectified => tape.relu(e),
        })
    };
    let theta = embed(tape, p.w_theta)?;
    let phi = embed(tape, p.w_phi)?;
    let g = embed(tape, p.w_g)?;
    let phi_t = tape.transpose(phi);
    let logits = tape.matmul(theta, phi_t)?;
    let attention = tape.softmax_rows(logits);
    let y = tape.matmul(attention, g)?;
    Ok(AttendVars { y, attention })
}

/// The residual block `z = y·W_z + x`, recorded on `tape`.
pub fn block(tape: &mut Tape, x: Var, p: &NonLocalVars) -> Result<Var> {
    let AttendVars { y, .. } = attend(tape, x, p)?;
    let wy = tape.conv2d(y, p.w_z, None, 1, Padding::Same)?;
    tape.add(wy, x)
}

/// Eager non-local operation; returns `y` (`1×H×W×C_e`) and the attention matrix.
pub fn nl_attend(x: &Tensor, params: &NonLocalParams) -> Result<(Tensor, AttentionMatrix)> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = NonLocalVars::record(&mut tape, params, false);
    let out = attend(&mut tape, xv, &pv)?;
    let positions = x.shape().h * x.shape().w;
    let attention = AttentionMatrix {
        positions,
        data: tape.value(out.attention).data().to_vec(),
    };
    Ok((tape.value(out.y).clone(), attention))
}

/// Eager residual block; output has the shape of `x`.
pub fn nl_block(x: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = NonLocalVars::record(&mut tape, params, false);
    let z = block(&mut tape, xv, &pv)?;
    Ok(tape.value(z).clone())
}

/// Literal nested-loop evaluation of the non-local operation with explicit
/// exponentials and per-row normalizers. Quadratic in the position count;
/// meant for small inputs only. Returns `y` and the per-row normalizers.
#[allow(clippy::needless_range_loop)] // index loops mirror the summation formula
pub fn nl_oracle(x: &Tensor, params: &NonLocalParams) -> Result<(Tensor, Vec<f64>)> {
    params.validate()?;
    let s = x.shape();
    if s.n != 1 || s.c != params.channels() {
        return Err(Error::shape(format!(
            "oracle input {s} for a {}-channel block",
            params.channels()
        )));
    }
    let (c, ce, hw) = (s.c, params.embed_width(), s.h * s.w);
    let project = |w: &Tensor, pos: usize| -> Vec<f64> {
        (0..ce)
            .map(|e| {
                let v: f64 = (0..c).map(|ci| w.at(0, 0, ci, e) * x.data()[pos * c + ci]).sum();
                match params.embed_activation {
                    EmbedActivation::Linear => v,
                    EmbedActivation::Rectified => v.max(0.0),
                }
            })
            .collect()
    };
    let theta: Vec<Vec<f64>> = (0..hw).map(|p| project(&params.w_theta, p)).collect();
    let phi: Vec<Vec<f64>> = (0..hw).map(|p| project(&params.w_phi, p)).collect();
    let g: Vec<Vec<f64>> = (0..hw).map(|p| project(&params.w_g, p)).collect();

    let mut y = Tensor::zeros([1, s.h, s.w, ce]);
    let mut normalizers = Vec::with_capacity(hw);
    for i in 0..hw {
        let f: Vec<f64> = (0..hw)
            .map(|k| theta[i].iter().zip(&phi[k]).map(|(a, b)| a * b).sum::<f64>().exp())
            .collect();
        let norm: f64 = f.iter().sum();
        for k in 0..hw {
            for e in 0..ce {
                y.data_mut()[i * ce + e] += f[k] / norm * g[k][e];
            }
        }
        normalizers.push(norm);
    }
    Ok((y, normalizers))
}
