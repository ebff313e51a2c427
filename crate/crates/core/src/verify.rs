//! Finite-difference verification of every differentiable operation.
//!
//! Each check records an operation on a [`Tape`], contracts its output with
//! fixed random weights to get a scalar, and compares the backward gradients
//! of every input with central differences of the same scalar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, relative_error};
use crate::kernels::Padding;
use crate::nets::{Network, NetworkSpec};
use crate::nonlocal::{self, EmbedActivation, NonLocalParams, NonLocalVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Maximum norm-wise relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Names of the checked operations, in report order.
pub const CHECKS: [&str; 16] = [
    "conv2d",
    "conv2d_transpose",
    "maxpool2d",
    "relu",
    "sigmoid",
    "softmax_rows",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "mul",
    "concat_channels",
    "crop",
    "sum",
    "cross_entropy",
    "nonlocal_block",
];

/// Name of the whole-network check appended after [`CHECKS`].
pub const STATIC_NET: &str = "static_net";

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar inputs that were perturbed.
    pub inputs: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Outcome of a whole suite run.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checks: Vec<OpCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    /// One `name max_rel_error PASS|FAIL` line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<18} {:>10.3e} {}\n",
                c.name,
                c.max_rel_error,
                if c.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Options for [`run_suite`].
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Tape operation whose backward is deliberately corrupted.
    pub corrupt: Option<&'static str>,
    /// Skips the whole-network check, which dominates the running time.
    pub skip_network: bool,
}

/// Values in `[lo, hi]` with magnitude at least `margin`, so kinks and
/// clamps stay further than the difference step away.
fn away_from_zero<R: Rng>(shape: impl Into<Shape>, margin: f64, hi: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(shape, margin, hi, rng);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// A permutation of evenly spaced values, so no two entries tie.
fn distinct<R: Rng>(shape: impl Into<Shape>, rng: &mut R) -> Tensor {
    let shape = shape.into();
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).expect("matching length")
}

/// Gradient check of `build` with respect to every tensor in `inputs`.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    corrupt: Option<&'static str>,
    rng: &mut impl Rng,
) -> Result<OpCheck> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let probe_out = build(&mut probe, &vars)?;
    let out_shape = probe.shape(probe_out);
    let weights = Tensor::uniform(out_shape, -1.0, 1.0, rng);

    let scalar = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    if let Some(op) = corrupt {
        tape.corrupt_backward(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (j, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[j]);
        let mut failure = None;
        let numeric = finite_diff_grad(
            |p| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, x)| t.constant(if k == j { p.clone() } else { x.clone() }))
                    .collect();
                match scalar(&mut t, &vs).and_then(|l| t.value(l).item()) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            input,
            STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let err = relative_error(analytic.data(), numeric.data());
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_error: worst,
        inputs: inputs.iter().map(Tensor::numel).sum(),
    })
}

fn single(name: &str, c: Option<&'static str>, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let r = &mut *rng;
    match name {
        "conv2d" => {
            let same = check_op(
                name,
                &[
                    Tensor::uniform([1, 5, 6, 3], -1.0, 1.0, r),
                    Tensor::uniform([3, 3, 3, 4], -1.0, 1.0, r),
                    Tensor::uniform([1, 1, 1, 4], -1.0, 1.0, r),
                ],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same),
                c,
                r,
            )?;
            let valid = check_op(
                name,
                &[Tensor::uniform([2, 4, 5, 2], -1.0, 1.0, r), Tensor::uniform([2, 3, 2, 3], -1.0, 1.0, r)],
                |t, v| t.conv2d(v[0], v[1], None, 1, Padding::Valid),
                c,
                r,
            )?;
            Ok(OpCheck {
                max_rel_error: same.max_rel_error.max(valid.max_rel_error),
                inputs: same.inputs + valid.inputs,
                ..same
            })
        }
        "conv2d_transpose" => check_op(
            name,
            &[
                Tensor::uniform([1, 3, 4, 3], -1.0, 1.0, r),
                Tensor::uniform([4, 4, 2, 3], -1.0, 1.0, r),
                Tensor::uniform([1, 1, 1, 2], -1.0, 1.0, r),
            ],
            |t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), 2),
            c,
            r,
        ),
        "maxpool2d" => check_op(name, &[distinct([1, 5, 6, 2], r)], |t, v| t.maxpool2d(v[0], 2), c, r),
        "relu" => check_op(name, &[away_from_zero([1, 3, 4, 2], 0.05, 1.0, r)], |t, v| Ok(t.relu(v[0])), c, r),
        "sigmoid" => check_op(
            name,
            &[Tensor::uniform([1, 3, 4, 2], -3.0, 3.0, r)],
            |t, v| Ok(t.sigmoid(v[0])),
            c,
            r,
        ),
        "softmax_rows" => check_op(
            name,
            &[Tensor::uniform(Shape::matrix(4, 5), -2.0, 2.0, r)],
            |t, v| Ok(t.softmax_rows(v[0])),
            c,
            r,
        ),
        "matmul" => check_op(
            name,
            &[
                Tensor::uniform(Shape::matrix(4, 3), -1.0, 1.0, r),
                Tensor::uniform(Shape::matrix(3, 5), -1.0, 1.0, r),
            ],
            |t, v| t.matmul(v[0], v[1]),
            c,
            r,
        ),
        "transpose" => check_op(
            name,
            &[Tensor::uniform(Shape::matrix(3, 5), -1.0, 1.0, r)],
            |t, v| Ok(t.transpose(v[0])),
            c,
            r,
        ),
        "reshape" => check_op(
            name,
            &[Tensor::uniform([1, 2, 3, 4], -1.0, 1.0, r)],
            |t, v| t.reshape(v[0], [1, 1, 6, 4]),
            c,
            r,
        ),
        "add" | "mul" => {
            let op = if name == "add" { Tape::add } else { Tape::mul };
            check_op(
                name,
                &[Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, r), Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, r)],
                |t, v| op(t, v[0], v[1]),
                c,
                r,
            )
        }
        "concat_channels" => check_op(
            name,
            &[
                Tensor::uniform([1, 2, 3, 1], -1.0, 1.0, r),
                Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, r),
                Tensor::uniform([1, 2, 3, 2], -1.0, 1.0, r),
            ],
            |t, v| t.concat_channels(v),
            c,
            r,
        ),
        "crop" => check_op(name, &[Tensor::uniform([1, 5, 4, 2], -1.0, 1.0, r)], |t, v| t.crop(v[0], 3, 2), c, r),
        "sum" => check_op(name, &[Tensor::uniform([1, 3, 3, 2], -1.0, 1.0, r)], |t, v| Ok(t.sum(v[0])), c, r),
        "cross_entropy" => {
            let target = Tensor::from_vec([1, 3, 4, 1], (0..12).map(|_| f64::from(r.gen::<bool>() as u8)).collect())?;
            check_op(
                name,
                &[Tensor::uniform([1, 3, 4, 1], 0.1, 0.9, r)],
                |t, v| t.cross_entropy(v[0], &target, 1e-7),
                c,
                r,
            )
        }
        "nonlocal_block" => {
            let p = NonLocalParams::init(4, 2, EmbedActivation::Linear, r);
            let inputs = [
                Tensor::uniform([1, 3, 3, 4], -1.0, 1.0, r),
                p.w_theta,
                p.w_phi,
                p.w_g,
                p.w_z,
            ];
            check_op(
                name,
                &inputs,
                |t, v| {
                    let nv = NonLocalVars {
                        w_theta: v[1],
                        w_phi: v[2],
                        w_g: v[3],
                        w_z: v[4],
                        embed_activation: EmbedActivation::Linear,
                    };
                    nonlocal::block(t, v[0], &nv)
                },
                c,
                r,
            )
        }
        STATIC_NET => {
            let spec = NetworkSpec::static_default().with_widths(&[2, 3, 3, 4, 4]).with_nl(3, 2);
            let net = Network::build(spec, r)?;
            let frame = Tensor::uniform([1, 16, 16, 3], 0.0, 1.0, r);
            // zero biases would put dead regions exactly on the ReLU kink
            let params: Vec<Tensor> = net
                .params()
                .iter()
                .map(|(n, t)| {
                    if n.ends_with(".b") {
                        away_from_zero(t.shape(), 0.01, 0.1, r)
                    } else {
                        t.clone()
                    }
                })
                .collect();
            check_op(name, &params, |t, v| net.forward_on_tape(t, &frame, v), c, r)
        }
        other => Err(crate::error::Error::invalid(format!("no gradient check named `{other}`"))),
    }
}

/// Runs every check; each one draws from its own seeded stream, so a
/// single check reproduces independently of the others.
pub fn run_suite(opts: &SuiteOptions) -> Result<GradReport> {
    let mut names: Vec<&str> = CHECKS.to_vec();
    if !opts.skip_network {
        names.push(STATIC_NET);
    }
    let checks = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            single(name, opts.corrupt, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let report = run_suite(&SuiteOptions {
            skip_network: true,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.len(), CHECKS.len());
    }

    #[test]
    fn static_network_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = single(STATIC_NET, None, &mut rng).unwrap();
        assert!(c.passed(), "{c:?}");
        assert!(c.inputs > 500);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        for op in ["conv2d", "softmax_rows", "matmul", "relu"] {
            let report = run_suite(&SuiteOptions {
                corrupt: Some(op),
                skip_network: true,
                ..Default::default()
            })
            .unwrap();
            let c = report.checks.iter().find(|c| c.name == op).unwrap();
            assert!(!c.passed(), "{op} corruption went unnoticed");
            assert!(!report.passed());
        }
    }

    #[test]
    fn report_lists_every_check() {
        let report = GradReport {
            checks: vec![OpCheck {
                name: "relu".into(),
                max_rel_error: 2e-9,
                inputs: 4,
            }],
        };
        let text = report.render();
        assert!(text.starts_with("relu"));
        assert!(text.trim_end().ends_with("PASS"));
    }
}
