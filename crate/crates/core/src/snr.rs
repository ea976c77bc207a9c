//! Style normalization and restitution block.
//!
//! Given a feature map `F`, the block computes
//!
//! ```text
//! F~  = IN(F)                      style-normalized feature
//! R   = F - F~                     residual (what IN removed)
//! a   = sigmoid(W2 relu(W1 pool(R)))   per-sample channel gate
//! R+  = a * R,   R- = (1 - a) * R   identity-relevant / -irrelevant parts
//! F~+ = F~ + R+, F~- = F~ + R-
//! ```
//!
//! `F~+` is the block output. `F~-` and the pooled vectors exist only to feed
//! the dual causality loss and are skipped at inference.
//!
//! Two alternative disentanglers are supported: a pair of 1x1 convolutions
//! with ReLU, and two independent gates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};

/// Default channel reduction ratio of the gate.
pub const DEFAULT_REDUCTION: usize = 16;

/// Width of the gate's bottleneck layer.
pub fn hidden_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Complementary masks `a` and `1 - a` from one gate.
    Gate,
    /// `R+ = relu(W+ R)`, `R- = relu(W- R)` with 1x1 convolutions.
    Conv,
    /// Two unshared gates.
    DualGate,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" | "snr" => Ok(Variant::Gate),
            "conv" | "snr_conv" => Ok(Variant::Conv),
            "dual_gate" | "snr_g2" => Ok(Variant::DualGate),
            other => Err(Error::InvalidArgument(format!(
                "unknown SNR variant '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Gate => "gate",
            Variant::Conv => "conv",
            Variant::DualGate => "dual_gate",
        })
    }
}

/// Bias-free two-layer gate: `w1: [hidden, c]`, `w2: [c, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights<T> {
    pub w1: T,
    pub w2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Disentangler<T> {
    Gate(GateWeights<T>),
    DualGate {
        plus: GateWeights<T>,
        minus: GateWeights<T>,
    },
    /// 1x1 kernels of shape `[c, c, 1, 1]`.
    Conv {
        plus: T,
        minus: T,
    },
}

/// Weights of one block, generic over how each weight is held: plain
/// tensors, parameter ids in a store, or graph variables.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrWeights<T> {
    pub gamma: T,
    pub beta: T,
    pub disentangler: Disentangler<T>,
}

/// Value-level block parameters.
pub type SnrParams = SnrWeights<Tensor>;

impl<T> GateWeights<T> {
    fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U, prefix: &str) -> GateWeights<U> {
        GateWeights {
            w1: f(&format!("{prefix}w1"), &self.w1),
            w2: f(&format!("{prefix}w2"), &self.w2),
        }
    }
}

impl<T> SnrWeights<T> {
    pub fn variant(&self) -> Variant {
        match self.disentangler {
            Disentangler::Gate(_) => Variant::Gate,
            Disentangler::DualGate { .. } => Variant::DualGate,
            Disentangler::Conv { .. } => Variant::Conv,
        }
    }

    /// Converts every weight, passing a stable per-weight name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> SnrWeights<U> {
        let disentangler = match &self.disentangler {
            Disentangler::Gate(g) => Disentangler::Gate(g.map(&mut f, "gate.")),
            Disentangler::DualGate { plus, minus } => Disentangler::DualGate {
                plus: plus.map(&mut f, "gate_plus."),
                minus: minus.map(&mut f, "gate_minus."),
            },
            Disentangler::Conv { plus, minus } => Disentangler::Conv {
                plus: f("conv_plus", plus),
                minus: f("conv_minus", minus),
            },
        };
        SnrWeights {
            gamma: f("gamma", &self.gamma),
            beta: f("beta", &self.beta),
            disentangler,
        }
    }
}

impl SnrParams {
    /// `gamma = 1`, `beta = 0`, Kaiming-style random gate or conv weights.
    pub fn init(channels: usize, ratio: usize, variant: Variant, rng: &mut impl Rng) -> Self {
        let hidden = hidden_width(channels, ratio);
        let disentangler = match variant {
            Variant::Gate => Disentangler::Gate(random_gate(channels, hidden, rng)),
            Variant::DualGate => Disentangler::DualGate {
                plus: random_gate(channels, hidden, rng),
                minus: random_gate(channels, hidden, rng),
            },
            Variant::Conv => {
                let std = (2.0 / channels as f64).sqrt();
                Disentangler::Conv {
                    plus: Tensor::randn(&[channels, channels, 1, 1], std, rng),
                    minus: Tensor::randn(&[channels, channels, 1, 1], std, rng),
                }
            }
        };
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            disentangler,
        }
    }

    /// All disentangler weights zero: gates output 0.5, convs output 0.
    pub fn zeroed(channels: usize, ratio: usize, variant: Variant) -> Self {
        let hidden = hidden_width(channels, ratio);
        let gate = || GateWeights {
            w1: Tensor::zeros(&[hidden, channels]),
            w2: Tensor::zeros(&[channels, hidden]),
        };
        let disentangler = match variant {
            Variant::Gate => Disentangler::Gate(gate()),
            Variant::DualGate => Disentangler::DualGate {
                plus: gate(),
                minus: gate(),
            },
            Variant::Conv => Disentangler::Conv {
                plus: Tensor::zeros(&[channels, channels, 1, 1]),
                minus: Tensor::zeros(&[channels, channels, 1, 1]),
            },
        };
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            disentangler,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Number of scalars this block adds to a network.
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.len());
        n
    }
}

fn random_gate(channels: usize, hidden: usize, rng: &mut impl Rng) -> GateWeights<Tensor> {
    GateWeights {
        w1: Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng),
        w2: Tensor::randn(&[channels, hidden], (1.0 / hidden as f64).sqrt(), rng),
    }
}

/// Every intermediate product of one block evaluation.
///
/// `r_minus`, `f_minus` and `pooled_minus` are `None` at inference. For the
/// dual-gate variant `gate` holds the `R+` gate and `gate_minus` the `R-`
/// gate; the conv variant has no gate.
#[derive(Clone, Debug)]
pub struct SnrTrace<T> {
    pub input: T,
    pub f_tilde: T,
    pub residual: T,
    pub gate: Option<T>,
    pub gate_minus: Option<T>,
    pub r_plus: T,
    pub r_minus: Option<T>,
    pub f_plus: T,
    pub f_minus: Option<T>,
    pub pooled_tilde: T,
    pub pooled_plus: T,
    pub pooled_minus: Option<T>,
}

impl SnrTrace<Var> {
    pub fn values(&self, g: &Graph) -> SnrTrace<Tensor> {
        let v = |x: &Var| g.value(*x).clone();
        let o = |x: &Option<Var>| x.as_ref().map(v);
        SnrTrace {
            input: v(&self.input),
            f_tilde: v(&self.f_tilde),
            residual: v(&self.residual),
            gate: o(&self.gate),
            gate_minus: o(&self.gate_minus),
            r_plus: v(&self.r_plus),
            r_minus: o(&self.r_minus),
            f_plus: v(&self.f_plus),
            f_minus: o(&self.f_minus),
            pooled_tilde: v(&self.pooled_tilde),
            pooled_plus: v(&self.pooled_plus),
            pooled_minus: o(&self.pooled_minus),
        }
    }
}

/// Evaluation options for [`forward_graph`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Build the contaminated branch used by the destruction loss.
    pub training: bool,
    /// Replace every gate output with this constant (testing hook).
    pub gate_override: Option<f64>,
}

/// `a = sigmoid(W2 relu(W1 pool(R)))`, one gate vector per sample.
pub fn gate_graph(g: &mut Graph, r: Var, w: &GateWeights<Var>) -> Result<Var> {
    let c = g.value(r).dims4()?[1];
    let [hidden, wc] = g.value(w.w1).dims2()?;
    if wc != c || g.value(w.w2).shape() != [c, hidden] {
        return Err(Error::shape(format!(
            "gate weights {:?}/{:?} for {c} channels",
            g.value(w.w1).shape(),
            g.value(w.w2).shape()
        )));
    }
    let pooled = g.global_avg_pool(r)?;
    let h = g.linear(pooled, w.w1, None)?;
    let h = g.relu(h);
    let z = g.linear(h, w.w2, None)?;
    Ok(g.sigmoid(z))
}

fn gate_or_override(
    g: &mut Graph,
    r: Var,
    w: &GateWeights<Var>,
    opts: ForwardOptions,
) -> Result<Var> {
    match opts.gate_override {
        Some(v) => {
            let [n, c, _, _] = g.value(r).dims4()?;
            Ok(g.constant(Tensor::full(&[n, c], v)))
        }
        None => gate_graph(g, r, w),
    }
}

/// Records one block evaluation on `g`.
pub fn forward_graph(
    g: &mut Graph,
    x: Var,
    w: &SnrWeights<Var>,
    opts: ForwardOptions,
) -> Result<SnrTrace<Var>> {
    g.value(x).check_finite("SNR input")?;
    let f_tilde = g.instance_norm(x, w.gamma, w.beta, NORM_EPS)?;
    let residual = g.sub(x, f_tilde)?;
    let (gate, gate_minus, r_plus, r_minus) = match &w.disentangler {
        Disentangler::Gate(gw) => {
            let a = gate_or_override(g, residual, gw, opts)?;
            let r_plus = g.scale_channels(residual, a)?;
            let r_minus = if opts.training {
                let comp = g.affine(a, -1.0, 1.0);
                Some(g.scale_channels(residual, comp)?)
            } else {
                None
            };
            (Some(a), None, r_plus, r_minus)
        }
        Disentangler::DualGate { plus, minus } => {
            let a_plus = gate_or_override(g, residual, plus, opts)?;
            let r_plus = g.scale_channels(residual, a_plus)?;
            let (a_minus, r_minus) = if opts.training {
                let a_minus = gate_or_override(g, residual, minus, opts)?;
                (Some(a_minus), Some(g.scale_channels(residual, a_minus)?))
            } else {
                (None, None)
            };
            (Some(a_plus), a_minus, r_plus, r_minus)
        }
        Disentangler::Conv { plus, minus } => {
            let rp = g.conv2d(residual, *plus, 1, 0)?;
            let r_plus = g.relu(rp);
            let r_minus = if opts.training {
                let rm = g.conv2d(residual, *minus, 1, 0)?;
                Some(g.relu(rm))
            } else {
                None
            };
            (None, None, r_plus, r_minus)
        }
    };
    let f_plus = g.add(f_tilde, r_plus)?;
    let f_minus = r_minus.map(|rm| g.add(f_tilde, rm)).transpose()?;
    let pooled_tilde = g.global_avg_pool(f_tilde)?;
    let pooled_plus = g.global_avg_pool(f_plus)?;
    let pooled_minus = f_minus.map(|fm| g.global_avg_pool(fm)).transpose()?;
    g.value(f_plus).check_finite("SNR output")?;
    Ok(SnrTrace {
        input: x,
        f_tilde,
        residual,
        gate,
        gate_minus,
        r_plus,
        r_minus,
        f_plus,
        f_minus,
        pooled_tilde,
        pooled_plus,
        pooled_minus,
    })
}

fn constants(g: &mut Graph, params: &SnrParams) -> SnrWeights<Var> {
    params.map(|_, t| g.constant(t.clone()))
}

/// Value-level channel gate for the main variant.
pub fn channel_gate(r: &Tensor, w: &GateWeights<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let rv = g.constant(r.clone());
    let gw = GateWeights {
        w1: g.constant(w.w1.clone()),
        w2: g.constant(w.w2.clone()),
    };
    let a = gate_graph(&mut g, rv, &gw)?;
    Ok(g.value(a).clone())
}

/// Splits `R` with a per-sample gate: `(a * R, (1 - a) * R)`.
pub fn disentangle(r: &Tensor, a: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (rv, av) = (g.constant(r.clone()), g.constant(a.clone()));
    let plus = g.scale_channels(rv, av)?;
    let comp = g.affine(av, -1.0, 1.0);
    let minus = g.scale_channels(rv, comp)?;
    Ok((g.value(plus).clone(), g.value(minus).clone()))
}

/// Full training-mode evaluation of a block on plain tensors.
pub fn snr_forward(f: &Tensor, params: &SnrParams) -> Result<SnrTrace<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let w = constants(&mut g, params);
    let opts = ForwardOptions {
        training: true,
        gate_override: None,
    };
    Ok(forward_graph(&mut g, x, &w, opts)?.values(&g))
}

/// Like [`snr_forward`], but insists the parameters belong to `variant`.
pub fn snr_variant_forward(
    f: &Tensor,
    variant: Variant,
    params: &SnrParams,
) -> Result<SnrTrace<Tensor>> {
    if params.variant() != variant {
        return Err(Error::InvalidArgument(format!(
            "parameters are for variant {}, requested {variant}",
            params.variant()
        )));
    }
    snr_forward(f, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_width_examples() {
        assert_eq!(hidden_width(32, 16), 2);
        assert_eq!(hidden_width(128, 16), 8);
        assert_eq!(hidden_width(8, 16), 1);
        assert_eq!(hidden_width(33, 16), 2);
    }

    #[test]
    fn variant_tags() {
        assert_eq!("snr_conv".parse::<Variant>().unwrap(), Variant::Conv);
        assert_eq!("dual_gate".parse::<Variant>().unwrap(), Variant::DualGate);
        assert!("spatial".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_gate_is_one_half() {
        let r = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 5.0);
        let Disentangler::Gate(w) = SnrParams::zeroed(3, 16, Variant::Gate).disentangler else {
            unreachable!()
        };
        let a = channel_gate(&r, &w).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_evaluated_gate() {
        // pooled R = (1, -1); relu zeroes the second hidden unit.
        let r = Tensor::new(&[1, 2, 1, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = channel_gate(
            &r,
            &GateWeights {
                w1: eye.clone(),
                w2: eye,
            },
        )
        .unwrap();
        assert!((a.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(a.data()[1], 0.5);
        assert_eq!(a.data()[0], sigmoid(1.0));
    }

    #[test]
    fn gate_shape_mismatch() {
        let r = Tensor::zeros(&[1, 4, 2, 2]);
        let w = GateWeights {
            w1: Tensor::zeros(&[1, 3]),
            w2: Tensor::zeros(&[3, 1]),
        };
        assert!(channel_gate(&r, &w).is_err());
        assert!(disentangle(&r, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn half_gate_and_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let (p, m) = disentangle(&r, &Tensor::full(&[2, 3], 0.5)).unwrap();
        assert_eq!(p, r.map(|v| v * 0.5));
        assert_eq!(m, p);
        let a = Tensor::uniform(&[2, 3], 0.0, 1.0, &mut rng);
        let (p, m) = disentangle(&Tensor::zeros(&[2, 3, 2, 2]), &a).unwrap();
        assert!(p.data().iter().chain(m.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn inference_skips_contaminated_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SnrParams::init(4, 2, Variant::Gate, &mut rng);
        let f = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let w = constants(&mut g, &params);
        let t = forward_graph(&mut g, x, &w, ForwardOptions::default()).unwrap();
        assert!(t.f_minus.is_none() && t.r_minus.is_none() && t.pooled_minus.is_none());
        let full = snr_forward(&f, &params).unwrap();
        assert_eq!(g.value(t.f_plus), &full.f_plus);
    }

    #[test]
    fn variant_mismatch_is_an_error() {
        let params = SnrParams::zeroed(4, 2, Variant::Conv);
        let f = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(snr_variant_forward(&f, Variant::Gate, &params).is_err());
        assert!(snr_variant_forward(&f, Variant::Conv, &params).is_ok());
    }

    #[test]
    fn parameter_count_closed_form() {
        // 2c + 2 c floor(c/r): c = 128, r = 16 -> 256 + 2048
        assert_eq!(
            SnrParams::zeroed(128, 16, Variant::Gate).scalar_count(),
            2304
        );
        assert_eq!(
            SnrParams::zeroed(8, 16, Variant::Gate).scalar_count(),
            16 + 16
        );
    }
}
