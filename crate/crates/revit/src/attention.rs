//! Scaled dot-product attention, multi-head assembly, and the residual
//! score connection between consecutive layers.
//!
//! The residual connection operates on pre-softmax scores: at layer 0 the
//! scores are the plain scaled dot product; at deeper layers they are
//! `alpha * current + (1 - alpha) * previous`, and the mixed scores become
//! the state handed to the next layer.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// Logistic squashing used to keep the learnable gate inside (0, 1).
pub fn logistic(x: Real) -> Real {
    kernels::sigmoid_val(x)
}

/// Projection weights for one multi-head self-attention layer. The
/// projections carry no bias terms.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let dim = match w_q.shape() {
            [r, c] if r == c => *r,
            s => return Err(Error::invalid(format!("w_q must be square, got {s:?}"))),
        };
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != [dim, dim] {
                return Err(Error::shape("attention params", &[dim, dim], w.shape()));
            }
            if !w.is_finite() {
                return Err(Error::non_finite(format!("attention weight {name}")));
            }
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Pre-softmax scores of one layer, threaded to the next.
#[derive(Clone, Debug)]
pub struct ScoreState {
    /// `[heads, tokens, tokens]`
    pub scores: Tensor,
    pub layer_index: usize,
}

/// How the residual gate is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum AlphaMode {
    /// One learnable scalar shared by every layer.
    #[default]
    Shared,
    /// One learnable scalar per layer.
    PerLayer,
    /// Constant, non-trainable gate value in [0, 1].
    Fixed(Real),
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Shared => write!(f, "shared"),
            AlphaMode::PerLayer => write!(f, "per_layer"),
            AlphaMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(AlphaMode::Shared),
            "per_layer" => Ok(AlphaMode::PerLayer),
            _ => {
                if let Some(v) = s.strip_prefix("fixed:") {
                    let v: Real = v
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad fixed alpha value '{v}'")))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!("fixed alpha {v} outside [0, 1]")));
                    }
                    Ok(AlphaMode::Fixed(v))
                } else {
                    Err(Error::invalid(format!(
                        "unknown alpha mode '{s}' (expected shared | per_layer | fixed:<v>)"
                    )))
                }
            }
        }
    }
}

impl Serialize for AlphaMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AlphaMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e: Error| D::Error::custom(e.to_string()))
    }
}

/// Residual gate values for a whole network.
///
/// In the learnable modes the effective gate is `logistic(raw)`, so it always
/// lies in (0, 1); in fixed mode it is the given constant.
#[derive(Clone, Debug)]
pub struct AlphaGate {
    pub mode: AlphaMode,
    pub raw: Vec<Real>,
}

impl AlphaGate {
    pub fn shared(raw: Real) -> Self {
        Self { mode: AlphaMode::Shared, raw: vec![raw] }
    }

    pub fn per_layer(raw: Vec<Real>) -> Self {
        Self { mode: AlphaMode::PerLayer, raw }
    }

    pub fn fixed(value: Real) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("fixed alpha {value} outside [0, 1]")));
        }
        Ok(Self { mode: AlphaMode::Fixed(value), raw: Vec::new() })
    }

    /// Effective gate value used at `layer`.
    pub fn effective(&self, layer: usize) -> Real {
        match self.mode {
            AlphaMode::Shared => logistic(self.raw[0]),
            AlphaMode::PerLayer => logistic(self.raw[layer]),
            AlphaMode::Fixed(v) => v,
        }
    }
}

fn check_head_stack(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, n, d] => Ok((*h, *n, *d)),
        s => Err(Error::shape(op, s, &[])),
    }
}

/// S = Q K^T / sqrt(d), per head.
pub fn raw_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (h, n, d) = check_head_stack("raw_scores", q)?;
    if k.shape() != [h, n, d] {
        return Err(Error::shape("raw_scores", q.shape(), k.shape()));
    }
    let scale = 1.0 / (d as Real).sqrt();
    let mut out = Tensor::zeros(vec![h, n, n]);
    for i in 0..h {
        kernels::matmul_nt_acc(
            &q.data()[i * n * d..(i + 1) * n * d],
            &k.data()[i * n * d..(i + 1) * n * d],
            n,
            d,
            n,
            &mut out.data_mut()[i * n * n..(i + 1) * n * n],
        );
    }
    for v in out.data_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// Residual score mixing: layer 0 passes the current scores through, deeper
/// layers return `alpha * current + (1 - alpha) * previous`.
pub fn residual_scores(
    s_cur: &Tensor,
    prev: Option<&ScoreState>,
    alpha: Real,
    layer: usize,
) -> Result<Tensor> {
    check_head_stack("residual_scores", s_cur)?;
    if layer == 0 {
        return Ok(s_cur.clone());
    }
    let prev = prev.ok_or_else(|| {
        Error::contract(format!("layer {layer} requires the previous layer's score state"))
    })?;
    if prev.scores.shape() != s_cur.shape() {
        return Err(Error::shape("residual_scores", s_cur.shape(), prev.scores.shape()));
    }
    if prev.layer_index + 1 != layer {
        return Err(Error::contract(format!(
            "score state from layer {} fed into layer {layer}",
            prev.layer_index
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = s_cur.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(prev.scores.data()) {
        *o = alpha * *o + (1.0 - alpha) * p;
    }
    Ok(out)
}

/// Row-stochastic attention weights: softmax of the scores along the last
/// extent.
pub fn attention_weights(s: &Tensor) -> Tensor {
    let (rows, cols) = s.rows_cols();
    let mut out = Tensor::zeros(s.shape().to_vec());
    kernels::softmax_rows(s.data(), rows, cols, out.data_mut());
    out
}

/// X~ = A V per head; each output token is a convex combination of value
/// rows.
pub fn attend(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (h, n, n2) = check_head_stack("attend", a)?;
    let (hv, nv, d) = check_head_stack("attend", v)?;
    if n != n2 || h != hv || n != nv {
        return Err(Error::shape("attend", a.shape(), v.shape()));
    }
    let mut out = Tensor::zeros(vec![h, n, d]);
    for i in 0..h {
        kernels::matmul_nn_acc(
            &a.data()[i * n * n..(i + 1) * n * n],
            &v.data()[i * n * d..(i + 1) * n * d],
            n,
            n,
            d,
            &mut out.data_mut()[i * n * d..(i + 1) * n * d],
        );
    }
    Ok(out)
}

/// Tape-level vars for one attention layer.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

/// Outputs of one tape-level MHSA application.
pub struct MhsaVars {
    pub out: Var,
    /// Post-residual pre-softmax scores `[H, N, N]`.
    pub scores: Var,
    /// Row-stochastic attention weights `[H, N, N]`.
    pub weights: Var,
}

/// Q K^T / sqrt(d) on the tape, batched over heads.
pub(crate) fn tape_scaled_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = *tape.value(q).shape().last().unwrap();
    let s = tape.matmul_nt(q, k)?;
    Ok(tape.scale(s, 1.0 / (d as Real).sqrt()))
}

/// One MHSA layer on the tape. `mix` carries the previous layer's score var
/// and the gate var when residual mixing applies; `None` means plain
/// first-layer (or ViT) scoring.
pub(crate) fn tape_mhsa(
    tape: &mut Tape,
    x: Var,
    w: &AttnVars,
    mix: Option<(Var, Var)>,
) -> Result<MhsaVars> {
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let qh = tape.split_heads(q, w.heads)?;
    let kh = tape.split_heads(k, w.heads)?;
    let vh = tape.split_heads(v, w.heads)?;
    let s_cur = tape_scaled_scores(tape, qh, kh)?;
    let scores = match mix {
        None => s_cur,
        Some((prev, alpha)) => tape.lerp(s_cur, prev, alpha)?,
    };
    let weights = tape.softmax_lastdim(scores);
    let ctx = tape.matmul(weights, vh)?;
    let merged = tape.merge_heads(ctx)?;
    let out = tape.matmul(merged, w.w_o)?;
    Ok(MhsaVars { out, scores, weights })
}

/// Result of a standalone MHSA forward pass.
#[derive(Debug)]
pub struct MhsaOutput {
    pub out: Tensor,
    /// Post-residual score state for the next layer.
    pub state: ScoreState,
    /// Captured attention weights `[H, N, N]`.
    pub weights: Tensor,
}

/// Full multi-head layer: project, split heads, score, mix, softmax, attend,
/// merge, project out.
pub fn mhsa_forward(
    x: &Tensor,
    p: &AttentionParams,
    prev: Option<&ScoreState>,
    gate: &AlphaGate,
    layer: usize,
) -> Result<MhsaOutput> {
    if x.rank() != 2 || x.shape()[1] != p.dim() {
        return Err(Error::shape("mhsa_forward", x.shape(), p.w_q.shape()));
    }
    if !x.is_finite() {
        return Err(Error::non_finite("mhsa_forward input"));
    }
    let n = x.shape()[0];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = AttnVars {
        w_q: tape.constant(p.w_q.clone()),
        w_k: tape.constant(p.w_k.clone()),
        w_v: tape.constant(p.w_v.clone()),
        w_o: tape.constant(p.w_o.clone()),
        heads: p.heads,
    };
    let mix = if layer == 0 {
        None
    } else {
        let prev = prev.ok_or_else(|| {
            Error::contract(format!("layer {layer} requires the previous layer's score state"))
        })?;
        if prev.scores.shape() != [p.heads, n, n] {
            return Err(Error::shape("mhsa_forward", &[p.heads, n, n], prev.scores.shape()));
        }
        if prev.layer_index + 1 != layer {
            return Err(Error::contract(format!(
                "score state from layer {} fed into layer {layer}",
                prev.layer_index
            )));
        }
        let prev_var = tape.constant(prev.scores.clone());
        let alpha_var = tape.constant(Tensor::scalar(gate.effective(layer)));
        Some((prev_var, alpha_var))
    };
    let mh = tape_mhsa(&mut tape, xv, &vars, mix)?;
    Ok(MhsaOutput {
        out: tape.value(mh.out).clone(),
        state: ScoreState { scores: tape.value(mh.scores).clone(), layer_index: layer },
        weights: tape.value(mh.weights).clone(),
    })
}
