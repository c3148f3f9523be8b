//! Full encoder: patch embedding, class token, stacked pre-norm transformer
//! blocks with optional residual attention, classification head.

use crate::attention::{
    tape_mhsa, AlphaGate, AlphaMode, AttentionParams, AttnVars, MhsaVars, ScoreState,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const LAYER_NORM_EPS: Real = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vit,
    Revit,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Vit => write!(f, "vit"),
            Variant::Revit => write!(f, "revit"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Variant::Vit),
            "revit" => Ok(Variant::Revit),
            _ => Err(Error::invalid(format!("unknown variant '{s}' (expected vit | revit)"))),
        }
    }
}

/// Full architectural description; the single source of truth for shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub variant: Variant,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Small configuration used throughout the test suite: 32px images,
    /// 8px patches, dim 64, depth 6, 4 heads.
    pub fn toy(variant: Variant) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            variant,
            alpha_mode: AlphaMode::Shared,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::invalid("depth, mlp_ratio and num_classes must be positive"));
        }
        if let AlphaMode::Fixed(v) = self.alpha_mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("fixed alpha {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens, class token excluded.
    pub fn patch_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.patch_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    fn has_alpha_param(&self) -> bool {
        self.variant == Variant::Revit
            && matches!(self.alpha_mode, AlphaMode::Shared | AlphaMode::PerLayer)
    }
}

/// Named parameter tensors in a fixed definition order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }
}

enum InitKind {
    TruncNormal,
    PosNormal,
    Zeros,
    Ones,
}

/// Name, shape, and initializer of every parameter for a config, in
/// definition order.
fn param_spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let dim = cfg.dim;
    let mut spec = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), dim], InitKind::TruncNormal),
        ("patch_embed.bias".to_string(), vec![dim], InitKind::Zeros),
        ("cls_token".to_string(), vec![1, dim], InitKind::TruncNormal),
        ("pos_embed".to_string(), vec![cfg.tokens(), dim], InitKind::PosNormal),
    ];
    for l in 0..cfg.depth {
        spec.push((format!("block{l}.ln1.gamma"), vec![dim], InitKind::Ones));
        spec.push((format!("block{l}.ln1.beta"), vec![dim], InitKind::Zeros));
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            spec.push((format!("block{l}.attn.{w}"), vec![dim, dim], InitKind::TruncNormal));
        }
        spec.push((format!("block{l}.ln2.gamma"), vec![dim], InitKind::Ones));
        spec.push((format!("block{l}.ln2.beta"), vec![dim], InitKind::Zeros));
        spec.push((format!("block{l}.mlp.w_a"), vec![dim, cfg.hidden_dim()], InitKind::TruncNormal));
        spec.push((format!("block{l}.mlp.b_a"), vec![cfg.hidden_dim()], InitKind::Zeros));
        spec.push((format!("block{l}.mlp.w_b"), vec![cfg.hidden_dim(), dim], InitKind::TruncNormal));
        spec.push((format!("block{l}.mlp.b_b"), vec![dim], InitKind::Zeros));
    }
    spec.push(("ln_f.gamma".to_string(), vec![dim], InitKind::Ones));
    spec.push(("ln_f.beta".to_string(), vec![dim], InitKind::Zeros));
    spec.push(("head.weight".to_string(), vec![dim, cfg.num_classes], InitKind::TruncNormal));
    spec.push(("head.bias".to_string(), vec![cfg.num_classes], InitKind::Zeros));
    if cfg.has_alpha_param() {
        let n = match cfg.alpha_mode {
            AlphaMode::Shared => 1,
            AlphaMode::PerLayer => cfg.depth,
            AlphaMode::Fixed(_) => unreachable!(),
        };
        spec.push(("alpha_raw".to_string(), vec![n], InitKind::Zeros));
    }
    spec
}

/// Expected (name, shape) pairs for a config; checkpoint loading validates
/// against this.
pub fn expected_params(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_spec(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Standard normal draw via Box-Muller.
    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal(0, std) truncated to two standard deviations.
    fn trunc(&mut self, std: f64) -> Real {
        loop {
            let z = self.next() * std;
            if z.abs() <= 2.0 * std {
                return z as Real;
            }
        }
    }
}

/// Deterministic parameter initialization: weights truncated normal
/// (std 0.02), biases zero, positional embedding normal(0, 0.02), gate raw
/// parameter zero (alpha starts at 0.5).
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut g = Gaussian::new(cfg.seed);
    let mut params = ParamSet::new();
    for (name, shape, kind) in param_spec(cfg) {
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = match kind {
            InitKind::TruncNormal => (0..numel).map(|_| g.trunc(INIT_STD)).collect(),
            InitKind::PosNormal => (0..numel).map(|_| (g.next() * INIT_STD) as Real).collect(),
            InitKind::Zeros => vec![0.0; numel],
            InitKind::Ones => vec![1.0; numel],
        };
        params.push(name, Tensor::new(shape, data)?.with_requires_grad());
    }
    Ok(params)
}

/// Check that a parameter set carries exactly the names and shapes the
/// config demands.
pub fn validate_params(cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let expected = expected_params(cfg);
    if params.len() != expected.len() {
        return Err(Error::invalid(format!(
            "parameter set has {} tensors, config expects {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(Error::invalid(format!("missing parameter '{name}'"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::shape("validate_params", shape, t.shape()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Non-overlapping patches flattened to rows, channel-major within a patch,
/// patches scanned row-major over the grid.
pub fn image_to_patch_rows(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::shape("image_to_patch_rows", &[c, s, s], image.shape()));
    }
    let g = cfg.grid();
    let pd = cfg.patch_dim();
    let mut rows = vec![0.0; g * g * pd];
    let data = image.data();
    for pr in 0..g {
        for pc in 0..g {
            let row = &mut rows[(pr * g + pc) * pd..(pr * g + pc + 1) * pd];
            let mut idx = 0;
            for ch in 0..c {
                for y in 0..p {
                    let src = ch * s * s + (pr * p + y) * s + pc * p;
                    row[idx..idx + p].copy_from_slice(&data[src..src + p]);
                    idx += p;
                }
            }
        }
    }
    Tensor::new(vec![g * g, pd], rows)
}

/// Tape vars for one transformer block.
pub(crate) struct TapeBlock {
    ln1: (Var, Var),
    attn: AttnVars,
    ln2: (Var, Var),
    w_a: Var,
    b_a: Var,
    w_b: Var,
    b_b: Var,
}

/// All parameter vars bound onto one tape, aligned with the `ParamSet`
/// definition order for gradient extraction.
pub struct BoundModel {
    pub(crate) patch_w: Var,
    pub(crate) patch_b: Var,
    pub(crate) cls: Var,
    pub(crate) pos: Var,
    pub(crate) blocks: Vec<TapeBlock>,
    pub(crate) ln_f: (Var, Var),
    pub(crate) head_w: Var,
    pub(crate) head_b: Var,
    /// Effective per-layer gate vars; `None` for the plain variant.
    pub(crate) alphas: Vec<Option<Var>>,
    /// Leaf vars in `ParamSet` order.
    pub leaves: Vec<(String, Var)>,
}

/// Bind every parameter as a tape leaf and pre-compute the per-layer gate
/// vars.
pub fn bind_params(tape: &mut Tape, cfg: &ModelConfig, params: &ParamSet) -> Result<BoundModel> {
    validate_params(cfg, params)?;
    let mut leaves = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        leaves.push((name.to_string(), tape.leaf(t)));
    }
    let var = |name: &str| -> Var {
        leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    };
    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        blocks.push(TapeBlock {
            ln1: (var(&format!("block{l}.ln1.gamma")), var(&format!("block{l}.ln1.beta"))),
            attn: AttnVars {
                w_q: var(&format!("block{l}.attn.w_q")),
                w_k: var(&format!("block{l}.attn.w_k")),
                w_v: var(&format!("block{l}.attn.w_v")),
                w_o: var(&format!("block{l}.attn.w_o")),
                heads: cfg.heads,
            },
            ln2: (var(&format!("block{l}.ln2.gamma")), var(&format!("block{l}.ln2.beta"))),
            w_a: var(&format!("block{l}.mlp.w_a")),
            b_a: var(&format!("block{l}.mlp.b_a")),
            w_b: var(&format!("block{l}.mlp.w_b")),
            b_b: var(&format!("block{l}.mlp.b_b")),
        });
    }
    let alphas: Vec<Option<Var>> = match (cfg.variant, cfg.alpha_mode) {
        (Variant::Vit, _) => vec![None; cfg.depth],
        (Variant::Revit, AlphaMode::Shared) => {
            let a = tape.sigmoid(var("alpha_raw"));
            vec![Some(a); cfg.depth]
        }
        (Variant::Revit, AlphaMode::PerLayer) => {
            let a = tape.sigmoid(var("alpha_raw"));
            let mut per = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                per.push(Some(tape.slice_rows(a, l, 1)?));
            }
            per
        }
        (Variant::Revit, AlphaMode::Fixed(v)) => {
            let a = tape.constant(Tensor::scalar(v));
            vec![Some(a); cfg.depth]
        }
    };
    Ok(BoundModel {
        patch_w: var("patch_embed.weight"),
        patch_b: var("patch_embed.bias"),
        cls: var("cls_token"),
        pos: var("pos_embed"),
        blocks,
        ln_f: (var("ln_f.gamma"), var("ln_f.beta")),
        head_w: var("head.weight"),
        head_b: var("head.bias"),
        alphas,
        leaves,
    })
}

/// Patch projection, class token, positional embedding, on the tape.
pub fn tape_embed(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ModelConfig,
    bound: &BoundModel,
) -> Result<Var> {
    let patches = image_to_patch_rows(image, cfg)?;
    let pv = tape.constant(patches);
    let proj = tape.matmul(pv, bound.patch_w)?;
    let proj = tape.add_bias(proj, bound.patch_b)?;
    let tokens = tape.concat_rows(bound.cls, proj)?;
    tape.add(tokens, bound.pos)
}

/// One pre-norm transformer block on the tape.
pub(crate) fn tape_block(
    tape: &mut Tape,
    x: Var,
    block: &TapeBlock,
    mix: Option<(Var, Var)>,
) -> Result<(Var, MhsaVars)> {
    let h = tape.layer_norm(x, block.ln1.0, block.ln1.1, LAYER_NORM_EPS)?;
    let mh = tape_mhsa(tape, h, &block.attn, mix)?;
    let x = tape.add(x, mh.out)?;
    let h = tape.layer_norm(x, block.ln2.0, block.ln2.1, LAYER_NORM_EPS)?;
    let a = tape.matmul(h, block.w_a)?;
    let a = tape.add_bias(a, block.b_a)?;
    let a = tape.gelu(a);
    let o = tape.matmul(a, block.w_b)?;
    let o = tape.add_bias(o, block.b_b)?;
    let x = tape.add(x, o)?;
    Ok((x, mh))
}

/// Vars produced by a full forward pass on a tape.
pub struct TapeForward {
    /// `[1, num_classes]`
    pub logits: Var,
    pub attn: Vec<Var>,
    pub scores: Vec<Var>,
    pub features: Vec<Var>,
}

/// Encoder stack over already-embedded tokens, then the classification head.
pub fn tape_encode(
    tape: &mut Tape,
    tokens: Var,
    cfg: &ModelConfig,
    bound: &BoundModel,
    capture: bool,
) -> Result<TapeForward> {
    let mut x = tokens;
    let mut state: Option<Var> = None;
    let mut attn = Vec::new();
    let mut scores = Vec::new();
    let mut features = Vec::new();
    for l in 0..cfg.depth {
        let mix = match (cfg.variant, l, state) {
            (Variant::Revit, l, Some(prev)) if l > 0 => {
                let alpha = bound.alphas[l]
                    .ok_or_else(|| Error::contract(format!("layer {l} has no gate var")))?;
                Some((prev, alpha))
            }
            _ => None,
        };
        let (next, mh) = tape_block(tape, x, &bound.blocks[l], mix)?;
        if cfg.variant == Variant::Revit {
            state = Some(mh.scores);
        }
        if capture {
            attn.push(mh.weights);
            scores.push(mh.scores);
            features.push(next);
        }
        x = next;
    }
    let x = tape.layer_norm(x, bound.ln_f.0, bound.ln_f.1, LAYER_NORM_EPS)?;
    let cls = tape.slice_rows(x, 0, 1)?;
    let logits = tape.matmul(cls, bound.head_w)?;
    let logits = tape.add_bias(logits, bound.head_b)?;
    Ok(TapeForward { logits, attn, scores, features })
}

/// Full forward pass on the tape: embed, encode, classify.
pub fn tape_forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ModelConfig,
    bound: &BoundModel,
    capture: bool,
) -> Result<TapeForward> {
    let tokens = tape_embed(tape, image, cfg, bound)?;
    tape_encode(tape, tokens, cfg, bound, capture)
}

/// Everything captured from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// `[num_classes]`
    pub logits: Tensor,
    /// Per-layer attention weights `[H, N, N]`; empty unless captured.
    pub attn: Vec<Tensor>,
    /// Per-layer post-residual pre-softmax scores `[H, N, N]`.
    pub scores: Vec<Tensor>,
    /// Per-layer block output features `[N, dim]`.
    pub features: Vec<Tensor>,
}

fn extract_record(tape: &Tape, fwd: &TapeForward) -> ForwardRecord {
    let logits2d = tape.value(fwd.logits);
    let logits = Tensor::new(vec![logits2d.numel()], logits2d.data().to_vec())
        .expect("logits extraction");
    ForwardRecord {
        logits,
        attn: fwd.attn.iter().map(|&v| tape.value(v).clone()).collect(),
        scores: fwd.scores.iter().map(|&v| tape.value(v).clone()).collect(),
        features: fwd.features.iter().map(|&v| tape.value(v).clone()).collect(),
    }
}

/// Pure forward pass over one image.
pub fn model_forward(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ParamSet,
    capture: bool,
) -> Result<ForwardRecord> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, cfg, params)?;
    let fwd = tape_forward(&mut tape, image, cfg, &bound, capture)?;
    Ok(extract_record(&tape, &fwd))
}

/// Forward pass starting from an explicit token matrix `[N, dim]`, bypassing
/// patch embedding. Used to probe token-level properties such as permutation
/// equivariance.
pub fn forward_from_tokens(
    tokens: &Tensor,
    cfg: &ModelConfig,
    params: &ParamSet,
    capture: bool,
) -> Result<ForwardRecord> {
    if tokens.shape() != [cfg.tokens(), cfg.dim] {
        return Err(Error::shape("forward_from_tokens", &[cfg.tokens(), cfg.dim], tokens.shape()));
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, cfg, params)?;
    let tv = tape.constant(tokens.clone());
    let fwd = tape_encode(&mut tape, tv, cfg, &bound, capture)?;
    Ok(extract_record(&tape, &fwd))
}

/// Patch embedding as a standalone operation: flatten patches, project,
/// prepend the class token, add positional embeddings.
pub fn patch_embed(image: &Tensor, cfg: &ModelConfig, params: &ParamSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, cfg, params)?;
    let tokens = tape_embed(&mut tape, image, cfg, &bound)?;
    Ok(tape.value(tokens).clone())
}

/// Weights of one block extracted from a parameter set.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
}

pub fn block_params(cfg: &ModelConfig, params: &ParamSet, layer: usize) -> Result<BlockParams> {
    validate_params(cfg, params)?;
    if layer >= cfg.depth {
        return Err(Error::invalid(format!("layer {layer} out of range for depth {}", cfg.depth)));
    }
    let get = |suffix: &str| -> Tensor {
        params.get(&format!("block{layer}.{suffix}")).expect("validated above").clone()
    };
    Ok(BlockParams {
        ln1_gamma: get("ln1.gamma"),
        ln1_beta: get("ln1.beta"),
        attn: AttentionParams::new(
            get("attn.w_q"),
            get("attn.w_k"),
            get("attn.w_v"),
            get("attn.w_o"),
            cfg.heads,
        )?,
        ln2_gamma: get("ln2.gamma"),
        ln2_beta: get("ln2.beta"),
        w_a: get("mlp.w_a"),
        b_a: get("mlp.b_a"),
        w_b: get("mlp.w_b"),
        b_b: get("mlp.b_b"),
    })
}

/// One pre-norm block as a standalone operation. `gate` is `None` for the
/// plain variant, in which case any supplied score state is ignored.
pub fn block_forward(
    x: &Tensor,
    block: &BlockParams,
    prev: Option<&ScoreState>,
    gate: Option<&AlphaGate>,
    layer: usize,
) -> Result<(Tensor, ScoreState)> {
    let dim = block.attn.dim();
    if x.rank() != 2 || x.shape()[1] != dim {
        return Err(Error::shape("block_forward", x.shape(), &[dim]));
    }
    let n = x.shape()[0];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tb = TapeBlock {
        ln1: (
            tape.constant(block.ln1_gamma.clone()),
            tape.constant(block.ln1_beta.clone()),
        ),
        attn: AttnVars {
            w_q: tape.constant(block.attn.w_q.clone()),
            w_k: tape.constant(block.attn.w_k.clone()),
            w_v: tape.constant(block.attn.w_v.clone()),
            w_o: tape.constant(block.attn.w_o.clone()),
            heads: block.attn.heads,
        },
        ln2: (
            tape.constant(block.ln2_gamma.clone()),
            tape.constant(block.ln2_beta.clone()),
        ),
        w_a: tape.constant(block.w_a.clone()),
        b_a: tape.constant(block.b_a.clone()),
        w_b: tape.constant(block.w_b.clone()),
        b_b: tape.constant(block.b_b.clone()),
    };
    let mix = match gate {
        None => None,
        Some(gate) if layer == 0 => {
            let _ = gate;
            None
        }
        Some(gate) => {
            let prev = prev.ok_or_else(|| {
                Error::contract(format!("layer {layer} requires the previous layer's score state"))
            })?;
            if prev.scores.shape() != [block.attn.heads, n, n] {
                return Err(Error::shape(
                    "block_forward",
                    &[block.attn.heads, n, n],
                    prev.scores.shape(),
                ));
            }
            let pv = tape.constant(prev.scores.clone());
            let av = tape.constant(Tensor::scalar(gate.effective(layer)));
            Some((pv, av))
        }
    };
    let (out, mh) = tape_block(&mut tape, xv, &tb, mix)?;
    Ok((
        tape.value(out).clone(),
        ScoreState { scores: tape.value(mh.scores).clone(), layer_index: layer },
    ))
}
