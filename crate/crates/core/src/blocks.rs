//! Transformer block variants and gating layers.
//!
//! Three dataflows over the same submodules (relative attention + position-
//! wise MLP):
//!
//! - `TrXl`: post-norm residual blocks (the canonical arrangement),
//! - `TrXlI`: layer norm moved to the submodule inputs, ReLU on submodule
//!   outputs, leaving an untransformed residual path,
//! - `GTrXl`: the reordered block with the residual additions replaced by
//!   learned gating layers.
//!
//! Gating layers combine the skip stream `x` with the submodule stream `y`;
//! the gate bias `b_g` is a per-layer scalar that, initialized positive,
//! biases every gate toward passing `x` through unchanged (gated identity
//! initialization).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{relative_attention_core, AttentionParams, AttentionVars, MemoryState};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TrXl,
    TrXlI,
    GTrXl,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::TrXl => "trxl",
            Variant::TrXlI => "trxl-i",
            Variant::GTrXl => "gtrxl",
        };
        write!(f, "{}", s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    /// Plain addition x + y (TrXL and TrXL-I).
    Residual,
    Input,
    Output,
    Highway,
    SigTanh,
    Gru,
}

/// Learnable pieces of one gating layer. Only the fields its kind requires
/// exist; `b_g` is a single scalar broadcast across the model width.
#[derive(Debug, Clone)]
pub enum GateParams {
    Residual,
    Input { w_g: Tensor },
    Output { w_g: Tensor, b_g: Tensor },
    Highway { w_g: Tensor, b_g: Tensor },
    SigTanh { w_g: Tensor, u_g: Tensor, b_g: Tensor },
    Gru {
        w_r: Tensor,
        u_r: Tensor,
        w_z: Tensor,
        u_z: Tensor,
        w_g: Tensor,
        u_g: Tensor,
        b_g: Tensor,
    },
}

impl GateParams {
    pub fn kind(&self) -> GateKind {
        match self {
            GateParams::Residual => GateKind::Residual,
            GateParams::Input { .. } => GateKind::Input,
            GateParams::Output { .. } => GateKind::Output,
            GateParams::Highway { .. } => GateKind::Highway,
            GateParams::SigTanh { .. } => GateKind::SigTanh,
            GateParams::Gru { .. } => GateKind::Gru,
        }
    }

    pub fn param_entries(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            GateParams::Residual => vec![],
            GateParams::Input { w_g } => vec![("w_g", w_g)],
            GateParams::Output { w_g, b_g } => vec![("w_g", w_g), ("b_g", b_g)],
            GateParams::Highway { w_g, b_g } => vec![("w_g", w_g), ("b_g", b_g)],
            GateParams::SigTanh { w_g, u_g, b_g } => {
                vec![("w_g", w_g), ("u_g", u_g), ("b_g", b_g)]
            }
            GateParams::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => vec![
                ("w_r", w_r),
                ("u_r", u_r),
                ("w_z", w_z),
                ("u_z", u_z),
                ("w_g", w_g),
                ("u_g", u_g),
                ("b_g", b_g),
            ],
        }
    }

    pub fn param_entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            GateParams::Residual => vec![],
            GateParams::Input { w_g } => vec![("w_g", w_g)],
            GateParams::Output { w_g, b_g } => vec![("w_g", w_g), ("b_g", b_g)],
            GateParams::Highway { w_g, b_g } => vec![("w_g", w_g), ("b_g", b_g)],
            GateParams::SigTanh { w_g, u_g, b_g } => {
                vec![("w_g", w_g), ("u_g", u_g), ("b_g", b_g)]
            }
            GateParams::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => vec![
                ("w_r", w_r),
                ("u_r", u_r),
                ("w_z", w_z),
                ("u_z", u_z),
                ("w_g", w_g),
                ("u_g", u_g),
                ("b_g", b_g),
            ],
        }
    }

    pub fn inject(&self, tape: &mut Tape) -> GateVars {
        match self {
            GateParams::Residual => GateVars::Residual,
            GateParams::Input { w_g } => GateVars::Input { w_g: tape.param(w_g) },
            GateParams::Output { w_g, b_g } => GateVars::Output {
                w_g: tape.param(w_g),
                b_g: tape.param(b_g),
            },
            GateParams::Highway { w_g, b_g } => GateVars::Highway {
                w_g: tape.param(w_g),
                b_g: tape.param(b_g),
            },
            GateParams::SigTanh { w_g, u_g, b_g } => GateVars::SigTanh {
                w_g: tape.param(w_g),
                u_g: tape.param(u_g),
                b_g: tape.param(b_g),
            },
            GateParams::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => GateVars::Gru {
                w_r: tape.param(w_r),
                u_r: tape.param(u_r),
                w_z: tape.param(w_z),
                u_z: tape.param(u_z),
                w_g: tape.param(w_g),
                u_g: tape.param(u_g),
                b_g: tape.param(b_g),
            },
        }
    }
}

/// Tape handles for one injected [`GateParams`].
#[derive(Debug, Clone, Copy)]
pub enum GateVars {
    Residual,
    Input { w_g: Var },
    Output { w_g: Var, b_g: Var },
    Highway { w_g: Var, b_g: Var },
    SigTanh { w_g: Var, u_g: Var, b_g: Var },
    Gru {
        w_r: Var,
        u_r: Var,
        w_z: Var,
        u_z: Var,
        w_g: Var,
        u_g: Var,
        b_g: Var,
    },
}

impl GateVars {
    pub fn kind(&self) -> GateKind {
        match self {
            GateVars::Residual => GateKind::Residual,
            GateVars::Input { .. } => GateKind::Input,
            GateVars::Output { .. } => GateKind::Output,
            GateVars::Highway { .. } => GateKind::Highway,
            GateVars::SigTanh { .. } => GateKind::SigTanh,
            GateVars::Gru { .. } => GateKind::Gru,
        }
    }

    /// Handles in the same order as [`GateParams::param_entries`].
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            GateVars::Residual => vec![],
            GateVars::Input { w_g } => vec![*w_g],
            GateVars::Output { w_g, b_g } => vec![*w_g, *b_g],
            GateVars::Highway { w_g, b_g } => vec![*w_g, *b_g],
            GateVars::SigTanh { w_g, u_g, b_g } => vec![*w_g, *u_g, *b_g],
            GateVars::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => {
                vec![*w_r, *u_r, *w_z, *u_z, *w_g, *u_g, *b_g]
            }
        }
    }
}

/// Fresh gate parameters: weight matrices with variance-1/fan_in uniform
/// init, and the identity bias (where the kind has one) set to `b_g_init` so
/// the gate initially passes the skip stream.
pub fn init_gate(kind: GateKind, d_model: usize, b_g_init: f64, rng: &mut impl Rng) -> GateParams {
    let bias = Tensor::scalar(b_g_init);
    match kind {
        GateKind::Residual => GateParams::Residual,
        GateKind::Input => GateParams::Input {
            w_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
        },
        GateKind::Output => GateParams::Output {
            w_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            b_g: bias,
        },
        GateKind::Highway => GateParams::Highway {
            w_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            b_g: bias,
        },
        GateKind::SigTanh => GateParams::SigTanh {
            w_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            u_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            b_g: bias,
        },
        GateKind::Gru => GateParams::Gru {
            w_r: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            u_r: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            w_z: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            u_z: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            w_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            u_g: Tensor::uniform_fan_in(vec![d_model, d_model], d_model, rng),
            b_g: bias,
        },
    }
}

/// Combine skip stream `x` with submodule stream `y`.
///
/// - Residual: x + y
/// - Input:    σ(x·W_g) ⊙ x + y
/// - Output:   x + σ(x·W_g − b_g) ⊙ y
/// - Highway:  σ(x·W_g + b_g) ⊙ x + (1 − σ(x·W_g + b_g)) ⊙ y
/// - SigTanh:  x + σ(y·W_g − b) ⊙ tanh(y·U_g)
/// - GRU:      r = σ(y·W_r + x·U_r), z = σ(y·W_z + x·U_z − b_g),
///             ĥ = tanh(y·W_g + (r ⊙ x)·U_g), out = (1 − z) ⊙ x + z ⊙ ĥ
pub fn apply_gate(tape: &mut Tape, gate: &GateVars, x: Var, y: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::ShapeMismatch {
            op: "apply_gate",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    match gate {
        GateVars::Residual => tape.add(x, y),
        GateVars::Input { w_g } => {
            let pre = tape.matmul(x, *w_g)?;
            let s = tape.sigmoid(pre);
            let sx = tape.mul(s, x)?;
            tape.add(sx, y)
        }
        GateVars::Output { w_g, b_g } => {
            let pre = tape.matmul(x, *w_g)?;
            let neg_b = tape.scale(*b_g, -1.0);
            let pre = tape.add_scalar(pre, neg_b)?;
            let s = tape.sigmoid(pre);
            let sy = tape.mul(s, y)?;
            tape.add(x, sy)
        }
        GateVars::Highway { w_g, b_g } => {
            let pre = tape.matmul(x, *w_g)?;
            let pre = tape.add_scalar(pre, *b_g)?;
            let s = tape.sigmoid(pre);
            let sx = tape.mul(s, x)?;
            let ones = tape.constant(Tensor::from_vec(
                tape.shape(y).to_vec(),
                vec![1.0; tape.value(y).numel()],
            )?);
            let inv = tape.sub(ones, s)?;
            let iy = tape.mul(inv, y)?;
            tape.add(sx, iy)
        }
        GateVars::SigTanh { w_g, u_g, b_g } => {
            let pre = tape.matmul(y, *w_g)?;
            let neg_b = tape.scale(*b_g, -1.0);
            let pre = tape.add_scalar(pre, neg_b)?;
            let s = tape.sigmoid(pre);
            let ty = tape.matmul(y, *u_g)?;
            let ty = tape.tanh(ty);
            let sy = tape.mul(s, ty)?;
            tape.add(x, sy)
        }
        GateVars::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => {
            let r_pre_a = tape.matmul(y, *w_r)?;
            let r_pre_b = tape.matmul(x, *u_r)?;
            let r_pre = tape.add(r_pre_a, r_pre_b)?;
            let r = tape.sigmoid(r_pre);

            let z_pre_a = tape.matmul(y, *w_z)?;
            let z_pre_b = tape.matmul(x, *u_z)?;
            let z_pre = tape.add(z_pre_a, z_pre_b)?;
            let neg_b = tape.scale(*b_g, -1.0);
            let z_pre = tape.add_scalar(z_pre, neg_b)?;
            let z = tape.sigmoid(z_pre);

            let rx = tape.mul(r, x)?;
            let h_pre_a = tape.matmul(y, *w_g)?;
            let h_pre_b = tape.matmul(rx, *u_g)?;
            let h_pre = tape.add(h_pre_a, h_pre_b)?;
            let h = tape.tanh(h_pre);

            let ones = tape.constant(Tensor::from_vec(
                tape.shape(x).to_vec(),
                vec![1.0; tape.value(x).numel()],
            )?);
            let one_minus_z = tape.sub(ones, z)?;
            let keep = tape.mul(one_minus_z, x)?;
            let update = tape.mul(z, h)?;
            tape.add(keep, update)
        }
    }
}

/// Position-wise two-layer network: ReLU inner, linear output.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: Tensor::uniform_fan_in(vec![d_model, d_ff], d_model, rng),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::uniform_fan_in(vec![d_ff, d_model], d_ff, rng),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn param_entries(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn param_entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp_forward(tape: &mut Tape, mlp: &MlpVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, mlp.w2)?;
    tape.add_row(out, mlp.b2)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(d_model: usize) -> Self {
        LayerNormParams {
            gain: Tensor::from_vec(vec![d_model], vec![1.0; d_model]).expect("static shape"),
            bias: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn param_entries(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gain", &self.gain), ("bias", &self.bias)]
    }

    pub fn param_entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("gain", &mut self.gain), ("bias", &mut self.bias)]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Everything one block owns: attention, MLP, two layer norms, two gates.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub mlp: MlpParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub gate_mha: GateParams,
    pub gate_mlp: GateParams,
}

pub struct BlockVars {
    pub attention: AttentionVars,
    pub mlp: MlpVars,
    pub ln1: LayerNormVars,
    pub ln2: LayerNormVars,
    pub gate_mha: GateVars,
    pub gate_mlp: GateVars,
}

impl BlockVars {
    /// Handles in the same order as [`BlockParams::param_entries`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = self.attention.param_vars();
        out.extend([self.mlp.w1, self.mlp.b1, self.mlp.w2, self.mlp.b2]);
        out.extend([self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias]);
        out.extend(self.gate_mha.param_vars());
        out.extend(self.gate_mlp.param_vars());
        out
    }
}

impl BlockParams {
    pub fn init(config: &StackConfig, rng: &mut impl Rng) -> Self {
        let gate_kind = config.block_gate_kind();
        BlockParams {
            attention: AttentionParams::init(config.d_model, config.heads, config.head_dim, rng),
            mlp: MlpParams::init(config.d_model, config.d_ff(), rng),
            ln1: LayerNormParams::init(config.d_model),
            ln2: LayerNormParams::init(config.d_model),
            gate_mha: init_gate(gate_kind, config.d_model, config.gate_bias_init, rng),
            gate_mlp: init_gate(gate_kind, config.d_model, config.gate_bias_init, rng),
        }
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.attention.param_entries() {
            out.push((format!("attn.{}", n), t));
        }
        for (n, t) in self.mlp.param_entries() {
            out.push((format!("mlp.{}", n), t));
        }
        for (n, t) in self.ln1.param_entries() {
            out.push((format!("ln1.{}", n), t));
        }
        for (n, t) in self.ln2.param_entries() {
            out.push((format!("ln2.{}", n), t));
        }
        for (n, t) in self.gate_mha.param_entries() {
            out.push((format!("gate_mha.{}", n), t));
        }
        for (n, t) in self.gate_mlp.param_entries() {
            out.push((format!("gate_mlp.{}", n), t));
        }
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.attention.param_entries_mut() {
            out.push((format!("attn.{}", n), t));
        }
        for (n, t) in self.mlp.param_entries_mut() {
            out.push((format!("mlp.{}", n), t));
        }
        for (n, t) in self.ln1.param_entries_mut() {
            out.push((format!("ln1.{}", n), t));
        }
        for (n, t) in self.ln2.param_entries_mut() {
            out.push((format!("ln2.{}", n), t));
        }
        for (n, t) in self.gate_mha.param_entries_mut() {
            out.push((format!("gate_mha.{}", n), t));
        }
        for (n, t) in self.gate_mlp.param_entries_mut() {
            out.push((format!("gate_mlp.{}", n), t));
        }
        out
    }

    pub fn inject(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            attention: self.attention.inject(tape),
            mlp: MlpVars {
                w1: tape.param(&self.mlp.w1),
                b1: tape.param(&self.mlp.b1),
                w2: tape.param(&self.mlp.w2),
                b2: tape.param(&self.mlp.b2),
            },
            ln1: LayerNormVars {
                gain: tape.param(&self.ln1.gain),
                bias: tape.param(&self.ln1.bias),
            },
            ln2: LayerNormVars {
                gain: tape.param(&self.ln2.gain),
                bias: tape.param(&self.ln2.bias),
            },
            gate_mha: self.gate_mha.inject(tape),
            gate_mlp: self.gate_mlp.inject(tape),
        }
    }
}

/// Full architectural description of a stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// MLP inner width; 0 means the 4·D default.
    #[serde(default)]
    pub d_ff: usize,
    pub mem_len: usize,
    pub gate: GateKind,
    #[serde(default)]
    pub gate_bias_init: f64,
}

impl StackConfig {
    pub fn gtrxl(n_layers: usize, d_model: usize, heads: usize, mem_len: usize) -> Self {
        StackConfig {
            variant: Variant::GTrXl,
            n_layers,
            d_model,
            heads,
            head_dim: d_model / heads,
            d_ff: 0,
            mem_len,
            gate: GateKind::Gru,
            gate_bias_init: 2.0,
        }
    }

    pub fn trxl(n_layers: usize, d_model: usize, heads: usize, mem_len: usize) -> Self {
        StackConfig {
            variant: Variant::TrXl,
            gate: GateKind::Residual,
            gate_bias_init: 0.0,
            ..StackConfig::gtrxl(n_layers, d_model, heads, mem_len)
        }
    }

    pub fn trxl_i(n_layers: usize, d_model: usize, heads: usize, mem_len: usize) -> Self {
        StackConfig {
            variant: Variant::TrXlI,
            ..StackConfig::trxl(n_layers, d_model, heads, mem_len)
        }
    }

    pub fn with_gate(mut self, gate: GateKind, bias_init: f64) -> Self {
        self.gate = gate;
        self.gate_bias_init = bias_init;
        self
    }

    pub fn d_ff(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    /// Gate kind actually used by blocks: ungated variants always combine
    /// streams with the plain residual.
    pub fn block_gate_kind(&self) -> GateKind {
        match self.variant {
            Variant::GTrXl => self.gate,
            _ => GateKind::Residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("stack: n_layers must be at least 1"));
        }
        if self.d_model == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("stack: d_model, heads and head_dim must be positive"));
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::config(format!(
                "stack: d_model ({}) must equal heads*head_dim ({}*{})",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("stack: d_model must be even for sinusoid encodings"));
        }
        if self.variant != Variant::GTrXl && self.gate != GateKind::Residual {
            return Err(Error::config(format!(
                "stack: variant {} uses plain residuals; gate must be 'residual'",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Initialized parameter stack.
#[derive(Debug, Clone)]
pub struct StackParams {
    pub config: StackConfig,
    pub blocks: Vec<BlockParams>,
}

pub struct StackVars {
    pub blocks: Vec<BlockVars>,
}

impl StackVars {
    /// Handles in the same order as [`StackParams::param_entries`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|b| b.param_vars()).collect()
    }
}

impl StackParams {
    pub fn init(config: StackConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_layers).map(|_| BlockParams::init(&config, rng)).collect();
        Ok(StackParams { config, blocks })
    }

    pub fn fresh_memory(&self) -> MemoryState {
        MemoryState::zeros(self.config.n_layers, self.config.mem_len, self.config.d_model)
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            for (n, t) in block.param_entries() {
                out.push((format!("layer{}.{}", l, n), t));
            }
        }
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (n, t) in block.param_entries_mut() {
                out.push((format!("layer{}.{}", l, n), t));
            }
        }
        out
    }

    pub fn inject(&self, tape: &mut Tape) -> StackVars {
        StackVars { blocks: self.blocks.iter().map(|b| b.inject(tape)).collect() }
    }
}

/// One block step on the tape. `memory` holds the valid memory rows for this
/// layer (already gradient-isolated); layer norm placement follows the
/// variant.
pub fn block_forward(
    tape: &mut Tape,
    variant: Variant,
    vars: &BlockVars,
    memory: Option<Var>,
    e: Var,
) -> Result<Var> {
    match variant {
        Variant::TrXl => {
            let ybar = relative_attention_core(tape, memory, e, &vars.attention)?;
            let yhat = tape.add(e, ybar)?;
            let y = tape.layer_norm(yhat, vars.ln1.gain, vars.ln1.bias, LAYER_NORM_EPS)?;
            let ebar = mlp_forward(tape, &vars.mlp, y)?;
            let ehat = tape.add(y, ebar)?;
            tape.layer_norm(ehat, vars.ln2.gain, vars.ln2.bias, LAYER_NORM_EPS)
        }
        Variant::TrXlI | Variant::GTrXl => {
            // layer norm on the submodule inputs only; memory rows are
            // normalized with the same affine parameters as the segment
            let mem_ln = match memory {
                Some(m) => {
                    Some(tape.layer_norm(m, vars.ln1.gain, vars.ln1.bias, LAYER_NORM_EPS)?)
                }
                None => None,
            };
            let e_ln = tape.layer_norm(e, vars.ln1.gain, vars.ln1.bias, LAYER_NORM_EPS)?;
            let ybar = relative_attention_core(tape, mem_ln, e_ln, &vars.attention)?;
            let ybar = tape.relu(ybar);
            let y = match variant {
                Variant::GTrXl => apply_gate(tape, &vars.gate_mha, e, ybar)?,
                _ => tape.add(e, ybar)?,
            };
            let y_ln = tape.layer_norm(y, vars.ln2.gain, vars.ln2.bias, LAYER_NORM_EPS)?;
            let ebar = mlp_forward(tape, &vars.mlp, y_ln)?;
            let ebar = tape.relu(ebar);
            match variant {
                Variant::GTrXl => apply_gate(tape, &vars.gate_mlp, y, ebar),
                _ => tape.add(y, ebar),
            }
        }
    }
}

/// Run every block in order on the tape. Returns the final embedding handle
/// and the detached per-layer inputs needed by
/// [`crate::attention::update_memory`].
pub fn stack_forward_on_tape(
    tape: &mut Tape,
    config: &StackConfig,
    vars: &StackVars,
    memory: &MemoryState,
    e0: Var,
) -> Result<(Var, Vec<Tensor>)> {
    if vars.blocks.len() != config.n_layers {
        return Err(Error::contract(format!(
            "stack_forward: config declares {} layers, parameters have {}",
            config.n_layers,
            vars.blocks.len()
        )));
    }
    if memory.n_layers() != config.n_layers {
        return Err(Error::contract(format!(
            "stack_forward: memory has {} layers, stack has {}",
            memory.n_layers(),
            config.n_layers
        )));
    }
    for block in &vars.blocks {
        for (label, kind) in [("gate_mha", block.gate_mha.kind()), ("gate_mlp", block.gate_mlp.kind())] {
            if kind != config.block_gate_kind() {
                return Err(Error::contract(format!(
                    "stack_forward: {} has kind {:?}, config expects {:?}",
                    label,
                    kind,
                    config.block_gate_kind()
                )));
            }
        }
    }
    let mut e = e0;
    let mut layer_inputs = Vec::with_capacity(config.n_layers);
    for (l, block) in vars.blocks.iter().enumerate() {
        layer_inputs.push(tape.detach(e));
        let mem_var = memory.valid_rows(l).map(|rows| tape.constant(rows));
        e = block_forward(tape, config.variant, block, mem_var, e)?;
    }
    Ok((e, layer_inputs))
}

/// Value-level stack step: applies the blocks to `e0` and refreshes the
/// memory with this segment's layer inputs.
pub fn stack_forward(
    params: &StackParams,
    memory: &MemoryState,
    e0: &Tensor,
) -> Result<(Tensor, MemoryState)> {
    let mut tape = Tape::new();
    let e0v = tape.constant(e0.clone());
    let vars = params.inject(&mut tape);
    let (out, layer_inputs) = stack_forward_on_tape(&mut tape, &params.config, &vars, memory, e0v)?;
    let new_memory = crate::attention::update_memory(memory, &layer_inputs)?;
    Ok((tape.detach(out), new_memory))
}

fn gate_param_count(kind: GateKind, d: usize) -> usize {
    match kind {
        GateKind::Residual => 0,
        GateKind::Input => d * d,
        GateKind::Output | GateKind::Highway => d * d + 1,
        GateKind::SigTanh => 2 * d * d + 1,
        GateKind::Gru => 6 * d * d + 1,
    }
}

/// Closed-form count of every trainable scalar in the stack.
pub fn count_params(config: &StackConfig) -> usize {
    let d = config.d_model;
    let hd = config.heads * config.head_dim;
    let d_ff = config.d_ff();
    let attention = 4 * d * hd + 2 * hd + hd * d + d;
    let mlp = d * d_ff + d_ff + d_ff * d + d;
    let norms = 4 * d;
    let gates = 2 * gate_param_count(config.block_gate_kind(), d);
    config.n_layers * (attention + mlp + norms + gates)
}

#[cfg(test)]
#[path = "blocks_tests.rs"]
mod tests;
