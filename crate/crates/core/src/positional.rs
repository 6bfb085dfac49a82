//! Positional schemes: absolute sinusoids added to embeddings, rotary
//! query/key rotation, linear attention-score biases, or nothing at all.
//!
//! Only the kind is ever persisted. Every table, angle cache and slope vector
//! is regenerated from `(kind, config)`, which is what makes swapping a
//! checkpoint's scheme a pure manifest edit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_MAX_POSITIONS: usize = 4096;
pub const ROPE_THETA_BASE: f64 = 10_000.0;

/// Bias value standing in for -inf in attention masks.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PEKind {
    Sine,
    Rope,
    Alibi,
    Nope,
}

impl PEKind {
    pub const ALL: [PEKind; 4] = [PEKind::Sine, PEKind::Rope, PEKind::Alibi, PEKind::Nope];

    pub fn as_str(self) -> &'static str {
        match self {
            PEKind::Sine => "sine",
            PEKind::Rope => "rope",
            PEKind::Alibi => "alibi",
            PEKind::Nope => "nope",
        }
    }

    /// True for the schemes that act inside self-attention.
    pub fn is_relative(self) -> bool {
        matches!(self, PEKind::Rope | PEKind::Alibi)
    }
}

impl fmt::Display for PEKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PEKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(PEKind::Sine),
            "rope" => Ok(PEKind::Rope),
            "alibi" => Ok(PEKind::Alibi),
            "nope" => Ok(PEKind::Nope),
            other => Err(Error::Config(format!(
                "unknown positional embedding `{other}` (expected sine|rope|alibi|nope)"
            ))),
        }
    }
}

/// `table[pos][2i] = sin(pos / 10000^(2i/d))`, `table[pos][2i+1] = cos(..)`.
#[derive(Debug, Clone)]
pub struct SinusoidTable {
    max_positions: usize,
    d_model: usize,
    table: Vec<f64>,
}

impl SinusoidTable {
    pub fn new(max_positions: usize, d_model: usize) -> Self {
        let mut table = vec![0.0; max_positions * d_model];
        for pos in 0..max_positions {
            sinusoid_row(pos, d_model, &mut table[pos * d_model..(pos + 1) * d_model]);
        }
        SinusoidTable {
            max_positions,
            d_model,
            table,
        }
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn row(&self, pos: usize) -> Result<&[f64]> {
        if pos >= self.max_positions {
            return Err(Error::Range {
                position: pos,
                max: self.max_positions,
            });
        }
        Ok(&self.table[pos * self.d_model..(pos + 1) * self.d_model])
    }

    pub fn embed<T: Scalar>(&self, positions: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(positions.len() * self.d_model);
        for &p in positions {
            data.extend(self.row(p)?.iter().map(|&v| T::from_f64(v)));
        }
        Tensor::new(&[positions.len(), self.d_model], data)
    }
}

fn sinusoid_row(pos: usize, d_model: usize, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(i2 / d_model as f64);
        *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Sinusoidal embeddings for arbitrary positions, without a cached table.
pub fn sinusoidal_embed<T: Scalar>(positions: &[usize], d_model: usize) -> Tensor<T> {
    let mut data = vec![0.0; positions.len() * d_model];
    for (r, &p) in positions.iter().enumerate() {
        sinusoid_row(p, d_model, &mut data[r * d_model..(r + 1) * d_model]);
    }
    Tensor::from_f64(&[positions.len(), d_model], &data).expect("shape")
}

#[derive(Debug, Clone)]
pub struct RopeState {
    theta_base: f64,
    d_head: usize,
    angles: Vec<f64>,
}

impl RopeState {
    pub fn new(d_head: usize, theta_base: f64) -> Result<Self> {
        if d_head == 0 || d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head width, got {d_head}"
            )));
        }
        let angles = (0..d_head / 2)
            .map(|i| theta_base.powf(-2.0 * i as f64 / d_head as f64))
            .collect();
        Ok(RopeState {
            theta_base,
            d_head,
            angles,
        })
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Per-pair rotation rates `θ_i`.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// `cos(m·θ_i)` and `sin(m·θ_i)` laid out `[positions.len(), d_head/2]`.
    pub fn tables<T: Scalar>(&self, positions: &[usize]) -> (Vec<T>, Vec<T>) {
        let mut cos = Vec::with_capacity(positions.len() * self.angles.len());
        let mut sin = Vec::with_capacity(cos.capacity());
        for &m in positions {
            for &theta in &self.angles {
                let a = m as f64 * theta;
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        (cos, sin)
    }
}

/// Rotates each row of `x: [seq, d_head]`, row `r` by position `positions[r]`.
pub fn rope_rotate<T: Scalar>(x: &Tensor<T>, positions: &[usize], state: &RopeState) -> Result<Tensor<T>> {
    let d = state.d_head;
    if x.shape().len() != 2 || x.shape()[1] != d || x.shape()[0] != positions.len() {
        return Err(Error::dims("rope_rotate", x.shape(), &[positions.len(), d]));
    }
    let mut out = x.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(positions) {
        if m == 0 {
            continue;
        }
        for (i, &theta) in state.angles.iter().enumerate() {
            let a = m as f64 * theta;
            let (s, c) = (T::from_f64(a.sin()), T::from_f64(a.cos()));
            let (x1, x2) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x1 * c - x2 * s;
            row[2 * i + 1] = x1 * s + x2 * c;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlibiSlopes {
    slopes: Vec<f64>,
}

impl AlibiSlopes {
    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }
}

fn pow2_slopes(n: usize) -> Vec<f64> {
    (0..n)
        .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / n as f64))
        .collect()
}

/// Geometric per-head slopes. Non-power-of-two head counts take the slopes for
/// the largest power of two below `n`, then every other slope of the doubled
/// sequence.
pub fn alibi_slopes(n_heads: usize) -> Result<AlibiSlopes> {
    if n_heads == 0 {
        return Err(Error::Config("ALiBi needs at least one head".into()));
    }
    let p = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2_slopes(p);
    if p != n_heads {
        slopes.extend(pow2_slopes(2 * p).into_iter().step_by(2).take(n_heads - p));
    }
    Ok(AlibiSlopes { slopes })
}

/// `[heads, q_len, k_len]` bias. Causal entries above the diagonal are zero
/// here; the causal mask is applied separately.
pub fn alibi_bias<T: Scalar>(slopes: &AlibiSlopes, q_len: usize, k_len: usize, causal: bool) -> Tensor<T> {
    let h = slopes.n_heads();
    let mut data = vec![T::ZERO; h * q_len * k_len];
    for (hi, &s) in slopes.slopes.iter().enumerate() {
        for i in 0..q_len {
            for j in 0..k_len {
                let dist = if causal {
                    if j > i {
                        continue;
                    }
                    (i - j) as f64
                } else {
                    i.abs_diff(j) as f64
                };
                data[(hi * q_len + i) * k_len + j] = T::from_f64(-s * dist);
            }
        }
    }
    Tensor::new(&[h, q_len, k_len], data).expect("shape")
}

/// The no-position scheme: identity.
pub fn nope_apply<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    x
}

/// Derived positional state, built from `(kind, config)` and never serialized.
#[derive(Debug, Clone)]
pub enum PEModule {
    Sine(SinusoidTable),
    Rope(RopeState),
    Alibi(AlibiSlopes),
    Nope,
}

impl PEModule {
    pub fn build(kind: PEKind, d_model: usize, n_heads: usize, max_positions: usize) -> Result<Self> {
        Ok(match kind {
            PEKind::Sine => PEModule::Sine(SinusoidTable::new(max_positions, d_model)),
            PEKind::Rope => {
                if n_heads == 0 || d_model % n_heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {d_model} not divisible by {n_heads} heads"
                    )));
                }
                PEModule::Rope(RopeState::new(d_model / n_heads, ROPE_THETA_BASE)?)
            }
            PEKind::Alibi => PEModule::Alibi(alibi_slopes(n_heads)?),
            PEKind::Nope => PEModule::Nope,
        })
    }

    pub fn kind(&self) -> PEKind {
        match self {
            PEModule::Sine(_) => PEKind::Sine,
            PEModule::Rope(_) => PEKind::Rope,
            PEModule::Alibi(_) => PEKind::Alibi,
            PEModule::Nope => PEKind::Nope,
        }
    }
}
