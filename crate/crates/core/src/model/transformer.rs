use serde::{Deserialize, Serialize};

use crate::adapters::{LoraConfig, Strategy};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::positional::{alibi_bias, PEKind, PEModule, MASKED};

use super::config::{ModelConfig, NormOrder};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Adapter bookkeeping carried by a model after injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub strategy: Strategy,
    pub lora: LoraConfig,
}

#[derive(Debug, Clone)]
pub(crate) struct LoraSite {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraSite>,
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub self_attn: Attention,
    self_norm: Norm,
    pub cross_attn: Option<(Attention, Norm)>,
    pub fc1: Linear,
    pub fc2: Linear,
    ffn_norm: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    enc_norm: Option<Norm>,
    dec_norm: Option<Norm>,
}

/// Dropout settings for a training-mode forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub adapter_rate: f64,
    pub rng: &'r mut RngStream,
}

/// Encoder output for a padded batch of sources.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub states: Tensor<T>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> Encoded<T> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn padded_len(&self) -> usize {
        self.states.numel() / (self.batch().max(1) * self.states.last_dim().max(1))
    }

    /// Copies of sentence `i`, `n` times, as a new batch.
    pub fn repeat(&self, i: usize, n: usize) -> Encoded<T> {
        let d = self.states.last_dim();
        let l = self.padded_len();
        let row = &self.states.data()[i * l * d..(i + 1) * l * d];
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Encoded {
            states: Tensor::new(&[n * l, d], data).expect("shape"),
            lengths: vec![self.lengths[i]; n],
        }
    }
}

/// Encoder-decoder transformer with a pluggable positional scheme.
#[derive(Debug, Clone)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    pe_enc: PEModule,
    pe_dec: PEModule,
    layout: Layout,
    adapters: Option<AdapterState>,
}

fn xavier<T: Scalar>(rng: &mut RngStream, dout: usize, din: usize) -> Tensor<T> {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    let data: Vec<f64> = (0..dout * din).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
    Tensor::from_f64(&[dout, din], &data).expect("shape")
}

fn embed_init<T: Scalar>(rng: &mut RngStream, vocab: usize, d: usize) -> Tensor<T> {
    let std = (d as f64).powf(-0.5);
    let mut data: Vec<f64> = (0..vocab * d).map(|_| rng.normal() * std).collect();
    data[PAD * d..(PAD + 1) * d].fill(0.0);
    Tensor::from_f64(&[vocab, d], &data).expect("shape")
}

/// Canonical `(name, shape)` list of every base parameter, in storage order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: String, din: usize, dout: usize| {
        out.push((format!("{name}.weight"), vec![dout, din]));
        if cfg.proj_bias {
            out.push((format!("{name}.bias"), vec![dout]));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, name: String| {
        out.push((format!("{name}.weight"), vec![d]));
        out.push((format!("{name}.bias"), vec![d]));
    };
    out.push(("encoder.embed_tokens.weight".into(), vec![cfg.src_vocab, d]));
    out.push(("decoder.embed_tokens.weight".into(), vec![cfg.tgt_vocab, d]));
    for (side, n) in [("encoder", cfg.enc_layers), ("decoder", cfg.dec_layers)] {
        for i in 0..n {
            let p = format!("{side}.layer{i}");
            let mut attn_blocks = vec!["self_attn"];
            if side == "decoder" {
                attn_blocks.push("cross_attn");
            }
            for block in attn_blocks {
                for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                    linear(&mut out, format!("{p}.{block}.{proj}"), d, d);
                }
                norm(&mut out, format!("{p}.{block}_norm"));
            }
            linear(&mut out, format!("{p}.ffn.fc1"), d, f);
            linear(&mut out, format!("{p}.ffn.fc2"), f, d);
            norm(&mut out, format!("{p}.ffn_norm"));
        }
        if cfg.norm_order == NormOrder::Pre {
            norm(&mut out, format!("{side}.final_norm"));
        }
    }
    out
}

impl<T: Scalar> TransformerModel<T> {
    /// Freshly initialized model: Xavier-uniform projections, N(0, d^-1/2)
    /// embeddings with a zero padding row, unit/zero layer norms, zero biases.
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in parameter_shapes(&config) {
            let t = if name.ends_with("embed_tokens.weight") {
                embed_init(rng, shape[0], shape[1])
            } else if shape.len() == 2 {
                xavier(rng, shape[0], shape[1])
            } else if name.contains("norm") && name.ends_with(".weight") {
                Tensor::full(&shape, T::ONE)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t)?;
        }
        Self::from_parts(config, params, None)
    }

    /// Assembles a model from named tensors, checking every expected name and shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>, adapters: Option<AdapterState>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_shapes(&config) {
            let p = params
                .by_name(&name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::dims("parameter shape", p.value.shape(), &shape));
            }
        }
        let layout = resolve_layout(&config, &params)?;
        let pe_enc = PEModule::build(config.pe_kind, config.d_model, config.n_heads, config.max_positions.0)?;
        let pe_dec = PEModule::build(config.pe_kind, config.d_model, config.n_heads, config.max_positions.1)?;
        Ok(TransformerModel {
            config,
            params,
            pe_enc,
            pe_dec,
            layout,
            adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn pe_kind(&self) -> PEKind {
        self.config.pe_kind
    }

    pub fn adapters(&self) -> Option<&AdapterState> {
        self.adapters.as_ref()
    }

    pub(crate) fn set_adapters(&mut self, state: Option<AdapterState>) -> Result<()> {
        self.adapters = state;
        self.layout = resolve_layout(&self.config, &self.params)?;
        Ok(())
    }

    /// Rebuilds the positional module for `kind`. No parameter is touched.
    pub fn swap_pe(&mut self, kind: PEKind) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.pe_kind = kind;
        cfg.validate()?;
        self.pe_enc = PEModule::build(kind, cfg.d_model, cfg.n_heads, cfg.max_positions.0)?;
        self.pe_dec = PEModule::build(kind, cfg.d_model, cfg.n_heads, cfg.max_positions.1)?;
        self.config = cfg;
        Ok(())
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.numel(trainable_only)
    }

    pub(crate) fn linears(&self) -> Vec<(LinearKind, &Linear)> {
        let mut out = Vec::new();
        for l in self.layout.encoder.iter().chain(&self.layout.decoder) {
            for p in l.self_attn.projections() {
                out.push((LinearKind::SelfAttn, p));
            }
            if let Some((c, _)) = &l.cross_attn {
                for p in c.projections() {
                    out.push((LinearKind::CrossAttn, p));
                }
            }
            out.push((LinearKind::Ffn, &l.fc1));
            out.push((LinearKind::Ffn, &l.fc2));
        }
        out
    }

    fn lora_scale(&self) -> f64 {
        self.adapters.as_ref().map_or(0.0, |a| a.lora.scale())
    }

    fn check_ids(&self, seqs: &[Vec<usize>], vocab: usize, max_pos: usize) -> Result<()> {
        for s in seqs {
            if s.len() > max_pos {
                return Err(Error::Range {
                    position: s.len() - 1,
                    max: max_pos,
                });
            }
            if let Some(&id) = s.iter().find(|&&id| id >= vocab) {
                return Err(Error::Index { id, vocab });
            }
        }
        Ok(())
    }

    fn linear<'a>(&'a self, tape: &mut Tape<'a, T>, lin: &Linear, x: Var, drop: &mut Option<Dropout>) -> Result<Var> {
        let w = tape.param(&self.params, lin.weight);
        let b = lin.bias.map(|b| tape.param(&self.params, b));
        let y = tape.linear(x, w, b)?;
        let Some(site) = &lin.lora else { return Ok(y) };
        let xin = match drop {
            Some(d) => tape.dropout(x, d.adapter_rate, d.rng),
            None => x,
        };
        let a = tape.param(&self.params, site.a);
        let bm = tape.param(&self.params, site.b);
        let h = tape.linear(xin, a, None)?;
        let delta = tape.linear(h, bm, None)?;
        let delta = tape.scale(delta, T::from_f64(self.lora_scale()));
        tape.add(y, delta)
    }

    fn norm<'a>(&'a self, tape: &mut Tape<'a, T>, n: &Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.params, n.gamma);
        let b = tape.param(&self.params, n.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn dropout<'a>(&self, tape: &mut Tape<'a, T>, x: Var, drop: &mut Option<Dropout>) -> Var {
        match drop {
            Some(d) => tape.dropout(x, d.rate, d.rng),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        att: &Attention,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        bias: &Tensor<T>,
        rope: Option<&(Vec<T>, Vec<T>)>,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let q = self.linear(tape, &att.q, xq, drop)?;
        let k = self.linear(tape, &att.k, xkv, drop)?;
        let v = self.linear(tape, &att.v, xkv, drop)?;
        let mut q = tape.split_heads(q, batch, lq, h)?;
        let mut k = tape.split_heads(k, batch, lk, h)?;
        let v = tape.split_heads(v, batch, lk, h)?;
        if let Some((cos, sin)) = rope {
            // Self-attention only, so lq == lk and one table serves both.
            q = tape.rope(q, cos, sin)?;
            k = tape.rope(k, cos, sin)?;
        }
        let scores = tape.matmul_t(q, k, true)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt()));
        let scores = tape.add_const(scores, bias)?;
        let probs = tape.softmax_lastdim(scores);
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.merge_heads(ctx, batch, h)?;
        self.linear(tape, &att.out, ctx, drop)
    }

    fn ffn<'a>(&'a self, tape: &mut Tape<'a, T>, layer: &Layer, x: Var, drop: &mut Option<Dropout>) -> Result<Var> {
        let h = self.linear(tape, &layer.fc1, x, drop)?;
        let h = tape.relu(h);
        self.linear(tape, &layer.fc2, h, drop)
    }

    /// Residual sublayer honoring the configured norm order.
    fn sublayer<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        norm: &Norm,
        x: Var,
        drop: &mut Option<Dropout>,
        f: impl FnOnce(&'a Self, &mut Tape<'a, T>, Var, &mut Option<Dropout>) -> Result<Var>,
    ) -> Result<Var> {
        match self.config.norm_order {
            NormOrder::Pre => {
                let n = self.norm(tape, norm, x)?;
                let y = f(self, tape, n, drop)?;
                let y = self.dropout(tape, y, drop);
                tape.add(x, y)
            }
            NormOrder::Post => {
                let y = f(self, tape, x, drop)?;
                let y = self.dropout(tape, y, drop);
                let s = tape.add(x, y)?;
                self.norm(tape, norm, s)
            }
        }
    }

    fn embed<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        table: ParamId,
        seqs: &[Vec<usize>],
        len: usize,
        pe: &PEModule,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.iter().copied());
            ids.extend(std::iter::repeat(PAD).take(len - s.len()));
        }
        let t = tape.param(&self.params, table);
        let x = tape.embedding(t, &ids)?;
        let mut x = tape.scale(x, T::from_f64((d as f64).sqrt()));
        if let PEModule::Sine(table) = pe {
            let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
            let pos = table.embed::<T>(&positions)?;
            x = tape.add_const(x, &pos)?;
        }
        Ok(self.dropout(tape, x, drop))
    }

    /// Self-attention bias `[batch*heads, len, len]`: key padding, optional
    /// causal mask, and the ALiBi distance penalty.
    fn self_bias(&self, pe: &PEModule, lengths: &[usize], len: usize, causal: bool) -> Tensor<T> {
        let h = self.config.n_heads;
        let masked = T::from_f64(MASKED);
        let alibi = match pe {
            PEModule::Alibi(s) => Some(alibi_bias::<T>(s, len, len, causal)),
            _ => None,
        };
        let mut data = vec![T::ZERO; lengths.len() * h * len * len];
        for (b, &n) in lengths.iter().enumerate() {
            for hi in 0..h {
                let base = (b * h + hi) * len * len;
                for i in 0..len {
                    for j in 0..len {
                        let slot = &mut data[base + i * len + j];
                        if j >= n || (causal && j > i) {
                            *slot = masked;
                        } else if let Some(a) = &alibi {
                            *slot = a.data()[(hi * len + i) * len + j];
                        }
                    }
                }
            }
        }
        Tensor::new(&[lengths.len() * h, len, len], data).expect("shape")
    }

    fn cross_bias(&self, src_lengths: &[usize], lq: usize, lk: usize) -> Tensor<T> {
        let h = self.config.n_heads;
        let masked = T::from_f64(MASKED);
        let mut data = vec![T::ZERO; src_lengths.len() * h * lq * lk];
        for (b, &n) in src_lengths.iter().enumerate() {
            for hi in 0..h {
                let base = (b * h + hi) * lq * lk;
                for i in 0..lq {
                    data[base + i * lk + n..base + (i + 1) * lk].fill(masked);
                }
            }
        }
        Tensor::new(&[src_lengths.len() * h, lq, lk], data).expect("shape")
    }

    fn rope_tables(pe: &PEModule, len: usize) -> Option<(Vec<T>, Vec<T>)> {
        match pe {
            PEModule::Rope(state) => {
                let positions: Vec<usize> = (0..len).collect();
                Some(state.tables(&positions))
            }
            _ => None,
        }
    }

    /// Encoder states `[batch*len, d_model]` on `tape`.
    pub fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        src: &[Vec<usize>],
        drop: &mut Option<Dropout>,
    ) -> Result<(Var, Vec<usize>, usize)> {
        if src.is_empty() || src.iter().any(|s| s.is_empty()) {
            return Err(Error::Usage("empty source batch or sequence".into()));
        }
        self.check_ids(src, self.config.src_vocab, self.config.max_positions.0)?;
        let lengths: Vec<usize> = src.iter().map(Vec::len).collect();
        let len = *lengths.iter().max().unwrap();
        let batch = src.len();
        let mut x = self.embed(tape, self.layout.src_embed, src, len, &self.pe_enc, drop)?;
        let bias = self.self_bias(&self.pe_enc, &lengths, len, false);
        let rope = Self::rope_tables(&self.pe_enc, len);
        for layer in &self.layout.encoder {
            x = self.sublayer(tape, &layer.self_norm, x, drop, |m, tape, n, drop| {
                m.attention(tape, &layer.self_attn, n, n, batch, len, len, &bias, rope.as_ref(), drop)
            })?;
            x = self.sublayer(tape, &layer.ffn_norm, x, drop, |m, tape, n, drop| m.ffn(tape, layer, n, drop))?;
        }
        if let Some(n) = &self.layout.enc_norm {
            x = self.norm(tape, n, x)?;
        }
        Ok((x, lengths, len))
    }

    /// Decoder logits `[batch*tgt_len, tgt_vocab]` given encoder states on the same tape.
    pub fn decode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        memory: Var,
        src_lengths: &[usize],
        src_len: usize,
        tgt_in: &[Vec<usize>],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let x = self.decoder_states(tape, memory, src_lengths, src_len, tgt_in, drop)?;
        let e = tape.param(&self.params, self.layout.tgt_embed);
        tape.linear(x, e, None)
    }

    fn decoder_states<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        memory: Var,
        src_lengths: &[usize],
        src_len: usize,
        tgt_in: &[Vec<usize>],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        if tgt_in.len() != src_lengths.len() || tgt_in.iter().any(|t| t.is_empty()) {
            return Err(Error::Usage("target batch must match source batch and be non-empty".into()));
        }
        self.check_ids(tgt_in, self.config.tgt_vocab, self.config.max_positions.1)?;
        let lengths: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let len = *lengths.iter().max().unwrap();
        let batch = tgt_in.len();
        let mut x = self.embed(tape, self.layout.tgt_embed, tgt_in, len, &self.pe_dec, drop)?;
        let bias = self.self_bias(&self.pe_dec, &lengths, len, true);
        let cbias = self.cross_bias(src_lengths, len, src_len);
        let rope = Self::rope_tables(&self.pe_dec, len);
        for layer in &self.layout.decoder {
            x = self.sublayer(tape, &layer.self_norm, x, drop, |m, tape, n, drop| {
                m.attention(tape, &layer.self_attn, n, n, batch, len, len, &bias, rope.as_ref(), drop)
            })?;
            let (cross, cnorm) = layer.cross_attn.as_ref().expect("decoder layer has cross-attention");
            x = self.sublayer(tape, cnorm, x, drop, |m, tape, n, drop| {
                m.attention(tape, cross, n, memory, batch, len, src_len, &cbias, None, drop)
            })?;
            x = self.sublayer(tape, &layer.ffn_norm, x, drop, |m, tape, n, drop| m.ffn(tape, layer, n, drop))?;
        }
        if let Some(n) = &self.layout.dec_norm {
            x = self.norm(tape, n, x)?;
        }
        Ok(x)
    }

    /// Full teacher-forced pass; returns logits `[batch*tgt_len, tgt_vocab]`
    /// with targets padded to the longest sequence.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        src: &[Vec<usize>],
        tgt_in: &[Vec<usize>],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let (mem, lengths, len) = self.encode_on(tape, src, drop)?;
        self.decode_on(tape, mem, &lengths, len, tgt_in, drop)
    }

    /// Inference-mode logits as `[batch, tgt_len, tgt_vocab]`.
    pub fn forward_teacher_forced(&self, src: &[Vec<usize>], tgt_in: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let logits = self.forward(&mut tape, src, tgt_in, &mut None)?;
        let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        tape.value(logits)
            .clone()
            .reshape(&[tgt_in.len(), len, self.config.tgt_vocab])
    }

    /// Inference-mode encoder states.
    pub fn encode(&self, src: &[Vec<usize>]) -> Result<Encoded<T>> {
        let mut tape = Tape::inference();
        let (mem, lengths, _) = self.encode_on(&mut tape, src, &mut None)?;
        Ok(Encoded {
            states: tape.value(mem).clone(),
            lengths,
        })
    }

    /// Next-token logits `[batch, tgt_vocab]` for each prefix, read at its last position.
    pub fn next_logits(&self, enc: &Encoded<T>, prefixes: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mem = tape.constant(enc.states.clone());
        let x = self.decoder_states(&mut tape, mem, &enc.lengths, enc.padded_len(), prefixes, &mut None)?;
        let len = prefixes.iter().map(Vec::len).max().unwrap_or(0);
        let rows: Vec<usize> = prefixes.iter().enumerate().map(|(b, p)| b * len + p.len() - 1).collect();
        let last = tape.embedding(x, &rows)?;
        let e = tape.param(&self.params, self.layout.tgt_embed);
        let logits = tape.linear(last, e, None)?;
        Ok(tape.value(logits).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LinearKind {
    SelfAttn,
    CrossAttn,
    Ffn,
}

fn resolve_layout<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<Layout> {
    let get = |name: String| {
        params
            .id(&name)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    };
    let linear = |name: String| -> Result<Linear> {
        let lora = match (params.id(&format!("{name}.lora_a")), params.id(&format!("{name}.lora_b"))) {
            (Some(a), Some(b)) => Some(LoraSite { a, b }),
            (None, None) => None,
            _ => return Err(Error::Integrity(format!("incomplete adapter at `{name}`"))),
        };
        Ok(Linear {
            weight: get(format!("{name}.weight"))?,
            bias: if cfg.proj_bias {
                Some(get(format!("{name}.bias"))?)
            } else {
                None
            },
            lora,
            name,
        })
    };
    let norm = |name: String| -> Result<Norm> {
        Ok(Norm {
            gamma: get(format!("{name}.weight"))?,
            beta: get(format!("{name}.bias"))?,
        })
    };
    let attention = |p: &str| -> Result<Attention> {
        Ok(Attention {
            q: linear(format!("{p}.q_proj"))?,
            k: linear(format!("{p}.k_proj"))?,
            v: linear(format!("{p}.v_proj"))?,
            out: linear(format!("{p}.out_proj"))?,
        })
    };
    let layers = |side: &str, n: usize| -> Result<Vec<Layer>> {
        (0..n)
            .map(|i| {
                let p = format!("{side}.layer{i}");
                Ok(Layer {
                    self_attn: attention(&format!("{p}.self_attn"))?,
                    self_norm: norm(format!("{p}.self_attn_norm"))?,
                    cross_attn: if side == "decoder" {
                        Some((attention(&format!("{p}.cross_attn"))?, norm(format!("{p}.cross_attn_norm"))?))
                    } else {
                        None
                    },
                    fc1: linear(format!("{p}.ffn.fc1"))?,
                    fc2: linear(format!("{p}.ffn.fc2"))?,
                    ffn_norm: norm(format!("{p}.ffn_norm"))?,
                })
            })
            .collect()
    };
    let pre = cfg.norm_order == NormOrder::Pre;
    Ok(Layout {
        src_embed: get("encoder.embed_tokens.weight".into())?,
        tgt_embed: get("decoder.embed_tokens.weight".into())?,
        encoder: layers("encoder", cfg.enc_layers)?,
        decoder: layers("decoder", cfg.dec_layers)?,
        enc_norm: if pre { Some(norm("encoder.final_norm".into())?) } else { None },
        dec_norm: if pre { Some(norm("decoder.final_norm".into())?) } else { None },
    })
}
