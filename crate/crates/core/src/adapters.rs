//! Low-rank adapters and the three fine-tuning strategies.
//!
//! * `Fft` trains every parameter and attaches nothing.
//! * `Lora` attaches adapters to every projection (self-attention,
//!   cross-attention, FFN) and freezes the rest, embeddings and norms included.
//! * `MinLora` attaches adapters to self-attention projections only.
//!
//! An adapter computes `scale · B·A·drop(x)` alongside the frozen projection.
//! `B` starts at zero, so injection never changes the model's outputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterState, LinearKind, TransformerModel};
use crate::numerics::{RngStream, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// `alpha/√rank` when set, `alpha/rank` otherwise.
    pub rank_scaled: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            rank_scaled: true,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        if self.rank_scaled {
            self.alpha / (self.rank as f64).sqrt()
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fft,
    Lora,
    MinLora,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Fft, Strategy::Lora, Strategy::MinLora];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fft => "fft",
            Strategy::Lora => "lora",
            Strategy::MinLora => "minlora",
        }
    }

    pub(crate) fn targets(self, kind: LinearKind) -> bool {
        match self {
            Strategy::Fft => false,
            Strategy::Lora => true,
            Strategy::MinLora => kind == LinearKind::SelfAttn,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Strategy::Fft),
            "lora" => Ok(Strategy::Lora),
            "minlora" => Ok(Strategy::MinLora),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected fft|lora|minlora)"
            ))),
        }
    }
}

/// A model prepared for one fine-tuning strategy.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T> {
    model: TransformerModel<T>,
    strategy: Strategy,
    merged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn inject<T: Scalar>(
    mut model: TransformerModel<T>,
    strategy: Strategy,
    cfg: &LoraConfig,
    rng: &mut RngStream,
) -> Result<AdaptedModel<T>> {
    if model.adapters().is_some() {
        return Err(Error::Usage("model already carries adapters".into()));
    }
    if strategy == Strategy::Fft {
        for p in model.params_mut().iter_mut() {
            p.trainable = true;
        }
        return Ok(AdaptedModel {
            model,
            strategy,
            merged: false,
        });
    }
    cfg.validate()?;
    let sites: Vec<(String, usize, usize)> = model
        .linears()
        .into_iter()
        .filter(|(kind, _)| strategy.targets(*kind))
        .map(|(_, lin)| {
            let shape = model.params().get(lin.weight).value.shape();
            (lin.name.clone(), shape[1], shape[0])
        })
        .collect();
    let r = cfg.rank;
    let std = 1.0 / (r as f64).sqrt();
    let params = model.params_mut();
    for p in params.iter_mut() {
        p.trainable = false;
    }
    for (name, din, dout) in sites {
        let a: Vec<f64> = (0..r * din).map(|_| rng.normal() * std).collect();
        params.insert(format!("{name}.lora_a"), Tensor::from_f64(&[r, din], &a)?)?;
        params.insert(format!("{name}.lora_b"), Tensor::zeros(&[dout, r]))?;
    }
    model.set_adapters(Some(AdapterState {
        strategy,
        lora: *cfg,
    }))?;
    Ok(AdaptedModel {
        model,
        strategy,
        merged: false,
    })
}

impl<T: Scalar> AdaptedModel<T> {
    /// Re-wraps a model that already carries adapters (e.g. loaded from disk).
    pub fn from_model(model: TransformerModel<T>) -> Result<Self> {
        let strategy = model
            .adapters()
            .map(|a| a.strategy)
            .ok_or_else(|| Error::Usage("model carries no adapters".into()))?;
        Ok(AdaptedModel {
            model,
            strategy,
            merged: false,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn model(&self) -> &TransformerModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TransformerModel<T> {
        &mut self.model
    }

    pub fn into_model(self) -> TransformerModel<T> {
        self.model
    }

    /// Number of projections carrying an adapter.
    pub fn adapter_sites(&self) -> usize {
        self.model.linears().iter().filter(|(_, l)| l.lora.is_some()).count()
    }

    pub fn trainable_report(&self) -> TrainableReport {
        trainable_report(&self.model)
    }

    /// Folds `scale·B·A` into each adapted weight and drops the adapters.
    pub fn merge_in_place(&mut self) -> Result<()> {
        if self.strategy == Strategy::Fft {
            return Err(Error::Usage("full fine-tuning has no adapters to merge".into()));
        }
        if self.merged {
            return Err(Error::Usage("adapters were already merged".into()));
        }
        let scale = T::from_f64(self.model.adapters().expect("adapted").lora.scale());
        let sites: Vec<_> = self
            .model
            .linears()
            .into_iter()
            .filter_map(|(_, l)| l.lora.as_ref().map(|s| (l.weight, s.a, s.b)))
            .collect();
        for (w, a, b) in sites {
            let ba = {
                let p = self.model.params();
                p.get(b).value.matmul(&p.get(a).value)?
            };
            let wt = &mut self.model.params_mut().get_mut(w).value;
            for (dst, &d) in wt.data_mut().iter_mut().zip(ba.data()) {
                let delta = scale * d;
                if delta != T::ZERO {
                    *dst += delta;
                }
            }
        }
        let params = self.model.params_mut();
        params.retain(|p| !p.name.ends_with(".lora_a") && !p.name.ends_with(".lora_b"));
        for p in params.iter_mut() {
            p.trainable = true;
            p.grad = None;
        }
        self.model.set_adapters(None)?;
        self.merged = true;
        Ok(())
    }

    pub fn merge(mut self) -> Result<TransformerModel<T>> {
        self.merge_in_place()?;
        Ok(self.model)
    }
}

pub fn trainable_report<T: Scalar>(model: &TransformerModel<T>) -> TrainableReport {
    let trainable = model.count_params(true);
    let total = model.count_params(false);
    TrainableReport {
        trainable,
        total,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::positional::PEKind;

    fn toy() -> TransformerModel<f64> {
        let mut cfg = ModelConfig::toy(20, 20, PEKind::Sine);
        cfg.d_model = 16;
        cfg.ffn_dim = 32;
        cfg.n_heads = 2;
        TransformerModel::new(cfg, &mut RngStream::new(3, 0)).unwrap()
    }

    #[test]
    fn defaults_match_recipe() {
        let c = LoraConfig::default();
        assert_eq!((c.rank, c.alpha, c.dropout, c.rank_scaled), (16, 32.0, 0.05, true));
        assert_eq!(c.scale(), 8.0);
        let plain = LoraConfig {
            rank_scaled: false,
            ..c
        };
        assert_eq!(plain.scale(), 2.0);
    }

    #[test]
    fn double_injection_rejected() {
        let mut rng = RngStream::new(0, 0);
        let a = inject(toy(), Strategy::MinLora, &LoraConfig::default(), &mut rng).unwrap();
        let err = inject(a.into_model(), Strategy::Lora, &LoraConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn merge_contracts() {
        let mut rng = RngStream::new(0, 0);
        let mut fft = inject(toy(), Strategy::Fft, &LoraConfig::default(), &mut rng).unwrap();
        assert!(matches!(fft.merge_in_place(), Err(Error::Usage(_))));
        assert_eq!(fft.trainable_report().fraction, 1.0);

        let base = toy();
        let mut a = inject(base.clone(), Strategy::Lora, &LoraConfig::default(), &mut rng).unwrap();
        a.merge_in_place().unwrap();
        assert!(matches!(a.merge_in_place(), Err(Error::Usage(_))));
        let merged = a.into_model();
        assert_eq!(merged.params().len(), base.params().len());
        for ((_, p), (_, q)) in merged.params().iter().zip(base.params().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn strategy_strings() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("dora".parse::<Strategy>(), Err(Error::Config(_))));
    }
}
