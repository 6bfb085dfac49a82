//! Injects each fine-tuning strategy into a toy model, reports how much of
//! the model becomes trainable, and checks that merging adapters back into
//! the base weights preserves the outputs.

use peswap::adapters::{inject, LoraConfig, Strategy};
use peswap::model::{ModelConfig, TransformerModel};
use peswap::numerics::RngStream;
use peswap::positional::PEKind;

fn main() -> peswap::Result<()> {
    let base = TransformerModel::<f64>::new(ModelConfig::toy(40, 40, PEKind::Rope), &mut RngStream::named(1, "init"))?;
    let src = vec![vec![4, 9, 12, 7, 2]];
    let tgt = vec![vec![1, 5, 6, 8]];
    let reference = base.forward_teacher_forced(&src, &tgt)?;
    let cfg = LoraConfig { dropout: 0.0, ..LoraConfig::default() };

    for strategy in Strategy::ALL {
        let mut adapted = inject(base.clone(), strategy, &cfg, &mut RngStream::named(1, "lora"))?;
        let r = adapted.trainable_report();
        let at_init = adapted.model().forward_teacher_forced(&src, &tgt)?;
        println!(
            "{strategy:<8} adapter sites {:>2}  trainable {:>6} / {:>6} ({:6.2}%)  change at injection {:.1e}",
            adapted.adapter_sites(),
            r.trainable,
            r.total,
            100.0 * r.fraction,
            reference.max_abs_diff(&at_init)
        );
        if strategy == Strategy::Fft {
            continue;
        }
        // Stand-in for training: give every B matrix some weight.
        let mut rng = RngStream::named(2, "fake-update");
        for p in adapted.model_mut().params_mut().iter_mut() {
            if p.name.ends_with(".lora_b") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.05 * rng.normal());
            }
        }
        let before = adapted.model().forward_teacher_forced(&src, &tgt)?;
        let merged = adapted.merge()?;
        let after = merged.forward_teacher_forced(&src, &tgt)?;
        println!(
            "         after merge: {} parameters, max |logit diff| {:.1e}",
            merged.count_params(false),
            before.max_abs_diff(&after)
        );
    }
    Ok(())
}
