//! Saves a model, rewrites its checkpoint under every other positional
//! scheme and shows that only the manifest changes while the outputs do not
//! stay the same.

use peswap::checkpoint;
use peswap::model::{ModelConfig, TransformerModel};
use peswap::numerics::RngStream;
use peswap::positional::PEKind;

fn main() -> peswap::Result<()> {
    let dir = std::env::temp_dir().join(format!("peswap-swap-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| peswap::Error::Config(e.to_string()))?;
    let base_path = dir.join("sine.ckpt");

    let model = TransformerModel::<f32>::new(ModelConfig::toy(40, 40, PEKind::Sine), &mut RngStream::named(1, "init"))?;
    checkpoint::save(&model, &base_path)?;
    let src = vec![vec![4, 9, 12, 7, 2]];
    let tgt = vec![vec![1, 5, 6]];
    let reference = model.forward_teacher_forced(&src, &tgt)?;

    for pe in PEKind::ALL {
        let out = dir.join(format!("{pe}.ckpt"));
        let report = checkpoint::swap_pe(&base_path, pe, &out)?;
        let diff = checkpoint::diff(&base_path, &out)?;
        let swapped: TransformerModel<f32> = checkpoint::load(&out)?;
        let logits = swapped.forward_teacher_forced(&src, &tgt)?;
        println!(
            "{} -> {:<5} tensors changed {}  manifest fields changed {:?}  max |logit diff| {:.4}",
            report.old_pe,
            report.new_pe,
            report.tensors_changed,
            diff.fields.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(),
            reference.max_abs_diff(&logits)
        );
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
