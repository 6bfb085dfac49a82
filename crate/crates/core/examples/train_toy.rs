//! Trains a small sinusoidal model on the mapped-translate toy task, swaps
//! it to RoPE and fine-tunes only self-attention adapters to recover.
//!
//!     cargo run --release --example train_toy -- [BASE_STEPS] [TUNE_STEPS]

use peswap::adapters::{inject, LoraConfig, Strategy};
use peswap::corpus::{ToyKind, ToyTask, Vocab};
use peswap::experiment::evaluate;
use peswap::model::{ModelConfig, TransformerModel};
use peswap::numerics::RngStream;
use peswap::positional::PEKind;
use peswap::train::{train_loop, DevOptions, Example, TrainConfig};

fn main() -> peswap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (base_steps, tune_steps) = (args.first().copied().unwrap_or(800), args.get(1).copied().unwrap_or(600));

    let task = ToyTask::new(ToyKind::MappedTranslate, 40)?;
    let vocab = Vocab::toy(40);
    let split = |name: &str, n: usize| -> peswap::Result<Vec<Example>> {
        task.sample((4, 12), n, &mut RngStream::named(1, name))?
            .iter()
            .map(|p| Example::from_pair(p, &vocab, &vocab, &[]))
            .collect()
    };
    let (train, dev, test) = (split("train", 5000)?, split("dev", 100)?, split("test", 200)?);
    let opts = DevOptions { vocab: Some(&vocab), out_dir: None };
    let recipe = |lr: f64, warmup: usize, steps: usize| TrainConfig {
        base_lr: lr,
        warmup_steps: warmup,
        dropout: 0.0,
        max_tokens_per_batch: 1024,
        checkpoint_every: 200,
        eval_beam: 1,
        max_steps: Some(steps),
        ..TrainConfig::scratch()
    };

    let model = TransformerModel::<f32>::new(ModelConfig::toy(40, 40, PEKind::Sine), &mut RngStream::named(1, "init"))?;
    let base = train_loop(model, &train, &dev, &recipe(2e-3, 200, base_steps), &mut RngStream::named(1, "base"), &opts)?;
    let scores = evaluate(&base.model, &test, &vocab)?;
    println!("sine base: exact {:.3} token {:.3} chrF++ {:.1}", scores.exact, scores.token, scores.chrfpp);

    let mut swapped = base.model.clone();
    swapped.swap_pe(PEKind::Rope)?;
    let scores = evaluate(&swapped, &test, &vocab)?;
    println!("swapped to rope, untuned: exact {:.3} token {:.3} chrF++ {:.1}", scores.exact, scores.token, scores.chrfpp);

    let adapted = inject(swapped, Strategy::MinLora, &LoraConfig::default(), &mut RngStream::named(1, "lora"))?;
    let tuned = train_loop(
        adapted.into_model(),
        &train,
        &dev,
        &recipe(3e-3, 100, tune_steps),
        &mut RngStream::named(1, "tune"),
        &opts,
    )?;
    let scores = evaluate(&tuned.model, &test, &vocab)?;
    println!("rope + minlora: exact {:.3} token {:.3} chrF++ {:.1}", scores.exact, scores.token, scores.chrfpp);
    Ok(())
}
