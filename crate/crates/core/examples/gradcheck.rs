//! Compares backpropagated gradients with central finite differences for a
//! small double-precision model under each positional scheme.

use peswap::corpus::{ToyKind, ToyTask, Vocab};
use peswap::model::{ModelConfig, TransformerModel};
use peswap::numerics::RngStream;
use peswap::positional::PEKind;
use peswap::train::{gradcheck_model, Example};

fn main() -> peswap::Result<()> {
    let vocab = Vocab::toy(16);
    let pairs = ToyTask::new(ToyKind::Reverse, 16)?.sample((3, 7), 4, &mut RngStream::named(3, "data"))?;
    let batch: Vec<Example> = pairs
        .iter()
        .map(|p| Example::from_pair(p, &vocab, &vocab, &[]))
        .collect::<peswap::Result<_>>()?;
    for pe in PEKind::ALL {
        let cfg = ModelConfig {
            d_model: 16,
            ffn_dim: 32,
            ..ModelConfig::toy(16, 16, pe)
        };
        let mut model = TransformerModel::<f64>::new(cfg, &mut RngStream::named(3, "init"))?;
        let err = gradcheck_model(&mut model, &batch, 0.1, 50, &mut RngStream::named(3, "sites"))?;
        println!("{pe:<6} worst relative error over 50 weights: {err:.2e}");
    }
    Ok(())
}
