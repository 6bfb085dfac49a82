//! The four positional schemes side by side: a sinusoid table, rotary
//! embeddings and their relative-shift property, ALiBi slopes and biases.

use peswap::numerics::{RngStream, Tensor};
use peswap::positional::{alibi_bias, alibi_slopes, rope_rotate, sinusoidal_embed, RopeState};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> peswap::Result<()> {
    let table: Tensor<f64> = sinusoidal_embed(&[0, 1, 2, 3], 8);
    println!("sinusoid rows for positions 0..4, d=8:");
    for row in table.data().chunks(8) {
        println!("  {}", row.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));
    }

    // q at position m and k at position n score the same as q at m+s and k at n+s.
    let rope = RopeState::new(16, 10_000.0)?;
    let mut rng = RngStream::named(7, "rope-demo");
    let draw = |rng: &mut RngStream| Tensor::<f64>::from_f64(&[1, 16], &(0..16).map(|_| rng.normal()).collect::<Vec<_>>());
    let (q, k) = (draw(&mut rng)?, draw(&mut rng)?);
    println!("\nrotary scores depend only on the offset (m - n = 3):");
    for shift in [0, 10, 100] {
        let qm = rope_rotate(&q, &[5 + shift], &rope)?;
        let kn = rope_rotate(&k, &[2 + shift], &rope)?;
        println!("  m={:<3} n={:<3} score {:+.9}", 5 + shift, 2 + shift, dot(qm.data(), kn.data()));
    }

    for n in [4, 6, 8] {
        let s = alibi_slopes(n)?;
        println!("\nALiBi slopes, {n} heads: {:?}", s.slopes().iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    }
    let slopes = alibi_slopes(2)?;
    let bias: Tensor<f64> = alibi_bias(&slopes, 4, 4, false);
    println!("\nbidirectional ALiBi bias, head 0 (slope {}):", slopes.slopes()[0]);
    for row in bias.data()[..16].chunks(4) {
        println!("  {}", row.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
