use peswap::numerics::{finite_diff_check, Gradients, ParamStore, RngStream, Tape, Tensor, Var};
use peswap::Result;
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

/// Projects `out` onto fixed random weights so the loss depends on every element.
fn weighted_sum(tape: &mut Tape<'_, f64>, out: Var, rng: &mut RngStream) -> Result<Var> {
    let w = random(tape.shape(out), rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Runs the finite-difference check on a single-op graph built by `build`.
fn check<F>(shapes: &[&[usize]], seed: u64, build: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = RngStream::named(seed, "inputs");
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(format!("x{i}"), random(s, &mut rng)).unwrap();
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let forward = |store: &ParamStore<f64>| -> Result<(f64, Gradients<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, out, &mut RngStream::named(seed, "weights"))?;
        Ok((tape.value(loss).data()[0], tape.backward(loss)?))
    };
    finite_diff_check(&mut store, forward, 1e-6, 20, &mut RngStream::named(seed, "sites")).unwrap()
}

const TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_grad(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        prop_assert!(check(&[&[m, k], &[k, n]], seed, |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn matmul_transposed_batched_grad(seed in any::<u64>(), b in 1usize..3, m in 1usize..4, k in 1usize..4) {
        prop_assert!(check(&[&[b, m, k], &[b, 3, k]], seed, |t, v| t.matmul_t(v[0], v[1], true)) < TOL);
    }

    #[test]
    fn linear_grad(seed in any::<u64>(), rows in 1usize..5) {
        prop_assert!(check(&[&[rows, 3], &[4, 3], &[4]], seed, |t, v| t.linear(v[0], v[1], Some(v[2]))) < TOL);
    }

    #[test]
    fn softmax_grad(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..6) {
        prop_assert!(check(&[&[rows, cols]], seed, |t, v| Ok(t.softmax_lastdim(v[0]))) < TOL);
    }

    #[test]
    fn layer_norm_grad(seed in any::<u64>(), rows in 1usize..4) {
        prop_assert!(check(&[&[rows, 6], &[6], &[6]], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
    }

    #[test]
    fn relu_and_add_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 4], &[3, 4]], seed, |t, v| {
            let s = t.add(v[0], v[1])?;
            Ok(t.relu(s))
        });
        prop_assert!(err < TOL);
    }

    #[test]
    fn embedding_grad(seed in any::<u64>(), ids in prop::collection::vec(0usize..5, 1..8)) {
        prop_assert!(check(&[&[5, 3]], seed, |t, v| t.embedding(v[0], &ids)) < TOL);
    }

    #[test]
    fn rope_grad(seed in any::<u64>(), len in 1usize..5) {
        let mut rng = RngStream::named(seed, "angles");
        let angles: Vec<f64> = (0..len * 2).map(|_| rng.uniform() * 6.0).collect();
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
        prop_assert!(check(&[&[2, len, 4]], seed, |t, v| t.rope(v[0], &cos, &sin)) < TOL);
    }

    #[test]
    fn heads_roundtrip_grad(seed in any::<u64>()) {
        let err = check(&[&[2 * 3, 8]], seed, |t, v| {
            let h = t.split_heads(v[0], 2, 3, 4)?;
            let s = t.softmax_lastdim(h);
            t.merge_heads(s, 2, 4)
        });
        prop_assert!(err < TOL);
    }

    #[test]
    fn smoothed_ce_grad(seed in any::<u64>(), eps in 0.0f64..0.3) {
        let targets = [Some(1), None, Some(3), Some(0)];
        let err = check(&[&[4, 5]], seed, |t, v| t.smoothed_ce(v[0], &targets, eps));
        prop_assert!(err < TOL);
    }
}
