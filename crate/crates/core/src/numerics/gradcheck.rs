use crate::error::{Error, Result};

use super::param::{Gradients, ParamStore};
use super::rng::RngStream;

/// Absolute floor of the relative-error denominator, so that gradients that are
/// zero up to round-off do not inflate the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares tape gradients to central finite differences on `samples` randomly
/// chosen trainable scalars and returns the worst relative error.
///
/// `forward` must be deterministic: it is called twice up front and the two
/// losses must agree bitwise.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    mut forward: F,
    h: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Gradients<f64>)>,
{
    if samples == 0 {
        log::warn!("finite_diff_check called with zero samples; nothing checked");
        return Ok(0.0);
    }
    let (loss, grads) = forward(store)?;
    let (again, _) = forward(store)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::Usage(format!(
            "forward is not deterministic ({loss} vs {again}); disable dropout"
        )));
    }

    let sites: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id.index(), p.value.numel()))
        .collect();
    let total: usize = sites.iter().map(|s| s.1).sum();
    if total == 0 {
        return Err(Error::Usage("no trainable parameters to check".into()));
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut site = 0;
        while flat >= sites[site].1 {
            flat -= sites[site].1;
            site += 1;
        }
        let id = ids[sites[site].0];
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[flat]);

        let orig = store.get(id).value.data()[flat];
        store.get_mut(id).value.data_mut()[flat] = orig + h;
        let (up, _) = forward(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig - h;
        let (down, _) = forward(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig;

        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
