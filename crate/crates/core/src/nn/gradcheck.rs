use rand::Rng;

use super::{Grads, NnError, ParamStore};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences on `samples`
/// randomly chosen coordinates (every coordinate when the store is smaller)
/// and returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F, R>(
    mut loss: F,
    store: &ParamStore,
    samples: usize,
    eps: f64,
    rng: &mut R,
) -> Result<f64, NnError>
where
    F: FnMut(&ParamStore) -> (f64, Grads),
    R: Rng,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NnError::InvalidStep(eps));
    }
    let (_, analytic) = loss(store);
    let coords: Vec<(usize, usize)> = (0..store.len())
        .flat_map(|slot| (0..store.get(slot).as_slice().len()).map(move |i| (slot, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        (0..samples)
            .map(|_| coords[rng.gen_range(0..coords.len())])
            .collect()
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (slot, i) in chosen {
        let original = probe.get(slot).as_slice()[i];
        probe.get_mut(slot).as_mut_slice()[i] = original + eps;
        let (plus, _) = loss(&probe);
        probe.get_mut(slot).as_mut_slice()[i] = original - eps;
        let (minus, _) = loss(&probe);
        probe.get_mut(slot).as_mut_slice()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.get(slot).as_slice()[i];
        let denom = exact.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(worst)
}
