//! Central finite-difference gradient checking.

use super::params::ParameterStore;
use crate::Result;

/// One probed coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose
    /// true gradient is essentially zero from dividing rounding noise by zero.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of `loss` with respect to
/// `store[name][index]`. The store is restored before returning.
pub fn central_difference(
    store: &mut ParameterStore,
    name: &str,
    index: usize,
    h: f64,
    loss: &mut impl FnMut(&ParameterStore) -> Result<f64>,
) -> Result<f64> {
    let original = store
        .get(name)
        .ok_or_else(|| crate::Error::invalid(format!("unknown parameter `{name}`")))?
        .data()[index];
    store.get_mut(name).unwrap().data_mut()[index] = original + h;
    let plus = loss(store);
    store.get_mut(name).unwrap().data_mut()[index] = original - h;
    let minus = loss(store);
    store.get_mut(name).unwrap().data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares analytic gradients against central differences at the given
/// coordinates.
pub fn check_coordinates(
    store: &mut ParameterStore,
    analytic: &super::graph::Gradients,
    coords: &[(String, usize)],
    h: f64,
    mut loss: impl FnMut(&ParameterStore) -> Result<f64>,
) -> Result<Vec<GradProbe>> {
    coords
        .iter()
        .map(|(name, index)| {
            let numeric = central_difference(store, name, *index, h, &mut loss)?;
            let analytic = analytic
                .get(name)
                .map(|g| g.data()[*index])
                .ok_or_else(|| crate::Error::invalid(format!("no gradient for `{name}`")))?;
            Ok(GradProbe {
                name: name.clone(),
                index: *index,
                analytic,
                numeric,
            })
        })
        .collect()
}

/// Picks `count` (name, index) pairs over the trainable parameters, weighting
/// each tensor by its size.
pub fn sample_coordinates(store: &ParameterStore, count: usize, rng: &mut impl rand::Rng) -> Vec<(String, usize)> {
    let entries: Vec<(&String, usize)> = store
        .trainable_names()
        .map(|n| (n, store.get(n).unwrap().len()))
        .filter(|(_, len)| *len > 0)
        .collect();
    let total: usize = entries.iter().map(|(_, l)| l).sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0..total);
            for (name, len) in &entries {
                if pick < *len {
                    return ((*name).clone(), pick);
                }
                pick -= len;
            }
            unreachable!("pick < total")
        })
        .collect()
}
