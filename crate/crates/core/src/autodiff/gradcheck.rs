use rand::Rng;

use super::{AutodiffError, Graph, NodeId, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / (|analytic| + |numeric| + 1e−8)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: (param, index, analytic, numeric).
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Compares the reverse-mode gradient of the scalar graph built by `f` with
/// central differences at the given parameter coordinates.
///
/// `f` must be deterministic: build graphs with [`Graph::new`] (no dropout).
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    f: F,
    eps: f64,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<NodeId, AutodiffError>,
{
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(AutodiffError::Step(eps));
    }
    let eval = |store: &ParamStore<T>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.scalar(loss).as_f64();
        if !v.is_finite() {
            let (node, op) = g.first_non_finite().map(|(n, op)| (n.index(), op)).unwrap_or((loss.index(), "unknown"));
            return Err(AutodiffError::NonFinite { op, node });
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let step = T::from_f64_lossy(eps);
    for &(pid, idx) in coords {
        let original = store.get(pid).values()[idx];
        store.get_mut(pid).values_mut()[idx] = original + step;
        let plus = eval(store);
        store.get_mut(pid).values_mut()[idx] = original - step;
        let minus = eval(store);
        store.get_mut(pid).values_mut()[idx] = original;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic.get(pid).map_or(0.0, |g| g[idx].as_f64());
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pid, idx, a, numeric));
        }
    }
    Ok(report)
}

/// Draws `n` coordinates: a trainable parameter uniformly, then an entry of it
/// uniformly, so small tensors (biases, norms) are not drowned out by tables.
pub fn sample_coords<T: Scalar, R: Rng>(store: &ParamStore<T>, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let trainable: Vec<ParamId> = store.iter().filter(|(_, _, t)| t.requires_grad() && !t.is_empty()).map(|(id, _, _)| id).collect();
    if trainable.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let pid = trainable[rng.gen_range(0..trainable.len())];
            (pid, rng.gen_range(0..store.get(pid).len()))
        })
        .collect()
}
