use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DiffError;
use crate::graph::{Graph, Node};
use crate::store::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst coordinate
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the reverse-mode gradient of a scalar function of the store with
/// central finite differences.
///
/// `f` must be deterministic and return a `1 x 1` node. The store is restored
/// to its original values before returning.
pub fn grad_check<F, E>(
    store: &mut ParamStore,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Node, E>,
    E: From<DiffError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for flat in coords {
            let original = flat_get(store, id, flat);
            flat_set(store, id, flat, original + opts.eps);
            let plus = eval(store);
            flat_set(store, id, flat, original - opts.eps);
            let minus = eval(store);
            flat_set(store, id, flat, original);
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic
                .get(id)
                .map(|g| g[unflatten(g.ncols(), flat)])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.param(id).name.clone(), flat));
            }
        }
    }
    Ok(report)
}

fn unflatten(cols: usize, flat: usize) -> [usize; 2] {
    [flat / cols, flat % cols]
}

fn flat_get(store: &ParamStore, id: crate::ParamId, flat: usize) -> f64 {
    let m = store.value(id);
    m[unflatten(m.ncols(), flat)]
}

fn flat_set(store: &mut ParamStore, id: crate::ParamId, flat: usize, v: f64) {
    let m = store.value_mut(id);
    let idx = unflatten(m.ncols(), flat);
    m[idx] = v;
}
