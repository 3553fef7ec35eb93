//! Central-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// When set, only this many randomly chosen entries per parameter are
    /// perturbed. Large models need it to finish in reasonable time.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |g_a − g_n| / max(1, |g_a|, |g_n|)` over all checked entries.
    pub max_rel_err: f64,
    /// Parameter name and entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, for every parameter in `store`.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    mut f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = store
        .ids()
        .map(|id| grads.param(id).map(|s| s.to_vec()))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.tensor(id).len();
        let name = store.get(id).name.clone();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in entries {
            let ga: f64 = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            if !ga.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "gradient of `{name}`[{j}]"
                )));
            }
            let orig = store.tensor(id).data()[j];
            let mut eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[j] = v;
                let mut g = Graph::new();
                let out = f(&mut g, store)?;
                Ok(g.scalar(out))
            };
            let plus = eval(orig + opts.step, store)?;
            let minus = eval(orig - opts.step, store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let gn = (plus - minus) / (2.0 * opts.step);
            if !gn.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "numeric gradient of `{name}`[{j}]"
                )));
            }
            let err = (ga - gn).abs() / 1f64.max(ga.abs()).max(gn.abs());
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}
