use super::{Graph, NumericsError, ParamStore, Var};

/// Entries whose gradients are both below this magnitude are compared on an
/// absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients against central finite differences over
/// every entry of every parameter in `store`.
///
/// The error for one entry is `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
/// `loss_fn` must be deterministic; parameter values are restored afterwards.
pub fn grad_check<E, F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    graph.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| p.grad.data().to_vec())
        .collect();

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for idx in 0..store.value(id).len() {
            let original = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = original + step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[idx] = original - step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[id.index()][idx];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            let err = (a - numeric).abs() / denom;
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        worst,
        entries_checked: checked,
        tolerance,
        passed: max_err <= tolerance,
    })
}
