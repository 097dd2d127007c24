use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of the scalar built by `f` against
/// fourth-order central differences with step `eps`. At most `max_coords` evenly spaced
/// coordinates are probed per parameter. Returns the largest relative error
/// `|g - g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, max_coords: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during grad_check".into()));
        }
        Ok(v)
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (id, _, t) in store.iter() {
        let n = t.numel();
        let take = n.min(max_coords.max(1));
        for c in 0..take {
            let j = c * n / take;
            let orig = t.data()[j];
            let mut at = |k: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = orig + k * eps;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work.get_mut(id).data_mut()[j] = orig;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let an = grads.get(id).map_or(0.0, |g| g[j]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
