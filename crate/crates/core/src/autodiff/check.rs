use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Compares tape gradients against central finite differences.
///
/// `f` must build the same deterministic scalar on a fresh tape each time it
/// is called. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over every coordinate of every parameter in `store`.
pub fn grad_check<F>(f: F, store: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let analytic: Vec<Vec<f64>> = work.iter().map(|p| p.grad.clone()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.scalar(l))
    };

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &ga) in grads.iter().enumerate() {
            let id = super::ParamId(pi);
            let orig = work.get(id).values[ci];
            work.get_mut(id).values[ci] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).values[ci] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).values[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((ga - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
