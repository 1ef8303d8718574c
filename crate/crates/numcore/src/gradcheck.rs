//! Central-difference verification of reverse-mode gradients.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(NumError::Invalid {
            op: "grad_check",
            msg: format!("function must be scalar, got {:?}", t.shape()),
        });
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(NumError::NonFinite("grad_check output".into()));
    }
    Ok(x)
}

/// Largest relative error between the reverse-mode gradient of `f` at
/// `input` and a central difference with step `eps`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let empty = ParamStore::new();
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new(&empty);
        let v = g.input(x.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new(&empty);
    let v = g.input(input.clone());
    let out = f(&mut g, v)?;
    scalar_of(&g, out)?;
    let back = g.backward(out)?;
    let zeros = vec![0.0; input.len()];
    let analytic = back.wrt(v).unwrap_or(&zeros);
    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for k in 0..input.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    Ok(worst)
}

/// Same check with respect to stored parameters. `coords_per_param` caps
/// the number of coordinates probed in each parameter (evenly strided);
/// `None` probes all of them.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    coords_per_param: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?.into_params();
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let len = store.get(id).len();
        let analytic = grads.dense(id, len).unwrap_or_else(|| vec![0.0; len]);
        let stride = match coords_per_param {
            Some(c) if c > 0 && c < len => len.div_ceil(c),
            _ => 1,
        };
        for k in (0..len).step_by(stride) {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = {
                let mut g = Graph::new(&probe);
                let o = f(&mut g)?;
                scalar_of(&g, o)?
            };
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = {
                let mut g = Graph::new(&probe);
                let o = f(&mut g)?;
                scalar_of(&g, o)?
            };
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
    }
    Ok(worst)
}
