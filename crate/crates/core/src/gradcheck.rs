//! Central finite-difference gradient checks for parameters in a
//! [`ParamStore`]. Intended for 64-bit stores.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::seed;

/// Gradients below this l2 norm are compared in absolute terms. Parameters
/// the loss is invariant to (a softmax logit bias) sit here.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` for every checked parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn read(var: &Var) -> Result<Vec<f64>> {
    Ok(var.as_tensor().flatten_all()?.to_vec1::<f64>()?)
}

fn write(var: &Var, values: Vec<f64>) -> Result<()> {
    let t = Tensor::from_vec(values, var.shape(), var.device())?;
    var.set(&t)?;
    Ok(())
}

/// Compares backprop gradients with central differences on up to
/// `coords_per_param` randomly chosen coordinates of every parameter whose
/// name starts with one of `prefixes` (all parameters if empty).
///
/// The relative error of a parameter is `|g - g_fd| / max(|g|, |g_fd|, FLOOR)`
/// measured in the l2 norm over the sampled coordinates.
pub fn check_params<F>(
    store: &ParamStore,
    prefixes: &[&str],
    coords_per_param: usize,
    step: f64,
    seed_value: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != candle_core::DType::F64 {
        return Err(Error::InvalidInput("gradient checks need an f64 store".into()));
    }
    let l = loss()?;
    let grads = l.backward()?;
    let mut rng = seed::rng(seed_value);
    let mut per_param = Vec::new();
    for (name, var) in store.vars() {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = read(var)?;
        let n = base.len();
        let picks: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for &i in &picks {
            let mut plus = base.clone();
            plus[i] += step;
            write(var, plus)?;
            let lp = loss()?.to_scalar::<f64>()?;
            let mut minus = base.clone();
            minus[i] -= step;
            write(var, minus)?;
            let lm = loss()?.to_scalar::<f64>()?;
            write(var, base.clone())?;
            let numeric = (lp - lm) / (2.0 * step);
            diff += (analytic[i] - numeric).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
        let denom = norm_a.sqrt().max(norm_n.sqrt()).max(FLOOR);
        per_param.push((name.clone(), diff.sqrt() / denom));
    }
    if per_param.is_empty() {
        return Err(Error::InvalidInput("no parameters matched the prefixes".into()));
    }
    Ok(GradCheckReport { per_param })
}
