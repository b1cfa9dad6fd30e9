use super::{GradStore, ParamSet};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// Central-difference gradient check over every tensor in the analytic
/// gradient store.
///
/// The error of one tensor is `‖analytic − numeric‖ / max(1e-12, ‖numeric‖)`
/// over its checked coordinates; the return value is the maximum over tensors.
pub fn grad_check<P, F>(loss_fn: F, params: &P, step: f64) -> Result<f64>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, GradStore)>,
{
    grad_check_with(
        loss_fn,
        params,
        GradCheckOptions {
            step,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<P, F>(loss_fn: F, params: &P, opts: GradCheckOptions) -> Result<f64>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, GradStore)>,
{
    if !(opts.step > 0.0) {
        return Err(MmqError::InvalidArgument(format!(
            "step must be > 0, got {}",
            opts.step
        )));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(MmqError::NonFinite("grad_check base loss".into()));
    }
    let eval = |p: &P| -> Result<f64> {
        let (l, _) = loss_fn(p)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(MmqError::NonFinite("grad_check perturbed loss".into()))
        }
    };

    let mut rng = Rng::derive(opts.seed, "grad_check");
    let mut worst = 0.0f64;
    for (name, g) in analytic.iter() {
        let n = g.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for &c in &coords {
            let plus = eval(&perturb(params, name, c, opts.step)?)?;
            let minus = eval(&perturb(params, name, c, -opts.step)?)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = g.data()[c];
            diff2 += (a - numeric) * (a - numeric);
            num2 += numeric * numeric;
        }
        let err = diff2.sqrt() / num2.sqrt().max(1e-12);
        log::trace!("grad_check {name}: {err:e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

fn perturb<P: ParamSet + Clone>(params: &P, name: &str, coord: usize, delta: f64) -> Result<P> {
    let mut p = params.clone();
    let mut found = false;
    p.visit_params_mut(&mut |n, m| {
        if n == name {
            m.data_mut()[coord] += delta;
            found = true;
        }
    });
    if found {
        Ok(p)
    } else {
        Err(MmqError::Missing(format!(
            "parameter `{name}` for gradient check"
        )))
    }
}
