//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{Module, TensorKind};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, floor)`. Below `floor` the error is absolute,
/// scaled by `1 / floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

impl Stencil {
    fn offsets(self) -> &'static [f64] {
        match self {
            Stencil::Central => &[1.0, -1.0],
            Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
        }
    }

    fn combine(self, h: f64, v: &[f64]) -> f64 {
        match self {
            Stencil::Central => (v[0] - v[1]) / (2.0 * h),
            Stencil::FivePoint => (8.0 * (v[0] - v[1]) - (v[2] - v[3])) / (12.0 * h),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Coordinates {
    All,
    /// Up to `per_group` coordinates drawn without replacement from each group.
    Sample { per_group: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub h: f64,
    pub stencil: Stencil,
    pub coords: Coordinates,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    pub tolerance: f64,
    /// How many times `h` may be halved to keep every stencil point on the
    /// same smooth piece as the unperturbed parameters.
    pub max_halvings: u32,
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates that needed a smaller step to avoid a kink.
    pub reduced_steps: usize,
    /// Coordinates where every step still crossed a kink.
    pub unresolved_kinks: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `grad` (which must leave gradients in the model's parameter
/// slots, starting from zero) against finite differences of `loss` for every
/// trainable parameter group of `model`.
///
/// `loss` returns the value and a signature of the smooth piece it was
/// evaluated on (for ReLU networks, the activation pattern; any constant for
/// smooth functions). A stencil whose points change the signature straddles
/// a kink, and the step is halved for that coordinate.
pub fn check_gradients<M, L, G>(model: &mut M, mut loss: L, mut grad: G, opts: FdOptions) -> Result<GradCheckReport>
where
    M: Module<f64>,
    L: FnMut(&mut M) -> Result<(f64, u32)>,
    G: FnMut(&mut M) -> Result<()>,
{
    let FdOptions {
        h,
        stencil,
        coords,
        floor,
        tolerance,
        max_halvings,
    } = opts;
    if h <= 0.0 || floor <= 0.0 {
        return Err(Error::Config("finite-difference step and floor must be positive".into()));
    }
    let (_, base_signature) = loss(model)?;
    model.zero_grad();
    grad(model)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .named_tensors("")
        .into_iter()
        .filter(|(_, _, k)| *k == TensorKind::Param)
        .map(|(n, t, _)| (n, t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])))
        .collect();

    let mut groups = Vec::with_capacity(analytic.len());
    for (g, (name, an)) in analytic.iter().enumerate() {
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..an.len()).collect(),
            Coordinates::Sample { per_group, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = sample(&mut rng, an.len(), per_group.min(an.len())).into_vec();
                v.sort_unstable();
                v
            }
        };
        let mut report = GroupReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            reduced_steps: 0,
            unresolved_kinks: 0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in indices {
            let orig = param_value(model, g, i);
            let mut step = h;
            let mut numeric = 0.0;
            for halving in 0..=max_halvings {
                let mut values = Vec::with_capacity(4);
                let mut smooth = true;
                for &o in stencil.offsets() {
                    set_param(model, g, i, orig + o * step);
                    let r = loss(model);
                    set_param(model, g, i, orig);
                    let (v, sig) = r?;
                    smooth &= sig == base_signature;
                    values.push(v);
                }
                numeric = stencil.combine(step, &values);
                if smooth {
                    report.reduced_steps += usize::from(halving > 0);
                    break;
                }
                if halving == max_halvings {
                    report.unresolved_kinks += 1;
                }
                step *= 0.5;
            }
            let err = relative_error(an[i], numeric, floor);
            report.max_abs_error = report.max_abs_error.max((an[i] - numeric).abs());
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_index = i;
                report.worst_analytic = an[i];
                report.worst_numeric = numeric;
            }
        }
        groups.push(report);
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        tolerance,
    })
}

fn param_value<M: Module<f64>>(model: &M, group: usize, i: usize) -> f64 {
    model
        .named_tensors("")
        .into_iter()
        .filter(|(_, _, k)| *k == TensorKind::Param)
        .nth(group)
        .map(|(_, t, _)| t.data()[i])
        .expect("group index")
}

fn set_param<M: Module<f64>>(model: &mut M, group: usize, i: usize, v: f64) {
    let mut params = model.params_mut();
    params[group].data_mut()[i] = v;
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(theta: &[f64], h: f64, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_gradient_with(theta, h, Stencil::Central, f)
}

pub fn numeric_gradient_with(theta: &[f64], h: f64, stencil: Stencil, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    let mut vals = Vec::with_capacity(4);
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            vals.clear();
            for &o in stencil.offsets() {
                x[i] = orig + o * h;
                vals.push(f(&x));
            }
            x[i] = orig;
            stencil.combine(h, &vals)
        })
        .collect()
}
