//! Central finite-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{Bindings, ModelParams, ParamGrads};

/// Which coordinates to probe.
#[derive(Clone, Debug)]
pub struct CheckPlan {
    /// Coordinates sampled per trainable tensor (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for CheckPlan {
    fn default() -> Self {
        CheckPlan {
            coords_per_param: 4,
            seed: 0,
        }
    }
}

/// Smallest step tried when the ± evaluations straddle a kink.
pub const MIN_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    /// Step actually used; smaller than requested after a kink retry.
    pub eps: f64,
    /// The final ± pair still disagreed on its kink signature.
    pub straddles_kink: bool,
}

/// One loss evaluation and the [`Tape::kink_signature`] it produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub kinks: u64,
}

impl From<f64> for LossEval {
    fn from(value: f64) -> Self {
        LossEval { value, kinks: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Runs `f` on a fresh tape and returns the loss and its parameter gradients.
pub fn analytic_grads<F>(params: &ModelParams, f: F) -> Result<(f64, ParamGrads)>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let loss = f(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.value(loss).item(),
        params.collect_grads(&bindings, &grads),
    ))
}

/// Compares `analytic` against central differences of `loss` with step `eps`
/// and returns the largest relative error over the probed coordinates.
///
/// When the `+eps` and `-eps` evaluations report different kink signatures
/// the difference quotient spans a corner of a piecewise function, so the
/// coordinate is retried with a tenfold smaller step down to [`MIN_EPS`].
pub fn grad_check<L>(
    params: &ModelParams,
    analytic: &ParamGrads,
    eps: f64,
    plan: &CheckPlan,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&ModelParams) -> Result<LossEval> + Sync + Send,
{
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut coords = Vec::new();
    for (name, g) in analytic {
        let n = g.numel();
        let k = plan.coords_per_param.min(n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        coords.extend(idx.into_iter().map(|i| (name.clone(), i)));
    }
    let results = par::map_indexed(coords.len(), |c| -> Result<Probe> {
        let (name, index) = &coords[c];
        let eval = |delta: f64| -> Result<LossEval> {
            let mut p = params.clone();
            p.get_mut(name)?.value.data_mut()[*index] += delta;
            loss(&p)
        };
        let mut h = eps;
        let (numeric, straddles_kink) = loop {
            let (plus, minus) = (eval(h)?, eval(-h)?);
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let straddles = plus.kinks != minus.kinks;
            if !straddles || h / 10.0 < MIN_EPS {
                break (numeric, straddles);
            }
            h /= 10.0;
        };
        let a = analytic[name].data()[*index];
        Ok(Probe {
            param: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
            eps: h,
            straddles_kink,
        })
    });
    let probes = results.into_iter().collect::<Result<Vec<_>>>()?;
    if probes.is_empty() {
        return Err(Error::Contract(
            "grad_check: no trainable coordinates".into(),
        ));
    }
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        probes,
    })
}

/// [`analytic_grads`] followed by [`grad_check`] on the same function.
pub fn check_fn<F>(
    params: &ModelParams,
    eps: f64,
    plan: &CheckPlan,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var> + Sync + Send,
{
    let (_, analytic) = analytic_grads(params, &f)?;
    grad_check(params, &analytic, eps, plan, |p| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let loss = f(&mut tape, &b)?;
        Ok(LossEval {
            value: tape.value(loss).item(),
            kinks: tape.kink_signature(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_params() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap());
        p.insert(
            "a",
            Tensor::new([3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap(),
        );
        p
    }

    /// xᵀ A x
    fn quadratic(tape: &mut Tape, b: &Bindings) -> Result<Var> {
        let x = b.get("x")?;
        let ax = tape.affine(x, b.get("a")?, None)?;
        let prod = tape.mul(ax, x)?;
        Ok(tape.sum(prod))
    }

    #[test]
    fn quadratic_form_is_exact() {
        let p = quadratic_params();
        let plan = CheckPlan {
            coords_per_param: 9,
            seed: 1,
        };
        let r = check_fn(&p, 1e-4, &plan, quadratic).unwrap();
        assert!(r.max_relative_error < 1e-8, "{:?}", r.worst());
        assert_eq!(r.probes.len(), 12);
    }

    #[test]
    fn planted_gradient_bug_is_detected() {
        let p = quadratic_params();
        let (_, mut g) = analytic_grads(&p, quadratic).unwrap();
        g.get_mut("x")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 2.0);
        let r = grad_check(&p, &g, 1e-4, &CheckPlan::default(), |p| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let l = quadratic(&mut tape, &b)?;
            Ok(tape.value(l).item().into())
        })
        .unwrap();
        // |2a − a| / |2a| = 0.5 on every corrupted coordinate
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
        assert_eq!(r.worst().unwrap().param, "x");
    }

    #[test]
    fn kink_crossing_shrinks_the_step() {
        // relu(x) summed; x[0] sits 5e-4 from the corner, inside a 1e-3 step
        let mut p = ModelParams::new();
        p.insert("x", Tensor::new([2], vec![5e-4, 1.0]).unwrap());
        let f = |tape: &mut Tape, b: &Bindings| -> Result<Var> {
            let r = tape.activation(b.get("x")?, crate::Activation::Relu);
            Ok(tape.sum(r))
        };
        let plan = CheckPlan {
            coords_per_param: 2,
            seed: 0,
        };
        let r = check_fn(&p, 1e-3, &plan, f).unwrap();
        assert!(r.max_relative_error < 1e-9, "{:?}", r.worst());
        let near = r.probes.iter().find(|q| q.index == 0).unwrap();
        assert!((near.eps - 1e-4).abs() < 1e-12 && !near.straddles_kink);
        let far = r.probes.iter().find(|q| q.index == 1).unwrap();
        assert_eq!(far.eps, 1e-3);
    }
}
