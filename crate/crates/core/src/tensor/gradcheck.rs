//! Central-difference gradient checking against the tape.

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator; below it the check is
    /// effectively absolute, which keeps round-off on near-zero gradients
    /// from reading as failures.
    pub denom_floor: f64,
    /// Check at most this many coordinates per parameter (sampled without
    /// replacement). `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar `f` with central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order) and
/// must return a single-element variable. It must be deterministic.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "grad_check",
                shape: tape.shape(out).to_vec(),
                reason: "objective must be scalar".into(),
            });
        }
        if !tape.item(out).is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok((tape, vars, out))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = eval(&values, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    drop(tape);

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = values[pi].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.max_coords {
            if k < n {
                rng.shuffle(&mut coords);
                coords.truncate(k);
                coords.sort_unstable();
            }
        }
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = values[pi].data()[c];
            values[pi].data_mut()[c] = orig + opts.step;
            let (t, _, o) = eval(&values, false)?;
            let plus = t.item(o);
            values[pi].data_mut()[c] = orig - opts.step;
            let (t, _, o) = eval(&values, false)?;
            let minus = t.item(o);
            values[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[pi].data()[c], numeric, opts.denom_floor);
            worst = worst.max(err);
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            coords_checked: coords.len(),
        });
    }
    Ok(GradReport {
        params: report,
        tol: opts.tol,
    })
}
