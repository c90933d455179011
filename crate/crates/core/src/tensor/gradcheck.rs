//! Central finite-difference verification of tape gradients (64-bit).

use super::{Result, Tape, Tensor, TensorError, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so exact zeros do not turn round-off into 100% errors.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Builds the graph through `build` on a fresh tape with every tensor in
/// `params` registered as a parameter, runs backward, and compares each
/// element of each gradient against central differences.
pub fn grad_check<F>(params: &[Tensor<f64>], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::Usage(
                "grad_check graph output must be scalar".into(),
            ));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[ei], numeric);
            checked += 1;
            if err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(err);
                if err >= max_rel_err {
                    worst = Some((pi, ei));
                }
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        pass: max_rel_err < tolerance,
    })
}
