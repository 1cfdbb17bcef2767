use crate::array::Array;
use crate::error::Result;
use crate::tape::{Tape, Var};

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences at `inputs`. Returns the largest `|a - n| / max(1, |a|, |n|)`
/// over all input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
