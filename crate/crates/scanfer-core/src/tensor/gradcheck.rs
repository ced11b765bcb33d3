//! Gradient verification by central finite differences.

use super::{invalid_err, Tape, Tensor, TensorError, Var};

/// Compare the tape gradient of a scalar-valued computation against central
/// finite differences, element by element.
///
/// `f` builds the computation on a fresh tape from a single input leaf and
/// returns the scalar output. Returns the maximum over elements of
/// `|analytic - numeric| / (|analytic| + 1e-8)` with
/// `numeric = (f(x + h e) - f(x - h e)) / 2h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if h <= 0.0 {
        return Err(invalid_err("finite_diff_check", "step must be positive"));
    }

    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let out = f(&mut tape, input)?;
    if tape.value(out).len() != 1 {
        return Err(invalid_err(
            "finite_diff_check",
            format!("f must return a scalar, got shape {:?}", tape.shape(out)),
        ));
    }
    tape.backward(out)?;
    let analytic = tape.grad(input).to_vec();

    let eval = |probe: &Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let o = f(&mut t, v)?;
        Ok(t.scalar_value(o))
    };

    let mut max_rel: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
