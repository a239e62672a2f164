use super::{Element, Result, Tape, Tensor, Var};

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// Returns `maxᵢ |aᵢ − nᵢ| / max(|aᵢ|, |nᵢ|, 1e-8)`. The denominator uses the
/// step actually representable in `T`, so low precision does not bias the
/// quotient.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, epsilon: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&tape, input)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = match grads.wrt(input) {
        Some(g) => g.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&tape, v)?;
        Ok(tape.value(out).data()[0].f64())
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let base = x.data()[i];
        plus.data_mut()[i] = base + T::of(epsilon);
        minus.data_mut()[i] = base - T::of(epsilon);
        let step = plus.data()[i].f64() - minus.data()[i].f64();
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
