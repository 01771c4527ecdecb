//! Central finite differences, for verifying analytic gradients in tests.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing one analytic partial derivative against its
/// finite-difference estimate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step actually used.
    pub step: f64,
    /// Whether `x - step`, `x` and `x + step` took the same branch at every
    /// kinked op. When false the central difference straddles a kink and says
    /// nothing about the derivative.
    pub smooth: bool,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Finite-difference scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²), two evaluations.
    Central,
    /// Central differences at `h` and `h/2` extrapolated, error O(h⁴), four
    /// evaluations.
    Richardson,
}

/// Step reductions tried when a perturbation crosses a kink.
const SHRINK: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// [`probe_with`] using [`Stencil::Richardson`].
pub fn probe_gradients<F>(inputs: &[Tensor<f64>], coords: &[(usize, usize)], h: f64, f: F) -> Vec<Probe>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    probe_with(inputs, coords, h, Stencil::Richardson, f)
}

/// Evaluates `f` on fresh leaves built from `inputs` and compares its analytic
/// gradient at the listed `(input, flat index)` coordinates with finite
/// differences of step `h`. A step whose perturbations change the branch of
/// any `abs`/`relu`/`leaky_relu` element is shrunk; if every step does, the
/// probe is marked not smooth.
pub fn probe_with<F>(inputs: &[Tensor<f64>], coords: &[(usize, usize)], h: f64, stencil: Stencil, f: F) -> Vec<Probe>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let tape = Tape::new();
    tape.track_branches();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars);
    let base = tape.branch_signature();
    let refs: Vec<&Var<f64>> = vars.iter().collect();
    let grads = tape.grad(&out, &refs, false).expect("gradient");

    let eval = |perturbed: &[Tensor<f64>]| -> (f64, Option<u64>) {
        let tape = Tape::new();
        tape.track_branches();
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| tape.var(t.clone())).collect();
        let v = f(&tape, &vars).item();
        (v, tape.branch_signature())
    };
    let difference = |input: usize, index: usize, step: f64| -> (f64, bool) {
        let mut plus = inputs.to_vec();
        plus[input].data_mut()[index] += step;
        let mut minus = inputs.to_vec();
        minus[input].data_mut()[index] -= step;
        let (fp, sp) = eval(&plus);
        let (fm, sm) = eval(&minus);
        ((fp - fm) / (2.0 * step), sp == base && sm == base)
    };
    let central = |input: usize, index: usize, step: f64| -> (f64, bool) {
        let (d1, s1) = difference(input, index, step);
        if stencil == Stencil::Central {
            return (d1, s1);
        }
        let (d2, s2) = difference(input, index, step / 2.0);
        ((4.0 * d2 - d1) / 3.0, s1 && s2)
    };

    coords
        .iter()
        .map(|&(input, index)| {
            let analytic = grads[input]
                .as_ref()
                .map(|g| g.value().data()[index])
                .unwrap_or(0.0);
            // the first step is kept when no step avoids the kinks
            let mut probe: Option<Probe> = None;
            for k in SHRINK {
                let (numeric, smooth) = central(input, index, h * k);
                if probe.is_none() || smooth {
                    probe = Some(Probe {
                        input,
                        index,
                        analytic,
                        numeric,
                        step: h * k,
                        smooth,
                    });
                }
                if smooth {
                    break;
                }
            }
            probe.expect("at least one step")
        })
        .collect()
}
