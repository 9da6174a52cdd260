//! Central finite-difference verification of backward rules.
//!
//! A check records `f` on a fresh f64 tape, contracts its output with a fixed
//! random projection `R` and compares the tape's gradient of `sum(R * f)`
//! against `sum(R * (f(x + h e_i) - f(x - h e_i))) / 2h` for each probed
//! coordinate. Each output difference is divided by the step actually realised
//! in floating point, `(x + h) - (x - h)`, before summing, which keeps
//! cancellation error well below the truncation error and makes linear
//! functions exact.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::tape::{Mode, Tape, ValueId};
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// One input of a checked function.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub name: String,
    pub tensor: Tensor4<f64>,
    /// Probed and differentiated; otherwise recorded as a constant.
    pub probe: bool,
}

impl CheckInput {
    pub fn probe(name: impl Into<String>, tensor: Tensor4<f64>) -> Self {
        CheckInput {
            name: name.into(),
            tensor,
            probe: true,
        }
    }

    pub fn fixed(name: impl Into<String>, tensor: Tensor4<f64>) -> Self {
        CheckInput {
            name: name.into(),
            tensor,
            probe: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Leaves with more elements are checked on a seeded sample of this size.
    pub max_coords: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            max_coords: 48,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub tol: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    /// Every leaf strictly below tolerance, so a zero tolerance always fails.
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tol)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {} max rel err {:.3e} (tol {:.1e})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tol
        )?;
        for l in &self.leaves {
            writeln!(
                f,
                "    {:<40} {:.3e}  [{}/{}]",
                l.name, l.max_rel_error, l.checked, l.total
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[CheckInput], mode: Mode) -> Result<(Tape<f64>, Vec<ValueId>, ValueId)>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new(mode);
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|i| {
            if i.probe {
                tape.leaf(i.tensor.clone())
            } else {
                tape.constant(i.tensor.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &ids)?;
    Ok((tape, ids, out))
}

fn projected_slope(r: &Tensor4<f64>, plus: &Tensor4<f64>, minus: &Tensor4<f64>, span: f64) -> f64 {
    r.data()
        .iter()
        .zip(plus.data().iter().zip(minus.data()))
        .map(|(&rv, (&p, &m))| rv * ((p - m) / span))
        .sum()
}

/// Compares the tape gradient of `f` against central differences for every
/// probed input.
pub fn finite_diff_check<F>(name: &str, inputs: &[CheckInput], f: F, opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let (tape, ids, out) = evaluate(&f, inputs, opts.mode)?;
    let od = tape.dims(out)?;
    let mut rng = seeded_rng(opts.seed);
    let projection = Tensor4::from_vec(od, (0..od.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let grads = tape.backward(out, &projection)?;

    let mut leaves = Vec::new();
    let mut perturbed = inputs.to_vec();
    for (li, input) in inputs.iter().enumerate() {
        if !input.probe {
            continue;
        }
        let analytic = grads.get(ids[li])?;
        let total = input.tensor.len();
        let coords: Vec<usize> = if total <= opts.max_coords {
            (0..total).collect()
        } else {
            let mut leaf_rng = seeded_rng(opts.seed.wrapping_add(1 + li as u64));
            let mut c = sample(&mut leaf_rng, total, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_err: f64 = 0.0;
        for &coord in &coords {
            let base = input.tensor.data()[coord];
            let mut probe = |v: f64| -> Result<Tensor4<f64>> {
                let mut data = input.tensor.data().to_vec();
                data[coord] = v;
                perturbed[li].tensor = Tensor4::from_vec(input.tensor.dims(), data)?;
                let result = evaluate(&f, &perturbed, opts.mode).and_then(|(t, _, o)| Ok(t.value(o)?.clone()));
                result.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::ProbeNonFinite {
                        leaf: input.name.clone(),
                        coord,
                    },
                    other => other,
                })
            };
            let (hi, lo) = (base + opts.step, base - opts.step);
            let plus = probe(hi)?;
            let minus = probe(lo)?;
            let numeric = projected_slope(&projection, &plus, &minus, hi - lo);
            if !numeric.is_finite() {
                return Err(Error::ProbeNonFinite {
                    leaf: input.name.clone(),
                    coord,
                });
            }
            max_err = max_err.max(relative_error(analytic.data()[coord], numeric));
        }
        perturbed[li].tensor = input.tensor.clone();
        leaves.push(LeafReport {
            name: input.name.clone(),
            max_rel_error: max_err,
            checked: coords.len(),
            total,
        });
    }
    Ok(GradReport {
        name: name.to_string(),
        tol: opts.tol,
        leaves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn identity_is_exact() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 4), vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = finite_diff_check(
            "identity",
            &[CheckInput::probe("x", x)],
            |t, ids| t.scale(ids[0], 1.0),
            &CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
        assert!(r.passed());
        assert!(!GradReport { tol: 0.0, ..r }.passed());
    }

    #[test]
    fn square_matches_closed_form() {
        let x = Tensor4::full(Dims::new(1, 1, 1, 5), 1.0);
        let r = finite_diff_check(
            "square",
            &[CheckInput::probe("x", x)],
            |t, ids| t.mul(ids[0], ids[0]),
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-9, "{r}");
    }

    #[test]
    fn zero_tolerance_fails_inexact_checks() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![0.3, 0.7, 1.1]).unwrap();
        let opts = CheckOptions {
            tol: 0.0,
            ..CheckOptions::default()
        };
        let r = finite_diff_check(
            "sigmoid",
            &[CheckInput::probe("x", x)],
            |t, ids| t.activation(ids[0], crate::nn::Activation::Sigmoid),
            &opts,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 1e308]).unwrap();
        let err = finite_diff_check(
            "overflow",
            &[CheckInput::probe("x", x)],
            |t, ids| {
                let big = t.constant(Tensor4::full(Dims::new(1, 1, 1, 2), 1.0));
                let y = t.add(ids[0], big)?;
                let s = t.scale(y, 1.0 + 1e-15)?;
                t.mul(s, s)
            },
            &CheckOptions::default(),
        );
        assert!(err.is_err());
    }
}
