//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;
/// Round-off of one objective evaluation, relative to its magnitude. A
/// central difference cannot resolve slopes below about this times
/// `|f| / step`, so smaller gradients are compared absolutely.
const ROUNDOFF: f64 = 1e-10;
/// Two estimates this close (relative) mean the objective is smooth on the
/// probe's scale.
const SMOOTH_TOL: f64 = 1e-4;
/// Tenfold step reductions tried when a probe straddles a kink.
const REFINEMENTS: i32 = 2;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Label of the input holding the worst entry, and the entry index.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Probes whose step straddled a relu, max or neighbor-swap kink and
    /// were re-measured with a smaller step.
    pub kinks: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            kinks: 0,
        }
    }

    fn record(&mut self, label: &str, i: usize, analytic: f64, d: Difference) {
        let err = (analytic - d.slope).abs() / analytic.abs().max(d.slope.abs()).max(d.floor);
        self.checked += 1;
        self.kinks += usize::from(d.kink);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), i));
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
        self
    }
}

struct Difference {
    slope: f64,
    /// Smallest denominator worth dividing by at the step used.
    floor: f64,
    kink: bool,
}

/// Central difference of `probe` around `orig`. The estimate at `step` is
/// kept when it agrees with the one at a tenth of the step; otherwise the
/// step shrinks until two consecutive estimates agree. The analytic value
/// plays no part in choosing the step.
fn central_difference(mut probe: impl FnMut(f64) -> Result<f64>, orig: f64, f0: f64, step: f64) -> Result<Difference> {
    let floor = |h: f64| DENOM_FLOOR.max(ROUNDOFF * f0.abs() / h);
    let mut at = |h: f64| -> Result<f64> { Ok((probe(orig + h)? - probe(orig - h)?) / (2.0 * h)) };
    let mut h = step;
    let mut slope = at(h)?;
    for k in 1..=REFINEMENTS {
        let finer = step * 10f64.powi(-k);
        let next = at(finer)?;
        if (slope - next).abs() <= SMOOTH_TOL * slope.abs().max(next.abs()).max(floor(finer)) {
            return Ok(Difference { slope, floor: floor(h), kink: k > 1 });
        }
        h = finer;
        slope = next;
    }
    Ok(Difference { slope, floor: floor(h), kink: true })
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradcheck target has shape {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::Probe(format!("non-finite objective value {x}")));
    }
    Ok(x)
}

/// Compares `backward()` against central differences for every entry of
/// every leaf. `f` must rebuild the same scalar expression from the leaves.
pub fn grad_check<F>(f: F, leaves: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(leaf.shape());
        let analytic = grads.get(vars[li]).unwrap_or(&zero).clone();
        for i in 0..leaf.numel() {
            let orig = leaf.data()[i];
            let d = central_difference(
                |v| {
                    work[li].data_mut()[i] = v;
                    eval(&work)
                },
                orig,
                f0,
                step,
            )?;
            work[li].data_mut()[i] = orig;
            report.record(&format!("leaf{li}"), i, analytic.data()[i], d);
        }
    }
    Ok(report)
}

/// Gradient check over named parameters of a store. `f` builds the scalar
/// objective on a fresh tape. Only the parameters in `names` are probed;
/// `max_entries` caps the number of probed entries per parameter (evenly
/// strided) to keep large layers cheap.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    names: &[String],
    step: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let f0 = scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: BTreeMap<String, Tensor> = tape.param_grads(&grads);

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for name in names {
        let n = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .numel();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(name).expect("checked").data()[i];
            let probe = |v: f64| -> Result<f64> {
                work.get_mut(name).expect("checked").data_mut()[i] = v;
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                scalar_of(&t, o)
            };
            let d = central_difference(probe, orig, f0, step)?;
            work.get_mut(name).expect("checked").data_mut()[i] = orig;
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            report.record(name, i, a, d);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[4, 4], -2.0, 2.0);
        let x = rand_tensor(&mut rng, &[4, 1], -2.0, 2.0);
        let r = grad_check(
            |t, v| {
                let ax = t.matmul(v[0], v[1])?;
                let xt = t.transpose(v[1])?;
                let q = t.matmul(xt, ax)?;
                Ok(t.sum(q))
            },
            &[a, x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn kink_inside_the_step_is_remeasured() {
        // relu(x) + 3x with x 3e-6 from the kink: the default step averages
        // both slopes, a step of 1e-6 does not.
        let x = Tensor::new(vec![2], vec![3e-6, 0.7]).unwrap();
        let objective = |t: &mut Tape, v: &[Var]| {
            let r = t.relu(v[0]);
            let lin = t.scale(v[0], 3.0);
            let p = t.add(r, lin)?;
            Ok(t.sum(p))
        };
        let r = grad_check(objective, &[x], DEFAULT_STEP).unwrap();
        assert_eq!(r.kinks, 1, "{r:?}");
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_gradient_is_not_judged_on_round_off() {
        // (x + 1000) - x has slope exactly zero, but rounding at 1000 leaves
        // ulp-sized differences between the probes.
        let x = Tensor::new(vec![1], vec![0.3]).unwrap();
        let r = grad_check(
            |t, v| {
                let c = t.constant(Tensor::new(vec![1], vec![1e3]).unwrap());
                let p = t.add(v[0], c)?;
                let q = t.sub(p, v[0])?;
                Ok(t.sum(q))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let c = t.constant(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
                let p = t.add(v[0], c)?;
                Ok(t.sum(p))
            },
            &[x],
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(Error::Probe(_))));
    }
}
