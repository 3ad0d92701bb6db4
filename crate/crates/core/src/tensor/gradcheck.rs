//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which input components get a numeric derivative.
#[derive(Clone, Copy, Debug)]
pub enum Components {
    All,
    /// Up to `per_tensor` randomly chosen entries of every input.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, component)` achieving the maximum.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Smallest denominator of the relative error.
    pub floor: f64,
    /// Estimated computational noise of the function value; 0 when not
    /// estimated.
    pub noise: f64,
    /// Components whose gradient magnitude exceeds `floor`.
    pub resolved: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Coordinates probed by [`grad_check_noise_aware`] to estimate noise.
pub const NOISE_PROBES: usize = 25;
/// Standard deviations of central-difference noise treated as unresolvable.
pub const NOISE_SIGMAS: f64 = 6.0;

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the scalar that is differentiated: the output itself when it is
/// a scalar, otherwise a fixed random projection of it.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    if n == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights)?)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(with_grad)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let value = tape.value(loss).item();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

/// Standard deviation of the rounding noise in `f` near `inputs`. Each of
/// `probes` randomly chosen coordinates is stepped through nine equally
/// spaced values `h` apart; fourth differences of the resulting values
/// cancel every cubic, so at small `h` only noise survives (the ECnoise
/// construction of Moré and Wild). The median over probes discards the odd
/// probe that straddles a kink.
pub fn noise_level<F>(f: F, inputs: &[Tensor<f64>], h: f64, probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    const POINTS: usize = 9;
    const ORDER: usize = 4;
    // (k!)^2 / (2k)! for k = 4.
    const GAMMA: f64 = 576.0 / 40320.0;
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    if sizes.iter().all(|&n| n == 0) || probes == 0 {
        return Err(Error::Contract("noise_level needs a non-empty input and probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut levels = Vec::with_capacity(probes);
    for _ in 0..probes {
        let ti = loop {
            let t = rng.random_range(0..sizes.len());
            if sizes[t] > 0 {
                break t;
            }
        };
        let k = rng.random_range(0..sizes[ti]);
        let orig = inputs[ti].data()[k];
        let mut diff = Vec::with_capacity(POINTS);
        for i in 0..POINTS {
            work[ti].data_mut()[k] = orig + i as f64 * h;
            diff.push(evaluate(&f, &work, false)?.0);
        }
        work[ti].data_mut()[k] = orig;
        for _ in 0..ORDER {
            diff = diff.windows(2).map(|w| w[1] - w[0]).collect();
        }
        let mean_sq = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        levels.push((GAMMA * mean_sq).sqrt());
    }
    levels.sort_by(f64::total_cmp);
    Ok(levels[levels.len() / 2])
}

/// Compares reverse-mode gradients of `f` with central differences and
/// returns the worst relative error over the checked components.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, components: Components) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    compare(&f, inputs, eps, components, REL_FLOOR, 0.0)
}

/// [`grad_check_many`] for functions whose value carries more rounding
/// noise than a handful of ulps. The relative-error denominator is floored
/// at the magnitude below which noise alone could exceed `tol`, so
/// components too small to resolve must agree to within the noise.
pub fn grad_check_noise_aware<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    components: Components,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let noise = noise_level(&f, inputs, eps, NOISE_PROBES, 0x0153)?;
    // Central differences carry noise with standard deviation
    // sqrt(2) * noise / (2 eps); the worst of a few hundred components
    // stays well inside NOISE_SIGMAS of them.
    let resolution = NOISE_SIGMAS * std::f64::consts::FRAC_1_SQRT_2 * noise / eps;
    let floor = (resolution / tol).max(REL_FLOOR);
    compare(&f, inputs, eps, components, floor, noise)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn compare<F>(f: &F, inputs: &[Tensor<f64>], eps: f64, components: Components, floor: f64, noise: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let (base, analytic) = evaluate(f, inputs, true)?;
    let (again, _) = evaluate(f, inputs, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }

    let mut rng = match components {
        Components::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Components::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        floor,
        noise,
        resolved: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match (&components, rng.as_mut()) {
            (Components::Sample { per_tensor, .. }, Some(rng)) if *per_tensor < n => {
                (0..*per_tensor).map(|_| rng.random_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        for k in picks {
            let orig = input.data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let (plus, _) = evaluate(f, &work, false)?;
            work[ti].data_mut()[k] = orig - eps;
            let (minus, _) = evaluate(f, &work, false)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][k];
            let err = relative_error_floored(a, numeric, floor);
            report.checked += 1;
            if a.abs().max(numeric.abs()) >= floor {
                report.resolved += 1;
            }
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (ti, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`] over every component.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, Components::All)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_f64(vec![3], &[0.2, -1.0, 3.0]).unwrap();
        let err = grad_check(|_, v| Ok(v), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_at_zero_is_a_quarter() {
        let x = Tensor::from_f64(vec![1], &[0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true)).unwrap();
        let s = tape.sigmoid(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap()[0], 0.25);
        let err = grad_check(|t, v| t.sigmoid(v), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn noise_level_of_smooth_function_is_rounding_sized() {
        let x = Tensor::from_f64(vec![3], &[0.3, -0.7, 1.1]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let e = t.exp(v[0])?;
            t.sum(e)
        };
        let n = noise_level(f, std::slice::from_ref(&x), 1e-6, 3, 1).unwrap();
        assert!(n < 1e-14, "{n}");
    }

    #[test]
    fn noise_level_detects_injected_noise() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let calls = AtomicU64::new(1);
        let x = Tensor::from_f64(vec![1], &[0.5]).unwrap();
        // A deterministic pseudo-random perturbation of size 1e-9 per call.
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let k = calls.fetch_add(1, Ordering::SeqCst);
            let jitter = ((k.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2e-9;
            t.add_scalar(v[0], jitter)
        };
        let n = noise_level(f, std::slice::from_ref(&x), 1e-6, 3, 1).unwrap();
        assert!((1e-10..1e-8).contains(&n), "{n}");
    }

    #[test]
    fn noise_aware_check_still_catches_wrong_gradients() {
        // d/dx of x^2 reported as x: a relative error of one half.
        let x = Tensor::from_f64(vec![2], &[0.8, -1.3]).unwrap();
        // Value x^2 with a reverse-mode gradient of x.
        let g = |t: &mut Tape<f64>, v: &[Var]| {
            let d = t.detach(v[0])?;
            let lin = t.mul(d, v[0])?;
            let lin = t.scale(lin, 0.5)?;
            let dd = t.mul(d, d)?;
            let dd = t.scale(dd, 0.5)?;
            let s = t.add(lin, dd)?;
            t.sum(s)
        };
        let r = grad_check_noise_aware(g, std::slice::from_ref(&x), 1e-6, Components::All, 1e-4).unwrap();
        assert!(r.max_rel_error > 0.4, "{r:?}");
        assert_eq!(r.resolved, 2);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-2), Err(Error::Contract(_))));
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-9), Err(Error::Contract(_))));
    }

    #[test]
    fn nondeterminism_detected() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let calls = AtomicU32::new(0);
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        let res = grad_check(
            |t, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                t.add_scalar(v, k)
            },
            &x,
            1e-6,
        );
        assert!(matches!(res, Err(Error::Determinism { .. })));
    }
}
