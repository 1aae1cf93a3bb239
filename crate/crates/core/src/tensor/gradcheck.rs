//! Central finite-difference checks of tape gradients.
//!
//! The function's output `y` is contracted with a fixed cotangent `w` in
//! `f64` (`L = sum(w * y)`), and the analytic gradient is obtained by seeding
//! the reverse pass with `w`. Error per coordinate is
//! `|analytic - numeric| / max(1, |numeric|)`.
//!
//! A coordinate sits within `eps` of a kink or a discrete switch when its
//! forward and backward one-sided differences disagree by more than
//! [`KINK_TOLERANCE`] (relative, same scale), or when the analytic gradient
//! matches one of them much better than the central difference. For a smooth
//! function the central difference is the closest of the three. Such
//! coordinates are counted in [`GradCheckReport::kinks`] so callers can
//! redraw the instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Session, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const KINK_TOLERANCE: f64 = 1e-2;
/// Errors below this are never attributed to a kink.
const KINK_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum Cotangent {
    /// All ones: the check differentiates `sum(y)`.
    Ones,
    /// Uniform in `[-1, 1]`, drawn from the given seed.
    Random(u64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the input or parameter holding the worst coordinate.
    pub worst: String,
    pub worst_index: usize,
    pub coordinates: usize,
    /// Coordinates where the function is not smooth within `eps`.
    pub kinks: usize,
}

fn cotangent_for(y: &Tensor, c: Cotangent) -> Tensor {
    match c {
        Cotangent::Ones => y.map(|_| 1.0),
        Cotangent::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = y.dims();
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        }
    }
}

fn contract(y: &Tensor, w: &Tensor) -> Result<f64> {
    if y.shape() != w.shape() {
        return Err(Error::shape("gradient_check", "output shape changed under perturbation"));
    }
    let s: f64 = y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("gradient_check objective".into()));
    }
    Ok(s)
}

/// Checks `f` at `x` with the all-ones cotangent; returns the maximum relative error.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, Cotangent::Ones)?;
    Ok(report.max_rel_error)
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], eps: f32, cot: Cotangent) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    check_module(&mut store, inputs, eps, cot, false, |s, v| f(&mut s.tape, v))
}

/// Checks gradients of `f` with respect to its inputs and every trainable
/// parameter in `store`. Each evaluation runs in a fresh [`Session`] with
/// the given train flag and a fixed random stream.
pub fn check_module<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    eps: f32,
    cot: Cotangent,
    train: bool,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    const PASS_SEED: u64 = 0x5eed;
    // Analytic pass.
    let (w, analytic_inputs, analytic_params) = {
        let mut s = Session::new(store, train, PASS_SEED);
        s.set_fps_first(Some(0));
        let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), true)).collect();
        let y = f(&mut s, &vars)?;
        let w = cotangent_for(s.value(y), cot);
        contract(s.value(y), &w)?;
        let mut grads = s.tape.backward_with(y, w.clone())?;
        let gi: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        let pg = s.param_grads_from(&mut grads);
        let mut gp = Vec::new();
        for id in s.store().ids().filter(|&id| s.store().entry(id).trainable) {
            // Parameters the function never touched have zero gradient.
            let g = pg.get(id).cloned().unwrap_or_else(|| zeros_like(s.store().get(id)));
            gp.push((id, g));
        }
        (w, gi, gp)
    };
    let mut eval = |store: &mut ParamStore, inputs: &[Tensor]| -> Result<Tensor> {
        let mut s = Session::new(store, train, PASS_SEED);
        s.set_fps_first(Some(0));
        let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), true)).collect();
        let y = f(&mut s, &vars)?;
        Ok(s.value(y).clone())
    };

    let l0 = contract(&eval(store, inputs)?, &w)?;
    let mut report = GradCheckReport::default();
    // Central difference plus the two one-sided ones for the kink test.
    let differences = |lp: f64, lm: f64, xp: f32, x0: f32, xm: f32| -> [f64; 3] {
        let central = (lp - lm) / (xp as f64 - xm as f64);
        let forward = (lp - l0) / (xp as f64 - x0 as f64);
        let backward = (l0 - lm) / (x0 as f64 - xm as f64);
        [central, forward, backward]
    };
    let consider = |report: &mut GradCheckReport, name: &str, idx: usize, a: f32, [n, fw, bw]: [f64; 3]| -> Result<()> {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}[{idx}]")));
        }
        let (a, scale) = (a as f64, n.abs().max(1.0));
        let err = (a - n).abs() / scale;
        let asym = (fw - bw).abs() / scale;
        let one_sided = (a - fw).abs().min((a - bw).abs()) / scale;
        report.coordinates += 1;
        if asym > KINK_TOLERANCE || (err > KINK_FLOOR && one_sided < 0.25 * err) {
            report.kinks += 1;
        }
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = name.to_string();
            report.worst_index = idx;
        }
        Ok(())
    };

    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            let (xp, xm) = (x0 + eps, x0 - eps);
            perturbed[t].data_mut()[i] = xp;
            let lp = contract(&eval(store, &perturbed)?, &w)?;
            perturbed[t].data_mut()[i] = xm;
            let lm = contract(&eval(store, &perturbed)?, &w)?;
            perturbed[t].data_mut()[i] = x0;
            let d = differences(lp, lm, xp, x0, xm);
            consider(&mut report, &format!("input{t}"), i, analytic_inputs[t].data()[i], d)?;
        }
    }
    for (id, g) in &analytic_params {
        let name = store.entry(*id).name.clone();
        for i in 0..g.len() {
            let x0 = store.get(*id).data()[i];
            let (xp, xm) = (x0 + eps, x0 - eps);
            store.get_mut(*id).data_mut()[i] = xp;
            let lp = contract(&eval(store, inputs)?, &w);
            store.get_mut(*id).data_mut()[i] = xm;
            let lm = contract(&eval(store, inputs)?, &w);
            store.get_mut(*id).data_mut()[i] = x0;
            let d = differences(lp?, lm?, xp, x0, xm);
            consider(&mut report, &name, i, g.data()[i], d)?;
        }
    }
    Ok(report)
}

fn zeros_like(t: &Tensor) -> Tensor {
    let (r, c) = t.dims();
    Tensor::zeros(r, c)
}
