//! Central finite-difference verification of the hand-written adjoints.
//!
//! The scalar objective is a fixed random projection `Σ R ⊙ f(x)` of the
//! output. The analytic gradient comes from [`Graph::backward_with`] seeded
//! with `R`; the numeric one from `(φ(x + h eᵢ) − φ(x − h eᵢ)) / 2h`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub seed: u64,
    /// Checks at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            seed: 0,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst error over all checked tensors.
    pub max_rel_error: f64,
    /// Per input or parameter: `(label, relative error, coordinates checked)`.
    pub per_tensor: Vec<(String, f64, usize)>,
}

fn projection(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(GRAD_FLOOR, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn coords(len: usize, limit: Option<usize>, rng: &mut RngState) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    match limit {
        Some(k) if k < len => {
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => all,
    }
}

/// Checks `f` with respect to its tensor `inputs` (no parameters).
pub fn check_gradient<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    check_gradient_with_params(&ParamStore::new(), f, inputs, opts)
}

/// Checks `f` with respect to its tensor `inputs` and every parameter it binds.
pub fn check_gradient_with_params<F>(
    params: &ParamStore,
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, xs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut g = Graph::with_params(params);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut rng = RngState::new(opts.seed).split("gradcheck");
    let r = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let grads = g.backward_with(out, r.clone());

    let mut per_tensor = Vec::new();
    let h = opts.h;

    for (i, (&v, x)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get(&g, v);
        let picks = coords(x.len(), opts.max_coords_per_tensor, &mut rng);
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        let mut xs: Vec<Tensor> = inputs.to_vec();
        for &c in &picks {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + h;
            let plus = projection(&eval(params, &xs)?, &r);
            xs[i].data_mut()[c] = orig - h;
            let minus = projection(&eval(params, &xs)?, &r);
            xs[i].data_mut()[c] = orig;
            a.push(analytic.data()[c]);
            n.push((plus - minus) / (2.0 * h));
        }
        per_tensor.push((alloc::format!("input{i}"), rel_error(&a, &n), picks.len()));
    }

    let param_grads = grads.params(&g);
    let mut store = params.clone();
    for (name, analytic) in &param_grads {
        let len = analytic.len();
        let picks = coords(len, opts.max_coords_per_tensor, &mut rng);
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &c in &picks {
            let orig = store.get(name).expect("bound").data()[c];
            store.get_mut(name).expect("bound").data_mut()[c] = orig + h;
            let plus = projection(&eval(&store, inputs)?, &r);
            store.get_mut(name).expect("bound").data_mut()[c] = orig - h;
            let minus = projection(&eval(&store, inputs)?, &r);
            store.get_mut(name).expect("bound").data_mut()[c] = orig;
            a.push(analytic.data()[c]);
            n.push((plus - minus) / (2.0 * h));
        }
        per_tensor.push((name.clone(), rel_error(&a, &n), picks.len()));
    }

    let max_rel_error = per_tensor.iter().fold(0.0f64, |m, t| m.max(t.1));
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
    })
}
