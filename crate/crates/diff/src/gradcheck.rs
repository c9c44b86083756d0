//! Central finite-difference verification of tape gradients (run in f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Ctx, Mode};
use crate::params::{ParamKind, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub mode: Mode,
    /// Seed of the pass-local RNG; every evaluation reuses it so dropout
    /// masks stay fixed.
    pub seed: u64,
    /// Check at most this many evenly spaced elements per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            mode: Mode::Train,
            seed: 0,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and element index of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Elements whose `+eps` or `-eps` evaluation moved a relu or max-pool
    /// onto another piece of the graph; their central difference measures
    /// nothing and they are left out of `max_rel_error`.
    pub skipped: usize,
    /// See [`crate::Tape::kink_margin`].
    pub kink_margin: Option<f64>,
}

/// `|a - n| / (|a| + |n|)`, with the denominator held at 1e-6 or more: a
/// central difference of a unit-scale loss carries about 1e-12 of roundoff
/// at `eps = 1e-4`, so gradients below that size are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares analytic gradients with `(f(x + eps) - f(x - eps)) / 2 eps` for
/// every trainable parameter the loss touches and every input.
pub fn grad_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<(f64, Vec<usize>)> {
        let mut ctx = Ctx::new(s, opts.mode, opts.seed);
        // tracked inputs keep every op on the tape for the pattern
        let vars: Vec<Var> = xs.iter().map(|x| ctx.input(x.clone(), true)).collect();
        let loss = f(&mut ctx, &vars)?;
        Ok((ctx.tape.value(loss).item(), ctx.tape.activation_pattern()))
    };

    let (param_grads, input_grads, kink_margin) = {
        let mut ctx = Ctx::new(store, opts.mode, opts.seed);
        let vars: Vec<Var> = inputs.iter().map(|x| ctx.input(x.clone(), true)).collect();
        let loss = f(&mut ctx, &vars)?;
        ctx.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| ctx.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (ctx.param_grads(), ig, ctx.tape.kink_margin())
    };

    let (_, pattern) = eval(store, inputs)?;

    let picks = |len: usize| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        kink_margin,
    };
    let mut note = |plus: (f64, Vec<usize>), minus: (f64, Vec<usize>), analytic: f64, what: String| {
        if plus.1 != pattern || minus.1 != pattern {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * opts.eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{what} analytic {analytic:e} numeric {numeric:e}");
        }
    };

    let mut work = store.clone();
    for (id, g) in &param_grads {
        debug_assert_eq!(store.kind(*id), ParamKind::Trainable);
        for i in picks(g.len()) {
            let orig = work.get(*id).data()[i];
            work.get_mut(*id).data_mut()[i] = orig + opts.eps;
            let plus = eval(&work, inputs)?;
            work.get_mut(*id).data_mut()[i] = orig - opts.eps;
            let minus = eval(&work, inputs)?;
            work.get_mut(*id).data_mut()[i] = orig;
            note(plus, minus, g.data()[i], format!("{}[{i}]", store.entry(*id).name));
        }
    }
    let mut xs = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        for i in picks(g.len()) {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig;
            note(plus, minus, g.data()[i], format!("input{k}[{i}]"));
        }
    }
    Ok(report)
}

/// Scalar loss `sum(out * r)` with fixed random weights `r`, so every output
/// element carries a distinct gradient.
pub fn projection_loss(ctx: &mut Ctx<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = ctx.tape.shape(out).to_vec();
    let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let rv = ctx.input(r, false);
    let p = ctx.tape.mul(out, rv)?;
    ctx.tape.sum(p)
}
