//! Central finite-difference oracle for tape gradients.

use std::fmt::Write as _;

use rand::seq::index;

use super::{Graph, ParamTree, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Elements sampled per parameter; `None` checks every element.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-6,
            samples_per_param: Some(32),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub id: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<28} {:>5} elements  max rel err {:.3e}  {}",
                e.id,
                e.checked,
                e.max_rel_error,
                if e.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }

    /// CSV with header `parameter,elements,max_rel_error,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,elements,max_rel_error,pass\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{:e},{}",
                e.id,
                e.checked,
                e.max_rel_error,
                if e.passed { "pass" } else { "fail" }
            );
        }
        out
    }
}

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn evaluate<T: ParamTree + ?Sized>(
    params: &T,
    loss: &mut impl FnMut(&mut Graph, &T) -> Result<Var>,
) -> Result<(Graph, Var, f64)> {
    let mut g = Graph::new();
    let v = loss(&mut g, params)?;
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Graph(format!("loss must be scalar, got {}", t.shape())));
    }
    let value = t.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok((g, v, value))
}

/// Compares tape gradients of `loss` against central differences
/// `(f(p+h) − f(p−h)) / 2h`, parameter by parameter.
pub fn finite_diff_check<T: ParamTree + ?Sized>(
    params: &mut T,
    mut loss: impl FnMut(&mut Graph, &T) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.h.is_nan() || opts.h <= 0.0 {
        return Err(Error::invalid(format!("step h must be positive, got {}", opts.h)));
    }
    let (graph, out, _) = evaluate(&*params, &mut loss)?;
    let grads = graph.backward(out)?;
    drop(graph);

    let layout: Vec<(String, usize)> = params
        .parameters()
        .iter()
        .map(|p| (p.id().to_string(), p.value().len()))
        .collect();
    let mut rng = rng::seeded(opts.seed, rng::stream::GRADCHECK);
    let mut entries = Vec::with_capacity(layout.len());

    for (id, len) in layout {
        let mut picks: Vec<usize> = match opts.samples_per_param {
            Some(s) if s < len => index::sample(&mut rng, len, s).into_vec(),
            _ => (0..len).collect(),
        };
        picks.sort_unstable();

        let analytic = grads.get(&id).map(|t| t.data().to_vec());
        let mut max_rel: f64 = 0.0;
        for &j in &picks {
            let f_plus = perturbed(params, &id, j, opts.h, &mut loss)?;
            let f_minus = perturbed(params, &id, j, -opts.h, &mut loss)?;
            let fd = (f_plus - f_minus) / (2.0 * opts.h);
            let ad = analytic.as_ref().map_or(0.0, |g| g[j]);
            max_rel = max_rel.max(relative_error(ad, fd));
        }
        entries.push(GradCheckEntry {
            id,
            checked: picks.len(),
            max_rel_error: max_rel,
            passed: max_rel < opts.tol,
        });
    }
    Ok(GradCheckReport {
        entries,
        tol: opts.tol,
    })
}

fn perturbed<T: ParamTree + ?Sized>(
    params: &mut T,
    id: &str,
    j: usize,
    delta: f64,
    loss: &mut impl FnMut(&mut Graph, &T) -> Result<Var>,
) -> Result<f64> {
    let mut original = 0.0;
    params.with_param_mut(id, &mut |p| {
        let d = p.value_mut().data_mut();
        original = d[j];
        d[j] = original + delta;
    });
    let result = evaluate(&*params, loss).map(|(_, _, v)| v);
    params.with_param_mut(id, &mut |p| p.value_mut().data_mut()[j] = original);
    result
}
