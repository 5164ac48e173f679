//! L-BFGS with strong Wolfe line search, block-alternating updates and
//! the staged annealed fitting loop.
//!
//! The objective is a plain value-plus-gradient closure over a flat
//! parameter vector. Invalid trial points (for instance a joint moving
//! behind the camera during line search) are signalled by returning an
//! infinite value, which the line search rejects like any other failed
//! sufficient-decrease trial.

use serde::{Deserialize, Serialize};

use crate::energy::{TermWeights, total_energy};
use crate::error::{Error, Result};
use crate::field::{AdfField, asymmetric_field};
use crate::model::{BETA_OFFSET, BodyModel, BodyParams, PARAM_COUNT, ROT_OFFSET, VirtualJointConfig};

pub const GRAD_TOL: f64 = 1e-9;
pub const STEP_TOL: f64 = 1e-12;
pub const LINE_SEARCH_TRIALS: usize = 20;

/// One accepted optimizer step, with enough recorded state to assert the
/// strong Wolfe inequalities after the fact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub f_before: f64,
    pub f_after: f64,
    /// Directional derivative g . d at the step origin.
    pub dir_deriv_before: f64,
    /// Directional derivative g . d at the accepted point.
    pub dir_deriv_after: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    /// True when the step came from the strong Wolfe search; false for the
    /// Armijo backtracking fallback along the negative gradient.
    pub wolfe: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub line_search_failures: usize,
    pub evaluations: usize,
}

impl Trace {
    pub fn final_energy(&self) -> Option<f64> {
        self.steps.last().map(|s| s.f_after)
    }

    fn absorb(&mut self, other: Trace) {
        self.steps.extend(other.steps);
        self.line_search_failures += other.line_search_failures;
        self.evaluations += other.evaluations;
    }
}

struct Eval {
    f: f64,
    g: Vec<f64>,
}

fn call(
    objective: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    trace: &mut Trace,
) -> Eval {
    trace.evaluations += 1;
    let (f, g) = objective(x);
    Eval { f, g }
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Strong Wolfe line search (bracket and zoom). Returns the accepted step
/// and its evaluation, or None when the trial budget is exhausted.
fn wolfe_search(
    objective: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    alpha_init: f64,
    c1: f64,
    c2: f64,
    trace: &mut Trace,
) -> Option<(f64, Eval, f64)> {
    debug_assert!(dphi0 < 0.0);
    let mut budget = LINE_SEARCH_TRIALS;
    let mut eval_at = |alpha: f64, budget: &mut usize, trace: &mut Trace| -> Option<(Eval, f64)> {
        if *budget == 0 {
            return None;
        }
        *budget -= 1;
        let e = call(objective, &axpy(x, alpha, d), trace);
        let dphi = if e.f.is_finite() {
            dot(&e.g, d)
        } else {
            f64::INFINITY
        };
        Some((e, dphi))
    };

    let armijo = |alpha: f64, f: f64| f <= f0 + c1 * alpha * dphi0;
    let curvature = |dphi: f64| dphi.abs() <= c2 * dphi0.abs();

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = alpha_init.max(1e-16);
    let mut bracket: Option<(f64, f64, f64, f64)> = None; // (lo, f_lo, dphi_lo, hi)

    for i in 0..LINE_SEARCH_TRIALS {
        let (e, dphi) = eval_at(alpha, &mut budget, trace)?;
        if !armijo(alpha, e.f) || (i > 0 && e.f >= f_prev) {
            bracket = Some((alpha_prev, f_prev, if i == 0 { dphi0 } else { f64::NAN }, alpha));
            break;
        }
        if curvature(dphi) {
            return Some((alpha, e, dphi));
        }
        if dphi >= 0.0 {
            bracket = Some((alpha, e.f, dphi, alpha_prev));
            break;
        }
        alpha_prev = alpha;
        f_prev = e.f;
        alpha = (alpha * 2.0).min(1e8);
    }

    let (mut lo, mut f_lo, _dphi_lo, mut hi) = bracket?;
    // Zoom by bisection within the remaining budget.
    while budget > 0 {
        let mid = 0.5 * (lo + hi);
        let (e, dphi) = eval_at(mid, &mut budget, trace)?;
        if !armijo(mid, e.f) || e.f >= f_lo {
            hi = mid;
        } else {
            if curvature(dphi) {
                return Some((mid, e, dphi));
            }
            if dphi * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = mid;
            f_lo = e.f;
        }
        if (hi - lo).abs() < 1e-16 {
            return None;
        }
    }
    None
}

/// Armijo backtracking along the negative gradient, used when the strong
/// Wolfe search fails on the quasi-Newton direction.
fn backtrack(
    objective: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    c1: f64,
    trace: &mut Trace,
) -> Option<(f64, Eval, f64)> {
    let mut alpha = 1.0;
    for _ in 0..LINE_SEARCH_TRIALS {
        let e = call(objective, &axpy(x, alpha, d), trace);
        if e.f.is_finite() && e.f <= f0 + c1 * alpha * dphi0 {
            let dphi = dot(&e.g, d);
            return Some((alpha, e, dphi));
        }
        alpha *= 0.5;
    }
    None
}

/// Minimizes `objective` from `x0` with the two-loop L-BFGS recursion and
/// a strong Wolfe line search.
pub fn lbfgs_minimize(
    mut objective: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    max_iters: usize,
    memory: usize,
    c1: f64,
    c2: f64,
) -> Result<(Vec<f64>, Trace)> {
    if memory == 0 {
        return Err(Error::invalid("lbfgs memory must be at least 1"));
    }
    if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
        return Err(Error::invalid("wolfe constants must satisfy 0 < c1 < c2 < 1"));
    }
    let objective: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>) = &mut objective;
    let mut trace = Trace::default();
    let mut x = x0.to_vec();
    let mut cur = call(objective, &x, &mut trace);
    if !cur.f.is_finite() || cur.g.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("objective not finite at the initial point"));
    }
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, 1/s.y)

    for iter in 0..max_iters {
        let gnorm = norm(&cur.g);
        if gnorm < GRAD_TOL {
            break;
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = cur.g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        let mut dphi0 = dot(&cur.g, &d);
        if dphi0 >= 0.0 {
            d = cur.g.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
            pairs.clear();
        }

        let alpha_init = if iter == 0 && pairs.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let mut wolfe = true;
        let mut found = wolfe_search(
            objective, &x, &d, cur.f, dphi0, alpha_init, c1, c2, &mut trace,
        );
        if found.is_none() {
            trace.line_search_failures += 1;
            wolfe = false;
            pairs.clear();
            let steepest: Vec<f64> = cur.g.iter().map(|v| -v).collect();
            let dphi = -gnorm * gnorm;
            found = backtrack(objective, &x, &steepest, cur.f, dphi, c1, &mut trace)
                .map(|(a, e, dp)| (a, e, dp));
            if let Some((alpha, e, dphi_after)) = found {
                let x_new = axpy(&x, alpha, &steepest);
                let step_norm = alpha * gnorm;
                trace.steps.push(StepRecord {
                    f_before: cur.f,
                    f_after: e.f,
                    dir_deriv_before: dphi,
                    dir_deriv_after: dphi_after,
                    alpha,
                    grad_norm: norm(&e.g),
                    wolfe,
                });
                x = x_new;
                cur = e;
                if step_norm < STEP_TOL {
                    break;
                }
                continue;
            }
            break;
        }
        let (alpha, e, dphi_after) = found.unwrap();
        let x_new = axpy(&x, alpha, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = e.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if pairs.len() == memory {
                pairs.remove(0);
            }
            pairs.push((s.clone(), y, 1.0 / sy));
        }
        let step_norm = norm(&s);
        trace.steps.push(StepRecord {
            f_before: cur.f,
            f_after: e.f,
            dir_deriv_before: dphi0,
            dir_deriv_after: dphi_after,
            alpha,
            grad_norm: norm(&e.g),
            wolfe,
        });
        x = x_new;
        cur = e;
        if step_norm < STEP_TOL {
            break;
        }
    }
    Ok((x, trace))
}

/// Alternating block minimization: even outer steps optimize the indices in
/// `block_even`, odd steps those in `block_odd`, each with a fresh L-BFGS
/// memory for `inner_block` iterations. Entries outside the active block
/// are bitwise untouched.
pub fn alternate_blocks(
    mut objective: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    block_even: &[usize],
    block_odd: &[usize],
    outer_steps: usize,
    inner_block: usize,
    memory: usize,
    c1: f64,
    c2: f64,
) -> Result<(Vec<f64>, Trace)> {
    if inner_block == 0 {
        return Err(Error::invalid("inner_block must be at least 1"));
    }
    for &i in block_even.iter().chain(block_odd) {
        if i >= x0.len() {
            return Err(Error::invalid("block index out of range"));
        }
    }
    let mut x = x0.to_vec();
    let mut trace = Trace::default();
    for outer in 0..outer_steps {
        let block = if outer % 2 == 0 { block_even } else { block_odd };
        if block.is_empty() {
            continue;
        }
        let frozen = x.clone();
        let reduced0: Vec<f64> = block.iter().map(|&i| frozen[i]).collect();
        let mut full = frozen.clone();
        let masked = |xr: &[f64]| -> (f64, Vec<f64>) {
            let mut xfull = full.clone();
            for (&i, &v) in block.iter().zip(xr) {
                xfull[i] = v;
            }
            let (f, g) = objective(&xfull);
            (f, block.iter().map(|&i| g[i]).collect())
        };
        let (xr, t) = lbfgs_minimize(masked, &reduced0, inner_block, memory, c1, c2)?;
        for (&i, &v) in block.iter().zip(&xr) {
            full[i] = v;
        }
        x = full;
        trace.absorb(t);
    }
    Ok((x, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub weights: TermWeights,
    pub iterations: usize,
    pub enable_virtual_joints: bool,
    pub enable_silhouette: bool,
    pub disentangled: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            weights: TermWeights::default(),
            iterations: 30,
            enable_virtual_joints: false,
            enable_silhouette: false,
            disentangled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stages: Vec<StageConfig>,
    pub lbfgs_memory: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub inner_block: usize,
    /// Soft-rasterizer temperature in pixels.
    pub tau: f64,
    /// Asymmetric distance field weights (outside, inside).
    pub lambda_o: f64,
    pub lambda_i: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stages: vec![StageConfig::default()],
            lbfgs_memory: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            inner_block: 5,
            tau: 1.0,
            lambda_o: 1.0,
            lambda_i: 0.1,
        }
    }
}

impl FitConfig {
    /// The default annealed three-stage schedule: regular keypoints first,
    /// then virtual joints with relaxed priors, finally silhouette terms
    /// with disentangled shape/pose alternation.
    pub fn default_schedule() -> Self {
        let base = TermWeights::default();
        let s1 = StageConfig::default();
        let s2 = StageConfig {
            weights: TermWeights {
                w_pose: 0.3 * base.w_pose,
                w_shape: 0.3 * base.w_shape,
                ..base
            },
            enable_virtual_joints: true,
            ..StageConfig::default()
        };
        let s3 = StageConfig {
            weights: TermWeights {
                lambda_m: 1e-3,
                lambda_d: 1e-2,
                w_pose: 0.1 * base.w_pose,
                w_shape: 0.1 * base.w_shape,
                ..base
            },
            enable_virtual_joints: true,
            enable_silhouette: true,
            disentangled: true,
            ..StageConfig::default()
        };
        FitConfig {
            stages: vec![s1, s2, s3],
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("fit config needs at least one stage"));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::invalid("wolfe constants must satisfy 0 < c1 < c2 < 1"));
        }
        if self.lbfgs_memory == 0 || self.inner_block == 0 {
            return Err(Error::invalid("lbfgs_memory and inner_block must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.lambda_o < 0.0 || self.lambda_i < 0.0 {
            return Err(Error::invalid("lambda_o and lambda_i must be nonnegative"));
        }
        for s in &self.stages {
            if s.iterations == 0 {
                return Err(Error::invalid("stage iterations must be at least 1"));
            }
            s.weights.validate()?;
        }
        Ok(())
    }

    /// Serializes the config in the flat `key = value` text format with
    /// `[stage]` section headers.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("lbfgs_memory = {}\n", self.lbfgs_memory));
        out.push_str(&format!("wolfe_c1 = {}\n", self.wolfe_c1));
        out.push_str(&format!("wolfe_c2 = {}\n", self.wolfe_c2));
        out.push_str(&format!("inner_block = {}\n", self.inner_block));
        out.push_str(&format!("tau = {}\n", self.tau));
        out.push_str(&format!("lambda_o = {}\n", self.lambda_o));
        out.push_str(&format!("lambda_i = {}\n", self.lambda_i));
        for s in &self.stages {
            out.push_str("\n[stage]\n");
            out.push_str(&format!("iterations = {}\n", s.iterations));
            out.push_str(&format!("lambda_k = {}\n", s.weights.lambda_k));
            out.push_str(&format!("lambda_m = {}\n", s.weights.lambda_m));
            out.push_str(&format!("lambda_d = {}\n", s.weights.lambda_d));
            out.push_str(&format!("w_pose = {}\n", s.weights.w_pose));
            out.push_str(&format!("w_shape = {}\n", s.weights.w_shape));
            out.push_str(&format!("gm_sigma = {}\n", s.weights.gm_sigma));
            out.push_str(&format!("enable_virtual_joints = {}\n", s.enable_virtual_joints));
            out.push_str(&format!("enable_silhouette = {}\n", s.enable_silhouette));
            out.push_str(&format!("disentangled = {}\n", s.disentangled));
        }
        out
    }

    /// Parses the text format produced by [`FitConfig::to_text`]. Unknown
    /// keys are errors; stages inherit defaults for keys they omit.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = FitConfig {
            stages: Vec::new(),
            ..FitConfig::default()
        };
        let mut stage: Option<StageConfig> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[stage]" {
                if let Some(s) = stage.take() {
                    config.stages.push(s);
                }
                stage = Some(StageConfig::default());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} value '{value}'", lineno + 1));
            let as_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
            let as_usize = || value.parse::<usize>().map_err(|_| bad("count"));
            let as_bool = || value.parse::<bool>().map_err(|_| bad("flag"));
            match (&mut stage, key) {
                (None, "lbfgs_memory") => config.lbfgs_memory = as_usize()?,
                (None, "wolfe_c1") => config.wolfe_c1 = as_f64()?,
                (None, "wolfe_c2") => config.wolfe_c2 = as_f64()?,
                (None, "inner_block") => config.inner_block = as_usize()?,
                (None, "tau") => config.tau = as_f64()?,
                (None, "lambda_o") => config.lambda_o = as_f64()?,
                (None, "lambda_i") => config.lambda_i = as_f64()?,
                (Some(s), "iterations") => s.iterations = as_usize()?,
                (Some(s), "lambda_k") => s.weights.lambda_k = as_f64()?,
                (Some(s), "lambda_m") => s.weights.lambda_m = as_f64()?,
                (Some(s), "lambda_d") => s.weights.lambda_d = as_f64()?,
                (Some(s), "w_pose") => s.weights.w_pose = as_f64()?,
                (Some(s), "w_shape") => s.weights.w_shape = as_f64()?,
                (Some(s), "gm_sigma") => s.weights.gm_sigma = as_f64()?,
                (Some(s), "enable_virtual_joints") => s.enable_virtual_joints = as_bool()?,
                (Some(s), "enable_silhouette") => s.enable_silhouette = as_bool()?,
                (Some(s), "disentangled") => s.disentangled = as_bool()?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{key}'",
                        lineno + 1
                    )));
                }
            }
        }
        if let Some(s) = stage.take() {
            config.stages.push(s);
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage_traces: Vec<Trace>,
    pub final_params: Option<BodyParams>,
    pub final_energy: f64,
    pub iteration_count: usize,
    pub line_search_failures: usize,
    /// Set when the observation carried no usable data (all confidences
    /// zero and no silhouette) and fitting returned the initial state.
    pub degenerate_input: bool,
    #[serde(skip)]
    pub wall_time: std::time::Duration,
}

/// Runs the staged fitting loop. The distance field is built once from the
/// observed silhouette the first time a silhouette-enabled stage needs it.
pub fn fit_staged(
    model: &BodyModel,
    vjconfig: Option<&VirtualJointConfig>,
    obs: &crate::energy::Observation,
    config: &FitConfig,
    init: &BodyParams,
) -> Result<(BodyParams, FitReport)> {
    let start = std::time::Instant::now();
    config.validate()?;
    obs.validate()?;
    let mut report = FitReport::default();

    let no_keypoints = obs.keypoints.iter().all(|k| k.confidence == 0.0);
    if no_keypoints && obs.silhouette.is_none() {
        report.degenerate_input = true;
        report.final_params = Some(init.clone());
        report.wall_time = start.elapsed();
        return Ok((init.clone(), report));
    }

    let mut field: Option<AdfField> = None;
    let mut x = init.to_flat();
    let mut last_energy = f64::INFINITY;

    let beta_block: Vec<usize> = (BETA_OFFSET..ROT_OFFSET).collect();
    let pose_block: Vec<usize> = (0..BETA_OFFSET).chain(ROT_OFFSET..PARAM_COUNT).collect();

    for stage in &config.stages {
        let use_sil = stage.enable_silhouette && obs.silhouette.is_some();
        let mut weights = stage.weights;
        if !use_sil {
            weights.lambda_m = 0.0;
            weights.lambda_d = 0.0;
        }
        if use_sil && weights.lambda_d > 0.0 && field.is_none() {
            let sil = obs.silhouette.as_ref().unwrap();
            field = Some(asymmetric_field(sil, config.lambda_o, config.lambda_i)?);
        }
        let vj = if stage.enable_virtual_joints {
            vjconfig
        } else {
            None
        };
        let field_ref = field.as_ref();
        let tau = config.tau;
        let objective = |xf: &[f64]| -> (f64, Vec<f64>) {
            let params = match BodyParams::from_flat(xf) {
                Ok(p) => p,
                Err(_) => return (f64::INFINITY, vec![0.0; xf.len()]),
            };
            match total_energy(&params, model, vj, obs, field_ref, &weights, tau) {
                Ok((f, g)) => (f, g),
                Err(_) => (f64::INFINITY, vec![0.0; xf.len()]),
            }
        };
        let (x_new, trace) = if stage.disentangled {
            let outer = stage.iterations.div_ceil(config.inner_block);
            alternate_blocks(
                objective,
                &x,
                &beta_block,
                &pose_block,
                outer.max(2),
                config.inner_block,
                config.lbfgs_memory,
                config.wolfe_c1,
                config.wolfe_c2,
            )?
        } else {
            lbfgs_minimize(
                objective,
                &x,
                stage.iterations,
                config.lbfgs_memory,
                config.wolfe_c1,
                config.wolfe_c2,
            )?
        };
        x = x_new;
        report.iteration_count += trace.steps.len();
        report.line_search_failures += trace.line_search_failures;
        if let Some(f) = trace.final_energy() {
            last_energy = f;
        }
        report.stage_traces.push(trace);
    }

    let params = BodyParams::from_flat(&x)?;
    if last_energy.is_infinite() {
        // No stage took a step; report the initial energy of the last stage.
        let stage = config.stages.last().unwrap();
        let mut weights = stage.weights;
        if !(stage.enable_silhouette && obs.silhouette.is_some()) {
            weights.lambda_m = 0.0;
            weights.lambda_d = 0.0;
        }
        let vj = if stage.enable_virtual_joints { vjconfig } else { None };
        last_energy = total_energy(&params, model, vj, obs, field.as_ref(), &weights, config.tau)?.0;
    }
    report.final_energy = last_energy;
    report.final_params = Some(params.clone());
    report.wall_time = start.elapsed();
    Ok((params, report))
}
