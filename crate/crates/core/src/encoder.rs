//! Bidirectional CDE encoder with mixture-of-experts vector fields.
//!
//! Each input channel is summarized by a lightweight ConvPool router that
//! assigns one softmax gate vector per function; the gates mix a shared bank
//! of expert fields (separate banks per direction) into the vector field of
//! a forward and a backward CDE solve. The backward equation is solved as a
//! forward solve over the time-reversed path and re-indexed, which fixes the
//! sign convention and reuses one solver.
//!
//! The router convolves the path resampled at a fixed number of uniform
//! points rather than the raw observation sequence, so the gates depend only
//! on the underlying function and sampling invariance survives redundant
//! observation points.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, mlp_eval, softmax_stable, MlpSpec, ParamStore, Tape, Var};
use crate::error::{FameError, Result};
use crate::funcpath::{eval_path, increments, ControlPath, QuadratureGrid};

/// Discretization scheme for the Stieltjes solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    Euler,
    Midpoint,
}

impl std::str::FromStr for Solver {
    type Err = FameError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            other => Err(FameError::Config(format!("unknown solver '{other}'"))),
        }
    }
}

/// A vector-valued trajectory sampled on a quadrature grid.
#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    pub grid: QuadratureGrid,
    pub states: Vec<Vec<f64>>,
}

impl LatentTrajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

/// Function-wise router: ConvPool summary plus a gating MLP. The summary
/// dimension equals the convolution channel count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Router {
    /// Convolution kernel width.
    pub kernel: usize,
    /// Convolution channels == summary dimension h0.
    pub summary_dim: usize,
    /// Fixed resampling resolution for the summary input.
    pub resample: usize,
    /// Gating MLP h0 -> hidden -> K.
    pub gate: MlpSpec,
}

impl Router {
    pub fn new(kernel: usize, summary_dim: usize, resample: usize, gate: MlpSpec) -> Result<Self> {
        if kernel == 0 || summary_dim == 0 || resample < 2 {
            return Err(FameError::Config("router dims must be positive (resample >= 2)".into()));
        }
        if gate.input != summary_dim {
            return Err(FameError::Dimension {
                context: "router gate input",
                expected: summary_dim,
                got: gate.input,
            });
        }
        Ok(Router { kernel, summary_dim, resample, gate })
    }

    pub fn experts(&self) -> usize {
        self.gate.output
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            "router.conv.w",
            vec![self.summary_dim, self.kernel],
            glorot_uniform(self.summary_dim, self.kernel, rng),
        )?;
        store.insert("router.conv.b", vec![self.summary_dim], vec![0.0; self.summary_dim])?;
        self.gate.init_into(store, "router.gate", rng)
    }

    pub fn bind(&self, store: &ParamStore, vars: &[Var]) -> RouterVars {
        RouterVars {
            conv_w: vars[store.idx("router.conv.w").unwrap()],
            conv_b: vars[store.idx("router.conv.b").unwrap()],
            gate: self.gate.bind(store, vars, "router.gate"),
        }
    }
}

/// Tape handles for router parameters.
#[derive(Clone, Debug)]
pub struct RouterVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub gate: Vec<(Var, Var)>,
}

/// K expert vector fields per direction. Each expert maps the hidden state
/// (dim h) to an `h x 2` matrix contracted against `(dt, dx)` increments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertBank {
    pub k: usize,
    /// Field MLP: h -> hidden -> 2h (reshaped h x 2).
    pub field: MlpSpec,
}

impl ExpertBank {
    pub fn new(k: usize, field: MlpSpec) -> Result<Self> {
        if k == 0 {
            return Err(FameError::Config("expert count K must be >= 1".into()));
        }
        if field.output != 2 * field.input {
            return Err(FameError::Dimension {
                context: "expert field output (h x 2)",
                expected: 2 * field.input,
                got: field.output,
            });
        }
        Ok(ExpertBank { k, field })
    }

    pub fn hidden_dim(&self) -> usize {
        self.field.input
    }

    pub fn init_into(&self, store: &mut ParamStore, dir: &str, rng: &mut impl Rng) -> Result<()> {
        for k in 0..self.k {
            self.field.init_into(store, &format!("enc.expert.{dir}.k{k}"), rng)?;
        }
        Ok(())
    }

    pub fn bind(&self, store: &ParamStore, vars: &[Var], dir: &str) -> Vec<Vec<(Var, Var)>> {
        (0..self.k)
            .map(|k| self.field.bind(store, vars, &format!("enc.expert.{dir}.k{k}")))
            .collect()
    }
}

/// Resample the data channel of a path at `r` uniform points on `[0, 1]`.
pub fn resample_uniform(path: &ControlPath, r: usize) -> Vec<f64> {
    (0..r)
        .map(|k| {
            let t = k as f64 / (r - 1) as f64;
            eval_path(path, t).expect("t in [0,1]")[1]
        })
        .collect()
}

/// Reflect-pad a sequence to at least `min_len` (mirror without repeating
/// the edge; single-point sequences repeat their value).
pub fn reflect_pad(seq: &[f64], min_len: usize) -> Vec<f64> {
    if seq.len() >= min_len {
        return seq.to_vec();
    }
    let need = min_len - seq.len();
    let left = need / 2;
    let n = seq.len();
    let reflect = |i: isize| -> f64 {
        if n == 1 {
            return seq[0];
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        seq[j as usize]
    };
    (0..min_len as isize).map(|i| reflect(i - left as isize)).collect()
}

/// Mean over valid convolution windows of each shifted input: entry `q` is
/// `mean_p seq[p + q]`, so conv + global average pooling reduces to one
/// affine map of this vector.
pub fn window_means(seq: &[f64], kernel: usize) -> Vec<f64> {
    let padded = reflect_pad(seq, kernel);
    let positions = padded.len() - kernel + 1;
    let mut out = vec![0.0; kernel];
    for (q, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for p in 0..positions {
            acc += padded[p + q];
        }
        *o = acc / positions as f64;
    }
    out
}

/// ConvPool summary of one observed function: 1-D convolution over the
/// resampled value sequence followed by global average pooling.
pub fn conv_pool_summary(
    path: &ControlPath,
    router: &Router,
    conv_w: &[f64],
    conv_b: &[f64],
) -> Result<Vec<f64>> {
    if conv_w.len() != router.summary_dim * router.kernel || conv_b.len() != router.summary_dim {
        return Err(FameError::Dimension {
            context: "conv_pool_summary weights",
            expected: router.summary_dim * router.kernel,
            got: conv_w.len(),
        });
    }
    let xbar = window_means(&resample_uniform(path, router.resample), router.kernel);
    let mut out = conv_b.to_vec();
    for (ch, o) in out.iter_mut().enumerate() {
        for q in 0..router.kernel {
            *o += conv_w[ch * router.kernel + q] * xbar[q];
        }
    }
    Ok(out)
}

/// Tape version of the ConvPool summary (gradients flow to the conv
/// parameters; the resampled sequence is data).
pub fn conv_pool_summary_t(
    tape: &mut Tape,
    path: &ControlPath,
    router: &Router,
    vars: &RouterVars,
) -> Var {
    let xbar = window_means(&resample_uniform(path, router.resample), router.kernel);
    let x = tape.leaf(xbar);
    tape.affine(vars.conv_w, Some(vars.conv_b), x, router.summary_dim, router.kernel)
}

/// Softmax gates from a summary vector (temperature 1); the same gates are
/// reused for the forward and backward directions.
pub fn route_gates(
    summary: &[f64],
    router: &Router,
    gate_layers: &[(&[f64], &[f64])],
) -> Result<Vec<f64>> {
    let logits = mlp_eval(&router.gate, gate_layers, summary, false, None)?;
    Ok(softmax_stable(&logits, 1.0, 1.0).weights)
}

/// Tape version of [`route_gates`].
pub fn route_gates_t(
    tape: &mut Tape,
    summary: Var,
    router: &Router,
    vars: &RouterVars,
    masks: Option<&[Rc<Vec<f64>>]>,
) -> Var {
    let logits = tape.mlp(&vars.gate, &router.gate.dims(), summary, masks);
    tape.softmax(logits, 1.0)
}

/// Convex mixture of expert field outputs at state `z`:
/// `sum_k gates[k] * f_k(z)`, an `h x 2` matrix flattened row-major.
pub fn mixed_field(
    gates: &[f64],
    bank: &ExpertBank,
    expert_layers: &[Vec<(&[f64], &[f64])>],
    z: &[f64],
) -> Result<Vec<f64>> {
    if gates.len() != bank.k {
        return Err(FameError::Dimension {
            context: "mixed_field gates",
            expected: bank.k,
            got: gates.len(),
        });
    }
    let h = bank.hidden_dim();
    let mut out = vec![0.0; 2 * h];
    for (k, layers) in expert_layers.iter().enumerate() {
        let f = mlp_eval(&bank.field, layers, z, false, None)?;
        for (o, fi) in out.iter_mut().zip(&f) {
            *o += gates[k] * fi;
        }
    }
    Ok(out)
}

/// Evaluate the mixed MoE field on the tape. With K = 1 the mixture reduces
/// to `1.0 * f_0(z)`, which is bitwise the single expert's output.
pub fn mixed_field_t(
    tape: &mut Tape,
    gates: Var,
    expert_layers: &[Vec<(Var, Var)>],
    field_dims: &[usize],
    masks: Option<&[Vec<Rc<Vec<f64>>>]>,
    z: Var,
) -> Var {
    let outs: Vec<Var> = expert_layers
        .iter()
        .enumerate()
        .map(|(k, layers)| tape.mlp(layers, field_dims, z, masks.map(|m| m[k].as_slice())))
        .collect();
    let len = *field_dims.last().unwrap();
    tape.mix(gates, &outs, len)
}

/// Solve `z' = z + f(z) dX` along a control path on its quadrature grid,
/// recording every state on the tape. `field` must return an `h x 2` matrix
/// node. Blow-ups abort with the offending step index.
pub fn solve_cde<F>(
    tape: &mut Tape,
    mut field: F,
    init: Var,
    path: &ControlPath,
    grid: &QuadratureGrid,
    solver: Solver,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let incs = increments(path, grid)?;
    let h = tape.val(init).len();
    solve_over_increments(tape, &mut field, init, &incs, h, solver)
}

/// Inner loop shared by the path-based and increment-based entry points.
pub fn solve_over_increments<F>(
    tape: &mut Tape,
    field: &mut F,
    init: Var,
    incs: &[[f64; 2]],
    h: usize,
    solver: Solver,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let mut states = Vec::with_capacity(incs.len() + 1);
    let mut z = init;
    states.push(z);
    for (step, d) in incs.iter().enumerate() {
        let f = field(tape, z);
        let next = match solver {
            Solver::Euler => tape.cde_step(z, f, h, None, 1.0, d),
            Solver::Midpoint => {
                let half = [0.5 * d[0], 0.5 * d[1]];
                let zmid = tape.cde_step(z, f, h, None, 1.0, &half);
                let fmid = field(tape, zmid);
                tape.cde_step(z, fmid, h, None, 1.0, d)
            }
        };
        if tape.val(next).iter().any(|v| !v.is_finite()) {
            return Err(FameError::SolverDivergence { step });
        }
        z = next;
        states.push(z);
    }
    Ok(states)
}

/// Outputs of one bidirectional channel encoding on the tape. `bwd[j]` is
/// the state at reversed time `1 - u_{n-1-j}`; `Tape::stack_bidir` re-indexes
/// it back to original time.
pub struct ChannelEncoding {
    pub fwd: Vec<Var>,
    pub bwd: Option<Vec<Var>>,
}

/// Everything the encoder needs from the bound parameter tape plus specs.
pub struct EncoderCtx<'a> {
    pub bank: &'a ExpertBank,
    pub xi: &'a MlpSpec,
    pub xi_fwd: &'a [(Var, Var)],
    pub xi_bwd: Option<&'a [(Var, Var)]>,
    pub experts_fwd: &'a [Vec<(Var, Var)>],
    pub experts_bwd: Option<&'a [Vec<(Var, Var)>]>,
    pub solver: Solver,
}

/// Masks drawn once per pass and held fixed through a solve, so the field is
/// a consistent function of the state within one trajectory.
pub struct EncoderMasks {
    pub xi_fwd: Option<Vec<Rc<Vec<f64>>>>,
    pub xi_bwd: Option<Vec<Rc<Vec<f64>>>>,
    pub experts_fwd: Option<Vec<Vec<Rc<Vec<f64>>>>>,
    pub experts_bwd: Option<Vec<Vec<Rc<Vec<f64>>>>>,
}

impl EncoderMasks {
    pub fn none() -> Self {
        EncoderMasks { xi_fwd: None, xi_bwd: None, experts_fwd: None, experts_bwd: None }
    }
}

/// Encode one channel: forward solve from `xi_fwd(x(0), 0)`, backward solve
/// over the reversed path from `xi_bwd(x(1), 1)`.
pub fn encode_channel_t(
    tape: &mut Tape,
    ctx: &EncoderCtx,
    masks: &EncoderMasks,
    gates: Var,
    path: &ControlPath,
    grid: &QuadratureGrid,
) -> Result<ChannelEncoding> {
    let field_dims = ctx.bank.field.dims();
    let xi_dims = ctx.xi.dims();

    let x0 = eval_path(path, 0.0)?;
    let x0_leaf = tape.leaf(vec![x0[1], 0.0]);
    let init_fwd = tape.mlp(ctx.xi_fwd, &xi_dims, x0_leaf, masks.xi_fwd.as_deref());
    let incs_fwd = increments(path, grid)?;
    let fwd = {
        let experts = ctx.experts_fwd;
        let m = masks.experts_fwd.as_deref();
        let mut field = |t: &mut Tape, z: Var| mixed_field_t(t, gates, experts, &field_dims, m, z);
        solve_over_increments(
            tape,
            &mut field,
            init_fwd,
            &incs_fwd,
            ctx.bank.hidden_dim(),
            ctx.solver,
        )?
    };

    let bwd = match (ctx.xi_bwd, ctx.experts_bwd) {
        (Some(xi_bwd), Some(experts_bwd)) => {
            let rpath = path.reversed();
            let rgrid = grid.reversed();
            let x1 = eval_path(path, 1.0)?;
            let x1_leaf = tape.leaf(vec![x1[1], 1.0]);
            let init_bwd = tape.mlp(xi_bwd, &xi_dims, x1_leaf, masks.xi_bwd.as_deref());
            let incs_bwd = increments(&rpath, &rgrid)?;
            let m = masks.experts_bwd.as_deref();
            let mut field =
                |t: &mut Tape, z: Var| mixed_field_t(t, gates, experts_bwd, &field_dims, m, z);
            Some(solve_over_increments(
                tape,
                &mut field,
                init_bwd,
                &incs_bwd,
                ctx.bank.hidden_dim(),
                ctx.solver,
            )?)
        }
        _ => None,
    };

    Ok(ChannelEncoding { fwd, bwd })
}
