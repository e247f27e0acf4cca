//! CDE decoder: continuous outputs driven by the stacked context path.
//!
//! The decoder solves `y' = y + f(y) d[H || t]` along the context grid with
//! the same Stieltjes scheme as the encoder. The written field `f: R^m -> R^m`
//! against a (2hd)-dimensional control is dimensionally inconsistent, so the
//! field is matrix-valued, `R^m -> R^{m x (2hd + 1)}`, the only reading under
//! which the Stieltjes integral is defined. The normalized output domain is
//! traversed in lockstep with the context grid, and queries read the solve
//! trajectory by linear interpolation, so the readout is independent of any
//! training output grid.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, MlpSpec, ParamStore, Tape, Var};
use crate::encoder::{LatentTrajectory, Solver};
use crate::error::{FameError, Result};
use crate::funcpath::QuadratureGrid;

/// Decoder layout: output count, context width, and the vector-field MLP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// Output channel count m.
    pub m: usize,
    /// Stacked context width 2hd (time channel excluded).
    pub context_dim: usize,
    /// Field MLP per solve: state_dim -> hidden -> state_dim * (context_dim + 1).
    pub field: MlpSpec,
    /// One independent scalar field per output instead of a shared m-dim one.
    pub per_output: bool,
}

impl DecoderSpec {
    pub fn new(m: usize, context_dim: usize, hidden: Vec<usize>, dropout: f64, per_output: bool) -> Result<Self> {
        let state = if per_output { 1 } else { m };
        let field = MlpSpec::new(state, hidden, state * (context_dim + 1), dropout)?;
        Ok(DecoderSpec { m, context_dim, field, per_output })
    }

    fn n_solves(&self) -> usize {
        if self.per_output { self.m } else { 1 }
    }

    fn state_dim(&self) -> usize {
        if self.per_output { 1 } else { self.m }
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            "dec.y0.w",
            vec![self.m, self.context_dim],
            glorot_uniform(self.m, self.context_dim, rng),
        )?;
        store.insert("dec.y0.b", vec![self.m], vec![0.0; self.m])?;
        for s in 0..self.n_solves() {
            self.field.init_into(store, &format!("dec.field.s{s}"), rng)?;
        }
        Ok(())
    }

    pub fn bind(&self, store: &ParamStore, vars: &[Var]) -> DecoderVars {
        DecoderVars {
            y0_w: vars[store.idx("dec.y0.w").unwrap()],
            y0_b: vars[store.idx("dec.y0.b").unwrap()],
            fields: (0..self.n_solves())
                .map(|s| self.field.bind(store, vars, &format!("dec.field.s{s}")))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub y0_w: Var,
    pub y0_b: Var,
    /// One field per solve (one shared, or m per-output).
    pub fields: Vec<Vec<(Var, Var)>>,
}

/// Decoder outputs on the tape.
pub struct DecodeOut {
    /// Solve trajectory, one m-dim node per grid point.
    pub trajectory: Vec<Var>,
    /// Per output channel, per query: an m-dim prediction node (read the
    /// channel's component).
    pub preds: Vec<Vec<Var>>,
}

fn validate_queries(queries: &[f64]) -> Result<()> {
    for (i, q) in queries.iter().enumerate() {
        if !(0.0..=1.0).contains(q) {
            return Err(FameError::Domain(format!("query {q} outside [0, 1]")));
        }
        if i > 0 && queries[i] < queries[i - 1] {
            return Err(FameError::TimeOrdering(i));
        }
    }
    Ok(())
}

/// Locate `s` on the grid: returns `(segment index, interpolation weight)`.
fn locate(points: &[f64], s: f64) -> (usize, f64) {
    match points.binary_search_by(|x| x.partial_cmp(&s).unwrap()) {
        Ok(i) => {
            if i == points.len() - 1 {
                (i - 1, 1.0)
            } else {
                (i, 0.0)
            }
        }
        Err(i) => {
            let k = i - 1;
            (k, (s - points[k]) / (points[k + 1] - points[k]))
        }
    }
}

/// Solve the decoder CDE along the stacked context and read out predictions
/// at the queried output instants.
#[allow(clippy::too_many_arguments)]
pub fn decode_t(
    tape: &mut Tape,
    spec: &DecoderSpec,
    vars: &DecoderVars,
    hstack: Var,
    grid: &QuadratureGrid,
    queries: &[Vec<f64>],
    solver: Solver,
    masks: Option<&[Vec<Rc<Vec<f64>>>]>,
) -> Result<DecodeOut> {
    if queries.len() != spec.m {
        return Err(FameError::Dimension {
            context: "decode query channels",
            expected: spec.m,
            got: queries.len(),
        });
    }
    for q in queries {
        validate_queries(q)?;
    }
    let n = grid.len();
    let ctx = spec.context_dim;
    let pts = grid.points();
    let h0 = tape.slice_row(hstack, 0, n, ctx);
    let y0 = tape.affine(vars.y0_w, Some(vars.y0_b), h0, spec.m, ctx);
    let incs = tape.row_diff(hstack, n, ctx);
    let sd = spec.state_dim();
    let dims = spec.field.dims();

    // Per-output solves take their scalar initial state from y0's component.
    let init_states: Vec<Var> = if spec.per_output {
        (0..spec.m).map(|z| tape.slice_row(y0, z, spec.m, 1)).collect()
    } else {
        vec![y0]
    };

    let mut trajectories: Vec<Vec<Var>> = Vec::with_capacity(init_states.len());
    for (s_idx, &init) in init_states.iter().enumerate() {
        let field_layers = &vars.fields[s_idx];
        let field_masks = masks.map(|m| m[s_idx].as_slice());
        let mut states = Vec::with_capacity(n);
        let mut y = init;
        states.push(y);
        for k in 0..n - 1 {
            let dh = tape.slice_row(incs, k, n - 1, ctx);
            let dt = pts[k + 1] - pts[k];
            let f = tape.mlp(field_layers, &dims, y, field_masks);
            let next = match solver {
                Solver::Euler => tape.cde_step(y, f, sd, Some(dh), 1.0, &[dt]),
                Solver::Midpoint => {
                    let ymid = tape.cde_step(y, f, sd, Some(dh), 0.5, &[0.5 * dt]);
                    let fmid = tape.mlp(field_layers, &dims, ymid, field_masks);
                    tape.cde_step(y, fmid, sd, Some(dh), 1.0, &[dt])
                }
            };
            if tape.val(next).iter().any(|v| !v.is_finite()) {
                return Err(FameError::SolverDivergence { step: k });
            }
            y = next;
            states.push(y);
        }
        trajectories.push(states);
    }

    // Merge per-output scalar trajectories into m-dim nodes when split.
    let trajectory: Vec<Var> = if spec.per_output {
        (0..n)
            .map(|k| {
                let parts: Vec<Var> = trajectories.iter().map(|t| t[k]).collect();
                let widths = vec![1usize; spec.m];
                tape.concat_cols(&parts, &widths, 1)
            })
            .collect()
    } else {
        trajectories.pop().unwrap()
    };

    let preds = queries
        .iter()
        .map(|qs| {
            qs.iter()
                .map(|&s| {
                    let (k, a) = locate(pts, s);
                    tape.lerp(trajectory[k], trajectory[k + 1], a)
                })
                .collect()
        })
        .collect();

    Ok(DecodeOut { trajectory, preds })
}

/// Plain decode for a stacked context trajectory (`context_dim + 1` wide,
/// time channel last, as produced by `stack_context`). Returns per output
/// channel the values at its queries.
pub fn decode(
    spec: &DecoderSpec,
    store: &ParamStore,
    h: &LatentTrajectory,
    queries: &[Vec<f64>],
    solver: Solver,
) -> Result<Vec<Vec<f64>>> {
    if h.dim() != spec.context_dim + 1 {
        return Err(FameError::Dimension {
            context: "decode context width",
            expected: spec.context_dim + 1,
            got: h.dim(),
        });
    }
    let mut tape = Tape::new();
    let vars_all = store.bind(&mut tape);
    let dvars = spec.bind(store, &vars_all);
    let flat: Vec<f64> = h
        .states
        .iter()
        .flat_map(|row| row[..spec.context_dim].iter().copied())
        .collect();
    let hstack = tape.leaf(flat);
    let out = decode_t(&mut tape, spec, &dvars, hstack, &h.grid, queries, solver, None)?;
    Ok(out
        .preds
        .iter()
        .enumerate()
        .map(|(z, qs)| qs.iter().map(|p| tape.val(*p)[z]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcpath::{build_path, make_grid, FunctionSample, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> QuadratureGrid {
        let path = build_path(
            &FunctionSample::new(vec![0.0, 1.0], vec![0.0, 1.0], 1.0).unwrap(),
            Scheme::Linear,
        )
        .unwrap();
        make_grid(&path, n).unwrap()
    }

    fn random_context(g: &QuadratureGrid, ctx: usize, rng: &mut ChaCha8Rng) -> LatentTrajectory {
        // Smooth-ish random context with appended time channel.
        let states: Vec<Vec<f64>> = g
            .points()
            .iter()
            .map(|&t| {
                let mut row: Vec<f64> = (0..ctx)
                    .map(|j| ((j as f64 + 1.0) * t * 2.2).sin() * 0.5 + rng.gen::<f64>() * 0.01)
                    .collect();
                row.push(t);
                row
            })
            .collect();
        LatentTrajectory { grid: g.clone(), states }
    }

    fn init_spec(m: usize, ctx: usize, rng: &mut ChaCha8Rng) -> (DecoderSpec, ParamStore) {
        let spec = DecoderSpec::new(m, ctx, vec![6, 6], 0.0, false).unwrap();
        let mut store = ParamStore::new();
        spec.init_into(&mut store, rng).unwrap();
        (spec, store)
    }

    #[test]
    fn zero_field_keeps_initial_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(9);
        let ctx = 4;
        let (spec, mut store) = init_spec(2, ctx, &mut rng);
        for name in store.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>() {
            if name.starts_with("dec.field") {
                let i = store.idx(&name).unwrap();
                store.data_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let h = random_context(&g, ctx, &mut rng);
        let queries = vec![vec![0.0, 0.33, 0.7, 1.0], vec![0.1, 0.9]];
        let out = decode(&spec, &store, &h, &queries, Solver::Euler).unwrap();
        // Initial value from y0 map of H(0).
        let y0w = &store.get("dec.y0.w").unwrap().data;
        let expect: Vec<f64> = (0..2)
            .map(|r| {
                y0w[r * ctx..(r + 1) * ctx]
                    .iter()
                    .zip(&h.states[0][..ctx])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        for (z, ch) in out.iter().enumerate() {
            for v in ch {
                assert!((v - expect[z]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_context_gives_constant_output() {
        // dH = 0 and dt-driven increments only... the time channel still
        // advances, so only the time column of the field matters; zero it by
        // construction with a constant-in-time context and a field whose time
        // column is zeroed.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid(7);
        let ctx = 3;
        let (spec, store) = init_spec(1, ctx, &mut rng);
        let h = LatentTrajectory {
            grid: g.clone(),
            states: g.points().iter().map(|&t| vec![0.4, -0.2, 0.9, t]).collect(),
        };
        // Zero the last column (time channel coefficients) of the field's
        // output layer so dH = 0 implies dy = 0.
        let mut s2 = store.clone();
        let dims = spec.field.dims();
        let last = dims.len() - 2;
        let wname = format!("dec.field.s0.w{last}");
        let bname = format!("dec.field.s0.b{last}");
        let out_rows = *dims.last().unwrap();
        let in_cols = dims[dims.len() - 2];
        {
            let i = s2.idx(&wname).unwrap();
            let wdata = s2.data_mut(i);
            for r in 0..out_rows {
                if (r + 1) % (ctx + 1) == 0 {
                    for c in 0..in_cols {
                        wdata[r * in_cols + c] = 0.0;
                    }
                }
            }
        }
        {
            let i = s2.idx(&bname).unwrap();
            let bdata = s2.data_mut(i);
            for r in 0..out_rows {
                if (r + 1) % (ctx + 1) == 0 {
                    bdata[r] = 0.0;
                }
            }
        }
        let out = decode(&spec, &s2, &h, &[vec![0.0, 0.5, 1.0]], Solver::Euler).unwrap();
        let first = out[0][0];
        for v in &out[0] {
            assert!((v - first).abs() < 1e-12, "constant context should give constant output");
        }
    }

    #[test]
    fn grid_queries_match_raw_states_and_offgrid_matches_refined_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(17);
        let ctx = 4;
        let (spec, store) = init_spec(1, ctx, &mut rng);
        let h = random_context(&g, ctx, &mut rng);

        // Queries exactly at grid points reproduce the solve states.
        let grid_queries: Vec<f64> = g.points().to_vec();
        let out = decode(&spec, &store, &h, &[grid_queries.clone()], Solver::Euler).unwrap();

        let mut tape = Tape::new();
        let vars_all = store.bind(&mut tape);
        let dvars = spec.bind(&store, &vars_all);
        let flat: Vec<f64> =
            h.states.iter().flat_map(|r| r[..ctx].iter().copied()).collect();
        let hstack = tape.leaf(flat);
        let raw = decode_t(
            &mut tape,
            &spec,
            &dvars,
            hstack,
            &g,
            &[grid_queries],
            Solver::Euler,
            None,
        )
        .unwrap();
        for (k, v) in out[0].iter().enumerate() {
            assert_eq!(*v, tape.val(raw.trajectory[k])[0]);
        }

        // Off-grid queries against a 4x linear-refined context solve.
        let offgrid = vec![0.137, 0.411, 0.873];
        let coarse = decode(&spec, &store, &h, &[offgrid.clone()], Solver::Euler).unwrap();
        let refined = {
            let pts = g.points();
            let mut fine_pts = Vec::new();
            for w in pts.windows(2) {
                for r in 0..4 {
                    fine_pts.push(w[0] + (w[1] - w[0]) * r as f64 / 4.0);
                }
            }
            fine_pts.push(1.0);
            let interp = |t: f64| -> Vec<f64> {
                let (k, a) = super::locate(pts, t);
                let mut row: Vec<f64> = h.states[k][..ctx]
                    .iter()
                    .zip(&h.states[k + 1][..ctx])
                    .map(|(x, y)| x + a * (y - x))
                    .collect();
                row.push(t);
                row
            };
            let fine = LatentTrajectory {
                grid: QuadratureGrid::from_points(fine_pts.clone()).unwrap(),
                states: fine_pts.iter().map(|&t| interp(t)).collect(),
            };
            decode(&spec, &store, &fine, &[offgrid], Solver::Euler).unwrap()
        };
        let step = 1.0 / 16.0;
        for (a, b) in coarse[0].iter().zip(&refined[0]) {
            assert!((a - b).abs() < 6.0 * step, "off-grid query drift {a} vs {b}");
        }
    }

    #[test]
    fn query_set_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid(13);
        let ctx = 3;
        let (spec, store) = init_spec(2, ctx, &mut rng);
        let h = random_context(&g, ctx, &mut rng);
        let a = vec![0.12, 0.5, 0.77];
        let b = vec![0.05, 0.3, 0.61, 0.94];
        let mut union: Vec<f64> = a.iter().chain(&b).copied().collect();
        union.sort_by(|x, y| x.partial_cmp(y).unwrap());

        let just_a = decode(&spec, &store, &h, &[a.clone(), a.clone()], Solver::Euler).unwrap();
        let with_b =
            decode(&spec, &store, &h, &[union.clone(), union.clone()], Solver::Euler).unwrap();
        for (z, qa) in just_a.iter().enumerate() {
            for (qi, &q) in a.iter().enumerate() {
                let ui = union.iter().position(|&uq| uq == q).unwrap();
                assert!((qa[qi] - with_b[z][ui]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsorted_or_out_of_domain_queries_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid(5);
        let (spec, store) = init_spec(1, 3, &mut rng);
        let h = random_context(&g, 3, &mut rng);
        assert!(matches!(
            decode(&spec, &store, &h, &[vec![0.5, 0.2]], Solver::Euler),
            Err(FameError::TimeOrdering(_))
        ));
        assert!(decode(&spec, &store, &h, &[vec![1.5]], Solver::Euler).is_err());
    }

    #[test]
    fn per_output_fields_solve_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = grid(9);
        let ctx = 3;
        let spec = DecoderSpec::new(2, ctx, vec![5, 5], 0.0, true).unwrap();
        let mut store = ParamStore::new();
        spec.init_into(&mut store, &mut rng).unwrap();
        let h = random_context(&g, ctx, &mut rng);
        let out = decode(&spec, &store, &h, &[vec![0.25, 0.75], vec![0.25, 0.75]], Solver::Euler)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|ch| ch.iter().all(|v| v.is_finite())));
        assert!(store.get("dec.field.s1.w0").is_some());
    }
}
