//! Continuous self attention over a channel's latent trajectory.
//!
//! The latent path is projected pointwise into query, key, and value paths;
//! scores are inner products scaled by `1/sqrt(d_f)`, and the softmax of
//! discrete attention is replaced by normalization against the trapezoid
//! integral of the exponentiated scores over `[0, 1]`. Every row of the
//! resulting weight field is a density: it integrates to one under the same
//! quadrature used downstream, so the attended value is a convex average of
//! the value path.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, ParamStore, Tape, Var, DEFAULT_TEMP_FLOOR};
use crate::encoder::LatentTrajectory;
use crate::error::{FameError, Result};
use crate::funcpath::QuadratureGrid;

/// Projection dims and temperature for continuous attention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Projection width d_f.
    pub d_f: usize,
    /// Latent width 2h the projections consume.
    pub latent_dim: usize,
    /// Softmax temperature (>= floor; clamped at construction).
    pub temperature: f64,
    pub temperature_floor: f64,
    /// Set when the requested temperature was below the floor.
    pub clamped: bool,
}

impl AttentionConfig {
    pub fn new(d_f: usize, latent_dim: usize, temperature: f64, floor: f64) -> Result<Self> {
        if d_f == 0 || latent_dim == 0 {
            return Err(FameError::Config("attention dims must be positive".into()));
        }
        if !(floor > 0.0) {
            return Err(FameError::Config(format!("temperature floor must be > 0, got {floor}")));
        }
        let clamped = temperature < floor;
        Ok(AttentionConfig {
            d_f,
            latent_dim,
            temperature: if clamped { floor } else { temperature },
            temperature_floor: floor,
            clamped,
        })
    }

    pub fn with_defaults(d_f: usize, latent_dim: usize) -> Self {
        Self::new(d_f, latent_dim, 1.0, DEFAULT_TEMP_FLOOR).unwrap()
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for name in ["attn.wq", "attn.wk", "attn.wv"] {
            store.insert(
                name,
                vec![self.d_f, self.latent_dim],
                glorot_uniform(self.d_f, self.latent_dim, rng),
            )?;
        }
        Ok(())
    }

    pub fn bind(&self, store: &ParamStore, vars: &[Var]) -> AttnVars {
        AttnVars {
            wq: vars[store.idx("attn.wq").unwrap()],
            wk: vars[store.idx("attn.wk").unwrap()],
            wv: vars[store.idx("attn.wv").unwrap()],
        }
    }
}

/// Tape handles for the three projections.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Pointwise Q/K/V projection of an `n x latent_dim` trajectory matrix.
pub fn qkv_project_t(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    vars: &AttnVars,
    z: Var,
    n: usize,
) -> (Var, Var, Var) {
    let q = tape.matmul_nt(z, vars.wq, n, cfg.latent_dim, cfg.d_f);
    let k = tape.matmul_nt(z, vars.wk, n, cfg.latent_dim, cfg.d_f);
    let v = tape.matmul_nt(z, vars.wv, n, cfg.latent_dim, cfg.d_f);
    (q, k, v)
}

/// Normalized weight field on grid x grid: row `t` holds the density
/// `exp(score/temp - lse) / trapezoid-integral`, which integrates to 1 under
/// the trapezoid rule on this grid.
pub fn attention_weights_t(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    q: Var,
    k: Var,
    grid: &QuadratureGrid,
) -> Result<Var> {
    let n = grid.len();
    if n < 2 {
        return Err(FameError::Quadrature("attention needs at least 2 grid points".into()));
    }
    let raw = tape.matmul_nt(q, k, n, cfg.d_f, n);
    let scores = tape.scale(raw, 1.0 / (cfg.d_f as f64).sqrt());
    let w = Rc::new(grid.trapezoid_weights());
    Ok(tape.attn_density(scores, n, cfg.temperature, w))
}

/// Attended representation: trapezoid integral of `density * V` per row.
pub fn attend_t(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    density: Var,
    v: Var,
    grid: &QuadratureGrid,
) -> Var {
    let w = Rc::new(grid.trapezoid_weights());
    tape.attend(density, v, grid.len(), cfg.d_f, w)
}

fn traj_matrix(tape: &mut Tape, z: &LatentTrajectory) -> Var {
    let flat: Vec<f64> = z.states.iter().flatten().copied().collect();
    tape.leaf(flat)
}

fn matrix_to_traj(grid: &QuadratureGrid, flat: &[f64], dim: usize) -> LatentTrajectory {
    LatentTrajectory {
        grid: grid.clone(),
        states: flat.chunks(dim).map(|c| c.to_vec()).collect(),
    }
}

/// Plain projection of a latent trajectory into Q/K/V trajectories. Runs the
/// same tape kernels the model records.
pub fn qkv_project(
    cfg: &AttentionConfig,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    z: &LatentTrajectory,
) -> Result<(LatentTrajectory, LatentTrajectory, LatentTrajectory)> {
    if z.dim() != cfg.latent_dim {
        return Err(FameError::Dimension {
            context: "qkv_project latent dim",
            expected: cfg.latent_dim,
            got: z.dim(),
        });
    }
    let n = z.states.len();
    let mut tape = Tape::new();
    let zm = traj_matrix(&mut tape, z);
    let vars = AttnVars {
        wq: tape.leaf(wq.to_vec()),
        wk: tape.leaf(wk.to_vec()),
        wv: tape.leaf(wv.to_vec()),
    };
    let (q, k, v) = qkv_project_t(&mut tape, cfg, &vars, zm, n);
    Ok((
        matrix_to_traj(&z.grid, tape.val(q), cfg.d_f),
        matrix_to_traj(&z.grid, tape.val(k), cfg.d_f),
        matrix_to_traj(&z.grid, tape.val(v), cfg.d_f),
    ))
}

/// Plain weight field over grid x grid.
pub fn attention_weights(
    cfg: &AttentionConfig,
    q: &LatentTrajectory,
    k: &LatentTrajectory,
) -> Result<Vec<Vec<f64>>> {
    let n = q.grid.len();
    let mut tape = Tape::new();
    let qm = traj_matrix(&mut tape, q);
    let km = traj_matrix(&mut tape, k);
    let dens = attention_weights_t(&mut tape, cfg, qm, km, &q.grid)?;
    Ok(tape.val(dens).chunks(n).map(|r| r.to_vec()).collect())
}

/// Plain attended trajectory from a weight field and value path.
pub fn attend(
    cfg: &AttentionConfig,
    weights: &[Vec<f64>],
    v: &LatentTrajectory,
) -> Result<LatentTrajectory> {
    let n = v.grid.len();
    if weights.len() != n {
        return Err(FameError::Dimension {
            context: "attend weight rows",
            expected: n,
            got: weights.len(),
        });
    }
    let mut tape = Tape::new();
    let flat: Vec<f64> = weights.iter().flatten().copied().collect();
    let dm = tape.leaf(flat);
    let vm = traj_matrix(&mut tape, v);
    let out = attend_t(&mut tape, cfg, dm, vm, &v.grid);
    Ok(matrix_to_traj(&v.grid, tape.val(out), cfg.d_f))
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

    fn random_traj(g: &QuadratureGrid, dim: usize, rng: &mut ChaCha8Rng) -> LatentTrajectory {
        LatentTrajectory {
            grid: g.clone(),
            states: (0..g.len())
                .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect(),
        }
    }

    #[test]
    fn zero_projection_gives_zero_path_and_identity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(8);
        let cfg = AttentionConfig::with_defaults(4, 4);
        let z = random_traj(&g, 4, &mut rng);
        let zero = vec![0.0; 16];
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let (q, k, _v) = qkv_project(&cfg, &zero, &eye, &eye, &z).unwrap();
        for s in &q.states {
            assert!(s.iter().all(|&x| x == 0.0));
        }
        for (a, b) in k.states.iter().zip(&z.states) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn qkv_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid(6);
        let cfg = AttentionConfig::with_defaults(3, 5);
        let z = random_traj(&g, 5, &mut rng);
        let wq: Vec<f64> = (0..15).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (q, _, _) = qkv_project(&cfg, &wq, &wq, &wq, &z).unwrap();
        for (t, zs) in z.states.iter().enumerate() {
            for r in 0..3 {
                let mut acc = 0.0;
                for c in 0..5 {
                    acc += wq[r * 5 + c] * zs[c];
                }
                assert!((q.states[t][r] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_scores_give_uniform_density() {
        // All scores equal => each row is the constant density 1 on [0, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(9);
        let cfg = AttentionConfig::with_defaults(2, 2);
        let c = vec![0.7, -0.3];
        let z = LatentTrajectory { grid: g.clone(), states: vec![c; g.len()] };
        let w: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (q, k, _) = qkv_project(&cfg, &w, &w, &w, &z).unwrap();
        let dens = attention_weights(&cfg, &q, &k).unwrap();
        for row in &dens {
            for v in row {
                assert!((v - 1.0).abs() < 1e-9, "uniform density expected, got {v}");
            }
        }
    }

    #[test]
    fn spike_concentrates_but_rows_stay_normalized() {
        let g = grid(17);
        let n = g.len();
        let cfg = AttentionConfig::with_defaults(1, 1);
        // Hand-built score matrix: one interior spike per row.
        let mut tape = Tape::new();
        let mut scores = vec![0.0; n * n];
        for r in 0..n {
            scores[r * n + 8] = 6.0;
        }
        let sv = tape.leaf(scores);
        let w = Rc::new(g.trapezoid_weights());
        let dens = tape.attn_density(sv, n, cfg.temperature, Rc::clone(&w));
        let d = tape.val(dens);
        for r in 0..n {
            let row = &d[r * n..(r + 1) * n];
            let integral: f64 = row.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            assert!((integral - 1.0).abs() < 1e-9);
            let max_idx = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(max_idx, 8);
        }
    }

    #[test]
    fn rows_integrate_to_one_and_match_refined_quadrature() {
        // Random Q/K on a 32-point grid: the trapezoid integral of each row
        // against a 10x-refined evaluation of the same density stays within
        // 1e-3 of one.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid(32);
        let n = g.len();
        let cfg = AttentionConfig::with_defaults(4, 4);
        let mut z = random_traj(&g, 4, &mut rng);
        // Keep scores O(1) so the coarse trapezoid is inside the 1e-3 band.
        for s in z.states.iter_mut() {
            s.iter_mut().for_each(|x| *x *= 0.5);
        }
        let wq: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wk: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (q, k, _) = qkv_project(&cfg, &wq, &wk, &wq, &z).unwrap();
        let dens = attention_weights(&cfg, &q, &k).unwrap();
        let w = g.trapezoid_weights();
        for row in &dens {
            let integral: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((integral - 1.0).abs() < 1e-9);
        }

        // Refined oracle: interpolate K linearly onto a 10x grid, rebuild the
        // density for row t with the coarse normalizer, integrate finely.
        let pts = g.points();
        let interp_k = |tau: f64| -> Vec<f64> {
            let i = match pts.binary_search_by(|x| x.partial_cmp(&tau).unwrap()) {
                Ok(i) => return k.states[i].clone(),
                Err(i) => i - 1,
            };
            let a = (tau - pts[i]) / (pts[i + 1] - pts[i]);
            k.states[i]
                .iter()
                .zip(&k.states[i + 1])
                .map(|(x, y)| x + a * (y - x))
                .collect()
        };
        let fine: Vec<f64> = {
            let mut f = Vec::new();
            for w in pts.windows(2) {
                for r in 0..10 {
                    f.push(w[0] + (w[1] - w[0]) * r as f64 / 10.0);
                }
            }
            f.push(1.0);
            f
        };
        for t in 0..n {
            // Coarse row normalizer (the log-sum-exp shift cancels).
            let scores_row: Vec<f64> = (0..n)
                .map(|b| {
                    q.states[t].iter().zip(&k.states[b]).map(|(a, c)| a * c).sum::<f64>()
                        / (cfg.d_f as f64).sqrt()
                })
                .collect();
            let m = scores_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores_row
                .iter()
                .zip(&w)
                .map(|(s, wt)| wt * (s - m).exp())
                .sum();
            // Fine trapezoid of the same density.
            let dens_fine: Vec<f64> = fine
                .iter()
                .map(|&tau| {
                    let kv = interp_k(tau);
                    let s: f64 = q.states[t].iter().zip(&kv).map(|(a, c)| a * c).sum::<f64>()
                        / (cfg.d_f as f64).sqrt();
                    ((s - m).exp()) / denom
                })
                .collect();
            let mut integral = 0.0;
            for i in 0..fine.len() - 1 {
                integral += 0.5 * (dens_fine[i] + dens_fine[i + 1]) * (fine[i + 1] - fine[i]);
            }
            assert!((integral - 1.0).abs() < 1e-3, "refined integral {integral}");
        }
    }

    #[test]
    fn attend_constant_and_linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid(21);
        let n = g.len();
        let cfg = AttentionConfig::with_defaults(2, 2);

        // Constant V: normalization makes the attended value exactly V.
        let vconst = vec![1.3, -0.4];
        let v = LatentTrajectory { grid: g.clone(), states: vec![vconst.clone(); n] };
        let uniform = vec![vec![1.0; n]; n];
        let out = attend(&cfg, &uniform, &v).unwrap();
        for s in &out.states {
            for (a, b) in s.iter().zip(&vconst) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // Uniform weights over V(tau) = tau e1: the mean of a linear function
        // is 1/2 (trapezoid-exact for linear integrands).
        let v2 = LatentTrajectory {
            grid: g.clone(),
            states: g.points().iter().map(|&t| vec![t, 0.0]).collect(),
        };
        let out2 = attend(&cfg, &uniform, &v2).unwrap();
        for s in &out2.states {
            assert!((s[0] - 0.5).abs() < 1e-9);
            assert!(s[1].abs() < 1e-12);
        }
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn attend_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = grid(12);
        let n = g.len();
        let cfg = AttentionConfig::with_defaults(3, 3);
        let v = random_traj(&g, 3, &mut rng);
        // Random positive normalized-ish weights (the op does not require
        // normalization to be linear in V).
        let weights: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let out = attend(&cfg, &weights, &v).unwrap();
        let tw = g.trapezoid_weights();
        for t in 0..n {
            for j in 0..3 {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += tw[b] * weights[t][b] * v.states[b][j];
                }
                assert!((out.states[t][j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convex_hull_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid(16);
        let cfg = AttentionConfig::with_defaults(3, 6);
        let z = random_traj(&g, 6, &mut rng);
        let wq: Vec<f64> = (0..18).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wk: Vec<f64> = (0..18).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wv: Vec<f64> = (0..18).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (q, k, v) = qkv_project(&cfg, &wq, &wk, &wv, &z).unwrap();
        let dens = attention_weights(&cfg, &q, &k).unwrap();
        let out = attend(&cfg, &dens, &v).unwrap();
        for j in 0..3 {
            let lo = v.states.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min);
            let hi = v.states.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max);
            for s in &out.states {
                assert!(s[j] >= lo - 1e-9 && s[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn temperature_clamped_with_record() {
        let cfg = AttentionConfig::new(2, 2, 0.01, 0.1).unwrap();
        assert!(cfg.clamped);
        assert_eq!(cfg.temperature, 0.1);
        let ok = AttentionConfig::new(2, 2, 0.5, 0.1).unwrap();
        assert!(!ok.clamped);
    }

    #[test]
    fn lipschitz_probe_bounded_ratio() {
        // Perturb the latent path by shrinking bumps; the attended output
        // moves proportionally (bounded ratio over a decade of delta).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = grid(16);
        let n = g.len();
        let cfg = AttentionConfig::with_defaults(3, 4);
        let base = random_traj(&g, 4, &mut rng);
        let wq: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wk: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wv: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let run = |z: &LatentTrajectory| -> Vec<Vec<f64>> {
            let (q, k, v) = qkv_project(&cfg, &wq, &wk, &wv, z).unwrap();
            let dens = attention_weights(&cfg, &q, &k).unwrap();
            attend(&cfg, &dens, &v).unwrap().states
        };
        let base_out = run(&base);
        let mut ratios = Vec::new();
        for delta in [0.1, 0.03, 0.01] {
            let mut pert = base.clone();
            pert.states[n / 2][0] += delta;
            let out = run(&pert);
            let sup = base_out
                .iter()
                .zip(&out)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            ratios.push(sup / delta);
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max.is_finite() && max > 0.0);
        assert!(max / min < 10.0, "ratio drift {ratios:?}");
    }
}
