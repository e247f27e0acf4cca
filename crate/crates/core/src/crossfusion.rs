//! Pointwise multi-head cross attention across channels.
//!
//! At every quadrature instant, each channel's attended latent queries the
//! concurrent states of all channels (finite softmax over channels, no
//! temporal mixing), the heads are concatenated, and an output projection
//! returns to width 2h so the decoder sees a uniform hidden width. Projection
//! matrices are shared across channels, which makes the block permutation
//! equivariant in the channel index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot_uniform, softmax_stable, ParamStore, Tape, Var};
use crate::encoder::LatentTrajectory;
use crate::error::{FameError, Result};

/// Heads, per-head width, and the operator-norm cap of Assumption-style
/// regularity (enforced by rescaling at init, monitored afterwards).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossConfig {
    pub heads: usize,
    pub d_c: usize,
    pub d_f: usize,
    /// Output width (2h).
    pub out_dim: usize,
    /// Operator-norm cap M_mat for all projection matrices.
    pub norm_cap: f64,
}

impl CrossConfig {
    pub fn new(heads: usize, d_c: usize, d_f: usize, out_dim: usize, norm_cap: f64) -> Result<Self> {
        if heads == 0 || d_c == 0 || d_f == 0 || out_dim == 0 {
            return Err(FameError::Config("cross-attention dims must be positive".into()));
        }
        if !(norm_cap > 0.0) {
            return Err(FameError::Config(format!("norm cap must be > 0, got {norm_cap}")));
        }
        Ok(CrossConfig { heads, d_c, d_f, out_dim, norm_cap })
    }

    fn names(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for p in 0..self.heads {
            for kind in ["wq", "wk", "wv"] {
                out.push((format!("cross.h{p}.{kind}"), self.d_c, self.d_f));
            }
        }
        out.push(("cross.wo".to_string(), self.out_dim, self.heads * self.d_c));
        out
    }

    /// Glorot init, rescaled onto the norm cap when the draw exceeds it.
    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (name, rows, cols) in self.names() {
            let mut w = glorot_uniform(rows, cols, rng);
            let norm = operator_norm(&w, rows, cols, 60);
            if norm > self.norm_cap {
                let s = self.norm_cap / norm;
                for v in w.iter_mut() {
                    *v *= s;
                }
            }
            store.insert(&name, vec![rows, cols], w)?;
        }
        Ok(())
    }

    pub fn bind(&self, store: &ParamStore, vars: &[Var]) -> CrossVars {
        CrossVars {
            heads: (0..self.heads)
                .map(|p| HeadVars {
                    wq: vars[store.idx(&format!("cross.h{p}.wq")).unwrap()],
                    wk: vars[store.idx(&format!("cross.h{p}.wk")).unwrap()],
                    wv: vars[store.idx(&format!("cross.h{p}.wv")).unwrap()],
                })
                .collect(),
            wo: vars[store.idx("cross.wo").unwrap()],
        }
    }

    /// Power-iteration estimates of every projection's operator norm,
    /// for monitoring against the cap during training.
    pub fn measure_norms(&self, store: &ParamStore) -> Vec<(String, f64)> {
        self.names()
            .into_iter()
            .map(|(name, rows, cols)| {
                let w = &store.get(&name).expect("cross param").data;
                (name, operator_norm(w, rows, cols, 60))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct CrossVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
}

/// Largest singular value via power iteration on `W^T W`.
pub fn operator_norm(w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|i| ((i * 2654435761 + 1) as f64).sin()).collect();
    let mut norm = 0.0;
    for _ in 0..iters {
        // u = W v
        let mut u = vec![0.0; rows];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            u[r] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        // v = W^T u
        let mut vn = vec![0.0; cols];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                vn[c] += row[c] * u[r];
            }
        }
        let len = vn.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len == 0.0 {
            return 0.0;
        }
        for x in vn.iter_mut() {
            *x /= len;
        }
        v = vn;
        norm = len.sqrt();
    }
    norm
}

/// One cross-attention head over the whole grid: returns per-channel head
/// outputs (`n x d_c` each). `zhat[j]` is channel j's attended trajectory as
/// an `n x d_f` matrix node.
pub fn cross_head_t(
    tape: &mut Tape,
    cfg: &CrossConfig,
    head: &HeadVars,
    zhat: &[Var],
    n: usize,
) -> Vec<Var> {
    let d = zhat.len();
    let qs: Vec<Var> =
        zhat.iter().map(|z| tape.matmul_nt(*z, head.wq, n, cfg.d_f, cfg.d_c)).collect();
    let ks: Vec<Var> =
        zhat.iter().map(|z| tape.matmul_nt(*z, head.wk, n, cfg.d_f, cfg.d_c)).collect();
    let vs: Vec<Var> =
        zhat.iter().map(|z| tape.matmul_nt(*z, head.wv, n, cfg.d_f, cfg.d_c)).collect();
    let scale = 1.0 / (cfg.d_c as f64).sqrt();
    (0..d)
        .map(|j| {
            let cols: Vec<Var> = (0..d)
                .map(|l| {
                    let raw = tape.row_dot(qs[j], ks[l], n, cfg.d_c);
                    tape.scale(raw, scale)
                })
                .collect();
            let widths = vec![1usize; d];
            let logits = tape.concat_cols(&cols, &widths, n);
            let beta = tape.rows_softmax(logits, n, d, 1.0);
            tape.mix_rows(beta, &vs, n, d, cfg.d_c)
        })
        .collect()
}

/// Full cross-attention block: per-channel fused trajectories (`n x out_dim`).
pub fn fuse_heads_t(
    tape: &mut Tape,
    cfg: &CrossConfig,
    vars: &CrossVars,
    zhat: &[Var],
    n: usize,
) -> Vec<Var> {
    let d = zhat.len();
    let mut per_channel: Vec<Vec<Var>> = vec![Vec::with_capacity(cfg.heads); d];
    for head in &vars.heads {
        let outs = cross_head_t(tape, cfg, head, zhat, n);
        for (j, o) in outs.into_iter().enumerate() {
            per_channel[j].push(o);
        }
    }
    let widths = vec![cfg.d_c; cfg.heads];
    per_channel
        .into_iter()
        .map(|heads| {
            let cat = tape.concat_cols(&heads, &widths, n);
            tape.matmul_nt(cat, vars.wo, n, cfg.heads * cfg.d_c, cfg.out_dim)
        })
        .collect()
}

/// Stack per-channel fused trajectories into one `n x (out_dim * d)` context
/// matrix.
pub fn stack_context_t(tape: &mut Tape, fused: &[Var], out_dim: usize, n: usize) -> Var {
    let widths = vec![out_dim; fused.len()];
    tape.concat_cols(fused, &widths, n)
}

/// Cross-attention weights at one instant for one head:
/// `beta[j][l] = softmax_l(<q_j, k_l> / sqrt(d_c))`. Exact simplex rows.
pub fn cross_weights_at(d_c: usize, q: &[Vec<f64>], k: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = q.len();
    if k.len() != d {
        return Err(FameError::Dimension { context: "cross_weights channels", expected: d, got: k.len() });
    }
    let scale = 1.0 / (d_c as f64).sqrt();
    Ok(q.iter()
        .map(|qj| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kl| qj.iter().zip(kl).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            softmax_stable(&logits, 1.0, 1.0).weights
        })
        .collect())
}

/// Head output at one instant: `H_j = sum_l beta[j][l] v_l`.
pub fn head_output_at(beta: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d_c = v[0].len();
    beta.iter()
        .map(|row| {
            let mut out = vec![0.0; d_c];
            for (b, vl) in row.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vl) {
                    *o += b * x;
                }
            }
            out
        })
        .collect()
}

/// Concatenate per-head outputs for one channel and project with `W_O`.
pub fn project_heads_at(cfg: &CrossConfig, heads: &[Vec<f64>], wo: &[f64]) -> Vec<f64> {
    let cat: Vec<f64> = heads.iter().flatten().copied().collect();
    let cols = cfg.heads * cfg.d_c;
    (0..cfg.out_dim)
        .map(|r| wo[r * cols..(r + 1) * cols].iter().zip(&cat).map(|(a, b)| a * b).sum())
        .collect()
}

/// Stack per-channel fused trajectories into a decoder control path, with an
/// appended identity time channel.
pub fn stack_context(fused: &[LatentTrajectory]) -> Result<LatentTrajectory> {
    let first = fused.first().ok_or_else(|| FameError::Config("no channels to stack".into()))?;
    let n = first.grid.len();
    for f in fused {
        if f.grid != first.grid {
            return Err(FameError::Config("stack_context requires a shared grid".into()));
        }
    }
    let states: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let mut row: Vec<f64> = fused.iter().flat_map(|f| f.states[t].iter().copied()).collect();
            row.push(first.grid.points()[t]);
            row
        })
        .collect();
    Ok(LatentTrajectory { grid: first.grid.clone(), states })
}
