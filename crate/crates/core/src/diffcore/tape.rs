//! Reverse-mode automatic differentiation on a tape of array-valued nodes.
//!
//! Every forward operation pushes one node holding its value and a closure
//! that scatters the output cotangent to its parents. Operations are recorded
//! at matrix/vector granularity (one node per linear map, per fused MLP, per
//! attention contraction), which keeps tape overhead negligible next to the
//! arithmetic itself. `backward` walks the tape once in reverse; because node
//! ids are created in topological order, every consumer has already deposited
//! its contribution when a node is visited.

use std::rc::Rc;

use crate::error::{FameError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-node cotangent buffers, indexed by node id. Absent means zero.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the seed with respect to node `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    fn accum(&mut self, id: usize, len: usize) -> &mut [f64] {
        let slot = &mut self.slots[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut Grads)>;

/// Wengert list of recorded operations.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Rc<Vec<f64>>>,
    backs: Vec<Option<BackFn>>,
}

/// Numerically stable softmax kernel: weights of `logits / temp` shifted by
/// the max before exponentiation. Writes into `out`, returns nothing.
pub(crate) fn softmax_kernel(logits: &[f64], temp: f64, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &l in logits {
        m = m.max(l / temp);
    }
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l / temp - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Value of a node.
    pub fn val(&self, v: Var) -> &[f64] {
        &self.vals[v.0]
    }

    fn push(&mut self, value: Vec<f64>, back: Option<BackFn>) -> Var {
        self.vals.push(Rc::new(value));
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.vals[v.0])
    }

    /// Insert a leaf (parameter or constant). Leaves receive cotangents but
    /// propagate nothing further.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, None)
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let n = out.len();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for (s, &gi) in gr.accum(a.0, n).iter_mut().zip(g) {
                    *s += gi;
                }
                for (s, &gi) in gr.accum(b.0, n).iter_mut().zip(g) {
                    *s += gi;
                }
            })),
        )
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x - y).collect();
        let n = out.len();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for (s, &gi) in gr.accum(a.0, n).iter_mut().zip(g) {
                    *s += gi;
                }
                for (s, &gi) in gr.accum(b.0, n).iter_mut().zip(g) {
                    *s -= gi;
                }
            })),
        )
    }

    /// Scalar multiple.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|x| c * x).collect();
        let n = out.len();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for (s, &gi) in gr.accum(a.0, n).iter_mut().zip(g) {
                    *s += c * gi;
                }
            })),
        )
    }

    /// Elementwise tanh.
    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|x| x.tanh()).collect();
        let n = out.len();
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let ga = gr.accum(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            })),
        )
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let n = av.len();
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        self.push(
            vec![out],
            Some(Box::new(move |g, gr| {
                let s = g[0];
                let ga = gr.accum(a.0, n);
                for i in 0..n {
                    ga[i] += s * bv[i];
                }
                let gb = gr.accum(b.0, n);
                for i in 0..n {
                    gb[i] += s * av[i];
                }
            })),
        )
    }

    /// Dense map `y = W x (+ b)`, `W` row-major `rows x cols`.
    pub fn affine(&mut self, w: Var, b: Option<Var>, x: Var, rows: usize, cols: usize) -> Var {
        let wv = self.rc(w);
        let xv = self.rc(x);
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut out = match b {
            Some(bv) => self.val(bv).to_vec(),
            None => vec![0.0; rows],
        };
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            out[r] += acc;
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let gw = gr.accum(w.0, rows * cols);
                    for r in 0..rows {
                        let grow = &mut gw[r * cols..(r + 1) * cols];
                        let gi = g[r];
                        for c in 0..cols {
                            grow[c] += gi * xv[c];
                        }
                    }
                }
                if let Some(bv) = b {
                    let gb = gr.accum(bv.0, rows);
                    for r in 0..rows {
                        gb[r] += g[r];
                    }
                }
                let gx = gr.accum(x.0, cols);
                for r in 0..rows {
                    let row = &wv[r * cols..(r + 1) * cols];
                    let gi = g[r];
                    for c in 0..cols {
                        gx[c] += gi * row[c];
                    }
                }
            })),
        )
    }

    /// Fused multi-layer perceptron: `dims = [in, hidden.., out]`, tanh after
    /// every hidden layer, optional inverted-dropout masks (one per hidden
    /// layer, entries 0 or 1/(1-p)). One tape node regardless of depth.
    pub fn mlp(
        &mut self,
        layers: &[(Var, Var)],
        dims: &[usize],
        x: Var,
        masks: Option<&[Rc<Vec<f64>>]>,
    ) -> Var {
        let n_layers = layers.len();
        debug_assert_eq!(dims.len(), n_layers + 1);
        let xv = self.rc(x);
        let wvs: Vec<Rc<Vec<f64>>> = layers.iter().map(|(w, _)| self.rc(*w)).collect();
        let bvs: Vec<Rc<Vec<f64>>> = layers.iter().map(|(_, b)| self.rc(*b)).collect();
        let masks: Option<Vec<Rc<Vec<f64>>>> = masks.map(|m| m.to_vec());

        // Forward, keeping tanh outputs for the backward pass.
        let mut tanhs: Vec<Rc<Vec<f64>>> = Vec::with_capacity(n_layers - 1);
        let mut cur: Vec<f64> = xv.as_ref().clone();
        for l in 0..n_layers {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut next = bvs[l].as_ref().clone();
            for r in 0..rows {
                let row = &wvs[l][r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += row[c] * cur[c];
                }
                next[r] += acc;
            }
            if l + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
                tanhs.push(Rc::new(next.clone()));
                if let Some(ms) = &masks {
                    for (v, m) in next.iter_mut().zip(ms[l].iter()) {
                        *v *= m;
                    }
                }
            }
            cur = next;
        }

        let layer_ids: Vec<(usize, usize)> = layers.iter().map(|(w, b)| (w.0, b.0)).collect();
        let dims_own: Vec<usize> = dims.to_vec();
        let x_id = x.0;
        self.push(
            cur,
            Some(Box::new(move |g, gr| {
                // Reconstruct post-dropout layer inputs from stored tanhs.
                let layer_input = |l: usize| -> Vec<f64> {
                    if l == 0 {
                        xv.as_ref().clone()
                    } else {
                        let mut a = tanhs[l - 1].as_ref().clone();
                        if let Some(ms) = &masks {
                            for (v, m) in a.iter_mut().zip(ms[l - 1].iter()) {
                                *v *= m;
                            }
                        }
                        a
                    }
                };
                let mut gcur: Vec<f64> = g.to_vec();
                for l in (0..layer_ids.len()).rev() {
                    let (rows, cols) = (dims_own[l + 1], dims_own[l]);
                    let input = layer_input(l);
                    {
                        let gw = gr.accum(layer_ids[l].0, rows * cols);
                        for r in 0..rows {
                            let grow = &mut gw[r * cols..(r + 1) * cols];
                            let gi = gcur[r];
                            for c in 0..cols {
                                grow[c] += gi * input[c];
                            }
                        }
                    }
                    {
                        let gb = gr.accum(layer_ids[l].1, rows);
                        for r in 0..rows {
                            gb[r] += gcur[r];
                        }
                    }
                    let mut gprev = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &wvs[l][r * cols..(r + 1) * cols];
                        let gi = gcur[r];
                        for c in 0..cols {
                            gprev[c] += gi * row[c];
                        }
                    }
                    if l > 0 {
                        // Through dropout then tanh of the previous layer.
                        if let Some(ms) = &masks {
                            for (v, m) in gprev.iter_mut().zip(ms[l - 1].iter()) {
                                *v *= m;
                            }
                        }
                        let t = &tanhs[l - 1];
                        for (v, &ti) in gprev.iter_mut().zip(t.iter()) {
                            *v *= 1.0 - ti * ti;
                        }
                    }
                    gcur = gprev;
                }
                let gx = gr.accum(x_id, dims_own[0]);
                for (s, gi) in gx.iter_mut().zip(&gcur) {
                    *s += gi;
                }
            })),
        )
    }

    /// Stable softmax of `logits / temp` (temperature already clamped by the
    /// caller's config).
    pub fn softmax(&mut self, logits: Var, temp: f64) -> Var {
        let lv = self.rc(logits);
        let n = lv.len();
        let mut out = vec![0.0; n];
        softmax_kernel(&lv, temp, &mut out);
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut inner = 0.0;
                for i in 0..n {
                    inner += g[i] * y[i];
                }
                let gl = gr.accum(logits.0, n);
                for i in 0..n {
                    gl[i] += y[i] * (g[i] - inner) / temp;
                }
            })),
        )
    }

    /// Row-wise stable softmax of a `rows x cols` matrix.
    pub fn rows_softmax(&mut self, m: Var, rows: usize, cols: usize, temp: f64) -> Var {
        let mv = self.rc(m);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_kernel(&mv[r * cols..(r + 1) * cols], temp, &mut out[r * cols..(r + 1) * cols]);
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gm = gr.accum(m.0, rows * cols);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut inner = 0.0;
                    for c in 0..cols {
                        inner += grow[c] * yr[c];
                    }
                    let gmr = &mut gm[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        gmr[c] += yr[c] * (grow[c] - inner) / temp;
                    }
                }
            })),
        )
    }

    /// Continuous-attention densities: given scores `S` (`n x n`) and
    /// trapezoid weights `w`, each row becomes
    /// `exp(S/temp - max) / sum_b w_b exp(S_b/temp - max)`, so every row
    /// integrates to 1 under the trapezoid rule by construction.
    pub fn attn_density(&mut self, scores: Var, n: usize, temp: f64, w: Rc<Vec<f64>>) -> Var {
        let sv = self.rc(scores);
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            let row = &sv[r * n..(r + 1) * n];
            let mut m = f64::NEG_INFINITY;
            for &s in row {
                m = m.max(s / temp);
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for c in 0..n {
                let e = (row[c] / temp - m).exp();
                orow[c] = e;
                z += w[c] * e;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gs = gr.accum(scores.0, n * n);
                for r in 0..n {
                    let yr = &y[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut inner = 0.0;
                    for c in 0..n {
                        inner += grow[c] * yr[c];
                    }
                    let gsr = &mut gs[r * n..(r + 1) * n];
                    for c in 0..n {
                        gsr[c] += yr[c] * (grow[c] - w[c] * inner) / temp;
                    }
                }
            })),
        )
    }

    /// Trapezoid-attended values: `out[t,:] = sum_b w_b A[t,b] V[b,:]` for a
    /// density matrix `A` (`n x n`) and values `V` (`n x d`).
    pub fn attend(&mut self, dens: Var, v: Var, n: usize, d: usize, w: Rc<Vec<f64>>) -> Var {
        let av = self.rc(dens);
        let vv = self.rc(v);
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let arow = &av[t * n..(t + 1) * n];
            let orow = &mut out[t * d..(t + 1) * d];
            for b in 0..n {
                let c = w[b] * arow[b];
                if c == 0.0 {
                    continue;
                }
                let vrow = &vv[b * d..(b + 1) * d];
                for j in 0..d {
                    orow[j] += c * vrow[j];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let ga = gr.accum(dens.0, n * n);
                    for t in 0..n {
                        let grow = &g[t * d..(t + 1) * d];
                        let gar = &mut ga[t * n..(t + 1) * n];
                        for b in 0..n {
                            let vrow = &vv[b * d..(b + 1) * d];
                            let mut acc = 0.0;
                            for j in 0..d {
                                acc += grow[j] * vrow[j];
                            }
                            gar[b] += w[b] * acc;
                        }
                    }
                }
                let gv = gr.accum(v.0, n * d);
                for t in 0..n {
                    let arow = &av[t * n..(t + 1) * n];
                    let grow = &g[t * d..(t + 1) * d];
                    for b in 0..n {
                        let c = w[b] * arow[b];
                        if c == 0.0 {
                            continue;
                        }
                        let gvr = &mut gv[b * d..(b + 1) * d];
                        for j in 0..d {
                            gvr[j] += c * grow[j];
                        }
                    }
                }
            })),
        )
    }

    /// `A B^T` for `A` (`n x k`) and `B` (`m x k`), returning `n x m`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, n: usize, k: usize, m: usize) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        debug_assert_eq!(av.len(), n * k);
        debug_assert_eq!(bv.len(), m * k);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for c in 0..k {
                    acc += arow[c] * brow[c];
                }
                orow[j] = acc;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let ga = gr.accum(a.0, n * k);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        let gar = &mut ga[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gij = grow[j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for c in 0..k {
                                gar[c] += gij * brow[c];
                            }
                        }
                    }
                }
                let gb = gr.accum(b.0, m * k);
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gij = grow[j];
                        if gij == 0.0 {
                            continue;
                        }
                        let gbr = &mut gb[j * k..(j + 1) * k];
                        for c in 0..k {
                            gbr[c] += gij * arow[c];
                        }
                    }
                }
            })),
        )
    }

    /// Row-wise inner products of two `n x k` matrices, returning `n`.
    pub fn row_dot(&mut self, a: Var, b: Var, n: usize, k: usize) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..k {
                acc += av[i * k + c] * bv[i * k + c];
            }
            out[i] = acc;
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let ga = gr.accum(a.0, n * k);
                    for i in 0..n {
                        let gi = g[i];
                        for c in 0..k {
                            ga[i * k + c] += gi * bv[i * k + c];
                        }
                    }
                }
                let gb = gr.accum(b.0, n * k);
                for i in 0..n {
                    let gi = g[i];
                    for c in 0..k {
                        gb[i * k + c] += gi * av[i * k + c];
                    }
                }
            })),
        )
    }

    /// Horizontal concatenation of matrices sharing `rows`; `parts[i]` has
    /// width `widths[i]`.
    pub fn concat_cols(&mut self, parts: &[Var], widths: &[usize], rows: usize) -> Var {
        let total: usize = widths.iter().sum();
        let vals: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(widths) {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths: Vec<usize> = widths.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for r in 0..rows {
                    let mut off = 0;
                    for (&id, &w) in ids.iter().zip(&widths) {
                        let gp = gr.accum(id, rows * w);
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + off + c];
                        }
                        off += w;
                    }
                }
            })),
        )
    }

    /// Stack `n` vectors of length `dim` into an `n x dim` matrix.
    pub fn stack_rows(&mut self, parts: &[Var], dim: usize) -> Var {
        let n = parts.len();
        let mut out = vec![0.0; n * dim];
        for (r, p) in parts.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(self.val(*p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for (r, &id) in ids.iter().enumerate() {
                    let gp = gr.accum(id, dim);
                    for c in 0..dim {
                        gp[c] += g[r * dim + c];
                    }
                }
            })),
        )
    }

    /// Bidirectional stack: row `k` is `[fwd[k] || bwd[n-1-k]]`, re-indexing
    /// the reversed-time solve back to original time.
    pub fn stack_bidir(&mut self, fwd: &[Var], bwd: &[Var], h: usize) -> Var {
        let n = fwd.len();
        debug_assert_eq!(bwd.len(), n);
        let mut out = vec![0.0; n * 2 * h];
        for k in 0..n {
            out[k * 2 * h..k * 2 * h + h].copy_from_slice(self.val(fwd[k]));
            out[k * 2 * h + h..(k + 1) * 2 * h].copy_from_slice(self.val(bwd[n - 1 - k]));
        }
        let fids: Vec<usize> = fwd.iter().map(|p| p.0).collect();
        let bids: Vec<usize> = bwd.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for k in 0..n {
                    {
                        let gf = gr.accum(fids[k], h);
                        for c in 0..h {
                            gf[c] += g[k * 2 * h + c];
                        }
                    }
                    let gb = gr.accum(bids[n - 1 - k], h);
                    for c in 0..h {
                        gb[c] += g[k * 2 * h + h + c];
                    }
                }
            })),
        )
    }

    /// Successive row differences of an `n x d` matrix: `(n-1) x d`.
    pub fn row_diff(&mut self, m: Var, n: usize, d: usize) -> Var {
        let mv = self.rc(m);
        let mut out = vec![0.0; (n - 1) * d];
        for k in 0..n - 1 {
            for c in 0..d {
                out[k * d + c] = mv[(k + 1) * d + c] - mv[k * d + c];
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gm = gr.accum(m.0, n * d);
                for k in 0..n - 1 {
                    for c in 0..d {
                        let gi = g[k * d + c];
                        gm[(k + 1) * d + c] += gi;
                        gm[k * d + c] -= gi;
                    }
                }
            })),
        )
    }

    /// Extract row `r` of an `n x d` matrix.
    pub fn slice_row(&mut self, m: Var, r: usize, n: usize, d: usize) -> Var {
        debug_assert!(r < n);
        let out = self.val(m)[r * d..(r + 1) * d].to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gm = gr.accum(m.0, n * d);
                for c in 0..d {
                    gm[r * d + c] += g[c];
                }
            })),
        )
    }

    /// One Stieltjes-Euler step `z' = z + F * ctrl`, with
    /// `ctrl = [dxv_scale * dxv || tail]`. `F` is `sd x cd` row-major where
    /// `cd = len(dxv) + len(tail)`; `tail` holds constant control increments
    /// (the time channel, and the data channel when it is not a tape node).
    pub fn cde_step(
        &mut self,
        z: Var,
        field: Var,
        sd: usize,
        dxv: Option<Var>,
        dxv_scale: f64,
        tail: &[f64],
    ) -> Var {
        let zv = self.rc(z);
        let fv = self.rc(field);
        let dv = dxv.map(|v| self.rc(v));
        let vd = dv.as_ref().map_or(0, |d| d.len());
        let cd = vd + tail.len();
        debug_assert_eq!(fv.len(), sd * cd);
        let mut ctrl = Vec::with_capacity(cd);
        if let Some(d) = &dv {
            ctrl.extend(d.iter().map(|x| dxv_scale * x));
        }
        ctrl.extend_from_slice(tail);
        let mut out = zv.as_ref().clone();
        for i in 0..sd {
            let frow = &fv[i * cd..(i + 1) * cd];
            let mut acc = 0.0;
            for j in 0..cd {
                acc += frow[j] * ctrl[j];
            }
            out[i] += acc;
        }
        let dxv_id = dxv.map(|v| v.0);
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let gz = gr.accum(z.0, sd);
                    for i in 0..sd {
                        gz[i] += g[i];
                    }
                }
                {
                    let gf = gr.accum(field.0, sd * cd);
                    for i in 0..sd {
                        let gi = g[i];
                        let gfr = &mut gf[i * cd..(i + 1) * cd];
                        for j in 0..cd {
                            gfr[j] += gi * ctrl[j];
                        }
                    }
                }
                if let Some(id) = dxv_id {
                    let gd = gr.accum(id, vd);
                    for j in 0..vd {
                        let mut acc = 0.0;
                        for i in 0..sd {
                            acc += g[i] * fv[i * cd + j];
                        }
                        gd[j] += dxv_scale * acc;
                    }
                }
            })),
        )
    }

    /// Convex (or affine) mixture `sum_k coeffs[k] * items[k]`.
    pub fn mix(&mut self, coeffs: Var, items: &[Var], len: usize) -> Var {
        let cv = self.rc(coeffs);
        let vals: Vec<Rc<Vec<f64>>> = items.iter().map(|p| self.rc(*p)).collect();
        debug_assert_eq!(cv.len(), items.len());
        let mut out = vec![0.0; len];
        for (k, v) in vals.iter().enumerate() {
            let c = cv[k];
            for i in 0..len {
                out[i] += c * v[i];
            }
        }
        let ids: Vec<usize> = items.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let gc = gr.accum(coeffs.0, ids.len());
                    for (k, v) in vals.iter().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..len {
                            acc += g[i] * v[i];
                        }
                        gc[k] += acc;
                    }
                }
                for (k, &id) in ids.iter().enumerate() {
                    let c = cv[k];
                    let gi = gr.accum(id, len);
                    for i in 0..len {
                        gi[i] += c * g[i];
                    }
                }
            })),
        )
    }

    /// Per-row mixtures: `out[t,:] = sum_l W[t,l] * items[l][t,:]` where `W`
    /// is `n x d` and each item is `n x w`.
    pub fn mix_rows(&mut self, weights: Var, items: &[Var], n: usize, d: usize, w: usize) -> Var {
        let wv = self.rc(weights);
        let vals: Vec<Rc<Vec<f64>>> = items.iter().map(|p| self.rc(*p)).collect();
        debug_assert_eq!(vals.len(), d);
        let mut out = vec![0.0; n * w];
        for t in 0..n {
            let orow = &mut out[t * w..(t + 1) * w];
            for (l, v) in vals.iter().enumerate() {
                let c = wv[t * d + l];
                let vrow = &v[t * w..(t + 1) * w];
                for j in 0..w {
                    orow[j] += c * vrow[j];
                }
            }
        }
        let ids: Vec<usize> = items.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let gw = gr.accum(weights.0, n * d);
                    for t in 0..n {
                        let grow = &g[t * w..(t + 1) * w];
                        for (l, v) in vals.iter().enumerate() {
                            let vrow = &v[t * w..(t + 1) * w];
                            let mut acc = 0.0;
                            for j in 0..w {
                                acc += grow[j] * vrow[j];
                            }
                            gw[t * d + l] += acc;
                        }
                    }
                }
                for (l, &id) in ids.iter().enumerate() {
                    let gitem = gr.accum(id, n * w);
                    for t in 0..n {
                        let c = wv[t * d + l];
                        let grow = &g[t * w..(t + 1) * w];
                        for j in 0..w {
                            gitem[t * w + j] += c * grow[j];
                        }
                    }
                }
            })),
        )
    }

    /// Elementwise mask multiply (inverted-dropout entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Rc<Vec<f64>>) -> Var {
        let out: Vec<f64> = self.val(x).iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let n = out.len();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gx = gr.accum(x.0, n);
                for i in 0..n {
                    gx[i] += g[i] * mask[i];
                }
            })),
        )
    }

    /// Linear interpolation `(1 - alpha) a + alpha b`.
    pub fn lerp(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
            .collect();
        let n = out.len();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                {
                    let ga = gr.accum(a.0, n);
                    for i in 0..n {
                        ga[i] += (1.0 - alpha) * g[i];
                    }
                }
                let gb = gr.accum(b.0, n);
                for i in 0..n {
                    gb[i] += alpha * g[i];
                }
            })),
        )
    }

    /// Mean of squared residuals over `(prediction node, component, target)`
    /// entries.
    pub fn mse_entries(&mut self, entries: &[(Var, usize, f64)]) -> Var {
        let n = entries.len();
        let vals: Vec<Rc<Vec<f64>>> = entries.iter().map(|(v, _, _)| self.rc(*v)).collect();
        let mut loss = 0.0;
        for ((_, comp, target), v) in entries.iter().zip(&vals) {
            let r = v[*comp] - target;
            loss += r * r;
        }
        loss /= n as f64;
        let items: Vec<(usize, usize, f64, usize)> = entries
            .iter()
            .map(|(v, comp, target)| (v.0, *comp, *target, self.vals[v.0].len()))
            .collect();
        self.push(
            vec![loss],
            Some(Box::new(move |g, gr| {
                let s = 2.0 * g[0] / n as f64;
                for ((id, comp, target, len), v) in items.iter().zip(&vals) {
                    let gp = gr.accum(*id, *len);
                    gp[*comp] += s * (v[*comp] - target);
                }
            })),
        )
    }

    /// Reverse sweep from a scalar seed node; returns the cotangent buffers.
    pub fn backward(&self, seed: Var) -> Result<Grads> {
        if seed.0 >= self.vals.len() {
            return Err(FameError::Config(format!(
                "backward seed {} is not a recorded node (tape has {})",
                seed.0,
                self.vals.len()
            )));
        }
        if self.vals[seed.0].len() != 1 {
            return Err(FameError::Dimension {
                context: "backward seed",
                expected: 1,
                got: self.vals[seed.0].len(),
            });
        }
        let mut grads = Grads { slots: vec![None; self.vals.len()] };
        grads.slots[seed.0] = Some(vec![1.0]);
        for id in (0..=seed.0).rev() {
            if self.backs[id].is_none() {
                continue;
            }
            let Some(g) = grads.slots[id].take() else { continue };
            (self.backs[id].as_ref().unwrap())(&g, &mut grads);
        }
        Ok(grads)
    }
}
