//! Linear-algebra and shape ops on the tape: matmul/linear, batched matmul,
//! transposes, head split/merge, embedding lookup, softmax family, and the
//! broadcast helpers the attention and SE modules need.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// out[m,n] += sum_k a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += sum_k a[m,k] * b[n,k]   (b transposed)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += sum_m a[m,k] * b[m,n]   (a transposed)
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Graph {
    /// Standard matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(&a.data(), &b.data(), m, k, n, &mut out);
        let out = Tensor::new(out, &[m, n]);
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.record(&[a, b], out, move |g| {
            let da = ra.then(|| {
                let mut d = vec![0.0; m * k];
                mm_nt(g, &bc.data(), m, n, k, &mut d);
                d
            });
            let db = rb.then(|| {
                let mut d = vec![0.0; k * n];
                mm_tn(&ac.data(), g, m, k, n, &mut d);
                d
            });
            vec![da, db]
        }))
    }

    /// Affine map over the last axis: `x [..., din] x w [din, dout] + b`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let shape = x.shape().to_vec();
        let din = *shape.last().expect("linear on rank-0 tensor");
        assert_eq!(w.shape().len(), 2);
        assert_eq!(w.shape()[0], din, "linear: input dim mismatch");
        let dout = w.shape()[1];
        let rows = x.numel() / din;
        let mut out = vec![0.0; rows * dout];
        mm_nn(&x.data(), &w.data(), rows, din, dout, &mut out);
        if let Some(bias) = b {
            assert_eq!(bias.numel(), dout);
            let bd = bias.data();
            for r in 0..rows {
                for j in 0..dout {
                    out[r * dout + j] += bd[j];
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        let out = Tensor::new(out, &out_shape);
        let (rx, rw) = (x.requires_grad(), w.requires_grad());
        let rb = b.map(|t| t.requires_grad()).unwrap_or(false);
        let (xc, wc) = (x.clone(), w.clone());
        let mut inputs = vec![x, w];
        if let Some(bias) = b {
            inputs.push(bias);
        }
        let has_bias = b.is_some();
        self.record(&inputs, out, move |g| {
            let dx = rx.then(|| {
                let mut d = vec![0.0; rows * din];
                mm_nt(g, &wc.data(), rows, dout, din, &mut d);
                d
            });
            let dw = rw.then(|| {
                let mut d = vec![0.0; din * dout];
                mm_tn(&xc.data(), g, rows, din, dout, &mut d);
                d
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(rb.then(|| {
                    let mut d = vec![0.0; dout];
                    for r in 0..rows {
                        for j in 0..dout {
                            d[j] += g[r * dout + j];
                        }
                    }
                    d
                }));
            }
            grads
        })
    }

    /// Batched matmul `[G,M,K] x [G,K,N] -> [G,M,N]`.
    pub fn bmm_nn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm_nn",
                lhs: sa,
                rhs: sb,
            });
        }
        let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; gn * m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            for gi in 0..gn {
                mm_nn(
                    &ad[gi * m * k..(gi + 1) * m * k],
                    &bd[gi * k * n..(gi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(out, &[gn, m, n]);
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.record(&[a, b], out, move |g| {
            let da = ra.then(|| {
                let mut d = vec![0.0; gn * m * k];
                let bd = bc.data();
                for gi in 0..gn {
                    mm_nt(
                        &g[gi * m * n..(gi + 1) * m * n],
                        &bd[gi * k * n..(gi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut d[gi * m * k..(gi + 1) * m * k],
                    );
                }
                d
            });
            let db = rb.then(|| {
                let mut d = vec![0.0; gn * k * n];
                let ad = ac.data();
                for gi in 0..gn {
                    mm_tn(
                        &ad[gi * m * k..(gi + 1) * m * k],
                        &g[gi * m * n..(gi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut d[gi * k * n..(gi + 1) * k * n],
                    );
                }
                d
            });
            vec![da, db]
        }))
    }

    /// Batched matmul with transposed rhs: `[G,M,K] x [G,N,K] -> [G,M,N]`.
    pub fn bmm_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; gn * m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            for gi in 0..gn {
                mm_nt(
                    &ad[gi * m * k..(gi + 1) * m * k],
                    &bd[gi * n * k..(gi + 1) * n * k],
                    m,
                    k,
                    n,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(out, &[gn, m, n]);
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.record(&[a, b], out, move |g| {
            // out = a b^T  =>  da = g b ; db = g^T a
            let da = ra.then(|| {
                let mut d = vec![0.0; gn * m * k];
                let bd = bc.data();
                for gi in 0..gn {
                    mm_nn(
                        &g[gi * m * n..(gi + 1) * m * n],
                        &bd[gi * n * k..(gi + 1) * n * k],
                        m,
                        n,
                        k,
                        &mut d[gi * m * k..(gi + 1) * m * k],
                    );
                }
                d
            });
            let db = rb.then(|| {
                let mut d = vec![0.0; gn * n * k];
                let ad = ac.data();
                for gi in 0..gn {
                    mm_tn(
                        &g[gi * m * n..(gi + 1) * m * n],
                        &ad[gi * m * k..(gi + 1) * m * k],
                        m,
                        n,
                        k,
                        &mut d[gi * n * k..(gi + 1) * n * k],
                    );
                }
                d
            });
            vec![da, db]
        }))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3, "transpose12 expects rank 3");
        let (b, m, n) = (s[0], s[1], s[2]);
        let xd = x.data();
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[bi * m * n + j * m + i] = xd[bi * m * n + i * n + j];
                }
            }
        }
        drop(xd);
        let out = Tensor::new(out, &[b, n, m]);
        self.record(&[x], out, move |g| {
            let mut d = vec![0.0; b * m * n];
            for bi in 0..b {
                for i in 0..m {
                    for j in 0..n {
                        d[bi * m * n + i * n + j] = g[bi * m * n + j * m + i];
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Data-preserving reshape (copies).
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, x.numel(), "reshape: element count mismatch");
        let out = Tensor::new(x.to_vec(), shape);
        self.record(&[x], out, move |g| vec![Some(g.to_vec())])
    }

    /// `[B,T,d] -> [B*h, T, d/h]` for per-head attention math.
    pub fn split_heads(&mut self, x: &Tensor, heads: usize) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(d % heads, 0);
        let dk = d / heads;
        let xd = x.data();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    for j in 0..dk {
                        out[((bi * heads + h) * t + ti) * dk + j] = xd[(bi * t + ti) * d + h * dk + j];
                    }
                }
            }
        }
        drop(xd);
        let out = Tensor::new(out, &[b * heads, t, dk]);
        self.record(&[x], out, move |g| {
            let mut d_in = vec![0.0; b * t * d];
            for bi in 0..b {
                for h in 0..heads {
                    for ti in 0..t {
                        for j in 0..dk {
                            d_in[(bi * t + ti) * d + h * dk + j] = g[((bi * heads + h) * t + ti) * dk + j];
                        }
                    }
                }
            }
            vec![Some(d_in)]
        })
    }

    /// Inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: &Tensor, heads: usize) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0] % heads, 0);
        let (b, t, dk) = (s[0] / heads, s[1], s[2]);
        let d = dk * heads;
        let xd = x.data();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    for j in 0..dk {
                        out[(bi * t + ti) * d + h * dk + j] = xd[((bi * heads + h) * t + ti) * dk + j];
                    }
                }
            }
        }
        drop(xd);
        let out = Tensor::new(out, &[b, t, d]);
        self.record(&[x], out, move |g| {
            let mut d_in = vec![0.0; b * heads * t * dk];
            for bi in 0..b {
                for h in 0..heads {
                    for ti in 0..t {
                        for j in 0..dk {
                            d_in[((bi * heads + h) * t + ti) * dk + j] = g[(bi * t + ti) * d + h * dk + j];
                        }
                    }
                }
            }
            vec![Some(d_in)]
        })
    }

    /// Table lookup: `ids [B,L]` into `table [V,d]` -> `[B,L,d]`.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize], b: usize, l: usize) -> Result<Tensor> {
        assert_eq!(ids.len(), b * l);
        let s = table.shape().to_vec();
        assert_eq!(s.len(), 2);
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for embedding table of {v} rows"
            )));
        }
        let td = table.data();
        let mut out = vec![0.0; b * l * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        let out = Tensor::new(out, &[b, l, d]);
        let ids = ids.to_vec();
        Ok(self.record(&[table], out, move |g| {
            let mut dt = vec![0.0; v * d];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[r * d + j];
                }
            }
            vec![Some(dt)]
        }))
    }

    /// Add a constant `[L,d]` table (e.g. positional encodings) to every batch
    /// row of `x [B,L,d]`.
    pub fn add_pos(&mut self, x: &Tensor, pos: Rc<Vec<f64>>) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, l, d) = (s[0], s[1], s[2]);
        assert_eq!(pos.len(), l * d);
        let xd = x.data();
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for i in 0..l * d {
                out[bi * l * d + i] = xd[bi * l * d + i] + pos[i];
            }
        }
        drop(xd);
        let out = Tensor::new(out, &s);
        self.record(&[x], out, move |g| vec![Some(g.to_vec())])
    }

    /// Add a constant additive attention mask `[B,Tq,Tk]` to scores
    /// `[B*h,Tq,Tk]`, broadcast over heads.
    pub fn add_attn_mask(&mut self, scores: &Tensor, mask: Rc<Vec<f64>>, heads: usize) -> Tensor {
        let s = scores.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0] % heads, 0);
        let (b, tq, tk) = (s[0] / heads, s[1], s[2]);
        assert_eq!(mask.len(), b * tq * tk);
        let sd = scores.data();
        let mut out = vec![0.0; s.iter().product()];
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * tq * tk;
                let mbase = bi * tq * tk;
                for i in 0..tq * tk {
                    out[base + i] = sd[base + i] + mask[mbase + i];
                }
            }
        }
        drop(sd);
        let out = Tensor::new(out, &s);
        self.record(&[scores], out, move |g| vec![Some(g.to_vec())])
    }

    /// Broadcast-multiply `x [B,C,T]` by per-channel gates `[B,C,1]`.
    pub fn mul_gate(&mut self, x: &Tensor, gate: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, c, t) = (s[0], s[1], s[2]);
        assert_eq!(gate.shape(), &[b, c, 1], "mul_gate: gate shape mismatch");
        let (xd, gd) = (x.data(), gate.data());
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let gv = gd[bi * c + ci];
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    out[base + ti] = xd[base + ti] * gv;
                }
            }
        }
        drop(xd);
        drop(gd);
        let out = Tensor::new(out, &s);
        let (rx, rg) = (x.requires_grad(), gate.requires_grad());
        let (xc, gc) = (x.clone(), gate.clone());
        self.record(&[x, gate], out, move |g| {
            let dx = rx.then(|| {
                let gd = gc.data();
                let mut d = vec![0.0; b * c * t];
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = gd[bi * c + ci];
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            d[base + ti] = g[base + ti] * gv;
                        }
                    }
                }
                d
            });
            let dg = rg.then(|| {
                let xd = xc.data();
                let mut d = vec![0.0; b * c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        let mut acc = 0.0;
                        for ti in 0..t {
                            acc += g[base + ti] * xd[base + ti];
                        }
                        d[bi * c + ci] = acc;
                    }
                }
                d
            });
            vec![dx, dg]
        })
    }

    /// Mean over valid time frames: `x [B,C,T]` -> `[B,C,1]`.
    pub fn mean_time(&mut self, x: &Tensor, valid: &[usize]) -> Result<Tensor> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, c, t) = (s[0], s[1], s[2]);
        assert_eq!(valid.len(), b);
        if valid.iter().any(|&v| v == 0) {
            return Err(Error::Input("mean_time: zero valid frames".into()));
        }
        assert!(valid.iter().all(|&v| v <= t));
        let xd = x.data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let v = valid[bi];
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                let mut acc = 0.0;
                for ti in 0..v {
                    acc += xd[base + ti];
                }
                out[bi * c + ci] = acc / v as f64;
            }
        }
        drop(xd);
        let out = Tensor::new(out, &[b, c, 1]);
        let valid = valid.to_vec();
        Ok(self.record(&[x], out, move |g| {
            let mut d = vec![0.0; b * c * t];
            for bi in 0..b {
                let v = valid[bi];
                for ci in 0..c {
                    let gv = g[bi * c + ci] / v as f64;
                    let base = (bi * c + ci) * t;
                    for ti in 0..v {
                        d[base + ti] = gv;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Zero every frame at or beyond each item's valid length.
    /// `time_axis` selects `[B,C,T]` (axis 2) or `[B,T,C]` (axis 1).
    pub fn mask_time(&mut self, x: &Tensor, valid: &[usize], time_axis: usize) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert!(time_axis == 1 || time_axis == 2);
        let b = s[0];
        assert_eq!(valid.len(), b);
        let mut mask = vec![1.0; x.numel()];
        match time_axis {
            2 => {
                let (c, t) = (s[1], s[2]);
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in valid[bi]..t {
                            mask[(bi * c + ci) * t + ti] = 0.0;
                        }
                    }
                }
            }
            _ => {
                let (t, c) = (s[1], s[2]);
                for bi in 0..b {
                    for ti in valid[bi]..t {
                        for ci in 0..c {
                            mask[(bi * t + ti) * c + ci] = 0.0;
                        }
                    }
                }
            }
        }
        self.mul_mask(x, Rc::new(mask))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Tensor {
        let (lanes, n, inner) = lane_layout(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for (o, i) in lane_iter(lanes, inner) {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(xd[idx(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (xd[idx(j)] - mx).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[idx(j)] /= z;
            }
        }
        drop(xd);
        let out = Tensor::new(out, x.shape());
        let yc = out.clone();
        self.record(&[x], out, move |g| {
            let yd = yc.data();
            let mut d = vec![0.0; yd.len()];
            for (o, i) in lane_iter(lanes, inner) {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut dot = 0.0;
                for j in 0..n {
                    dot += g[idx(j)] * yd[idx(j)];
                }
                for j in 0..n {
                    d[idx(j)] = yd[idx(j)] * (g[idx(j)] - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: &Tensor, axis: usize) -> Tensor {
        let (lanes, n, inner) = lane_layout(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for (o, i) in lane_iter(lanes, inner) {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(xd[idx(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (xd[idx(j)] - mx).exp();
            }
            let logz = mx + z.ln();
            for j in 0..n {
                out[idx(j)] = xd[idx(j)] - logz;
            }
        }
        drop(xd);
        let out = Tensor::new(out, x.shape());
        let yc = out.clone();
        self.record(&[x], out, move |g| {
            let yd = yc.data();
            let mut d = vec![0.0; yd.len()];
            for (o, i) in lane_iter(lanes, inner) {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut gsum = 0.0;
                for j in 0..n {
                    gsum += g[idx(j)];
                }
                for j in 0..n {
                    d[idx(j)] = g[idx(j)] - yd[idx(j)].exp() * gsum;
                }
            }
            vec![Some(d)]
        })
    }
}

fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "softmax axis out of range");
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn lane_iter(outer: usize, inner: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o, i)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = g.matmul(&i2, &a).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![1.0; 12], &[3, 4]);
        let y = g.matmul(&z, &b).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        match g.matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_two_class() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![0.3; 4], &[4]);
        let y = g.softmax(&x, 0);
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = Tensor::new(vec![0.0, 3.0f64.ln()], &[2]);
        let y = g.softmax(&x, 0);
        assert!((y.at(0) - 0.25).abs() < 1e-12);
        assert!((y.at(1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_no_overflow() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1000.0, 1000.0], &[2]);
        let y = g.softmax(&x, 0);
        assert!((y.at(0) - 0.5).abs() < 1e-15);
        assert!((y.at(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = Tensor::new(
            (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect(),
            &[2, 3, 4],
        );
        for axis in 0..3 {
            let y = g.softmax(&x, axis);
            let yd = y.to_vec();
            let (outer, n, inner) = super::lane_layout(x.shape(), axis);
            for (o, i) in super::lane_iter(outer, inner) {
                let s: f64 = (0..n).map(|j| yd[(o * n + j) * inner + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12, "axis {axis} sum {s}");
                assert!((0..n).all(|j| yd[(o * n + j) * inner + i] >= 0.0));
            }
        }
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            g.embedding(&table, &[0, 5], 1, 2),
            Err(Error::Input(_))
        ));
    }
}
