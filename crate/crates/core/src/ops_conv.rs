//! 1D convolution with same padding, stride 1/2 and channel groups.
//! Cross-correlation semantics (no kernel flip); output length `ceil(T/stride)`.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

impl Graph {
    /// `x [B,Cin,T]`, `w [Cout, Cin/groups, K]`, odd `K`, stride in {1,2}.
    pub fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (b, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, cg, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv1d stride must be 1 or 2, got {stride}")));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv1d channels ({cin} in, {cout} out) not divisible by groups ({groups})"
            )));
        }
        if cg != cin / groups {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(bt) = bias {
            if bt.numel() != cout {
                return Err(Error::Shape {
                    op: "conv1d",
                    lhs: vec![cout],
                    rhs: bt.shape().to_vec(),
                });
            }
        }
        let pad = (k - 1) / 2;
        let to = (t - 1) / stride + 1; // ceil(t / stride)
        let mut out = vec![0.0; b * cout * to];
        {
            let xd = x.data();
            let wd = w.data();
            let cout_g = cout / groups;
            for bi in 0..b {
                for co in 0..cout {
                    let gi = co / cout_g;
                    let obase = (bi * cout + co) * to;
                    for ci in 0..cg {
                        let xin = gi * cg + ci;
                        let xbase = (bi * cin + xin) * t;
                        let wbase = (co * cg + ci) * k;
                        for kk in 0..k {
                            let wv = wd[wbase + kk];
                            if wv == 0.0 {
                                continue;
                            }
                            // ti = to*stride + kk - pad
                            let off = kk as isize - pad as isize;
                            for oi in 0..to {
                                let ti = oi as isize * stride as isize + off;
                                if ti >= 0 && (ti as usize) < t {
                                    out[obase + oi] += wv * xd[xbase + ti as usize];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bt) = bias {
                let bd = bt.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let obase = (bi * cout + co) * to;
                        for oi in 0..to {
                            out[obase + oi] += bd[co];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(out, &[b, cout, to]);
        let (rx, rw) = (x.requires_grad(), w.requires_grad());
        let rb = bias.map(|t| t.requires_grad()).unwrap_or(false);
        let has_bias = bias.is_some();
        let (xc, wc) = (x.clone(), w.clone());
        let mut inputs = vec![x, w];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        Ok(self.record(&inputs, out, move |g| {
            let cout_g = cout / groups;
            let dx = rx.then(|| {
                let wd = wc.data();
                let mut d = vec![0.0; b * cin * t];
                for bi in 0..b {
                    for co in 0..cout {
                        let gi = co / cout_g;
                        let obase = (bi * cout + co) * to;
                        for ci in 0..cg {
                            let xin = gi * cg + ci;
                            let xbase = (bi * cin + xin) * t;
                            let wbase = (co * cg + ci) * k;
                            for kk in 0..k {
                                let wv = wd[wbase + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                let off = kk as isize - pad as isize;
                                for oi in 0..to {
                                    let ti = oi as isize * stride as isize + off;
                                    if ti >= 0 && (ti as usize) < t {
                                        d[xbase + ti as usize] += wv * g[obase + oi];
                                    }
                                }
                            }
                        }
                    }
                }
                d
            });
            let dw = rw.then(|| {
                let xd = xc.data();
                let mut d = vec![0.0; cout * cg * k];
                for bi in 0..b {
                    for co in 0..cout {
                        let gi = co / cout_g;
                        let obase = (bi * cout + co) * to;
                        for ci in 0..cg {
                            let xin = gi * cg + ci;
                            let xbase = (bi * cin + xin) * t;
                            let wbase = (co * cg + ci) * k;
                            for kk in 0..k {
                                let off = kk as isize - pad as isize;
                                let mut acc = 0.0;
                                for oi in 0..to {
                                    let ti = oi as isize * stride as isize + off;
                                    if ti >= 0 && (ti as usize) < t {
                                        acc += g[obase + oi] * xd[xbase + ti as usize];
                                    }
                                }
                                d[wbase + kk] += acc;
                            }
                        }
                    }
                }
                d
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(rb.then(|| {
                    let mut d = vec![0.0; cout];
                    for bi in 0..b {
                        for co in 0..cout {
                            let obase = (bi * cout + co) * to;
                            for oi in 0..to {
                                d[co] += g[obase + oi];
                            }
                        }
                    }
                    d
                }));
            }
            grads
        }))
    }
}
