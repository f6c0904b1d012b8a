//! Normalization ops: layer norm over the last axis and masked 1D batch norm
//! whose statistics cover only valid (unpadded) frames.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

impl Graph {
    /// Layer norm over the last axis of `x [..., d]` with affine params.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("layer_norm on rank-0");
        assert_eq!(gamma.numel(), d);
        assert_eq!(beta.numel(), d);
        let rows = x.numel() / d;
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::new(out, &shape);
        let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let gc = gamma.clone();
        self.record(&[x, gamma, beta], out, move |g| {
            let dgam = rg.then(|| {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                dg
            });
            let dbet = rb.then(|| {
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
                db
            });
            let dx = rx.then(|| {
                let gd = gc.data();
                let mut d_in = vec![0.0; rows * d];
                for r in 0..rows {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[r * d + j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gd[j];
                        d_in[r * d + j] = rstd[r]
                            * (dxh - sum_dxh * inv_d - xhat[r * d + j] * sum_dxh_xh * inv_d);
                    }
                }
                d_in
            });
            vec![dx, dgam, dbet]
        })
    }

    /// Batch norm over `x [B,C,T]`. In train mode statistics cover only the
    /// first `valid[b]` frames of each item; running stats get a
    /// `0.9*old + 0.1*batch` update when `update_stats` is set. Eval mode
    /// normalizes with the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        valid: &[usize],
        train: bool,
        update_stats: bool,
        eps: f64,
    ) -> Result<Tensor> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3, "batch_norm1d expects [B,C,T]");
        let (b, c, t) = (s[0], s[1], s[2]);
        assert_eq!(valid.len(), b);
        assert_eq!(gamma.numel(), c);
        assert_eq!(beta.numel(), c);
        let n_valid: usize = valid.iter().sum();
        if train && n_valid == 0 {
            return Err(Error::Input("batch_norm1d: no valid frames in batch".into()));
        }
        let (mean, var) = if train {
            let xd = x.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * t;
                    for ti in 0..valid[bi] {
                        acc += xd[base + ti];
                    }
                }
                mean[ci] = acc / n_valid as f64;
            }
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * t;
                    for ti in 0..valid[bi] {
                        let dv = xd[base + ti] - mean[ci];
                        acc += dv * dv;
                    }
                }
                var[ci] = acc / n_valid as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        if train && update_stats {
            running_mean.with_data_mut(|rm| {
                for ci in 0..c {
                    rm[ci] = 0.9 * rm[ci] + 0.1 * mean[ci];
                }
            });
            running_var.with_data_mut(|rv| {
                for ci in 0..c {
                    rv[ci] = 0.9 * rv[ci] + 0.1 * var[ci];
                }
            });
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; b * c * t];
        let mut xhat = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    let xh = (xd[base + ti] - mean[ci]) * rstd[ci];
                    xhat[base + ti] = xh;
                    out[base + ti] = xh * gd[ci] + bd[ci];
                }
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::new(out, &s);
        let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let gc = gamma.clone();
        let valid = valid.to_vec();
        Ok(self.record(&[x, gamma, beta], out, move |g| {
            let dgam = rg.then(|| {
                let mut dg = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            dg[ci] += g[base + ti] * xhat[base + ti];
                        }
                    }
                }
                dg
            });
            let dbet = rb.then(|| {
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            db[ci] += g[base + ti];
                        }
                    }
                }
                db
            });
            let dx = rx.then(|| {
                let gd = gc.data();
                let mut d_in = vec![0.0; b * c * t];
                if !train {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                d_in[base + ti] = g[base + ti] * gd[ci] * rstd[ci];
                            }
                        }
                    }
                    return_dx(d_in)
                } else {
                    // Statistics come from the valid set; every output position
                    // (padded ones included) depends on them, so the mean terms
                    // sum g over all positions but only feed back into valid x.
                    let inv_n = 1.0 / n_valid as f64;
                    for ci in 0..c {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for bi in 0..b {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                let dxh = g[base + ti] * gd[ci];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[base + ti];
                            }
                        }
                        for bi in 0..b {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                let dxh = g[base + ti] * gd[ci];
                                let correction = if ti < valid[bi] {
                                    (sum_dxh + xhat[base + ti] * sum_dxh_xh) * inv_n
                                } else {
                                    0.0
                                };
                                d_in[base + ti] = rstd[ci] * (dxh - correction);
                            }
                        }
                    }
                    return_dx(d_in)
                }
            });
            vec![dx, dgam, dbet]
        }))
    }
}

fn return_dx(v: Vec<f64>) -> Vec<f64> {
    v
}
