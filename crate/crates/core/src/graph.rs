//! Reverse-mode autodiff tape. Ops are methods on [`Graph`]; each records one
//! node (inputs, output, backward closure) when grads are enabled and any
//! input requires them. `backward` sweeps the tape once in reverse and
//! accumulates leaf gradients into the tensors themselves.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Given dL/d(output), produce dL/d(input) per input (None = not needed).
pub(crate) type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Tensor>,
    back: BackFn,
}

pub struct Graph {
    nodes: Vec<Node>,
    producer: HashMap<u64, usize>,
    enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph for training / gradient checks.
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            producer: HashMap::new(),
            enabled: true,
        }
    }

    /// Non-recording graph for decoding and other forward-only passes.
    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            producer: HashMap::new(),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn record(
        &mut self,
        inputs: &[&Tensor],
        output: Tensor,
        back: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        if self.enabled && inputs.iter().any(|t| t.requires_grad()) {
            output.set_requires_grad(true);
            self.producer.insert(output.id(), self.nodes.len());
            self.nodes.push(Node {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                back: Box::new(back),
            });
        }
        output
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once in
    /// reverse topological order; leaves accumulate into `Tensor::grad`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        match self.producer.get(&loss.id()) {
            Some(&ix) => grads[ix] = Some(vec![1.0]),
            None => {
                // Loss is itself a leaf; nothing upstream of it.
                if loss.requires_grad() {
                    loss.accumulate_grad(&[1.0]);
                }
                return Ok(());
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let input_grads = (node.back)(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), input.numel());
                if let Some(&j) = self.producer.get(&input.id()) {
                    match grads[j].as_mut() {
                        Some(buf) => {
                            for (a, b) in buf.iter_mut().zip(&ig) {
                                *a += b;
                            }
                        }
                        None => grads[j] = Some(ig),
                    }
                } else if input.requires_grad() {
                    input.accumulate_grad(&ig);
                }
            }
        }
        Ok(())
    }
}

/// Per-forward context threaded through every layer: the tape, the mode
/// flags, and the noise stream for dropout / augmentation.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub train: bool,
    /// Batch-norm running statistics update; off during gradient checks so
    /// repeated forwards of the same batch stay deterministic.
    pub update_stats: bool,
    pub rng: &'a mut Rng,
}

impl<'a> Ctx<'a> {
    pub fn training(graph: &'a mut Graph, rng: &'a mut Rng) -> Ctx<'a> {
        Ctx {
            graph,
            train: true,
            update_stats: true,
            rng,
        }
    }

    pub fn eval(graph: &'a mut Graph, rng: &'a mut Rng) -> Ctx<'a> {
        Ctx {
            graph,
            train: false,
            update_stats: false,
            rng,
        }
    }
}

// ── Elementwise ops ─────────────────────────────────────────────────────────

impl Graph {
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(out, a.shape());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        self.record(&[a, b], out, move |g| {
            vec![
                ra.then(|| g.to_vec()),
                rb.then(|| g.to_vec()),
            ]
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(out, a.shape());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        self.record(&[a, b], out, move |g| {
            vec![
                ra.then(|| g.to_vec()),
                rb.then(|| g.iter().map(|v| -v).collect()),
            ]
        })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(out, a.shape());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&[a, b], out, move |g| {
            vec![
                ra.then(|| g.iter().zip(bc.data().iter()).map(|(gv, bv)| gv * bv).collect()),
                rb.then(|| g.iter().zip(ac.data().iter()).map(|(gv, av)| gv * av).collect()),
            ]
        })
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(out, x.shape());
        self.record(&[x], out, move |g| vec![Some(g.iter().map(|v| v * c).collect())])
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(out, x.shape());
        let xc = x.clone();
        self.record(&[x], out, move |g| {
            let xd = xc.data();
            vec![Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let out = Tensor::new(out, x.shape());
        let yc = out.clone();
        self.record(&[x], out, move |g| {
            let yd = yc.data();
            vec![Some(
                g.iter().zip(yd.iter()).map(|(gv, &y)| gv * y * (1.0 - y)).collect(),
            )]
        })
    }

    /// Self-gated activation `x * sigmoid(x)`.
    pub fn swish(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data().iter().map(|&v| v * stable_sigmoid(v)).collect();
        let out = Tensor::new(out, x.shape());
        let xc = x.clone();
        self.record(&[x], out, move |g| {
            let xd = xc.data();
            vec![Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(gv, &xv)| {
                        let s = stable_sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect(),
            )]
        })
    }

    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let out = Tensor::scalar(total);
        let n = x.numel();
        self.record(&[x], out, move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = x.numel();
        let total: f64 = x.data().iter().sum();
        let out = Tensor::scalar(total / n as f64);
        self.record(&[x], out, move |g| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// Inverted dropout with seeded mask; identity when not training or p=0.
    pub fn dropout(&mut self, ctx_train: bool, rng: &mut Rng, x: &Tensor, p: f64) -> Tensor {
        if !ctx_train || p <= 0.0 {
            return x.clone();
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| {
                if rand::Rng::gen::<f64>(rng) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(out, x.shape());
        self.record(&[x], out, move |g| {
            vec![Some(g.iter().zip(&mask).map(|(gv, m)| gv * m).collect())]
        })
    }

    /// Elementwise multiply by a constant 0/1 (or arbitrary) mask.
    pub(crate) fn mul_mask(&mut self, x: &Tensor, mask: std::rc::Rc<Vec<f64>>) -> Tensor {
        assert_eq!(mask.len(), x.numel());
        let out: Vec<f64> = x.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let out = Tensor::new(out, x.shape());
        self.record(&[x], out, move |g| {
            vec![Some(g.iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect())]
        })
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
