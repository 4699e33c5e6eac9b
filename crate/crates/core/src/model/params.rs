use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{Matrix, Rng, Vector};
use crate::rules::Arity;

use super::config::ModelConfig;

/// Affine gate projection `sigmoid(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateProjection {
    pub w: Matrix,
    pub b: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearMixer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub alpha: Option<GateProjection>,
    pub beta: Option<GateProjection>,
    pub beta_v: Option<GateProjection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMixer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Linear(LinearMixer),
    Attention(AttentionMixer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub norm_mixer: Vector,
    pub mixer: Mixer,
    pub norm_mlp: Vector,
    pub mlp: Mlp,
}

/// All trainable weights. The output head is tied to `embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub embedding: Matrix,
    pub layers: Vec<Layer>,
    pub norm_final: Vector,
}

/// Initial α at zero input.
pub const ALPHA_INIT: f64 = 0.95;
/// Initial β at zero input.
pub const BETA_INIT: f64 = 0.5;
/// Standard deviation of the tied embedding, small enough that the initial
/// logits are near uniform.
pub const EMBEDDING_STD: f64 = 0.02;

/// Output width of a gate projection with the given arity.
pub fn gate_width(arity: Arity, config: &ModelConfig) -> usize {
    match arity {
        Arity::Scalar => config.n_heads,
        Arity::Channels => config.d_model,
    }
}

fn dense(rng: &mut Rng, out: usize, fan_in: usize) -> Matrix {
    rng.normal_matrix(out, fan_in, 1.0 / math::sqrt(fan_in as f64))
}

fn gate(rng: &mut Rng, width: usize, d_model: usize, p0: f64) -> GateProjection {
    GateProjection {
        w: dense(rng, width, d_model),
        b: Vector::filled(width, math::logit(p0)),
    }
}

/// Deterministic initialization from `config.seed`: weights are
/// `N(0, 1/fan_in)`, norms are ones, gate biases put α and β at
/// [`ALPHA_INIT`] and [`BETA_INIT`] for zero input.
pub fn init_parameters(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let d = config.d_model;
    let hidden = config.mlp_hidden();
    let rule = config.rule;
    let embedding = root.split(0).normal_matrix(config.vocab_size, d, EMBEDDING_STD);
    let layers = (0..config.n_layers)
        .map(|l| {
            let mut rng = root.split(1 + l as u64);
            let mixer = if config.is_attention_layer(l) {
                Mixer::Attention(AttentionMixer {
                    w_q: dense(&mut rng, d, d),
                    w_k: dense(&mut rng, d, d),
                    w_v: dense(&mut rng, d, d),
                    w_o: dense(&mut rng, d, d),
                })
            } else {
                let w_q = dense(&mut rng, d, d);
                let w_k = dense(&mut rng, d, d);
                let w_v = dense(&mut rng, d, d);
                let w_o = dense(&mut rng, d, d);
                let alpha = rule
                    .alpha_arity()
                    .filter(|_| rule.alpha_is_learned())
                    .map(|a| gate(&mut rng, gate_width(a, config), d, ALPHA_INIT));
                let beta = rule
                    .beta_arity()
                    .map(|a| gate(&mut rng, gate_width(a, config), d, BETA_INIT));
                let beta_v = rule.has_beta_v().then(|| gate(&mut rng, d, d, BETA_INIT));
                Mixer::Linear(LinearMixer {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    alpha,
                    beta,
                    beta_v,
                })
            };
            Layer {
                norm_mixer: Vector::filled(d, 1.0),
                mixer,
                norm_mlp: Vector::filled(d, 1.0),
                mlp: Mlp {
                    w_gate: dense(&mut rng, hidden, d),
                    w_up: dense(&mut rng, hidden, d),
                    w_down: dense(&mut rng, d, hidden),
                },
            }
        })
        .collect();
    Ok(Parameters {
        embedding,
        layers,
        norm_final: Vector::filled(d, 1.0),
    })
}

/// Named tensor as seen by the optimizer and the checkpoint writer.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Parameters {
    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        fn m<'a>(out: &mut Vec<TensorRef<'a>>, name: String, x: &'a Matrix) {
            out.push(TensorRef {
                name,
                shape: vec![x.rows(), x.cols()],
                data: x.data(),
            });
        }
        fn v<'a>(out: &mut Vec<TensorRef<'a>>, name: String, x: &'a Vector) {
            out.push(TensorRef {
                name,
                shape: vec![x.len()],
                data: x,
            });
        }
        m(&mut out, String::from("embedding"), &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            v(&mut out, format!("layers.{i}.norm_mixer"), &layer.norm_mixer);
            match &layer.mixer {
                Mixer::Linear(x) => {
                    for (n, w) in [("w_q", &x.w_q), ("w_k", &x.w_k), ("w_v", &x.w_v), ("w_o", &x.w_o)] {
                        m(&mut out, format!("layers.{i}.linear.{n}"), w);
                    }
                    for (n, g) in [("alpha", &x.alpha), ("beta", &x.beta), ("beta_v", &x.beta_v)] {
                        if let Some(g) = g {
                            m(&mut out, format!("layers.{i}.linear.w_{n}"), &g.w);
                            v(&mut out, format!("layers.{i}.linear.b_{n}"), &g.b);
                        }
                    }
                }
                Mixer::Attention(x) => {
                    for (n, w) in [("w_q", &x.w_q), ("w_k", &x.w_k), ("w_v", &x.w_v), ("w_o", &x.w_o)] {
                        m(&mut out, format!("layers.{i}.attention.{n}"), w);
                    }
                }
            }
            v(&mut out, format!("layers.{i}.norm_mlp"), &layer.norm_mlp);
            m(&mut out, format!("layers.{i}.mlp.w_gate"), &layer.mlp.w_gate);
            m(&mut out, format!("layers.{i}.mlp.w_up"), &layer.mlp.w_up);
            m(&mut out, format!("layers.{i}.mlp.w_down"), &layer.mlp.w_down);
        }
        v(&mut out, String::from("norm_final"), &self.norm_final);
        out
    }

    /// Mutable views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.data_mut()];
        for layer in &mut self.layers {
            out.push(&mut layer.norm_mixer.0);
            match &mut layer.mixer {
                Mixer::Linear(x) => {
                    out.push(x.w_q.data_mut());
                    out.push(x.w_k.data_mut());
                    out.push(x.w_v.data_mut());
                    out.push(x.w_o.data_mut());
                    for g in [&mut x.alpha, &mut x.beta, &mut x.beta_v].into_iter().flatten() {
                        out.push(g.w.data_mut());
                        out.push(&mut g.b.0);
                    }
                }
                Mixer::Attention(x) => {
                    out.push(x.w_q.data_mut());
                    out.push(x.w_k.data_mut());
                    out.push(x.w_v.data_mut());
                    out.push(x.w_o.data_mut());
                }
            }
            out.push(&mut layer.norm_mlp.0);
            out.push(layer.mlp.w_gate.data_mut());
            out.push(layer.mlp.w_up.data_mut());
            out.push(layer.mlp.w_down.data_mut());
        }
        out.push(&mut self.norm_final.0);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Parameters {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += scale · other` (same structure).
    pub fn add_scaled(&mut self, scale: f64, other: &Parameters) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("parameter structures differ"));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            if a.len() != b.data.len() {
                return Err(Error::DimensionMismatch {
                    op: "Parameters::add_scaled",
                    expected: a.len(),
                    found: b.data.len(),
                });
            }
            crate::numerics::axpy(scale, b.data, a);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Rebuilds a parameter set shaped like `self` from named tensors, as
    /// read back from a checkpoint. Names, order and shapes must match.
    pub fn assign_from(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got_shape, _)) in expected.iter().zip(tensors) {
            if name != got_name || shape != got_shape {
                return Err(Error::invalid(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
        }
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}
