//! Toy hybrid language model: tied embedding, pre-norm residual blocks
//! whose mixer is a linear-attention layer (any rule) or, every
//! `hybrid_ratio + 1` layers, causal softmax attention; SwiGLU MLPs; a final
//! RMS norm and the tied output head. No positional encoding.

mod config;
mod layers;
mod params;

use alloc::string::String;
use alloc::vec::Vec;

pub use config::ModelConfig;
pub use layers::{
    attention_forward, compute_gates, linear_attention_forward, project, rms_norm, swiglu_forward, swiglu_mlp,
    AttentionCache, LinearCache, ScanMode, KEY_NORM_EPS, NORM_EPS,
};
pub use params::{
    gate_width, init_parameters, AttentionMixer, GateProjection, Layer, LinearMixer, Mixer, Mlp, Parameters, TensorRef,
    ALPHA_INIT, BETA_INIT, EMBEDDING_STD,
};

use crate::error::{Error, Result};
use crate::grad::{relative_error, softmax_cross_entropy};
use crate::numerics::{gemm_nn, gemm_tn, Matrix};
use layers::{MlpCache, NormCache};

#[derive(Clone, Debug)]
pub enum MixerCache {
    Linear(LinearCache),
    Attention(AttentionCache),
}

#[derive(Clone, Debug)]
struct LayerCache {
    norm_mixer: NormCache,
    mixer_in: Matrix,
    mixer: MixerCache,
    norm_mlp: NormCache,
    mlp_in: Matrix,
    mlp: MlpCache,
}

/// Logits plus everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `L × vocab_size`.
    pub logits: Matrix,
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    final_out: Matrix,
}

impl ForwardTrace {
    pub fn mixer(&self, layer: usize) -> Option<&MixerCache> {
        self.layers.get(layer).map(|l| &l.mixer)
    }
}

fn check_structure(params: &Parameters, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if params.layers.len() != config.n_layers || params.embedding.shape() != (config.vocab_size, config.d_model) {
        return Err(Error::invalid("parameters do not match the model config"));
    }
    for (i, layer) in params.layers.iter().enumerate() {
        let attention = matches!(layer.mixer, Mixer::Attention(_));
        if attention != config.is_attention_layer(i) {
            return Err(Error::invalid(alloc::format!(
                "layer {i} mixer kind does not match the hybrid layout"
            )));
        }
    }
    Ok(())
}

/// Embedding → blocks → final norm → tied head.
pub fn forward(params: &Parameters, config: &ModelConfig, tokens: &[usize], mode: ScanMode) -> Result<ForwardTrace> {
    check_structure(params, config)?;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let d = config.d_model;
    let mut h = Matrix::zeros(tokens.len(), d);
    for (t, &id) in tokens.iter().enumerate() {
        if id >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
        h.row_mut(t).copy_from_slice(params.embedding.row(id));
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (mixer_in, norm_mixer) = rms_norm(&h, &layer.norm_mixer);
        let (mixed, mixer) = match &layer.mixer {
            Mixer::Linear(p) => {
                let (y, c) = linear_attention_forward(&mixer_in, p, config, mode)?;
                (y, MixerCache::Linear(c))
            }
            Mixer::Attention(p) => {
                let (y, c) = attention_forward(&mixer_in, p, config);
                (y, MixerCache::Attention(c))
            }
        };
        let mut mid = h.clone();
        mid.add_assign(&mixed);
        let (mlp_in, norm_mlp) = rms_norm(&mid, &layer.norm_mlp);
        let (mlp_out, mlp) = swiglu_forward(&mlp_in, &layer.mlp);
        let mut out = mid;
        out.add_assign(&mlp_out);
        caches.push(LayerCache {
            norm_mixer,
            mixer_in,
            mixer,
            norm_mlp,
            mlp_in,
            mlp,
        });
        h = out;
    }
    let (final_out, final_norm) = rms_norm(&h, &params.norm_final);
    let logits = project(&final_out, &params.embedding);
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "model forward" });
    }
    Ok(ForwardTrace {
        logits,
        tokens: tokens.to_vec(),
        layers: caches,
        final_norm,
        final_out,
    })
}

/// Parameter gradients given `∂ℓ/∂logits`. The trace must come from a
/// [`ScanMode::Sequential`] forward.
pub fn backward(
    params: &Parameters,
    config: &ModelConfig,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<Parameters> {
    let (l, d, vocab) = (trace.tokens.len(), config.d_model, config.vocab_size);
    if dlogits.shape() != (l, vocab) {
        return Err(Error::DimensionMismatch {
            op: "model backward dlogits",
            expected: l * vocab,
            found: dlogits.rows() * dlogits.cols(),
        });
    }
    let mut grads = params.zeros_like();

    // Tied head: logits = F Eᵀ.
    let mut dh = Matrix::zeros(l, d);
    let mut d_final = Matrix::zeros(l, d);
    gemm_nn(dlogits.data(), params.embedding.data(), d_final.data_mut(), l, vocab, d);
    gemm_tn(
        dlogits.data(),
        trace.final_out.data(),
        grads.embedding.data_mut(),
        vocab,
        l,
        d,
    );
    layers::rms_norm_backward(
        &d_final,
        &params.norm_final,
        &trace.final_norm,
        &mut dh,
        &mut grads.norm_final,
    );

    for (i, cache) in trace.layers.iter().enumerate().rev() {
        let layer = &params.layers[i];
        let glayer = &mut grads.layers[i];
        // out = mid + mlp(norm(mid))
        let mut dmid = dh.clone();
        let mut dmlp_in = Matrix::zeros(l, d);
        layers::swiglu_backward(
            &dh,
            &cache.mlp_in,
            &layer.mlp,
            &cache.mlp,
            &mut dmlp_in,
            &mut glayer.mlp,
        );
        layers::rms_norm_backward(
            &dmlp_in,
            &layer.norm_mlp,
            &cache.norm_mlp,
            &mut dmid,
            &mut glayer.norm_mlp,
        );
        // mid = input + mixer(norm(input))
        let mut dinput = dmid.clone();
        let mut dmixer_in = Matrix::zeros(l, d);
        match (&layer.mixer, &cache.mixer, &mut glayer.mixer) {
            (Mixer::Linear(p), MixerCache::Linear(c), Mixer::Linear(g)) => {
                layers::linear_attention_backward(&dmid, &cache.mixer_in, p, c, config, &mut dmixer_in, g)?;
            }
            (Mixer::Attention(p), MixerCache::Attention(c), Mixer::Attention(g)) => {
                layers::attention_backward(&dmid, &cache.mixer_in, p, c, config, &mut dmixer_in, g);
            }
            _ => return Err(Error::invalid("trace does not match parameters")),
        }
        layers::rms_norm_backward(
            &dmixer_in,
            &layer.norm_mixer,
            &cache.norm_mixer,
            &mut dinput,
            &mut glayer.norm_mixer,
        );
        dh = dinput;
    }
    for (t, &id) in trace.tokens.iter().enumerate() {
        crate::numerics::axpy(1.0, dh.row(t), grads.embedding.row_mut(id));
    }
    Ok(grads)
}

/// Mean cross-entropy over positions with a target, and `∂ℓ/∂logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy targets",
            expected: logits.rows(),
            found: targets.len(),
        });
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::invalid("no target positions"));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    for (t, target) in targets.iter().enumerate() {
        if let Some(y) = *target {
            if y >= logits.cols() {
                return Err(Error::TokenOutOfRange {
                    id: y,
                    vocab: logits.cols(),
                });
            }
            let (l, g) = softmax_cross_entropy(logits.row(t), y);
            loss += l;
            for (o, gi) in d.row_mut(t).iter_mut().zip(g.iter()) {
                *o = gi * scale;
            }
        }
    }
    Ok((loss * scale, d))
}

pub fn loss(params: &Parameters, config: &ModelConfig, tokens: &[usize], targets: &[Option<usize>]) -> Result<f64> {
    let trace = forward(params, config, tokens, ScanMode::Sequential)?;
    Ok(cross_entropy(&trace.logits, targets)?.0)
}

/// Loss, gradients and the forward trace for one sequence.
pub fn loss_and_grad(
    params: &Parameters,
    config: &ModelConfig,
    tokens: &[usize],
    targets: &[Option<usize>],
) -> Result<(f64, Parameters, ForwardTrace)> {
    let trace = forward(params, config, tokens, ScanMode::Sequential)?;
    let (value, dlogits) = cross_entropy(&trace.logits, targets)?;
    let grads = backward(params, config, &trace, &dlogits)?;
    Ok((value, grads, trace))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelFdReport {
    pub h: f64,
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<ParamError>,
    pub failures: Vec<ParamError>,
}

impl ModelFdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central differences of the cross-entropy loss with respect to every
/// parameter, compared against [`loss_and_grad`].
pub fn finite_diff_check(
    params: &Parameters,
    config: &ModelConfig,
    tokens: &[usize],
    targets: &[Option<usize>],
    h: f64,
    tol: f64,
) -> Result<ModelFdReport> {
    let (_, grads, _) = loss_and_grad(params, config, tokens, targets)?;
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let mut report = ModelFdReport {
        h,
        tol,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    let mut probe = params.clone();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for (index, &a) in a.iter().enumerate() {
            let original = probe.tensors_mut()[ti][index];
            probe.tensors_mut()[ti][index] = original + h;
            let plus = loss(&probe, config, tokens, targets)?;
            probe.tensors_mut()[ti][index] = original - h;
            let minus = loss(&probe, config, tokens, targets)?;
            probe.tensors_mut()[ti][index] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, numeric);
            let entry = ParamError {
                tensor: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(entry.clone());
            }
            if rel.is_nan() || rel > tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

/// Directional variant of [`finite_diff_check`]: for each tensor, `per_tensor`
/// random unit directions `u` (seeded by `seed`) compare `∇ℓ·u` against
/// `(ℓ(θ + hu) − ℓ(θ − hu)) / 2h`. Every direction touches every entry of its
/// tensor, so the comparison stays well above the rounding floor that
/// per-coordinate differences hit on near-zero gradient entries.
#[allow(clippy::too_many_arguments)]
pub fn directional_check(
    params: &Parameters,
    config: &ModelConfig,
    tokens: &[usize],
    targets: &[Option<usize>],
    h: f64,
    tol: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<ModelFdReport> {
    let (_, grads, _) = loss_and_grad(params, config, tokens, targets)?;
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let mut report = ModelFdReport {
        h,
        tol,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    let rng = crate::numerics::Rng::new(seed);
    let mut probe = params.clone();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut stream = rng.split(ti as u64);
        for index in 0..per_tensor {
            let mut u = stream.normal_vector(g.len());
            let norm = u.norm();
            u.iter_mut().for_each(|x| *x /= norm);
            let a = crate::numerics::dot(g, &u);
            let original = probe.tensors_mut()[ti].to_vec();
            let shift = |probe: &mut Parameters, s: f64| {
                for ((x, &o), &ui) in probe.tensors_mut()[ti].iter_mut().zip(&original).zip(u.iter()) {
                    *x = o + s * ui;
                }
            };
            shift(&mut probe, h);
            let plus = loss(&probe, config, tokens, targets)?;
            shift(&mut probe, -h);
            let minus = loss(&probe, config, tokens, targets)?;
            probe.tensors_mut()[ti].copy_from_slice(&original);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, numeric);
            let entry = ParamError {
                tensor: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(entry.clone());
            }
            if rel.is_nan() || rel > tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
