use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FfckError, Result};
use crate::model::ModelConfig;
use crate::tensor::{Matrix, Vector};

/// One additive contributor to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentId {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    /// Canonical component order: embedding first, then per layer all heads
    /// followed by that layer's MLP. Every deterministic reduction in the
    /// library iterates components in this order.
    pub fn index(&self, config: &ModelConfig) -> usize {
        match *self {
            ComponentId::Embedding => 0,
            ComponentId::Head { layer, head } => 1 + layer * (config.n_heads + 1) + head,
            ComponentId::Mlp { layer } => 1 + layer * (config.n_heads + 1) + config.n_heads,
        }
    }

    pub fn from_index(index: usize, config: &ModelConfig) -> Option<ComponentId> {
        if index == 0 {
            return Some(ComponentId::Embedding);
        }
        let per_layer = config.n_heads + 1;
        let rest = index - 1;
        let layer = rest / per_layer;
        if layer >= config.n_layers {
            return None;
        }
        let within = rest % per_layer;
        if within < config.n_heads {
            Some(ComponentId::Head {
                layer,
                head: within,
            })
        } else {
            Some(ComponentId::Mlp { layer })
        }
    }

    /// All components of a model in canonical order.
    pub fn all(config: &ModelConfig) -> Vec<ComponentId> {
        (0..config.n_components())
            .map(|i| ComponentId::from_index(i, config).expect("index in range"))
            .collect()
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::Head { .. })
    }
}

impl std::fmt::Display for ComponentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ComponentId::Embedding => write!(f, "embed"),
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::Mlp { layer } => write!(f, "L{layer}MLP"),
        }
    }
}

/// Per-head projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// (d_head, d_model)
    pub w_q: Matrix,
    /// (d_head, d_model)
    pub w_k: Matrix,
    /// (d_head, d_model)
    pub w_v: Matrix,
    /// (d_model, d_head)
    pub w_o: Matrix,
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// Gain of the RMS norm feeding the attention block.
    pub attn_gain: Vector,
    /// Gain of the RMS norm feeding the MLP block.
    pub mlp_gain: Vector,
    /// (d_mlp, d_model)
    pub w_gate: Matrix,
    /// (d_mlp, d_model)
    pub w_up: Matrix,
    /// (d_model, d_mlp)
    pub w_down: Matrix,
}

/// Immutable weight bundle of the toy transformer.
///
/// Every tensor entry lies on the `f32` grid (construction snaps values), so
/// the 32-bit checkpoint format reproduces forward passes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    /// (vocab, d_model)
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vector,
    /// (vocab, d_model): row t is the readout direction of token t.
    pub unembed: Matrix,
}

impl ModelBundle {
    pub fn new(
        config: ModelConfig,
        mut embedding: Matrix,
        mut layers: Vec<LayerWeights>,
        mut final_gain: Vector,
        mut unembed: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let check = |rows: usize, cols: usize, m: &Matrix, what: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(FfckError::dimension(
                    format!("{rows}x{cols}"),
                    format!("{}x{}", m.rows(), m.cols()),
                    what,
                ));
            }
            Ok(())
        };
        check(config.vocab_size, config.d_model, &embedding, "embedding")?;
        check(config.vocab_size, config.d_model, &unembed, "unembed")?;
        if final_gain.len() != config.d_model {
            return Err(FfckError::dimension(config.d_model, final_gain.len(), "final_gain"));
        }
        if layers.len() != config.n_layers {
            return Err(FfckError::dimension(config.n_layers, layers.len(), "layers"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.heads.len() != config.n_heads {
                return Err(FfckError::dimension(
                    config.n_heads,
                    layer.heads.len(),
                    format!("layer {l} heads"),
                ));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let ctx = format!("L{l}H{h}");
                check(config.d_head, config.d_model, &head.w_q, &format!("{ctx} w_q"))?;
                check(config.d_head, config.d_model, &head.w_k, &format!("{ctx} w_k"))?;
                check(config.d_head, config.d_model, &head.w_v, &format!("{ctx} w_v"))?;
                check(config.d_model, config.d_head, &head.w_o, &format!("{ctx} w_o"))?;
            }
            check(config.d_mlp, config.d_model, &layer.w_gate, &format!("layer {l} w_gate"))?;
            check(config.d_mlp, config.d_model, &layer.w_up, &format!("layer {l} w_up"))?;
            check(config.d_model, config.d_mlp, &layer.w_down, &format!("layer {l} w_down"))?;
            if layer.attn_gain.len() != config.d_model || layer.mlp_gain.len() != config.d_model {
                return Err(FfckError::dimension(
                    config.d_model,
                    layer.attn_gain.len().max(layer.mlp_gain.len()),
                    format!("layer {l} gains"),
                ));
            }
        }

        embedding.snap_f32();
        unembed.snap_f32();
        final_gain.snap_f32();
        for layer in &mut layers {
            layer.attn_gain.snap_f32();
            layer.mlp_gain.snap_f32();
            layer.w_gate.snap_f32();
            layer.w_up.snap_f32();
            layer.w_down.snap_f32();
            for head in &mut layer.heads {
                head.w_q.snap_f32();
                head.w_k.snap_f32();
                head.w_v.snap_f32();
                head.w_o.snap_f32();
            }
        }

        Ok(ModelBundle {
            config,
            embedding,
            layers,
            final_gain,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights {
        &self.layers[layer].heads[head]
    }

    /// Gaussian-initialized model, deterministic in `config.seed`. Residual
    /// write matrices are scaled down with depth, the usual small-init scheme.
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let gauss = |rows: usize, cols: usize, s: f64, rng: &mut ChaCha8Rng| -> Matrix {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = gaussian(rng) * s;
            }
            m
        };
        let embedding = gauss(config.vocab_size, config.d_model, std, &mut rng);
        let unembed = gauss(config.vocab_size, config.d_model, std, &mut rng);
        let ones = Vector::from_vec(vec![1.0; config.d_model])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadWeights {
                    w_q: gauss(config.d_head, config.d_model, std, &mut rng),
                    w_k: gauss(config.d_head, config.d_model, std, &mut rng),
                    w_v: gauss(config.d_head, config.d_model, std, &mut rng),
                    w_o: gauss(config.d_model, config.d_head, out_std, &mut rng),
                });
            }
            layers.push(LayerWeights {
                heads,
                attn_gain: ones.clone(),
                mlp_gain: ones.clone(),
                w_gate: gauss(config.d_mlp, config.d_model, std, &mut rng),
                w_up: gauss(config.d_mlp, config.d_model, std, &mut rng),
                w_down: gauss(config.d_model, config.d_mlp, out_std, &mut rng),
            });
        }
        ModelBundle::new(config, embedding, layers, ones.clone(), unembed)
    }

    /// Tensors in canonical checkpoint order as (name, shape, data) views.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        out.push((
            "embedding".into(),
            vec![self.config.vocab_size, self.config.d_model],
            self.embedding.as_slice(),
        ));
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let base = format!("layers.{l}.heads.{h}");
                out.push((format!("{base}.w_q"), vec![self.config.d_head, self.config.d_model], head.w_q.as_slice()));
                out.push((format!("{base}.w_k"), vec![self.config.d_head, self.config.d_model], head.w_k.as_slice()));
                out.push((format!("{base}.w_v"), vec![self.config.d_head, self.config.d_model], head.w_v.as_slice()));
                out.push((format!("{base}.w_o"), vec![self.config.d_model, self.config.d_head], head.w_o.as_slice()));
            }
            out.push((format!("layers.{l}.attn_gain"), vec![self.config.d_model], layer.attn_gain.as_slice()));
            out.push((format!("layers.{l}.mlp_gain"), vec![self.config.d_model], layer.mlp_gain.as_slice()));
            out.push((format!("layers.{l}.w_gate"), vec![self.config.d_mlp, self.config.d_model], layer.w_gate.as_slice()));
            out.push((format!("layers.{l}.w_up"), vec![self.config.d_mlp, self.config.d_model], layer.w_up.as_slice()));
            out.push((format!("layers.{l}.w_down"), vec![self.config.d_model, self.config.d_mlp], layer.w_down.as_slice()));
        }
        out.push(("final_gain".into(), vec![self.config.d_model], self.final_gain.as_slice()));
        out.push((
            "unembed".into(),
            vec![self.config.vocab_size, self.config.d_model],
            self.unembed.as_slice(),
        ));
        out
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream layout simple
    // and deterministic.
    loop {
        let u: f64 = rng.gen::<f64>();
        if u <= f64::MIN_POSITIVE {
            continue;
        }
        let v: f64 = rng.gen::<f64>();
        return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_index_roundtrip() {
        let config = ModelConfig::toy_default(0);
        let all = ComponentId::all(&config);
        assert_eq!(all.len(), 73);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(&config), i);
            assert_eq!(ComponentId::from_index(i, &config), Some(*c));
        }
        assert_eq!(all[0], ComponentId::Embedding);
        assert_eq!(all[1], ComponentId::Head { layer: 0, head: 0 });
        assert_eq!(all[9], ComponentId::Mlp { layer: 0 });
        assert!(ComponentId::from_index(73, &config).is_none());
    }

    #[test]
    fn random_is_deterministic_in_seed() {
        let a = ModelBundle::random(ModelConfig::micro(9)).unwrap();
        let b = ModelBundle::random(ModelConfig::micro(9)).unwrap();
        assert_eq!(a, b);
        let c = ModelBundle::random(ModelConfig::micro(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weights_live_on_f32_grid() {
        let m = ModelBundle::random(ModelConfig::micro(3)).unwrap();
        for (_, _, data) in m.tensors() {
            for &v in data {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }
}
