//! Detection network: multi-scale gated convolutions, conv blocks, fusion with
//! the conditional embedding, a bidirectional GRU and a frame classifier.

use super::{as_image, batch_norm, block_pool, conv, ModelConfig, TsdModel, TIME_POOL_TOTAL};
use crate::autograd::{Graph, GruWeights, Var};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::params::Session;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Per-frame target presence probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub values: Vec<f64>,
    /// Seconds per frame.
    pub frame_resolution: f64,
}

impl FrameScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gated linear unit over `axis`: first half times the sigmoid of the second.
pub fn glu(g: &Graph, x: Var, axis: usize) -> Result<Var> {
    let shape = g.shape(x);
    if axis >= shape.len() || shape[axis] % 2 != 0 {
        return Err(Error::Shape(format!("glu needs an even size on axis {axis}, got {shape:?}")));
    }
    let half = shape[axis] / 2;
    let a = g.slice(x, axis, 0, half)?;
    let b = g.slice(x, axis, half, half)?;
    let gate = g.sigmoid(b);
    g.mul(a, gate)
}

/// GLU over the channel axis of an `[n, 2c, ...]` tensor.
pub fn glu_values(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::Shape(format!("glu needs a channel axis, got {:?}", x.shape())));
    }
    let g = Graph::new();
    let v = g.constant(x.clone());
    let y = glu(&g, v, 1)?;
    Ok((*g.value(y)).clone())
}

/// Convolutional part of the detector, up to the fusion point:
/// `[b, t, f]` mel -> `[b, t', C_d]`.
pub fn detector_features(s: &Session, cfg: &ModelConfig, mel: Var) -> Result<Var> {
    let x = as_image(s, mel, cfg.n_mels)?;
    let mut branches = Vec::with_capacity(cfg.scale_kernels.len());
    for &k in &cfg.scale_kernels {
        let y = conv(s, x, &format!("det.scale{k}.conv"))?;
        let y = batch_norm(s, y, &format!("det.scale{k}.bn"), cfg.bn_eps)?;
        branches.push(glu(s.graph, y, 1)?);
    }
    let mut x = s.graph.concat(&branches, 1)?;
    for block in 0..cfg.detector_channels.len() {
        x = conv(s, x, &format!("det.b{block}.conv"))?;
        x = batch_norm(s, x, &format!("det.b{block}.bn"), cfg.bn_eps)?;
        x = s.graph.relu(x);
        x = block_pool(s, x, block)?;
    }
    super::to_frames(s, x)
}

/// Projects the embedding to the frame-feature width and multiplies it into
/// every frame.
pub fn fuse_embedding(s: &Session, cfg: &ModelConfig, features: Var, embedding: Var) -> Result<Var> {
    let g = s.graph;
    let b = g.shape(features)[0];
    let cond = g.matmul(embedding, s.p("det.fuse.w")?)?;
    let cond = g.reshape(cond, &[b, 1, cfg.c_d()])?;
    g.mul(features, cond)
}

/// Fusion, recurrent layer and classifier. Returns target probabilities
/// `[b, t']` (the positive column of a two-way softmax).
pub fn detector_head(s: &Session, cfg: &ModelConfig, features: Var, embedding: Var) -> Result<Var> {
    let g = s.graph;
    let fs = g.shape(features);
    let es = g.shape(embedding);
    if es.len() != 2 || es[0] != fs[0] || es[1] != cfg.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding {es:?} for a batch of {} with width {}",
            fs[0], cfg.embedding_dim
        )));
    }
    let (b, t) = (fs[0], fs[1]);
    let fused = fuse_embedding(s, cfg, features, embedding)?;
    let gru = |dir: &str| -> Result<GruWeights> {
        Ok(GruWeights {
            w_ih: s.p(&format!("det.gru.{dir}.w_ih"))?,
            w_hh: s.p(&format!("det.gru.{dir}.w_hh"))?,
            b_ih: s.p(&format!("det.gru.{dir}.b_ih"))?,
            b_hh: s.p(&format!("det.gru.{dir}.b_hh"))?,
        })
    };
    let fwd = g.gru(fused, gru("fwd")?, false)?;
    let bwd = g.gru(fused, gru("bwd")?, true)?;
    let h = g.concat(&[fwd, bwd], 2)?;
    let h = g.linear(h, s.p("det.cls1.w")?, Some(s.p("det.cls1.b")?))?;
    let h = g.relu(h);
    let logits = g.linear(h, s.p("det.cls2.w")?, Some(s.p("det.cls2.b")?))?;
    let probs = g.softmax(logits)?;
    let pos = g.slice(probs, 2, 1, 1)?;
    g.reshape(pos, &[b, t])
}

pub fn detect(s: &Session, cfg: &ModelConfig, mel: Var, embedding: Var) -> Result<Var> {
    let f = detector_features(s, cfg, mel)?;
    detector_head(s, cfg, f, embedding)
}

/// Frame scores of one mixture for a given embedding.
pub fn detect_values(model: &TsdModel, mixture: &MelSpectrogram, embedding: &[f64]) -> Result<FrameScores> {
    let g = Graph::new();
    let s = Session::inference(&g, &model.params);
    let x = g.constant(super::stack_mels(&[mixture])?);
    if embedding.len() != model.config.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding of {} entries, expected {}",
            embedding.len(),
            model.config.embedding_dim
        )));
    }
    let e = g.constant(Tensor::from_parts(vec![1, embedding.len()], embedding.to_vec()));
    let y = detect(&s, &model.config, x, e)?;
    Ok(FrameScores {
        values: g.value(y).data().to_vec(),
        frame_resolution: mixture.frame_seconds() * TIME_POOL_TOTAL as f64,
    })
}
