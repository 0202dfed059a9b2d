//! Conditional network: reference encoder, attention pooling, projection and
//! the embedding-enhancement module.
//!
//! The enhancement works in the encoder feature space (`C_r`): the pooled
//! reference vector `e_f` attends over the top-scoring mixture frames, the
//! attention weights are gated by the thresholded previous-stage scores, and
//! the two vectors are fused by a kernel-1 convolution on each side followed by
//! an elementwise product. The fused vector is then projected to the embedding.

use super::{as_image, batch_norm, block_pool, conv, to_frames, ModelConfig, TsdModel, TIME_POOL_TOTAL};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::model::detector::FrameScores;
use crate::params::Session;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Encoder output `E`: `frames x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureMap {
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Seconds per feature frame.
    pub frame_resolution: f64,
}

impl FrameFeatureMap {
    pub fn new(frames: usize, channels: usize, data: Vec<f64>, frame_resolution: f64) -> Result<Self> {
        if frames == 0 || data.len() != frames * channels {
            return Err(Error::Shape(format!(
                "feature map {frames} x {channels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            channels,
            data,
            frame_resolution,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.frames, self.channels], self.data.clone())
    }
}

/// The conditional embedding handed to the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    /// Mixture frames selected by previous-stage score.
    pub top_k: usize,
    /// Scores below this are zeroed before gating the attention weights.
    pub tau: f64,
    /// Epochs trained with the plain embedding before enhancement starts.
    pub warmup_epochs: usize,
    /// At inference, re-run detection with the enhanced embedding built from a
    /// first detection pass.
    pub two_pass: bool,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            tau: 0.7,
            warmup_epochs: 10,
            two_pass: true,
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Reference encoder: five conv blocks, `[b, t, f]` mel -> `[b, t', C_r]`.
pub fn encode(s: &Session, cfg: &ModelConfig, mel: Var) -> Result<Var> {
    let mut x = as_image(s, mel, cfg.n_mels)?;
    for block in 0..cfg.encoder_channels.len() {
        for j in 1..=2 {
            x = conv(s, x, &format!("enc.b{block}.conv{j}"))?;
            x = batch_norm(s, x, &format!("enc.b{block}.bn{j}"), cfg.bn_eps)?;
            x = s.graph.relu(x);
        }
        x = block_pool(s, x, block)?;
    }
    to_frames(s, x)
}

/// Attention pooling of `e [b, t', C]` with query from the frame average.
/// Returns `(pooled [b, C], weights [b, t'])`.
pub fn attention_pool(g: &Graph, e: Var, wq: Var, wk: Var) -> Result<(Var, Var)> {
    let shape = g.shape(e);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention_pool expects [b, t', C], got {shape:?}")));
    }
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let (sq, sk) = (g.shape(wq), g.shape(wk));
    if sq.len() != 2 || sq[0] != c || sk != sq {
        return Err(Error::Shape(format!(
            "attention weights {sq:?} / {sk:?} do not match {c} channels with C_q = C_k"
        )));
    }
    if !g.value(e).all_finite() {
        return Err(Error::Numeric("non-finite feature values".into()));
    }
    let global = g.mean_axis(e, 1)?;
    let q = g.matmul(global, wq)?;
    let k = g.linear(e, wk, None)?;
    let q = g.reshape(q, &[b, sq[1], 1])?;
    let logits = g.bmm(k, q)?;
    let logits = g.reshape(logits, &[b, t])?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let weights = g.softmax(logits)?;
    let w3 = g.reshape(weights, &[b, 1, t])?;
    let pooled = g.bmm(w3, e)?;
    let pooled = g.reshape(pooled, &[b, c])?;
    Ok((pooled, weights))
}

/// Reference vector `[b, C_r]` from encoder frames: attention pooling, or the
/// plain frame average when attention pooling is disabled.
pub fn pool_reference(s: &Session, cfg: &ModelConfig, e: Var) -> Result<Var> {
    if cfg.attention_pooling {
        Ok(attention_pool(s.graph, e, s.p("ap.wq")?, s.p("ap.wk")?)?.0)
    } else {
        s.graph.mean_axis(e, 1)
    }
}

/// Fully connected map from `C_r` to the embedding width.
pub fn project(s: &Session, e_raw: Var) -> Result<Var> {
    s.graph.linear(e_raw, s.p("proj.w")?, Some(s.p("proj.b")?))
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-{k} of {} frames",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Rows of `features` at the `k` highest-scoring frames and their scores, in
/// descending score order.
pub fn select_topk(features: &FrameFeatureMap, scores: &FrameScores, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if scores.values.len() != features.frames {
        return Err(Error::Shape(format!(
            "{} scores for {} feature frames",
            scores.values.len(),
            features.frames
        )));
    }
    let idx = topk_indices(&scores.values, k)?;
    Ok((
        idx.iter().map(|&i| features.row(i).to_vec()).collect(),
        idx.iter().map(|&i| scores.values[i]).collect(),
    ))
}

/// Tape handles of the enhancement weights.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceVars {
    pub wq: Var,
    pub wk: Var,
    pub fuse_a_w: Var,
    pub fuse_a_b: Var,
    pub fuse_b_w: Var,
    pub fuse_b_b: Var,
}

impl EnhanceVars {
    pub fn bind(s: &Session) -> Result<Self> {
        Ok(Self {
            wq: s.p("ee.wq")?,
            wk: s.p("ee.wk")?,
            fuse_a_w: s.p("ee.fuse_a.w")?,
            fuse_a_b: s.p("ee.fuse_a.b")?,
            fuse_b_w: s.p("ee.fuse_b.w")?,
            fuse_b_b: s.p("ee.fuse_b.b")?,
        })
    }
}

/// Intermediate tape values of one enhancement.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceTrace {
    /// Fused output `e_f*`, `[b, C]`.
    pub fused: Var,
    /// Score-gated pooled mixture frames `e_f''`, `[b, C]`.
    pub gated: Var,
    /// Softmax weights over the selected frames, `[b, k]`.
    pub weights: Var,
    /// Weights after multiplication by the thresholded scores, `[b, k]`.
    pub gated_weights: Var,
}

/// Zeroes scores below `tau`.
pub fn threshold_scores(scores: &[f64], tau: f64) -> Vec<f64> {
    scores.iter().map(|&y| if y < tau { 0.0 } else { y }).collect()
}

/// Enhancement of `e_f [b, C]` from selected mixture frames `selected [b, k, C]`
/// and their previous-stage scores (`b` rows of `k`). Scores are constants.
pub fn enhance(g: &Graph, e_f: Var, selected: Var, scores: &[Vec<f64>], tau: f64, w: EnhanceVars) -> Result<EnhanceTrace> {
    let es = g.shape(e_f);
    let ss = g.shape(selected);
    if es.len() != 2 || ss.len() != 3 || ss[0] != es[0] || ss[2] != es[1] {
        return Err(Error::Shape(format!("enhance: e_f {es:?} with selected frames {ss:?}")));
    }
    let (b, k, c) = (ss[0], ss[1], ss[2]);
    if scores.len() != b || scores.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!("enhance: expected {b} x {k} scores")));
    }
    if scores.iter().flatten().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::InvalidArgument("selected scores must lie in [0, 1]".into()));
    }
    let wq = g.shape(w.wq);
    if wq.len() != 2 || wq[0] != c || g.shape(w.wk) != wq {
        return Err(Error::Shape(format!("enhance: query/key weights {wq:?} for {c} channels")));
    }
    for v in [w.fuse_a_w, w.fuse_a_b, w.fuse_b_w, w.fuse_b_b] {
        if g.shape(v) != [c] {
            return Err(Error::Shape(format!("enhance: fusion weights must have {c} entries")));
        }
    }

    let q = g.matmul(e_f, w.wq)?;
    let keys = g.linear(selected, w.wk, None)?;
    let q = g.reshape(q, &[b, wq[1], 1])?;
    let logits = g.bmm(keys, q)?;
    let logits = g.reshape(logits, &[b, k])?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let weights = g.softmax(logits)?;

    let filtered: Vec<f64> = scores.iter().flat_map(|r| threshold_scores(r, tau)).collect();
    let filtered = g.constant(Tensor::from_parts(vec![b, k], filtered));
    let gated_weights = g.mul(weights, filtered)?;
    let gw3 = g.reshape(gated_weights, &[b, 1, k])?;
    let gated = g.bmm(gw3, selected)?;
    let gated = g.reshape(gated, &[b, c])?;

    let fa = g.mul(e_f, w.fuse_a_w)?;
    let fa = g.add(fa, w.fuse_a_b)?;
    let fb = g.mul(gated, w.fuse_b_w)?;
    let fb = g.add(fb, w.fuse_b_b)?;
    let fused = g.mul(fa, fb)?;
    Ok(EnhanceTrace {
        fused,
        gated,
        weights,
        gated_weights,
    })
}

/// Batched embedding construction used by training and inference.
///
/// `cached[i]` holds previous-stage scores for sample `i`. With `enhance_active`
/// set, every sample with cached scores is enhanced from its mixture frames;
/// the rest keep their plain pooled vector. The mixture batch is only encoded
/// when at least one sample is enhanced.
pub fn embed_batch(
    s: &Session,
    cfg: &ModelConfig,
    refs: Var,
    mixes: Var,
    cached: &[Option<&[f64]>],
    ee: &EnhancementConfig,
    enhance_active: bool,
) -> Result<Var> {
    let g = s.graph;
    let e_r = encode(s, cfg, refs)?;
    let e_f = pool_reference(s, cfg, e_r)?;
    let b = g.shape(e_f)[0];
    if cached.len() != b {
        return Err(Error::Shape(format!("{} cache slots for a batch of {b}", cached.len())));
    }
    let hits = cached.iter().filter(|c| c.is_some()).count();
    if !enhance_active || hits == 0 {
        return project(s, e_f);
    }
    let e_m = encode(s, cfg, mixes)?;
    let t_prime = g.shape(e_m)[1];
    let mut rows = Vec::with_capacity(b);
    let mut picked = Vec::with_capacity(b);
    for c in cached {
        match c {
            Some(scores) => {
                if scores.len() != t_prime {
                    return Err(Error::CacheInvalid {
                        expected: t_prime,
                        cached: scores.len(),
                    });
                }
                let idx = topk_indices(scores, ee.top_k)?;
                picked.push(idx.iter().map(|&i| scores[i]).collect());
                rows.push(idx);
            }
            None => {
                // placeholder rows, masked out below
                let k = ee.top_k.min(t_prime);
                rows.push((0..k).collect());
                picked.push(vec![0.0; k]);
            }
        }
    }
    let selected = g.gather_rows(e_m, &rows)?;
    let trace = enhance(g, e_f, selected, &picked, ee.tau, EnhanceVars::bind(s)?)?;
    let chosen = if hits == b {
        trace.fused
    } else {
        let mask: Vec<f64> = cached.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }).collect();
        let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let mask = g.constant(Tensor::from_parts(vec![b, 1], mask));
        let keep = g.constant(Tensor::from_parts(vec![b, 1], keep));
        let a = g.mul(trace.fused, mask)?;
        let c = g.mul(e_f, keep)?;
        g.add(a, c)?
    };
    project(s, chosen)
}

/// Embedding for one (reference, mixture) pair at a given epoch: the plain
/// pooled embedding during warm-up or without cached scores, the enhanced one
/// otherwise.
pub fn build_embedding(
    model: &TsdModel,
    reference: &MelSpectrogram,
    mixture: &MelSpectrogram,
    cached: Option<&FrameScores>,
    epoch: usize,
    ee: &EnhancementConfig,
) -> Result<Embedding> {
    let g = Graph::new();
    let s = Session::inference(&g, &model.params);
    let refs = g.constant(super::stack_mels(&[reference])?);
    let mixes = g.constant(super::stack_mels(&[mixture])?);
    let active = epoch >= ee.warmup_epochs;
    let slot = cached.map(|c| c.values.as_slice());
    let emb = embed_batch(&s, &model.config, refs, mixes, &[slot], ee, active)?;
    Ok(Embedding(g.value(emb).data().to_vec()))
}

/// Encoder output for a single spectrogram.
pub fn encode_values(model: &TsdModel, mel: &MelSpectrogram) -> Result<FrameFeatureMap> {
    let g = Graph::new();
    let s = Session::inference(&g, &model.params);
    let x = g.constant(super::stack_mels(&[mel])?);
    let e = encode(&s, &model.config, x)?;
    let shape = g.shape(e);
    FrameFeatureMap::new(
        shape[1],
        shape[2],
        g.value(e).data().to_vec(),
        mel.frame_seconds() * TIME_POOL_TOTAL as f64,
    )
}

#[derive(Clone, Debug)]
pub struct AttentionPoolParams {
    /// `C_r x C_q`.
    pub wq: Tensor,
    /// `C_r x C_k`.
    pub wk: Tensor,
}

impl AttentionPoolParams {
    pub fn from_model(model: &TsdModel) -> Self {
        Self {
            wq: model.params.get("ap.wq").expect("declared").clone(),
            wk: model.params.get("ap.wk").expect("declared").clone(),
        }
    }
}

/// Pooled vector and attention weights of one feature map.
pub fn attention_pool_values(features: &FrameFeatureMap, params: &AttentionPoolParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Graph::new();
    let e = g.constant(features.to_tensor());
    let (pooled, weights) = attention_pool(&g, e, g.constant(params.wq.clone()), g.constant(params.wk.clone()))?;
    Ok((g.value(pooled).data().to_vec(), g.value(weights).data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct ProjectionParams {
    /// `C_r x embedding_dim`.
    pub w: Tensor,
    pub b: Tensor,
}

impl ProjectionParams {
    pub fn from_model(model: &TsdModel) -> Self {
        Self {
            w: model.params.get("proj.w").expect("declared").clone(),
            b: model.params.get("proj.b").expect("declared").clone(),
        }
    }
}

pub fn project_embedding(e_raw: &[f64], params: &ProjectionParams) -> Result<Embedding> {
    if params.w.ndim() != 2 || e_raw.len() != params.w.dim(0) {
        return Err(Error::Shape(format!(
            "vector of {} entries for projection {:?}",
            e_raw.len(),
            params.w.shape()
        )));
    }
    let g = Graph::new();
    let x = g.constant(Tensor::from_parts(vec![1, e_raw.len()], e_raw.to_vec()));
    let y = g.linear(x, g.constant(params.w.clone()), Some(g.constant(params.b.clone())))?;
    Ok(Embedding(g.value(y).data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct EnhancementParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub fuse_a_w: Tensor,
    pub fuse_a_b: Tensor,
    pub fuse_b_w: Tensor,
    pub fuse_b_b: Tensor,
    pub tau: f64,
}

impl EnhancementParams {
    pub fn from_model(model: &TsdModel, tau: f64) -> Self {
        let p = |n: &str| model.params.get(n).expect("declared").clone();
        Self {
            wq: p("ee.wq"),
            wk: p("ee.wk"),
            fuse_a_w: p("ee.fuse_a.w"),
            fuse_a_b: p("ee.fuse_a.b"),
            fuse_b_w: p("ee.fuse_b.w"),
            fuse_b_b: p("ee.fuse_b.b"),
            tau,
        }
    }
}

/// Values of one enhancement.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub fused: Vec<f64>,
    pub gated: Vec<f64>,
    pub weights: Vec<f64>,
    pub gated_weights: Vec<f64>,
}

/// Enhances the pooled reference vector with `k` selected mixture frames and
/// their scores.
pub fn enhance_embedding(e_f: &[f64], selected: &[Vec<f64>], scores: &[f64], params: &EnhancementParams) -> Result<Enhanced> {
    let c = e_f.len();
    let k = selected.len();
    if selected.iter().any(|r| r.len() != c) || scores.len() != k || k == 0 {
        return Err(Error::Shape(format!("{k} selected frames / {} scores for {c} channels", scores.len())));
    }
    if e_f.iter().chain(selected.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite enhancement input".into()));
    }
    let g = Graph::new();
    let ef = g.constant(Tensor::from_parts(vec![1, c], e_f.to_vec()));
    let sel = g.constant(Tensor::from_parts(vec![1, k, c], selected.concat()));
    let w = EnhanceVars {
        wq: g.constant(params.wq.clone()),
        wk: g.constant(params.wk.clone()),
        fuse_a_w: g.constant(params.fuse_a_w.clone()),
        fuse_a_b: g.constant(params.fuse_a_b.clone()),
        fuse_b_w: g.constant(params.fuse_b_w.clone()),
        fuse_b_b: g.constant(params.fuse_b_b.clone()),
    };
    let t = enhance(&g, ef, sel, &[scores.to_vec()], params.tau, w)?;
    let v = |x: Var| g.value(x).data().to_vec();
    Ok(Enhanced {
        fused: v(t.fused),
        gated: v(t.gated),
        weights: v(t.weights),
        gated_weights: v(t.gated_weights),
    })
}
