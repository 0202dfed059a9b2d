//! The conditional network (reference encoder, attention pooling, embedding
//! enhancement) and the detection network, sharing one [`ParamStore`].

pub mod conditional;
pub mod detector;
mod infer;

pub use conditional::{
    attention_pool_values, build_embedding, embed_batch, encode_values, enhance_embedding, project_embedding,
    select_topk, topk_indices, AttentionPoolParams, Embedding, Enhanced, EnhancementConfig, EnhancementParams,
    FrameFeatureMap, ProjectionParams,
};
pub use detector::{detect, detect_values, glu_values, FrameScores};
pub use infer::{infer_batch, Inference};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Number of leading blocks that halve the time axis, in both networks.
pub const TIME_POOL_BLOCKS: usize = 2;
/// Total time reduction from mel frames to feature frames.
pub const TIME_POOL_TOTAL: usize = 1 << TIME_POOL_BLOCKS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Output channels of the five reference-encoder blocks; the last is `C_r`.
    pub encoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Query/key width `C_q = C_k` of both attention stages.
    pub attention_dim: usize,
    /// Attention pooling over reference frames; plain averaging when off.
    pub attention_pooling: bool,
    /// Kernel sizes of the parallel first-layer convolutions.
    pub scale_kernels: Vec<usize>,
    /// Output channels of each multi-scale branch (after gating).
    pub scale_channels: usize,
    pub detector_channels: Vec<usize>,
    /// Hidden units per direction of the bidirectional GRU.
    pub gru_hidden: usize,
    pub classifier_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            embedding_dim: 128,
            attention_dim: 128,
            attention_pooling: true,
            scale_kernels: vec![1, 3, 5],
            scale_channels: 64,
            detector_channels: vec![128, 256, 512],
            gru_hidden: 512,
            classifier_hidden: 256,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Tiny network on 8 mel bands for fast CPU runs and gradient checks.
    pub fn mini() -> Self {
        Self {
            n_mels: 8,
            encoder_channels: vec![8, 16, 16, 32, 32],
            scale_channels: 8,
            detector_channels: vec![16, 32, 32],
            gru_hidden: 32,
            classifier_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() != 5 {
            return bad(format!("reference encoder needs 5 blocks, got {}", self.encoder_channels.len()));
        }
        if self.detector_channels.len() < TIME_POOL_BLOCKS {
            return bad(format!("detector needs at least {TIME_POOL_BLOCKS} blocks"));
        }
        if self.scale_kernels.is_empty() || self.scale_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("scale kernels must be odd and non-empty: {:?}", self.scale_kernels));
        }
        let dims = [
            self.n_mels,
            self.embedding_dim,
            self.attention_dim,
            self.scale_channels,
            self.gru_hidden,
            self.classifier_hidden,
        ];
        if dims.contains(&0) || self.encoder_channels.contains(&0) || self.detector_channels.contains(&0) {
            return bad("all layer widths must be positive".into());
        }
        Ok(())
    }

    /// Feature channels `C_r` of the reference encoder.
    pub fn c_r(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    /// Width of the detector's frame features (input of the recurrent layer).
    pub fn c_d(&self) -> usize {
        *self.detector_channels.last().expect("validated")
    }

    /// Feature frames `t'` for `t` mel frames (identical for both networks).
    pub fn t_prime(&self, t: usize) -> usize {
        t / TIME_POOL_TOTAL
    }
}

/// Network configuration plus all weights and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl TsdModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let c = &config;

        let mut cin = 1;
        for (i, &cout) in c.encoder_channels.iter().enumerate() {
            for (j, ci) in [(1, cin), (2, cout)] {
                declare_conv(&mut p, &format!("enc.b{i}.conv{j}"), ci, cout, 3, seed);
                declare_bn(&mut p, &format!("enc.b{i}.bn{j}"), cout);
            }
            cin = cout;
        }
        let (cr, a, e) = (c.c_r(), c.attention_dim, c.embedding_dim);
        p.init("ap.wq", &[cr, a], Init::Xavier { fan_in: cr, fan_out: a }, seed);
        p.init("ap.wk", &[cr, a], Init::Xavier { fan_in: cr, fan_out: a }, seed);
        p.init("proj.w", &[cr, e], Init::Xavier { fan_in: cr, fan_out: e }, seed);
        p.init("proj.b", &[e], Init::Constant(0.0), seed);
        p.init("ee.wq", &[cr, a], Init::Xavier { fan_in: cr, fan_out: a }, seed);
        p.init("ee.wk", &[cr, a], Init::Xavier { fan_in: cr, fan_out: a }, seed);
        // Fusion starts as the identity on the original embedding.
        p.init("ee.fuse_a.w", &[cr], Init::Constant(1.0), seed);
        p.init("ee.fuse_a.b", &[cr], Init::Constant(0.0), seed);
        p.init("ee.fuse_b.w", &[cr], Init::Constant(0.0), seed);
        p.init("ee.fuse_b.b", &[cr], Init::Constant(1.0), seed);

        for &k in &c.scale_kernels {
            declare_conv(&mut p, &format!("det.scale{k}.conv"), 1, 2 * c.scale_channels, k, seed);
            declare_bn(&mut p, &format!("det.scale{k}.bn"), 2 * c.scale_channels);
        }
        let mut cin = c.scale_channels * c.scale_kernels.len();
        for (i, &cout) in c.detector_channels.iter().enumerate() {
            declare_conv(&mut p, &format!("det.b{i}.conv"), cin, cout, 3, seed);
            declare_bn(&mut p, &format!("det.b{i}.bn"), cout);
            cin = cout;
        }
        let (cd, h) = (c.c_d(), c.gru_hidden);
        p.init("det.fuse.w", &[e, cd], Init::Xavier { fan_in: e, fan_out: cd }, seed);
        let bound = 1.0 / (h as f64).sqrt();
        for dir in ["fwd", "bwd"] {
            p.init(&format!("det.gru.{dir}.w_ih"), &[cd, 3 * h], Init::Uniform(bound), seed);
            p.init(&format!("det.gru.{dir}.w_hh"), &[h, 3 * h], Init::Uniform(bound), seed);
            p.init(&format!("det.gru.{dir}.b_ih"), &[3 * h], Init::Uniform(bound), seed);
            p.init(&format!("det.gru.{dir}.b_hh"), &[3 * h], Init::Uniform(bound), seed);
        }
        let hc = c.classifier_hidden;
        p.init("det.cls1.w", &[2 * h, hc], Init::Kaiming { fan_in: 2 * h }, seed);
        p.init("det.cls1.b", &[hc], Init::Constant(0.0), seed);
        p.init("det.cls2.w", &[hc, 2], Init::Xavier { fan_in: hc, fan_out: 2 }, seed);
        p.init("det.cls2.b", &[2], Init::Constant(0.0), seed);

        Ok(Self { config, params: p })
    }

    /// Names of the parameters that belong to the reference-conditioning path.
    pub fn is_conditional_param(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("ap.") || name.starts_with("proj.") || name.starts_with("ee.")
    }
}

fn declare_conv(p: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, seed: u64) {
    p.init(&format!("{prefix}.w"), &[cout, cin, k, k], Init::Kaiming { fan_in: cin * k * k }, seed);
    p.init(&format!("{prefix}.b"), &[cout], Init::Constant(0.0), seed);
}

fn declare_bn(p: &mut ParamStore, prefix: &str, c: usize) {
    p.init(&format!("{prefix}.gamma"), &[c], Init::Constant(1.0), 0);
    p.init(&format!("{prefix}.beta"), &[c], Init::Constant(0.0), 0);
    p.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    p.insert_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[c]));
}

pub(crate) fn conv(s: &Session, x: Var, prefix: &str) -> Result<Var> {
    s.graph.conv2d(x, s.p(&format!("{prefix}.w"))?, s.p(&format!("{prefix}.b"))?)
}

/// Batch norm with batch statistics in training sessions (queuing a running
/// statistics update) and running statistics otherwise.
pub(crate) fn batch_norm(s: &Session, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    if s.train {
        let (y, stats) = s.graph.batch_norm2d(x, gamma, beta, None, eps)?;
        if let Some((mean, var)) = stats {
            s.record_bn(prefix, mean, var);
        }
        Ok(y)
    } else {
        let mean = s.buffer(&format!("{prefix}.running_mean"))?;
        let var = s.buffer(&format!("{prefix}.running_var"))?;
        let (y, _) = s
            .graph
            .batch_norm2d(x, gamma, beta, Some((mean.data(), var.data())), eps)?;
        Ok(y)
    }
}

/// Pools time by 2 in the first [`TIME_POOL_BLOCKS`] blocks and frequency by 2
/// while more than one band remains.
pub(crate) fn block_pool(s: &Session, x: Var, block: usize) -> Result<Var> {
    let shape = s.graph.shape(x);
    let kt = if block < TIME_POOL_BLOCKS { 2 } else { 1 };
    let kf = if shape[3] >= 2 { 2 } else { 1 };
    s.graph.avg_pool2d(x, kt, kf)
}

/// `[b, t, f]` mel batch to `[b, 1, t, f]`, checking the band count.
pub(crate) fn as_image(s: &Session, mel: Var, n_mels: usize) -> Result<Var> {
    let shape = s.graph.shape(mel);
    if shape.len() != 3 || shape[2] != n_mels {
        return Err(Error::Shape(format!("expected [batch, frames, {n_mels}] mel input, got {shape:?}")));
    }
    if shape[1] < TIME_POOL_TOTAL {
        return Err(Error::Shape(format!(
            "need at least {TIME_POOL_TOTAL} frames, got {}",
            shape[1]
        )));
    }
    s.graph.reshape(mel, &[shape[0], 1, shape[1], shape[2]])
}

/// `[b, c, t, f]` -> `[b, t, c]` by averaging the remaining frequency bins.
pub(crate) fn to_frames(s: &Session, x: Var) -> Result<Var> {
    let m = s.graph.mean_axis(x, 3)?;
    s.graph.permute(m, &[0, 2, 1])
}

/// Stacks equally shaped spectrograms into a `[b, t, f]` tensor.
pub fn stack_mels(mels: &[&crate::features::MelSpectrogram]) -> Result<Tensor> {
    let ts: Vec<Tensor> = mels.iter().map(|m| m.to_tensor()).collect();
    Tensor::stack(&ts)
}
