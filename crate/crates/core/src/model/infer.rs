use super::conditional::{encode, enhance, pool_reference, project, topk_indices, EnhanceVars, EnhancementConfig};
use super::detector::{detector_features, detector_head, FrameScores};
use super::{stack_mels, TsdModel, TIME_POOL_TOTAL};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::params::Session;

/// Detection result for one (reference, mixture) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Scores with the plain pooled embedding.
    pub first_pass: FrameScores,
    /// Scores with the enhanced embedding, when two-pass inference ran.
    pub second_pass: Option<FrameScores>,
}

impl Inference {
    pub fn scores(&self) -> &FrameScores {
        self.second_pass.as_ref().unwrap_or(&self.first_pass)
    }
}

/// Batched inference. With `two_pass`, the first-pass scores select the
/// mixture frames for the enhanced embedding and detection is repeated.
pub fn infer_batch(
    model: &TsdModel,
    refs: &[&MelSpectrogram],
    mixes: &[&MelSpectrogram],
    ee: &EnhancementConfig,
    two_pass: bool,
) -> Result<Vec<Inference>> {
    if refs.len() != mixes.len() || refs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} references for {} mixtures",
            refs.len(),
            mixes.len()
        )));
    }
    let cfg = &model.config;
    let g = Graph::new();
    let s = Session::inference(&g, &model.params);
    let r = g.constant(stack_mels(refs)?);
    let m = g.constant(stack_mels(mixes)?);
    let resolution = mixes[0].frame_seconds() * TIME_POOL_TOTAL as f64;

    let e_r = encode(&s, cfg, r)?;
    let e_f = pool_reference(&s, cfg, e_r)?;
    let feats = detector_features(&s, cfg, m)?;
    let first = detector_head(&s, cfg, feats, project(&s, e_f)?)?;
    let first = g.value(first);
    let t = first.dim(1);
    let split = |v: &[f64]| -> Vec<FrameScores> {
        v.chunks(t)
            .map(|c| FrameScores {
                values: c.to_vec(),
                frame_resolution: resolution,
            })
            .collect()
    };
    let firsts = split(first.data());
    if !two_pass {
        return Ok(firsts
            .into_iter()
            .map(|f| Inference {
                first_pass: f,
                second_pass: None,
            })
            .collect());
    }

    let e_m = encode(&s, cfg, m)?;
    let mut rows = Vec::with_capacity(firsts.len());
    let mut picked = Vec::with_capacity(firsts.len());
    for f in &firsts {
        let idx = topk_indices(&f.values, ee.top_k)?;
        picked.push(idx.iter().map(|&i| f.values[i]).collect());
        rows.push(idx);
    }
    let selected = g.gather_rows(e_m, &rows)?;
    let trace = enhance(&g, e_f, selected, &picked, ee.tau, EnhanceVars::bind(&s)?)?;
    let second = detector_head(&s, cfg, feats, project(&s, trace.fused)?)?;
    let seconds = split(g.value(second).data());
    Ok(firsts
        .into_iter()
        .zip(seconds)
        .map(|(f, s)| Inference {
            first_pass: f,
            second_pass: Some(s),
        })
        .collect())
}
