//! Inference and evaluation glue: forward pass, post-processing and
//! scoring against ground truth.

use rayon::prelude::*;

use crate::error::Result;
use crate::mask::Mask;
use crate::metrics::{evaluate_dataset, MatchReport};
use crate::model::{forward, NetworkConfig};
use crate::params::ParameterSet;
use crate::postprocess::{segment, InstanceSegResult, PostprocessParams};
use crate::regions::{adjacency, assign_layers, decompose};
use crate::synth::Scene;
use crate::tensor::Tensor;

pub fn infer(
    image: &Tensor<f32>,
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    post: &PostprocessParams,
) -> Result<InstanceSegResult> {
    post.validate()?;
    Ok(segment(&forward(image, params, network)?, post))
}

/// Segments every scene and scores the predictions.
pub fn evaluate_scenes(
    scenes: &[Scene],
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    post: &PostprocessParams,
) -> Result<(MatchReport, Vec<InstanceSegResult>)> {
    let results: Vec<InstanceSegResult> = scenes
        .par_iter()
        .map(|s| infer(&s.image, params, network, post))
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<Mask>> = results.iter().map(InstanceSegResult::masks).collect();
    let gts: Vec<Vec<Mask>> = scenes.iter().map(|s| s.instances.clone()).collect();
    Ok((evaluate_dataset(&preds, &gts)?, results))
}

/// Counts of adjacent ground-truth pairs whose assigned layers differ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SeparationStats {
    pub separated: usize,
    pub pairs: usize,
}

impl SeparationStats {
    /// Fraction of separated pairs; 1 when there are no adjacent pairs.
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.separated as f64 / self.pairs as f64
        }
    }
}

/// Assigns layers to the ground-truth objects from the model's prediction
/// and counts how many adjacent pairs land in different layers. Pairs
/// involving a skipped object count as not separated.
pub fn layer_separation(
    scenes: &[Scene],
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    threshold: f64,
) -> Result<SeparationStats> {
    let per_scene: Vec<SeparationStats> = scenes
        .par_iter()
        .map(|s| {
            let pred = forward(&s.image, params, network)?;
            let regions = decompose(s.height(), s.width(), &s.instances)?;
            let asg = assign_layers(&pred, &regions);
            let adj = adjacency(&regions.objects, threshold);
            let mut st = SeparationStats::default();
            for (i, j) in adj.pairs() {
                st.pairs += 1;
                if let (Some(a), Some(b)) = (asg.layers[i], asg.layers[j]) {
                    st.separated += usize::from(a != b);
                }
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.iter().fold(SeparationStats::default(), |acc, s| SeparationStats {
        separated: acc.separated + s.separated,
        pairs: acc.pairs + s.pairs,
    }))
}
