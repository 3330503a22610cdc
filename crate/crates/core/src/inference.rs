//! Test-time prediction over a set of samples and the evaluation report.

use rayon::prelude::*;

use crate::adaptation::AnomalyMap;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::geometry::PointCloudGrid;
use crate::metrics::{EvalReport, SampleScore};
use crate::model::{Clip3dModel, Prediction, TextEmbeddings};
use crate::render::RenderConfig;
use crate::training::encode_with_views;
use crate::{ColorImage, Mask};

/// A labelled test sample. `mask` is `None` for normal samples without ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub name: String,
    pub image: ColorImage,
    pub cloud: PointCloudGrid,
    pub mask: Option<Mask>,
    pub label: bool,
}

/// Everything needed to score an image.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a Clip3dModel,
    pub encoder: &'a FrozenEncoder,
    pub render: Option<&'a RenderConfig>,
    pub text: &'a TextEmbeddings,
}

impl Scorer<'_> {
    pub fn predict(&self, image: &ColorImage, cloud: &PointCloudGrid) -> Result<Prediction> {
        if self.model.has_fusion() != self.render.is_some() {
            return Err(Error::invalid(
                "render configuration must be given exactly when the model has fusion",
            ));
        }
        let encoded = encode_with_views(self.encoder, image, cloud, self.render)?;
        self.model.predict(&encoded, self.text)
    }

    /// Predicts every sample (in parallel, results kept in input order).
    pub fn predict_all(&self, samples: &[TestSample]) -> Result<Vec<Prediction>> {
        samples.par_iter().map(|s| self.predict(&s.image, &s.cloud)).collect()
    }

    /// Scores and metrics for a labelled split. Also returns the anomaly maps.
    pub fn evaluate(
        &self,
        samples: &[TestSample],
        fpr_limit: f64,
        config: serde_json::Value,
    ) -> Result<(EvalReport, Vec<AnomalyMap>)> {
        let predictions = self.predict_all(samples)?;
        let mut scores = Vec::with_capacity(samples.len());
        let mut maps = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for (s, p) in samples.iter().zip(predictions) {
            let mask = match &s.mask {
                Some(m) if m.dim() != p.map.values.dim() => {
                    return Err(Error::invalid(format!(
                        "{}: mask is {:?} but the anomaly map is {:?}",
                        s.name,
                        m.dim(),
                        p.map.values.dim()
                    )))
                }
                Some(m) => m.clone(),
                None => Mask::from_elem(p.map.values.dim(), false),
            };
            scores.push(SampleScore {
                name: s.name.clone(),
                label: s.label,
                score: p.score.a_score,
                s_plus: p.score.s_plus,
                s_minus: p.score.s_minus,
                map_max: p.map.max(),
            });
            maps.push(p.map.values);
            masks.push(mask);
        }
        let report = EvalReport::compute(scores, &maps, &masks, fpr_limit, config)?;
        Ok((report, maps.into_iter().map(|values| AnomalyMap { values }).collect()))
    }
}
