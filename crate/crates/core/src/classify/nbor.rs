//! Nearest-neighbor baseline.

use serde::{Deserialize, Serialize};

use super::{ClassifyError, Features, Normalization};
use crate::model::{HybridAutomaton, State};
use crate::sampling::SampleSet;

/// Returns the label of the closest training state in normalized
/// coordinates. Points in other modes only count when the query's mode has
/// no training points; ties go to the lowest index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nbor {
    pub features: Features,
    pub norm: Normalization,
    pub modes: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Nbor {
    pub fn fit(ha: &HybridAutomaton, features: Features, data: &SampleSet) -> Result<Nbor, ClassifyError> {
        if data.is_empty() {
            return Err(ClassifyError::Empty);
        }
        // mode inputs are handled by the mode filter, not the metric
        let skip = features.mode_inputs();
        let norm = Normalization::from_box(&features.input_box(ha)[skip..]);
        let mut nb = Nbor {
            features,
            norm,
            modes: Vec::with_capacity(data.len()),
            points: Vec::with_capacity(data.len()),
            labels: Vec::with_capacity(data.len()),
        };
        for s in &data.samples {
            nb.modes.push(s.state.mode);
            nb.points.push(nb.point(&s.state));
            nb.labels.push(s.label.is_positive());
        }
        Ok(nb)
    }

    fn point(&self, s: &State) -> Vec<f64> {
        let mut x = self.features.extract(s).split_off(self.features.mode_inputs());
        self.norm.apply(&mut x);
        x
    }

    /// Index of the nearest training point.
    pub fn nearest(&self, s: &State) -> usize {
        let q = self.point(s);
        let same_mode = self.modes.contains(&s.mode);
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, (p, &m)) in self.points.iter().zip(&self.modes).enumerate() {
            if same_mode && m != s.mode {
                continue;
            }
            let d: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn score(&self, s: &State) -> f64 {
        if self.labels[self.nearest(s)] {
            1.0
        } else {
            0.0
        }
    }
}
