//! Frame-by-frame static → dynamic inference over a [`FrameSet`].

use crate::data::{FrameSet, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, EvalReport, GroundTruth, SaliencyMap};
use crate::nets::{dynamic_forward, static_forward, Network};

/// A predicted map tagged with its source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub seq_id: String,
    pub stem: String,
    pub map: SaliencyMap,
}

fn tag(s: &Sample<'_>, map: SaliencyMap) -> Prediction {
    Prediction {
        seq_id: s.seq_id.to_string(),
        stem: s.stem.to_string(),
        map,
    }
}

/// Static maps for every frame in sequence order.
pub fn predict_static(net: &Network, set: &FrameSet) -> Result<Vec<Prediction>> {
    set.samples()
        .iter()
        .map(|s| Ok(tag(s, static_forward(net, s.frame_t)?)))
        .collect()
}

/// Two-stage maps: `S_t` from the static network, refined by the dynamic
/// network from `(I_t, I_{t+1}, S_t)`.
pub fn predict_dynamic(static_net: &Network, dynamic_net: &Network, set: &FrameSet) -> Result<Vec<Prediction>> {
    set.samples()
        .iter()
        .map(|s| {
            let st = static_forward(static_net, s.frame_t)?;
            Ok(tag(s, dynamic_forward(dynamic_net, s.frame_t, s.frame_t1, &st)?))
        })
        .collect()
}

/// Scores predictions against the annotated frames of `set`; frames without
/// ground truth are skipped.
pub fn evaluate_predictions(set: &FrameSet, preds: &[Prediction]) -> Result<EvalReport> {
    let samples = set.samples();
    if samples.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} frames",
            preds.len(),
            samples.len()
        )));
    }
    let (maps, gts): (Vec<SaliencyMap>, Vec<GroundTruth>) = samples
        .iter()
        .zip(preds)
        .filter_map(|(s, p)| s.gt.map(|g| (p.map.clone(), g.clone())))
        .unzip();
    evaluate_set(&maps, &gts)
}
