//! Seed extraction from normalized class heatmaps.
//!
//! A pixel is background when every considered class score is below `tau`,
//! otherwise it takes the argmax class. Channel `c` of the score map holds
//! class id `c + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{ImageLabels, LabelMask, ScoreMap, BACKGROUND};

/// Default foreground threshold.
pub const DEFAULT_TAU: f32 = 0.2;

/// Scores above this are taken as evidence the map was never normalized.
const NORMALIZED_SLACK: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeederConfig {
    pub tau: f32,
    /// Only channels of classes named in the image labels compete.
    pub restrict_to_image_labels: bool,
}

impl Default for SeederConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            restrict_to_image_labels: true,
        }
    }
}

impl SeederConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Usage(format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Channel indices that take part in the argmax.
fn considered_channels(
    scores: &ScoreMap,
    labels: &ImageLabels,
    restrict: bool,
) -> Result<Vec<usize>> {
    if scores.channels() > crate::maskcore::MAX_CLASSES {
        return Err(Error::Usage(format!(
            "{} score channels exceed the label range",
            scores.channels()
        )));
    }
    if let Some(pos) = scores
        .data()
        .iter()
        .position(|&v| !v.is_finite() || v > 1.0 + NORMALIZED_SLACK)
    {
        return Err(Error::Data(format!(
            "score {} at flat index {pos} is not normalized",
            scores.data()[pos]
        )));
    }
    if !restrict {
        return Ok((0..scores.channels()).collect());
    }
    if labels.is_empty() {
        return Err(Error::Usage(
            "image labels are empty but seeds are restricted to them".into(),
        ));
    }
    labels.validate(scores.channels())?;
    Ok(labels.present().iter().map(|&c| c as usize - 1).collect())
}

/// Per-pixel best (class, score) among `channels`; lowest class wins ties.
fn best_scores(scores: &ScoreMap, channels: &[usize]) -> Vec<(u8, f32)> {
    let n = scores.pixels();
    let mut best = vec![(BACKGROUND, f32::NEG_INFINITY); n];
    // `channels` is ascending, so a strict `>` keeps the lowest index on ties.
    for &c in channels {
        for (slot, &v) in best.iter_mut().zip(scores.channel(c)) {
            if v > slot.1 {
                *slot = ((c + 1) as u8, v);
            }
        }
    }
    best
}

fn mask_at(scores: &ScoreMap, best: &[(u8, f32)], tau: f32) -> LabelMask {
    let data = best
        .iter()
        .map(|&(class, score)| if score < tau { BACKGROUND } else { class })
        .collect();
    LabelMask::new(scores.height(), scores.width(), data).expect("dimensions come from scores")
}

pub fn extract_seeds(
    scores: &ScoreMap,
    labels: &ImageLabels,
    cfg: &SeederConfig,
) -> Result<LabelMask> {
    cfg.validate()?;
    let channels = considered_channels(scores, labels, cfg.restrict_to_image_labels)?;
    let best = best_scores(scores, &channels);
    Ok(mask_at(scores, &best, cfg.tau))
}

/// Seeds for a strictly descending sequence of thresholds.
pub fn seeds_at_thresholds(
    scores: &ScoreMap,
    labels: &ImageLabels,
    taus: &[f32],
    restrict_to_image_labels: bool,
) -> Result<Vec<LabelMask>> {
    check_descending(taus)?;
    let channels = considered_channels(scores, labels, restrict_to_image_labels)?;
    let best = best_scores(scores, &channels);
    Ok(taus.iter().map(|&t| mask_at(scores, &best, t)).collect())
}

pub(crate) fn check_descending(taus: &[f32]) -> Result<()> {
    for &t in taus {
        check_tau(t)?;
    }
    if taus.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Usage("taus must be strictly descending".into()));
    }
    Ok(())
}
