//! Guide labelling: fusing saliency, seeds and image labels into a training
//! mask with ignore regions.
//!
//! * G0 assigns the whole saliency foreground one class drawn from the image labels.
//! * G1 labels each saliency component with the class whose classifier score
//!   rises most when everything outside the component is zeroed.
//! * G2 propagates seed classes over the saliency components they touch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densecrf::{region_crf_with_confidence, CrfParams, PartialLabels, DEFAULT_SEED_CONFIDENCE};
use crate::error::{Error, Result};
use crate::maskcore::{
    ensure_same_dims, BinaryMask, ImageLabels, LabelMask, RgbImage, BACKGROUND, IGNORE,
};
use crate::regions::{
    filter_by_area, intersect, label_components, label_seed_components, ComponentSet, Connectivity,
};

/// Minimum saliency component size, as a fraction of the image area.
pub const DEFAULT_AREA_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideStats {
    pub background: usize,
    pub ignore: usize,
    pub classes: BTreeMap<u8, usize>,
}

impl GuideStats {
    pub fn of(mask: &LabelMask) -> Self {
        let mut stats = Self::default();
        for &v in mask.data() {
            match v {
                BACKGROUND => stats.background += 1,
                IGNORE => stats.ignore += 1,
                c => *stats.classes.entry(c).or_default() += 1,
            }
        }
        stats
    }

    pub fn total(&self) -> usize {
        self.background + self.ignore + self.classes.values().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuideResult {
    pub mask: LabelMask,
    pub stats: GuideStats,
}

impl GuideResult {
    pub fn new(mask: LabelMask) -> Self {
        let stats = GuideStats::of(&mask);
        Self { mask, stats }
    }
}

/// Random class assignment. One class is drawn per image from `labels`
/// with a ChaCha8 stream keyed by `(rng_seed, stream)`; `stream` is the
/// image's position in its manifest so results do not depend on scheduling.
pub fn guide_g0(
    saliency: &BinaryMask,
    labels: &ImageLabels,
    rng_seed: u64,
    stream: u64,
) -> Result<GuideResult> {
    if labels.is_empty() {
        return Err(Error::Usage("G0 needs at least one image label".into()));
    }
    let class = pick_class(labels, rng_seed, stream);
    let data = saliency
        .data()
        .iter()
        .map(|&fg| if fg { class } else { BACKGROUND })
        .collect();
    Ok(GuideResult::new(LabelMask::new(
        saliency.height(),
        saliency.width(),
        data,
    )?))
}

pub(crate) fn pick_class(labels: &ImageLabels, rng_seed: u64, stream: u64) -> u8 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(stream);
    let k = rng.random_range(0..labels.len());
    *labels.present().iter().nth(k).expect("index below label count")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    /// Classifier score on the original image.
    pub full: f64,
    /// Classifier score on the image with everything outside the component zeroed.
    pub masked: f64,
}

/// Per-component, per-class classifier scores for one image. Keys are
/// component ids as produced by the area-filtered saliency labelling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct G1Scores(pub BTreeMap<u32, BTreeMap<u8, ScorePair>>);

/// Scores for a whole dataset, keyed by image id.
pub type G1ScoresFile = BTreeMap<String, G1Scores>;

pub fn read_g1_scores(path: impl AsRef<Path>) -> Result<G1ScoresFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(e.column() as u64, format!("G1 scores line {}: {e}", e.line())).in_file(path)
    })
}

/// Per-component classification from score differences.
///
/// A component takes the present class with the largest positive
/// `masked - full` difference (lowest class on ties); when no difference is
/// positive it is marked ignore.
pub fn guide_g1(fg: &ComponentSet, labels: &ImageLabels, scores: &G1Scores) -> Result<GuideResult> {
    if labels.is_empty() {
        return Err(Error::Usage("G1 needs at least one image label".into()));
    }
    let mut assigned = vec![BACKGROUND; fg.len() + 1];
    for rec in fg.records() {
        let mut best: Option<(u8, f64)> = None;
        for &c in labels.present() {
            let pair = scores
                .0
                .get(&rec.id)
                .and_then(|m| m.get(&c))
                .ok_or_else(|| {
                    Error::Data(format!(
                        "missing G1 score for component {} class {c}",
                        rec.id
                    ))
                })?;
            let d = pair.masked - pair.full;
            if !d.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite G1 score for component {} class {c}",
                    rec.id
                )));
            }
            if d > 0.0 && best.is_none_or(|(_, b)| d > b) {
                best = Some((c, d));
            }
        }
        assigned[rec.id as usize] = best.map_or(IGNORE, |(c, _)| c);
    }
    let data = fg.id_map().iter().map(|&id| assigned[id as usize]).collect();
    Ok(GuideResult::new(LabelMask::new(fg.height(), fg.width(), data)?))
}

/// Labels the pixels of a saliency component that intersects seeds of two or
/// more classes.
pub trait RegionLabeler {
    /// `seeds` holds only the seed pixels inside `component` (zero elsewhere);
    /// `classes` are the distinct seed classes intersecting it. Only component
    /// pixels may be written.
    fn label_region(
        &self,
        component: &BinaryMask,
        seeds: &LabelMask,
        classes: &BTreeSet<u8>,
        image: &RgbImage,
    ) -> Result<PartialLabels>;
}

/// Dense-CRF labelling inside the component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfRegionLabeler {
    pub params: CrfParams,
    pub confidence: f64,
}

impl CrfRegionLabeler {
    pub fn new(params: CrfParams) -> Self {
        Self {
            params,
            confidence: DEFAULT_SEED_CONFIDENCE,
        }
    }
}

impl RegionLabeler for CrfRegionLabeler {
    fn label_region(
        &self,
        component: &BinaryMask,
        seeds: &LabelMask,
        classes: &BTreeSet<u8>,
        image: &RgbImage,
    ) -> Result<PartialLabels> {
        region_crf_with_confidence(component, seeds, classes, image, &self.params, self.confidence)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2Options {
    pub connectivity: Connectivity,
    pub area_fraction: f64,
}

impl Default for G2Options {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            area_fraction: DEFAULT_AREA_FRACTION,
        }
    }
}

/// Saliency components that survive the area filter; shared by G1, G2 and
/// component export so their ids agree.
pub fn foreground_components(
    saliency: &BinaryMask,
    connectivity: Connectivity,
    area_fraction: f64,
) -> Result<ComponentSet> {
    filter_by_area(&label_components(saliency, connectivity), area_fraction)
}

/// Seed propagation.
///
/// Analysis pass: area-filtered saliency components, per-class seed
/// components, and their overlap table. Labelling pass, starting from all
/// background:
///
/// * a component touching no seed class becomes ignore;
/// * one class fills the whole component;
/// * two or more classes are resolved by `labeler` inside the component;
/// * seed pixels outside every component become ignore when their seed
///   touches some component, and keep their class when it touches none.
///
/// A seed touching several components counts toward each of them.
pub fn guide_g2(
    seeds: &LabelMask,
    saliency: &BinaryMask,
    image: &RgbImage,
    labeler: &dyn RegionLabeler,
    opts: &G2Options,
) -> Result<GuideResult> {
    ensure_same_dims(seeds, saliency)?;
    ensure_same_dims(seeds, image)?;
    if seeds.data().contains(&IGNORE) {
        return Err(Error::Usage("G2 seeds must not contain ignore pixels".into()));
    }

    let fg = foreground_components(saliency, opts.connectivity, opts.area_fraction)?;
    let seed_cs = label_seed_components(seeds, opts.connectivity);
    let table = intersect(&fg, &seed_cs)?;

    let (h, w) = (seeds.height(), seeds.width());
    let mut out = LabelMask::filled(h, w, BACKGROUND)?;
    let pixels = fg.pixel_lists();

    for rec in fg.records() {
        let members = &pixels[rec.id as usize - 1];
        let classes = table.fg_classes(rec.id);
        match classes.len() {
            0 => {
                for &i in members {
                    out.data_mut()[i] = IGNORE;
                }
            }
            1 => {
                let class = *classes.first().unwrap();
                for &i in members {
                    out.data_mut()[i] = class;
                }
            }
            _ => {
                let component = fg.component_mask(rec.id);
                let mut inside = LabelMask::filled(h, w, BACKGROUND)?;
                for &i in members {
                    inside.data_mut()[i] = seeds.data()[i];
                }
                let labels = labeler.label_region(&component, &inside, classes, image)?;
                for &i in members {
                    match labels.get(i) {
                        Some(c) if classes.contains(&c) => out.data_mut()[i] = c,
                        other => {
                            return Err(Error::Data(format!(
                                "region labeller returned {other:?} at pixel {i}, expected one of {classes:?}"
                            )))
                        }
                    }
                }
                if labels
                    .data()
                    .iter()
                    .zip(component.data())
                    .any(|(l, &inside)| l.is_some() && !inside)
                {
                    return Err(Error::Data(
                        "region labeller wrote outside its component".into(),
                    ));
                }
            }
        }
    }

    for (i, &sid) in seed_cs.id_map().iter().enumerate() {
        if sid == 0 || fg.id_map()[i] != 0 {
            continue;
        }
        out.data_mut()[i] = if table.seed_fgs(sid).is_empty() {
            seeds.data()[i]
        } else {
            IGNORE
        };
    }

    Ok(GuideResult::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::NearestSeedLabeler;
    use crate::regions::Connectivity;

    fn bin(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    fn no_filter() -> G2Options {
        G2Options {
            connectivity: Connectivity::Eight,
            area_fraction: 0.0,
        }
    }

    #[test]
    fn g0_single_label() {
        let sal = bin(2, 2, &[1, 0, 1, 1]);
        for seed in 0..20 {
            let g = guide_g0(&sal, &ImageLabels::new([12]), seed, 0).unwrap();
            assert_eq!(g.mask.data(), &[12, 0, 12, 12]);
            assert_eq!(g.stats.total(), 4);
        }
    }

    #[test]
    fn g0_deterministic() {
        let sal = bin(2, 2, &[1, 0, 1, 1]);
        let labels = ImageLabels::new([8, 12]);
        let a = guide_g0(&sal, &labels, 77, 3).unwrap();
        let b = guide_g0(&sal, &labels, 77, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn g0_pick_is_fair() {
        let labels = ImageLabels::new([1, 2]);
        let trials = 10_000u64;
        let ones = (0..trials).filter(|&s| pick_class(&labels, s, 0) == 1).count() as f64;
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((ones - trials as f64 * 0.5).abs() <= 3.0 * sigma, "ones = {ones}");
    }

    #[test]
    fn g0_empty_labels() {
        let sal = bin(1, 1, &[1]);
        assert!(matches!(
            guide_g0(&sal, &ImageLabels::default(), 0, 0),
            Err(Error::Usage(_))
        ));
    }

    fn one_component() -> ComponentSet {
        label_components(&bin(1, 4, &[0, 1, 1, 0]), Connectivity::Eight)
    }

    fn scores(entries: &[(u32, u8, f64, f64)]) -> G1Scores {
        let mut s = G1Scores::default();
        for &(k, c, full, masked) in entries {
            s.0.entry(k).or_default().insert(c, ScorePair { full, masked });
        }
        s
    }

    #[test]
    fn g1_positive_difference_wins() {
        let s = scores(&[(1, 12, 1.0, 2.2), (1, 8, 1.0, 0.7)]);
        let g = guide_g1(&one_component(), &ImageLabels::new([8, 12]), &s).unwrap();
        assert_eq!(g.mask.data(), &[0, 12, 12, 0]);
    }

    #[test]
    fn g1_no_positive_difference_ignored() {
        let s = scores(&[(1, 12, 1.0, 0.9), (1, 8, 1.0, 0.5)]);
        let g = guide_g1(&one_component(), &ImageLabels::new([8, 12]), &s).unwrap();
        assert_eq!(g.mask.data(), &[0, 255, 255, 0]);
    }

    #[test]
    fn g1_tie_goes_to_lowest_class() {
        let s = scores(&[(1, 12, 1.0, 2.0), (1, 8, 0.0, 1.0)]);
        let g = guide_g1(&one_component(), &ImageLabels::new([8, 12]), &s).unwrap();
        assert_eq!(g.mask.data(), &[0, 8, 8, 0]);
    }

    #[test]
    fn g1_missing_entry_named() {
        let s = scores(&[(1, 12, 1.0, 2.0)]);
        let err = guide_g1(&one_component(), &ImageLabels::new([8, 12]), &s).unwrap_err();
        assert!(err.to_string().contains("component 1 class 8"), "{err}");
    }

    #[test]
    fn g1_scores_json_shape() {
        let text = r#"{"img1": {"1": {"12": {"full": 0.5, "masked": 0.75}}}}"#;
        let file: G1ScoresFile = serde_json::from_str(text).unwrap();
        assert_eq!(file["img1"].0[&1][&12], ScorePair { full: 0.5, masked: 0.75 });
    }

    #[test]
    fn g2_single_category_fills_component() {
        let seeds = LabelMask::new(1, 5, vec![0, 0, 12, 0, 0]).unwrap();
        let sal = bin(1, 5, &[0, 1, 1, 1, 0]);
        let img = RgbImage::filled(1, 5, [0, 0, 0]).unwrap();
        let g = guide_g2(&seeds, &sal, &img, &NearestSeedLabeler, &no_filter()).unwrap();
        assert_eq!(g.mask.data(), &[0, 12, 12, 12, 0]);
    }

    #[test]
    fn g2_unseeded_component_ignored() {
        let seeds = LabelMask::filled(1, 5, 0).unwrap();
        let sal = bin(1, 5, &[0, 1, 1, 1, 0]);
        let img = RgbImage::filled(1, 5, [0, 0, 0]).unwrap();
        let g = guide_g2(&seeds, &sal, &img, &NearestSeedLabeler, &no_filter()).unwrap();
        assert_eq!(g.mask.data(), &[0, 255, 255, 255, 0]);
    }

    #[test]
    fn g2_isolated_seed_kept() {
        let seeds = LabelMask::new(1, 5, vec![12, 0, 0, 0, 0]).unwrap();
        let sal = bin(1, 5, &[0, 0, 0, 1, 1]);
        let img = RgbImage::filled(1, 5, [0, 0, 0]).unwrap();
        let g = guide_g2(&seeds, &sal, &img, &NearestSeedLabeler, &no_filter()).unwrap();
        assert_eq!(g.mask.data(), &[12, 0, 0, 255, 255]);
    }

    #[test]
    fn g2_rejects_ignore_in_seeds() {
        let seeds = LabelMask::new(1, 2, vec![255, 0]).unwrap();
        let sal = bin(1, 2, &[0, 0]);
        let img = RgbImage::filled(1, 2, [0, 0, 0]).unwrap();
        assert!(matches!(
            guide_g2(&seeds, &sal, &img, &NearestSeedLabeler, &no_filter()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn g2_dimension_mismatch() {
        let seeds = LabelMask::filled(1, 2, 0).unwrap();
        let sal = bin(2, 1, &[0, 0]);
        let img = RgbImage::filled(1, 2, [0, 0, 0]).unwrap();
        assert!(matches!(
            guide_g2(&seeds, &sal, &img, &NearestSeedLabeler, &no_filter()),
            Err(Error::Usage(_))
        ));
    }
}
