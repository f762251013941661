//! Synthetic scenes and brute-force reference implementations for tests.
//!
//! Scenes are painted from an integer LCG (Knuth's MMIX constants):
//!
//! ```text
//! state = state * 6364136223846793005 + 1442695040888963407   (mod 2^64)
//! draw  = state >> 32
//! ```
//!
//! Uniform floats are `(draw >> 8) / 2^24`, so every value is produced by
//! integer arithmetic followed by exact conversions and IEEE operations in a
//! fixed order. The same seed gives the same bytes on every platform.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::densecrf::PartialLabels;
use crate::error::{Error, Result};
use crate::guides::{foreground_components, G1Scores, G1ScoresFile, RegionLabeler, ScorePair};
use crate::maskcore::{
    normalize_scores, write_label_mask, write_rgb_image, write_score_map, BinaryMask, ImageLabels,
    LabelMask, RgbImage, ScoreMap, BACKGROUND, IGNORE,
};
use crate::pipeline::ManifestRecord;
use crate::regions::Connectivity;

#[derive(Clone, Debug)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        let mut lcg = Lcg(seed);
        // decorrelate nearby seeds
        for _ in 0..4 {
            lcg.next_u32();
        }
        lcg
    }

    pub fn next_u32(&mut self) -> u32 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 32) as u32
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 / (1u32 << 24) as f32
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }
}

/// Shape of the per-class response painted into the score map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreProfile {
    /// 1 inside the object, 0 outside.
    #[default]
    Flat,
    /// Falls linearly from 1 at the object center to 0 at its rim, so
    /// thresholded seeds cover only the object's core.
    Peaked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Labelled objects.
    pub blob_count: usize,
    /// Salient objects outside every class (background in ground truth).
    pub distractors: usize,
    pub blur_radius: usize,
    pub noise_amplitude: f32,
    pub profile: ScoreProfile,
    /// Grow objects past their grid cells so neighbours merge into shared
    /// salient regions.
    #[serde(default)]
    pub overlap: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 3,
            blob_count: 3,
            distractors: 0,
            blur_radius: 1,
            noise_amplitude: 0.1,
            profile: ScoreProfile::Flat,
            overlap: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub class: Option<u8>,
    pub center: (f32, f32),
    pub radii: (f32, f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub blobs: Vec<Blob>,
    pub gt: LabelMask,
    pub labels: ImageLabels,
    /// Normalized class heatmaps.
    pub scores: ScoreMap,
    /// Single-channel saliency probabilities.
    pub saliency: ScoreMap,
    pub image: RgbImage,
}

const BACKGROUND_RGB: [u8; 3] = [96, 104, 112];
const DISTRACTOR_RGB: [u8; 3] = [200, 200, 60];

fn class_rgb(class: u8) -> [u8; 3] {
    let palette = [
        [200, 40, 40],
        [40, 180, 60],
        [50, 70, 210],
        [210, 120, 30],
        [150, 50, 180],
        [30, 170, 170],
    ];
    palette[(class as usize - 1) % palette.len()]
}

fn box_blur(src: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            let mut sum = 0.0f32;
            for y in r0..=r1 {
                for x in c0..=c1 {
                    sum += src[y * w + x];
                }
            }
            out[r * w + c] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f32;
        }
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::Usage("scene canvas must be non-empty".into()));
    }
    if spec.num_classes == 0 || spec.num_classes > crate::maskcore::MAX_CLASSES {
        return Err(Error::Usage(format!(
            "class count {} outside 1..={}",
            spec.num_classes,
            crate::maskcore::MAX_CLASSES
        )));
    }
    if spec.blob_count == 0 {
        return Err(Error::Usage("a scene needs at least one labelled object".into()));
    }
    if !(spec.noise_amplitude >= 0.0 && spec.noise_amplitude.is_finite()) {
        return Err(Error::Usage("noise amplitude must be non-negative".into()));
    }
    let total = spec.blob_count + spec.distractors;
    let grid = (1..).find(|g| g * g >= total).unwrap();
    let (cell_h, cell_w) = (h / grid, w / grid);
    if cell_h < 3 || cell_w < 3 {
        return Err(Error::Usage(format!(
            "{h}x{w} canvas is too small for {total} objects"
        )));
    }

    let mut rng = Lcg::new(spec.seed);
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    for i in (1..cells.len()).rev() {
        let j = rng.below(i as u32 + 1) as usize;
        cells.swap(i, j);
    }

    let mut blobs = Vec::with_capacity(total);
    for (k, &cell) in cells.iter().take(total).enumerate() {
        let class = (k < spec.blob_count).then(|| rng.below(spec.num_classes as u32) as u8 + 1);
        let (top, left) = ((cell / grid) * cell_h, (cell % grid) * cell_w);
        // radii below 0.45 of the cell keep a one-pixel gap between cells;
        // above 0.55 they reach into the neighbouring cells
        let base = if spec.overlap { 0.55 } else { 0.25 };
        let ry = (cell_h as f32 - 1.0) * (base + 0.2 * rng.next_unit());
        let rx = (cell_w as f32 - 1.0) * (base + 0.2 * rng.next_unit());
        let cy = top as f32 + (cell_h as f32 - 1.0) / 2.0;
        let cx = left as f32 + (cell_w as f32 - 1.0) / 2.0;
        blobs.push(Blob {
            class,
            center: (cy, cx),
            radii: (ry.max(0.5), rx.max(0.5)),
        });
    }

    let n = h * w;
    let mut gt = vec![BACKGROUND; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut radial = vec![0.0f32; n];
    for (k, b) in blobs.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f32 - b.center.0) / b.radii.0;
                let dx = (c as f32 - b.center.1) / b.radii.1;
                let d2 = dy * dy + dx * dx;
                if d2 <= 1.0 {
                    let i = r * w + c;
                    owner[i] = Some(k);
                    radial[i] = d2.sqrt();
                    if let Some(class) = b.class {
                        gt[i] = class;
                    }
                }
            }
        }
    }

    let mut scores = Vec::with_capacity(spec.num_classes * n);
    for class in 1..=spec.num_classes as u8 {
        let response: Vec<f32> = (0..n)
            .map(|i| {
                if gt[i] != class {
                    0.0
                } else {
                    match spec.profile {
                        ScoreProfile::Flat => 1.0,
                        ScoreProfile::Peaked => 1.0 - radial[i],
                    }
                }
            })
            .collect();
        let mut blurred = box_blur(&response, h, w, spec.blur_radius);
        for v in blurred.iter_mut() {
            *v += spec.noise_amplitude * rng.next_unit();
        }
        scores.extend(blurred);
    }
    let scores = normalize_scores(&ScoreMap::new(spec.num_classes, h, w, scores)?)?;

    let salient: Vec<f32> = owner
        .iter()
        .map(|o| if o.is_some() { 1.0 } else { 0.0 })
        .collect();
    let mut sal = box_blur(&salient, h, w, spec.blur_radius);
    for v in sal.iter_mut() {
        *v += spec.noise_amplitude * rng.next_unit();
    }
    let saliency = normalize_scores(&ScoreMap::new(1, h, w, sal)?)?;

    let mut image = RgbImage::filled(h, w, BACKGROUND_RGB)?;
    for (i, o) in owner.iter().enumerate() {
        let base = match *o {
            Some(k) => blobs[k].class.map_or(DISTRACTOR_RGB, class_rgb),
            None => BACKGROUND_RGB,
        };
        let mut px = [0u8; 3];
        for (ch, p) in px.iter_mut().enumerate() {
            let jitter = rng.below(17) as i32 - 8;
            *p = (base[ch] as i32 + jitter).clamp(0, 255) as u8;
        }
        image.set_pixel(i, px);
    }

    let labels = ImageLabels::new(blobs.iter().filter_map(|b| b.class));
    Ok(SyntheticScene {
        spec: spec.clone(),
        blobs,
        gt: LabelMask::new(h, w, gt)?,
        labels,
        scores,
        saliency,
        image,
    })
}

impl SyntheticScene {
    /// Ground-truth foreground (any class) as a binary mask.
    pub fn gt_foreground(&self) -> BinaryMask {
        BinaryMask::new(
            self.gt.height(),
            self.gt.width(),
            self.gt.data().iter().map(|&v| v != BACKGROUND && v != IGNORE).collect(),
        )
        .expect("dimensions come from gt")
    }

    /// Stand-in classifier scores for G1: `full` is 0.5 for every present
    /// class, `masked` is the fraction of the component covered by that class.
    pub fn g1_scores(&self, saliency: &BinaryMask, connectivity: Connectivity, area_fraction: f64) -> Result<G1Scores> {
        let fg = foreground_components(saliency, connectivity, area_fraction)?;
        let mut out = G1Scores::default();
        for (k, pixels) in fg.pixel_lists().iter().enumerate() {
            let mut per_class = BTreeMap::new();
            for &c in self.labels.present() {
                let hits = pixels.iter().filter(|&&i| self.gt.data()[i] == c).count();
                per_class.insert(
                    c,
                    ScorePair {
                        full: 0.5,
                        masked: hits as f64 / pixels.len() as f64,
                    },
                );
            }
            out.0.insert(k as u32 + 1, per_class);
        }
        Ok(out)
    }
}

/// Region labeller that assigns every component pixel the class of its
/// nearest seed pixel inside the component (squared Euclidean distance,
/// lowest class on ties). Stands in for the CRF in rule-logic tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestSeedLabeler;

impl RegionLabeler for NearestSeedLabeler {
    fn label_region(
        &self,
        component: &BinaryMask,
        seeds: &LabelMask,
        classes: &BTreeSet<u8>,
        _image: &RgbImage,
    ) -> Result<PartialLabels> {
        let w = component.width();
        let sources: Vec<(usize, usize, u8)> = (0..seeds.len())
            .filter(|&i| component.data()[i] && classes.contains(&seeds.data()[i]))
            .map(|i| (i / w, i % w, seeds.data()[i]))
            .collect();
        if sources.is_empty() {
            return Err(Error::Usage("component has no seed pixels".into()));
        }
        let mut out = PartialLabels::new(component.height(), w);
        for i in (0..component.data().len()).filter(|&i| component.data()[i]) {
            let (r, c) = (i / w, i % w);
            let best = sources
                .iter()
                .map(|&(sr, sc, class)| {
                    let d = sr.abs_diff(r).pow(2) + sc.abs_diff(c).pow(2);
                    (d, class)
                })
                .min()
                .unwrap();
            out.set(i, best.1);
        }
        Ok(out)
    }
}

/// Straight-line reimplementation of the G2 rules, with the nearest-seed
/// rule standing in for the CRF. Shares no code with the production path.
pub fn oracle_g2(
    seeds: &LabelMask,
    saliency: &BinaryMask,
    connectivity: Connectivity,
    area_fraction: f64,
) -> LabelMask {
    let (h, w) = (seeds.height(), seeds.width());
    let n = h * w;
    let neighbours = |p: usize| -> Vec<usize> {
        let (r, c) = ((p / w) as i64, (p % w) as i64);
        let mut v = Vec::new();
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                if (dr, dc) == (0, 0) {
                    continue;
                }
                if connectivity == Connectivity::Four && dr != 0 && dc != 0 {
                    continue;
                }
                let (nr, nc) = (r + dr, c + dc);
                if nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64 {
                    v.push(nr as usize * w + nc as usize);
                }
            }
        }
        v
    };
    let flood = |member: &dyn Fn(usize) -> Option<u8>| -> Vec<Vec<usize>> {
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for s in 0..n {
            let Some(key) = member(s) else { continue };
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(p) = queue.pop_front() {
                for q in neighbours(p) {
                    if !seen[q] && member(q) == Some(key) {
                        seen[q] = true;
                        comp.push(q);
                        queue.push_back(q);
                    }
                }
            }
            comps.push(comp);
        }
        comps
    };

    let min_area = (area_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let fg_comps: Vec<Vec<usize>> = flood(&|p| saliency.data()[p].then_some(1))
        .into_iter()
        .filter(|c| c.len() >= min_area)
        .collect();
    let mut in_fg = vec![false; n];
    for comp in &fg_comps {
        for &p in comp {
            in_fg[p] = true;
        }
    }
    let seed_comps = flood(&|p| {
        let v = seeds.data()[p];
        (v != BACKGROUND && v != IGNORE).then_some(v)
    });

    let mut out = vec![BACKGROUND; n];
    for comp in &fg_comps {
        let mut classes: Vec<u8> = comp
            .iter()
            .map(|&p| seeds.data()[p])
            .filter(|&v| v != BACKGROUND)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        match classes.len() {
            0 => comp.iter().for_each(|&p| out[p] = IGNORE),
            1 => comp.iter().for_each(|&p| out[p] = classes[0]),
            _ => {
                for &p in comp {
                    let mut best: Option<(usize, u8)> = None;
                    for &q in comp {
                        let v = seeds.data()[q];
                        if v == BACKGROUND {
                            continue;
                        }
                        let dr = (p / w) as i64 - (q / w) as i64;
                        let dc = (p % w) as i64 - (q % w) as i64;
                        let d = (dr * dr + dc * dc) as usize;
                        let better = match best {
                            None => true,
                            Some((bd, bc)) => d < bd || (d == bd && v < bc),
                        };
                        if better {
                            best = Some((d, v));
                        }
                    }
                    out[p] = best.unwrap().1;
                }
            }
        }
    }
    for comp in &seed_comps {
        let touches = comp.iter().any(|&p| in_fg[p]);
        for &p in comp {
            if !in_fg[p] {
                out[p] = if touches { IGNORE } else { seeds.data()[p] };
            }
        }
    }
    LabelMask::new(h, w, out).expect("dimensions come from seeds")
}

/// Options for writing a ready-to-run fixture dataset.
#[derive(Clone, Debug)]
pub struct FixtureSetSpec {
    pub count: usize,
    pub seed: u64,
    /// Template; its `seed` is replaced per scene.
    pub scene: SceneSpec,
}

/// Per-scene seed derived from the dataset seed and scene index.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut lcg = Lcg::new(base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    ((lcg.next_u32() as u64) << 32) | lcg.next_u32() as u64
}

pub fn write_fixture_set(dir: impl AsRef<Path>, spec: &FixtureSetSpec) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::Io(e).in_file(dir))?;
    let mut manifest = String::new();
    let mut g1: G1ScoresFile = BTreeMap::new();
    for index in 0..spec.count {
        let scene_spec = SceneSpec {
            seed: scene_seed(spec.seed, index),
            ..spec.scene.clone()
        };
        let scene = generate_scene(&scene_spec)?;
        let id = format!("scene{index:04}");
        let rel = |suffix: &str| format!("{id}{suffix}");
        write_rgb_image(&scene.image, dir.join(rel(".png")))?;
        write_score_map(&scene.scores, dir.join(rel(".sgsm")))?;
        write_score_map(&scene.saliency, dir.join(rel(".sal.sgsm")))?;
        write_label_mask(&scene.gt, dir.join(rel(".gt.png")))?;
        let saliency = crate::maskcore::binarize_saliency(&scene.saliency)?;
        g1.insert(
            id.clone(),
            scene.g1_scores(&saliency, Connectivity::Eight, crate::guides::DEFAULT_AREA_FRACTION)?,
        );
        let record = ManifestRecord {
            id: id.clone(),
            image: rel(".png").into(),
            heatmap: rel(".sgsm").into(),
            saliency: rel(".sal.sgsm").into(),
            labels: scene.labels.present().iter().copied().collect(),
            gt: Some(rel(".gt.png").into()),
        };
        manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).map_err(|e| Error::Io(e).in_file(&manifest_path))?;
    let g1_path = dir.join("g1_scores.json");
    fs::write(
        &g1_path,
        serde_json::to_string_pretty(&g1).expect("scores serialize"),
    )
    .map_err(|e| Error::Io(e).in_file(&g1_path))?;
    Ok(manifest_path)
}
