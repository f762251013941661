//! Raster types shared by every stage: score heatmaps, label masks, binary
//! masks, RGB images, and the class registry.
//!
//! Label values follow the Pascal VOC conventions: 0 is background, `1..=C`
//! are foreground classes and 255 marks pixels to ignore.

mod io;

use std::collections::BTreeSet;

pub use io::{
    pascal_palette, read_binary_mask, read_label_mask, read_rgb_image, read_saliency,
    read_score_map, write_binary_mask, write_label_mask, write_rgb_image, write_score_map,
    SGSM_HEADER_LEN, SGSM_MAGIC, SGSM_VERSION,
};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;
/// Largest usable class count: 255 is reserved for ignore.
pub const MAX_CLASSES: usize = 254;

const PASCAL_VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Ordered foreground class names. Index `i` in `names` is class id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Usage("class registry must not be empty".into()));
        }
        if names.len() > MAX_CLASSES {
            return Err(Error::Usage(format!(
                "class registry holds at most {MAX_CLASSES} classes, got {}",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Usage("class names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Usage(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    /// The 20 Pascal VOC categories in canonical order.
    pub fn pascal_voc() -> Self {
        Self {
            names: PASCAL_VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Registry with generic names `class1..classN`, used by synthetic data.
    pub fn synthetic(count: usize) -> Result<Self> {
        Self::new((1..=count).map(|i| format!("class{i}")))
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Name of class id `class` (1-based).
    pub fn name(&self, class: u8) -> Option<&str> {
        (class as usize)
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| (i + 1) as u8)
    }
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self::pascal_voc()
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Usage(format!(
            "raster dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Multi-channel float heatmap, channel-major and row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Usage("score map needs at least one channel".into()));
        }
        check_dims(height, width)?;
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Usage(format!(
                "score map {channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }
}

/// Clamp negatives to zero, then divide every channel by its own maximum.
///
/// Channels that are identically zero (after clamping) are left untouched.
pub fn normalize_scores(map: &ScoreMap) -> Result<ScoreMap> {
    if let Some(pos) = map.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite score {} at flat index {pos}",
            map.data[pos]
        )));
    }
    let mut out = map.clone();
    for c in 0..out.channels {
        let channel = out.channel_mut(c);
        for v in channel.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let max = channel.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            for v in channel.iter_mut() {
                *v /= max;
            }
        }
    }
    Ok(out)
}

/// Threshold a single-channel saliency probability map at half its maximum.
pub fn binarize_saliency(prob: &ScoreMap) -> Result<BinaryMask> {
    if prob.channels != 1 {
        return Err(Error::Usage(format!(
            "saliency map must have one channel, got {}",
            prob.channels
        )));
    }
    if let Some(pos) = prob.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data(format!(
            "saliency value {} at index {pos} is not a finite non-negative probability",
            prob.data[pos]
        )));
    }
    let max = prob.data.iter().copied().fold(0.0f32, f32::max);
    let data = if max > 0.0 {
        let cutoff = 0.5 * max;
        prob.data.iter().map(|&v| v >= cutoff).collect()
    } else {
        vec![false; prob.data.len()]
    };
    BinaryMask::new(prob.height, prob.width, data)
}

/// Per-pixel class indices: 0 background, `1..=C` classes, 255 ignore.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::Usage(format!(
                "label mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Check the value-set invariant `{0..=num_classes, 255}`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE && v as usize > num_classes {
                return Err(Error::Data(format!(
                    "label {v} at pixel ({}, {}) is neither background, a class in 1..={num_classes}, nor ignore",
                    i / self.width,
                    i % self.width
                )));
            }
        }
        Ok(())
    }

    pub fn same_dims<T: Raster>(&self, other: &T) -> bool {
        self.height == other.height() && self.width == other.width()
    }

    /// Distinct foreground classes present (excludes background and ignore).
    pub fn classes(&self) -> BTreeSet<u8> {
        self.data
            .iter()
            .copied()
            .filter(|&v| v != BACKGROUND && v != IGNORE)
            .collect()
    }
}

/// Saliency foreground mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::Usage(format!(
                "binary mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::Usage(format!(
                "rgb image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Uniform image of a single color.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> [u8; 3] {
        let o = index * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, index: usize, rgb: [u8; 3]) {
        self.data[index * 3..index * 3 + 3].copy_from_slice(&rgb);
    }

    /// Copy of the image with every pixel outside `keep` set to black.
    pub fn masked(&self, keep: &BinaryMask) -> Result<RgbImage> {
        ensure_same_dims(self, keep)?;
        let mut out = self.clone();
        for (i, &k) in keep.data().iter().enumerate() {
            if !k {
                out.set_pixel(i, [0, 0, 0]);
            }
        }
        Ok(out)
    }
}

/// Foreground classes known to be present in an image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ImageLabels {
    present: BTreeSet<u8>,
}

impl ImageLabels {
    pub fn new(classes: impl IntoIterator<Item = u8>) -> Self {
        Self {
            present: classes.into_iter().collect(),
        }
    }

    pub fn present(&self) -> &BTreeSet<u8> {
        &self.present
    }

    pub fn contains(&self, class: u8) -> bool {
        self.present.contains(&class)
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    /// Every class must be a registry class in `1..=num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .present
            .iter()
            .find(|&&c| c == BACKGROUND || c as usize > num_classes)
        {
            Some(c) => Err(Error::Usage(format!(
                "image label {c} outside class range 1..={num_classes}"
            ))),
            None => Ok(()),
        }
    }
}

/// Anything with a height and width.
pub trait Raster {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
}

macro_rules! impl_raster {
    ($($t:ty),*) => {$(
        impl Raster for $t {
            fn height(&self) -> usize { self.height }
            fn width(&self) -> usize { self.width }
        }
    )*};
}

impl_raster!(ScoreMap, LabelMask, BinaryMask, RgbImage);

pub(crate) fn ensure_same_dims<A: Raster, B: Raster>(a: &A, b: &B) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Usage(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_divides_by_channel_max() {
        let map = ScoreMap::new(1, 1, 2, vec![2.0, 4.0]).unwrap();
        assert_eq!(normalize_scores(&map).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn normalize_leaves_zero_channel() {
        let map = ScoreMap::new(2, 1, 2, vec![0.0, 0.0, 3.0, 1.5]).unwrap();
        let out = normalize_scores(&map).unwrap();
        assert_eq!(out.channel(0), &[0.0, 0.0]);
        assert_eq!(out.channel(1), &[1.0, 0.5]);
    }

    #[test]
    fn normalize_clamps_negatives() {
        let map = ScoreMap::new(1, 1, 3, vec![-2.0, 1.0, 2.0]).unwrap();
        assert_eq!(normalize_scores(&map).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let map = ScoreMap::new(1, 1, 2, vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(normalize_scores(&map), Err(Error::Data(_))));
    }

    #[test]
    fn binarize_half_max_rule() {
        let map = ScoreMap::new(1, 1, 3, vec![0.1, 0.4, 0.8]).unwrap();
        assert_eq!(binarize_saliency(&map).unwrap().data(), &[false, true, true]);
    }

    #[test]
    fn binarize_zero_map_is_background() {
        let map = ScoreMap::zeros(1, 3, 3).unwrap();
        assert_eq!(binarize_saliency(&map).unwrap().count(), 0);
    }

    #[test]
    fn binarize_rejects_multichannel() {
        let map = ScoreMap::zeros(2, 2, 2).unwrap();
        assert!(matches!(binarize_saliency(&map), Err(Error::Usage(_))));
    }

    #[test]
    fn registry_defaults_to_pascal() {
        let reg = ClassRegistry::default();
        assert_eq!(reg.count(), 20);
        assert_eq!(reg.name(1), Some("aeroplane"));
        assert_eq!(reg.name(12), Some("dog"));
        assert_eq!(reg.name(20), Some("tvmonitor"));
        assert_eq!(reg.name(0), None);
        assert_eq!(reg.id_of("person"), Some(15));
    }

    #[test]
    fn registry_rejects_duplicates_and_empty() {
        assert!(ClassRegistry::new(["a", "a"]).is_err());
        assert!(ClassRegistry::new(["a", ""]).is_err());
        assert!(ClassRegistry::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn label_mask_validation() {
        let ok = LabelMask::new(2, 2, vec![0, 1, 255, 20]).unwrap();
        assert!(ok.validate(20).is_ok());
        let bad = LabelMask::new(1, 2, vec![0, 200]).unwrap();
        assert!(matches!(bad.validate(20), Err(Error::Data(_))));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ScoreMap::new(1, 0, 3, vec![]).is_err());
        assert!(ScoreMap::new(0, 1, 1, vec![]).is_err());
        assert!(LabelMask::new(0, 0, vec![]).is_err());
    }

    fn score_map(max_c: usize, max_side: usize) -> impl Strategy<Value = ScoreMap> {
        (1..=max_c, 1..=max_side, 1..=max_side).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-1.0f32..10.0, c * h * w)
                .prop_map(move |data| ScoreMap::new(c, h, w, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalized_channels_peak_at_one(map in score_map(3, 8)) {
            let out = normalize_scores(&map).unwrap();
            for c in 0..out.channels() {
                let max = out.channel(c).iter().copied().fold(0.0f32, f32::max);
                prop_assert!(max == 1.0 || out.channel(c).iter().all(|&v| v == 0.0));
                prop_assert!(out.channel(c).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn normalize_is_idempotent(map in score_map(3, 8)) {
            let once = normalize_scores(&map).unwrap();
            let twice = normalize_scores(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        // Power-of-two scales are exact in binary floating point, so the
        // comparison against half the maximum cannot be perturbed by rounding.
        #[test]
        fn binarize_scale_invariant_pow2(
            data in proptest::collection::vec(0.0f32..1.0, 64),
            exp in -20i32..20,
        ) {
            let map = ScoreMap::new(1, 8, 8, data.clone()).unwrap();
            let s = 2f32.powi(exp);
            let scaled = ScoreMap::new(1, 8, 8, data.iter().map(|v| v * s).collect()).unwrap();
            prop_assert_eq!(binarize_saliency(&map).unwrap(), binarize_saliency(&scaled).unwrap());
        }

        // Small integers times small integer scales are also exact.
        #[test]
        fn binarize_scale_invariant_integer(
            data in proptest::collection::vec(0u16..4096, 64),
            s in 1u16..1024,
        ) {
            let map = ScoreMap::new(1, 8, 8, data.iter().map(|&v| v as f32).collect()).unwrap();
            let scaled = ScoreMap::new(1, 8, 8, data.iter().map(|&v| (v as f32) * s as f32).collect()).unwrap();
            prop_assert_eq!(binarize_saliency(&map).unwrap(), binarize_saliency(&scaled).unwrap());
        }
    }
}
