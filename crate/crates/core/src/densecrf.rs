//! Fully connected CRF with Gaussian appearance and smoothness kernels,
//! solved by synchronous mean-field iteration under the Potts model.
//!
//! For pixels `i`, `j` with positions `p` and colors `I`:
//!
//! ```text
//! k(i, j) = w1 · exp(-|p_i - p_j|² / 2θα² - |I_i - I_j|² / 2θβ²)
//!         + w2 · exp(-|p_i - p_j|² / 2θγ²)
//! Q_i(l) ∝ exp(-U_i(l) + Σ_{j≠i} k(i, j) Q_j(l))
//! ```
//!
//! The exact path sums over every pair and is capped at
//! [`EXACT_PIXEL_LIMIT`] pixels. Setting [`CrfParams::approximate`] switches
//! to a truncated kernel that only sums over pixels within
//! `3 · max(θα, θγ)` of each other.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{
    ensure_same_dims, BinaryMask, LabelMask, Raster, RgbImage, ScoreMap, BACKGROUND, IGNORE,
};

/// Largest pixel count the exact O(N²) path accepts.
pub const EXACT_PIXEL_LIMIT: usize = 128 * 128;
/// Probabilities are clipped to `[PROB_EPSILON, 1]` before taking logs.
pub const PROB_EPSILON: f64 = 1e-5;
pub const DEFAULT_ITERATIONS: usize = 10;
/// Probability a seed pixel puts on its own class when building unaries.
pub const DEFAULT_SEED_CONFIDENCE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfParams {
    pub w1: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub w2: f64,
    pub theta_gamma: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Use the truncated-kernel path (required above the exact pixel limit).
    #[serde(default)]
    pub approximate: bool,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl CrfParams {
    pub fn v1() -> Self {
        Self {
            w1: 10.0,
            theta_alpha: 80.0,
            theta_beta: 13.0,
            w2: 3.0,
            theta_gamma: 3.0,
            iterations: DEFAULT_ITERATIONS,
            approximate: false,
        }
    }

    /// DeepLab-LargeFOV settings, the default throughout.
    pub fn v2() -> Self {
        Self {
            w1: 4.0,
            theta_alpha: 121.0,
            theta_beta: 5.0,
            w2: 3.0,
            theta_gamma: 3.0,
            iterations: DEFAULT_ITERATIONS,
            approximate: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "v1" => Ok(Self::v1()),
            "v2" => Ok(Self::v2()),
            other => Err(Error::Usage(format!(
                "unknown CRF preset {other:?} (expected v1 or v2)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bandwidths = [self.theta_alpha, self.theta_beta, self.theta_gamma];
        if bandwidths.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return Err(Error::Usage("CRF bandwidths must be positive".into()));
        }
        if [self.w1, self.w2]
            .iter()
            .any(|&w| !(w.is_finite() && w >= 0.0))
        {
            return Err(Error::Usage("CRF weights must be non-negative".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Usage("CRF needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Spatial cut-off radius of the truncated path.
    pub fn truncation_radius(&self) -> f64 {
        3.0 * self.theta_alpha.max(self.theta_gamma)
    }
}

impl Default for CrfParams {
    fn default() -> Self {
        Self::v2()
    }
}

/// Negative log-probabilities, label-major: `data[l * H * W + pixel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    labels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl UnaryField {
    pub fn new(labels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if labels < 2 {
            return Err(Error::Usage(format!(
                "a CRF needs at least two labels, got {labels}"
            )));
        }
        if height == 0 || width == 0 || data.len() != labels * height * width {
            return Err(Error::Usage(format!(
                "unary field {labels}x{height}x{width} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("unaries must be finite".into()));
        }
        Ok(Self {
            labels,
            height,
            width,
            data,
        })
    }

    /// Unaries `-ln p` from a probability map, after clipping to
    /// `[PROB_EPSILON, 1]` and renormalizing each pixel.
    pub fn from_probabilities(probs: &ScoreMap) -> Result<Self> {
        let (labels, n) = (probs.channels(), probs.pixels());
        let mut data = vec![0.0; labels * n];
        for i in 0..n {
            let mut sum = 0.0;
            for l in 0..labels {
                let p = probs.data()[l * n + i] as f64;
                if p.is_nan() {
                    return Err(Error::Data(format!("NaN probability at pixel {i}")));
                }
                let p = p.clamp(PROB_EPSILON, 1.0);
                data[l * n + i] = p;
                sum += p;
            }
            for l in 0..labels {
                data[l * n + i] = -(data[l * n + i] / sum).ln();
            }
        }
        Self::new(labels, probs.height(), probs.width(), data)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-pixel label of minimum unary, lowest label on ties.
    pub fn argmin(&self) -> Vec<usize> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                (0..self.labels)
                    .fold((0, f64::INFINITY), |best, l| {
                        let u = self.data[l * n + i];
                        if u < best.1 {
                            (l, u)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

impl Raster for UnaryField {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
}

/// Mean-field marginals, label-major like [`UnaryField`].
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField {
    labels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MarginalField {
    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, label: usize, pixel: usize) -> f64 {
        self.data[label * self.height * self.width + pixel]
    }

    /// Per-pixel most probable label, lowest label on ties.
    pub fn argmax(&self) -> Vec<usize> {
        argmax_label_major(&self.data, self.labels, self.height * self.width)
    }
}

fn argmax_label_major(q: &[f64], labels: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let mut best = (0, q[i]);
            for l in 1..labels {
                let v = q[l * n + i];
                if v > best.1 {
                    best = (l, v);
                }
            }
            best.0
        })
        .collect()
}

/// Pixels taking part in inference, laid out on an `height × width` grid.
struct Lattice {
    height: usize,
    width: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// grid cell → active index + 1, 0 for inactive cells
    slot: Vec<u32>,
    /// row, column, red, green, blue of each active pixel, in separate
    /// lanes so kernel rows vectorize
    features: [Vec<f32>; 5],
}

impl Lattice {
    fn new(height: usize, width: usize, pixels: impl IntoIterator<Item = (usize, usize, [u8; 3])>) -> Self {
        let mut lat = Self {
            height,
            width,
            rows: Vec::new(),
            cols: Vec::new(),
            slot: vec![0; height * width],
            features: Default::default(),
        };
        for (r, c, rgb) in pixels {
            lat.rows.push(r);
            lat.cols.push(c);
            lat.slot[r * width + c] = lat.rows.len() as u32;
            let f = [r as f32, c as f32, rgb[0] as f32, rgb[1] as f32, rgb[2] as f32];
            for (lane, v) in lat.features.iter_mut().zip(f) {
                lane.push(v);
            }
        }
        lat
    }

    fn full(image: &RgbImage) -> Self {
        let w = image.width();
        Self::new(
            image.height(),
            w,
            (0..image.height() * w).map(|i| (i / w, i % w, image.pixel(i))),
        )
    }

    fn len(&self) -> usize {
        self.rows.len()
    }
}

/// `e^x` for `x <= 0` from a degree-6 polynomial after range reduction
/// (relative error below 2e-7). Plain arithmetic, so loops over it
/// vectorize and give the same bits on every platform. Inputs below -87
/// are clamped there; the result is then negligible either way.
#[inline(always)]
fn exp_neg(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5·2^23 rounds to the nearest integer, which then sits in the
    // low mantissa bits; avoids a saturating float→int cast
    const SHIFT: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let t = x * LOG2E + SHIFT;
    let nf = t - SHIFT;
    let n = t.to_bits().wrapping_sub(SHIFT.to_bits());
    let r = x - nf * LN2_HI - nf * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(n.wrapping_add(127) << 23)
}

struct Kernel {
    w1: f64,
    w2: f64,
    /// `1 / 2θα²` and `1 / 2θβ²`
    inv_alpha: f32,
    inv_beta: f32,
    /// smoothness factor along one axis, indexed by `len - 1 + offset` for
    /// offsets in `-(len-1)..len`; the 2-D kernel is its outer product
    smooth: Vec<f64>,
    smooth_center: usize,
}

fn gauss(d: f64, theta: f64) -> f64 {
    (-(d * d) / (2.0 * theta * theta)).exp()
}

impl Kernel {
    fn new(params: &CrfParams, height: usize, width: usize) -> Self {
        let len = height.max(width);
        let smooth = (0..2 * len - 1)
            .map(|k| gauss(k as f64 - (len - 1) as f64, params.theta_gamma))
            .collect();
        Self {
            w1: params.w1,
            w2: params.w2,
            inv_alpha: (1.0 / (2.0 * params.theta_alpha * params.theta_alpha)) as f32,
            inv_beta: (1.0 / (2.0 * params.theta_beta * params.theta_beta)) as f32,
            smooth,
            smooth_center: len - 1,
        }
    }

    /// Appearance factors between `i` and pixels `start..start + out.len()`.
    #[inline(always)]
    fn appearance_into(&self, lat: &Lattice, i: usize, start: usize, out: &mut [f32]) {
        let len = out.len();
        let [y, x, r, g, b] = &lat.features;
        let (y, x) = (&y[start..start + len], &x[start..start + len]);
        let (r, g, b) = (&r[start..start + len], &g[start..start + len], &b[start..start + len]);
        let f = &lat.features;
        let (yi, xi, ri, gi, bi) = (f[0][i], f[1][i], f[2][i], f[3][i], f[4][i]);
        let (ia, ib) = (self.inv_alpha, self.inv_beta);
        for k in 0..len {
            let (dy, dx) = (yi - y[k], xi - x[k]);
            let (dr, dg, db) = (ri - r[k], gi - g[k], bi - b[k]);
            let e = (dy * dy + dx * dx) * ia + (dr * dr + dg * dg + db * db) * ib;
            out[k] = exp_neg(-e);
        }
    }

    #[inline]
    fn appearance(&self, lat: &Lattice, i: usize, j: usize) -> f64 {
        let mut k = [0.0f32];
        self.appearance_into(lat, i, j, &mut k);
        k[0] as f64
    }

    #[inline]
    fn smoothness(&self, lat: &Lattice, i: usize, j: usize) -> f64 {
        let dy = lat.rows[i].abs_diff(lat.rows[j]);
        let dx = lat.cols[i].abs_diff(lat.cols[j]);
        self.smooth[self.smooth_center + dy] * self.smooth[self.smooth_center + dx]
    }

    #[inline]
    fn eval(&self, lat: &Lattice, i: usize, j: usize) -> f64 {
        self.w1 * self.appearance(lat, i, j) + self.w2 * self.smoothness(lat, i, j)
    }

    /// Appearance factors between `i` and every active pixel (0 at `i`).
    fn appearance_row(&self, lat: &Lattice, i: usize, row: &mut [f32]) {
        fill_appearance(self, lat, i, 0, row);
        row[i] = 0.0;
    }

    /// 1-D smoothness factors against positions `0..len` seen from `at`.
    #[inline]
    fn smooth_from(&self, at: usize, len: usize) -> &[f64] {
        &self.smooth[self.smooth_center - at..][..len]
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn fill_appearance_avx2(k: &Kernel, lat: &Lattice, i: usize, start: usize, out: &mut [f32]) {
    k.appearance_into(lat, i, start, out)
}

/// [`Kernel::appearance_into`], using AVX2 lanes where available (same
/// results, wider vectors).
fn fill_appearance(k: &Kernel, lat: &Lattice, i: usize, start: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { fill_appearance_avx2(k, lat, i, start, out) };
    }
    k.appearance_into(lat, i, start, out)
}

/// Appearance kernels are computed once per inference and kept while their
/// retained tiles fit in this many bytes; beyond it rows are recomputed
/// every iteration.
const APPEARANCE_CACHE_BYTES: usize = 512 << 20;
const TILE: usize = 64;

/// Tiles whose entries all fall below this are dropped; skipping one
/// moves a message by at most `TILE · NEGLIGIBLE`, far below f32 rounding.
const NEGLIGIBLE: f32 = 1e-12;

/// Upper-triangular blocks of the symmetric appearance matrix, each a
/// row-major `TILE × TILE` tile; indices past `n` are zero padding.
/// Pixels are grouped by coarse colour first, so tiles pairing distinct
/// colours come out negligible and are skipped.
struct AppearanceTiles {
    blocks: usize,
    /// tile position → active index
    order: Vec<usize>,
    /// `(bi, bj)` of each retained tile, in `data` order
    live: Vec<(usize, usize)>,
    data: Vec<f32>,
}

impl AppearanceTiles {
    /// Hands `data` back when the retained tiles would exceed the budget.
    fn build(lat: &Lattice, kernel: &Kernel, mut data: Vec<f32>) -> std::result::Result<Self, Vec<f32>> {
        let n = lat.len();
        let blocks = n.div_ceil(TILE);
        let [_, _, r, g, b] = &lat.features;
        let bin = |i: usize| (r[i] as u32 >> 5, g[i] as u32 >> 5, b[i] as u32 >> 5);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (bin(i), i));
        let sorted = Lattice {
            height: lat.height,
            width: lat.width,
            rows: Vec::new(),
            cols: Vec::new(),
            slot: Vec::new(),
            features: lat.features.clone().map(|f| order.iter().map(|&i| f[i]).collect()),
        };
        // one task per block row; only the non-negligible tiles are kept
        let rows: Vec<(Vec<usize>, Vec<f32>)> = (0..blocks)
            .into_par_iter()
            .map(|bi| {
                let (mut kept, mut tiles) = (Vec::new(), Vec::new());
                let mut tile = vec![0.0f32; TILE * TILE];
                for bj in bi..blocks {
                    tile.fill(0.0);
                    let width = TILE.min(n - bj * TILE);
                    for a in 0..TILE.min(n - bi * TILE) {
                        let row = &mut tile[a * TILE..][..TILE];
                        fill_appearance(kernel, &sorted, bi * TILE + a, bj * TILE, &mut row[..width]);
                        if bi == bj {
                            row[a] = 0.0;
                        }
                    }
                    if tile.iter().any(|&v| v > NEGLIGIBLE) {
                        kept.push(bj);
                        tiles.extend_from_slice(&tile);
                    }
                }
                (kept, tiles)
            })
            .collect();
        let bytes: usize = rows.iter().map(|(_, t)| t.len() * 4).sum();
        if bytes > APPEARANCE_CACHE_BYTES {
            return Err(data);
        }
        data.clear();
        data.reserve_exact(bytes / 4);
        let mut live = Vec::new();
        for (bi, (kept, tiles)) in rows.into_iter().enumerate() {
            live.extend(kept.into_iter().map(|bj| (bi, bj)));
            data.extend_from_slice(&tiles);
        }
        Ok(Self { blocks, order, live, data })
    }

    /// `Σ_j A_ij q_j` for every label, label-major over `n` pixels.
    fn apply(&self, qf: &[f32], labels: usize, n: usize) -> Vec<f64> {
        let padded = self.blocks * TILE;
        let mut qp = vec![0.0f32; labels * padded];
        for l in 0..labels {
            let (src, dst) = (&qf[l * n..][..n], &mut qp[l * padded..][..n]);
            for (d, &i) in dst.iter_mut().zip(&self.order) {
                *d = src[i];
            }
        }
        let mut acc = vec![0.0f64; labels * padded];
        let (mut rows, mut cols) = ([0.0f32; TILE], [0.0f32; TILE]);
        for (tile, &(bi, bj)) in self.data.chunks_exact(TILE * TILE).zip(&self.live) {
            for l in 0..labels {
                let q = &qp[l * padded..][..padded];
                let (qi, qj) = (&q[bi * TILE..][..TILE], &q[bj * TILE..][..TILE]);
                tile_products(tile, qi, qj, bi == bj, &mut rows, &mut cols);
                let acc = &mut acc[l * padded..][..padded];
                for (t, &r) in acc[bi * TILE..][..TILE].iter_mut().zip(&rows) {
                    *t += r as f64;
                }
                if bi != bj {
                    for (t, &c) in acc[bj * TILE..][..TILE].iter_mut().zip(&cols) {
                        *t += c as f64;
                    }
                }
            }
        }
        let mut out = vec![0.0; labels * n];
        for l in 0..labels {
            let (src, dst) = (&acc[l * padded..][..n], &mut out[l * n..][..n]);
            for (&v, &i) in src.iter().zip(&self.order) {
                dst[i] = v;
            }
        }
        out
    }
}

/// Pairwise sum in a fixed order that vectorizes.
#[inline(always)]
fn tree_sum(mut lanes: [f32; 16]) -> f32 {
    let mut w = 8;
    while w > 0 {
        for k in 0..w {
            lanes[k] += lanes[k + w];
        }
        w /= 2;
    }
    lanes[0]
}

/// Row sums `tile · qj` and, off the diagonal, column sums `tileᵀ · qi`.
#[inline(always)]
fn tile_products_lanes(
    tile: &[f32],
    qi: &[f32],
    qj: &[f32],
    diagonal: bool,
    rows: &mut [f32; TILE],
    cols: &mut [f32; TILE],
) {
    for (a, r) in rows.iter_mut().enumerate() {
        let row = &tile[a * TILE..][..TILE];
        let mut lanes = [0.0f32; 16];
        for (x, y) in row.chunks_exact(16).zip(qj.chunks_exact(16)) {
            for k in 0..16 {
                lanes[k] += x[k] * y[k];
            }
        }
        *r = tree_sum(lanes);
    }
    if diagonal {
        return;
    }
    cols.fill(0.0);
    for (a, &s) in qi.iter().enumerate() {
        let row = &tile[a * TILE..][..TILE];
        for (c, &x) in cols.iter_mut().zip(row) {
            *c += x * s;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tile_products_avx2(
    tile: &[f32],
    qi: &[f32],
    qj: &[f32],
    diagonal: bool,
    rows: &mut [f32; TILE],
    cols: &mut [f32; TILE],
) {
    tile_products_lanes(tile, qi, qj, diagonal, rows, cols)
}

fn tile_products(
    tile: &[f32],
    qi: &[f32],
    qj: &[f32],
    diagonal: bool,
    rows: &mut [f32; TILE],
    cols: &mut [f32; TILE],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { tile_products_avx2(tile, qi, qj, diagonal, rows, cols) };
    }
    tile_products_lanes(tile, qi, qj, diagonal, rows, cols)
}

thread_local! {
    // Reused between inferences: first-touching a fresh multi-megabyte
    // buffer costs more than filling it.
    static APPEARANCE_BUFFER: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn check_size(n: usize, params: &CrfParams) -> Result<()> {
    if n > EXACT_PIXEL_LIMIT && !params.approximate {
        return Err(Error::Resource(format!(
            "{n} pixels exceed the exact CRF limit of {EXACT_PIXEL_LIMIT}; enable the approximate path"
        )));
    }
    Ok(())
}

/// In-place stable softmax of `-unary + message` for one pixel. The
/// normalizer is summed in ascending order so relabelling the classes
/// permutes the result exactly.
fn update_pixel(
    out: &mut [f64],
    scratch: &mut Vec<f64>,
    unary: impl Fn(usize) -> f64,
    message: &[f64],
) {
    let mut max = f64::NEG_INFINITY;
    for (l, o) in out.iter_mut().enumerate() {
        *o = -unary(l) + message[l];
        max = max.max(*o);
    }
    for o in out.iter_mut() {
        *o = (*o - max).exp();
    }
    scratch.clear();
    scratch.extend_from_slice(out);
    scratch.sort_unstable_by(f64::total_cmp);
    let sum: f64 = scratch.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Single-precision dot product with 16 independent lanes, reduced in f64.
/// The lane layout is fixed by the source, so the AVX2 build of the same
/// loop returns bit-identical results.
#[inline(always)]
fn dot_f32_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x * y) as f64;
    }
    acc.iter().map(|&v| v as f64).sum::<f64>() + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_f32_avx2(a: &[f32], b: &[f32]) -> f64 {
    dot_f32_lanes(a, b)
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { dot_f32_avx2(a, b) };
    }
    dot_f32_lanes(a, b)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Mean-field over the active pixels of `lat`. `unary` and the returned
/// marginals are label-major over active indices.
fn infer(
    lat: &Lattice,
    unary: &[f64],
    labels: usize,
    params: &CrfParams,
    mut observer: impl FnMut(usize, &[f64]),
) -> Vec<f64> {
    let n = lat.len();
    let mut q = vec![0.0; labels * n];
    let zero = vec![0.0; labels];
    let softmax_into = |q: &mut [f64], messages: &[f64]| {
        let mut buf = vec![0.0; labels];
        let mut scratch = Vec::with_capacity(labels);
        for i in 0..n {
            update_pixel(
                &mut buf,
                &mut scratch,
                |l| unary[l * n + i],
                &messages[i * labels..][..labels],
            );
            for l in 0..labels {
                q[l * n + i] = buf[l];
            }
        }
    };
    let no_messages = zero.repeat(n);
    softmax_into(&mut q, &no_messages);

    let coupled = params.w1 > 0.0 || params.w2 > 0.0;
    let kernel = coupled.then(|| Kernel::new(params, lat.height, lat.width));
    let radius = params.truncation_radius();
    let truncated = params.approximate;
    let cache = match &kernel {
        Some(k) if !truncated && k.w1 > 0.0 => {
            match AppearanceTiles::build(lat, k, APPEARANCE_BUFFER.with(|b| b.take())) {
                Ok(tiles) => Some(tiles),
                Err(buffer) => {
                    APPEARANCE_BUFFER.with(|b| *b.borrow_mut() = buffer);
                    None
                }
            }
        }
        _ => None,
    };

    for it in 0..params.iterations {
        let messages: Vec<f64> = match &kernel {
            None => no_messages.clone(),
            Some(k) if truncated => windowed_messages(lat, k, &q, labels, radius),
            Some(k) => dense_messages(lat, k, cache.as_ref(), &q, labels),
        };
        softmax_into(&mut q, &messages);
        observer(it, &q);
    }
    if let Some(tiles) = cache {
        APPEARANCE_BUFFER.with(|b| *b.borrow_mut() = tiles.data);
    }
    q
}

/// Exact messages, pixel-major: `out[i * labels + l]`. The appearance term
/// is summed pair by pair; the smoothness kernel is separable, so it is
/// applied as two 1-D passes over the lattice grid.
fn dense_messages(
    lat: &Lattice,
    kernel: &Kernel,
    appearance: Option<&AppearanceTiles>,
    q: &[f64],
    labels: usize,
) -> Vec<f64> {
    let n = lat.len();
    let mut out = vec![0.0; n * labels];
    if kernel.w1 > 0.0 {
        // the appearance sum runs in single precision (~1e-7 relative),
        // which is what keeps 128×128 inference inside its time budget
        let qf: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        match appearance {
            Some(tiles) => {
                let sums = tiles.apply(&qf, labels, n);
                for l in 0..labels {
                    for i in 0..n {
                        out[i * labels + l] = kernel.w1 * sums[l * n + i];
                    }
                }
            }
            None => out.par_chunks_mut(labels).enumerate().for_each_init(
                || vec![0.0f32; n],
                |row, (i, msg)| {
                    kernel.appearance_row(lat, i, row);
                    for (l, m) in msg.iter_mut().enumerate() {
                        *m = kernel.w1 * dot_f32(row, &qf[l * n..(l + 1) * n]);
                    }
                },
            ),
        }
    }
    if kernel.w2 > 0.0 {
        let smooth: Vec<Vec<f64>> = (0..labels)
            .into_par_iter()
            .map(|l| smooth_label(lat, kernel, &q[l * n..(l + 1) * n]))
            .collect();
        for (l, s) in smooth.iter().enumerate() {
            for (i, &v) in s.iter().enumerate() {
                out[i * labels + l] += kernel.w2 * v;
            }
        }
    }
    out
}

/// Σ_{j≠i} smoothness(i, j) · q_j for every active `i`.
fn smooth_label(lat: &Lattice, kernel: &Kernel, q: &[f64]) -> Vec<f64> {
    let (h, w) = (lat.height, lat.width);
    let mut grid = vec![0.0; h * w];
    for (k, &v) in q.iter().enumerate() {
        grid[lat.rows[k] * w + lat.cols[k]] = v;
    }
    // horizontal pass, stored column-major for the vertical one
    let mut columns = vec![0.0; w * h];
    for y in 0..h {
        let src = &grid[y * w..][..w];
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        for x in 0..w {
            columns[x * h + y] = dot(kernel.smooth_from(x, w), src);
        }
    }
    (0..lat.len())
        .map(|k| {
            let (y, x) = (lat.rows[k], lat.cols[k]);
            dot(kernel.smooth_from(y, h), &columns[x * h..][..h]) - q[k]
        })
        .collect()
}

/// Truncated messages from pixels within `radius`.
fn windowed_messages(
    lat: &Lattice,
    kernel: &Kernel,
    q: &[f64],
    labels: usize,
    radius: f64,
) -> Vec<f64> {
    let n = lat.len();
    let r = radius.floor() as usize;
    let r2 = radius * radius;
    let mut out = vec![0.0; n * labels];
    out.par_chunks_mut(labels).enumerate().for_each(|(i, msg)| {
        let (row, col) = (lat.rows[i], lat.cols[i]);
        let (r0, r1) = (row.saturating_sub(r), (row + r).min(lat.height - 1));
        let (c0, c1) = (col.saturating_sub(r), (col + r).min(lat.width - 1));
        for y in r0..=r1 {
            let dy = y.abs_diff(row) as f64;
            for x in c0..=c1 {
                let dx = x.abs_diff(col) as f64;
                if dy * dy + dx * dx > r2 {
                    continue;
                }
                let slot = lat.slot[y * lat.width + x];
                if slot == 0 {
                    continue;
                }
                let j = slot as usize - 1;
                if j == i {
                    continue;
                }
                let k = kernel.eval(lat, i, j);
                for (l, m) in msg.iter_mut().enumerate() {
                    *m += k * q[l * n + j];
                }
            }
        }
    });
    out
}

pub fn mean_field(
    unary: &UnaryField,
    image: &RgbImage,
    params: &CrfParams,
) -> Result<MarginalField> {
    mean_field_observed(unary, image, params, |_, _| {})
}

/// [`mean_field`] that hands the marginals to `observer` after every iteration.
pub fn mean_field_observed(
    unary: &UnaryField,
    image: &RgbImage,
    params: &CrfParams,
    mut observer: impl FnMut(usize, &MarginalField),
) -> Result<MarginalField> {
    params.validate()?;
    ensure_same_dims(unary, image)?;
    let n = unary.height * unary.width;
    check_size(n, params)?;
    let lat = Lattice::full(image);
    let mut snapshot = MarginalField {
        labels: unary.labels,
        height: unary.height,
        width: unary.width,
        data: Vec::new(),
    };
    let q = infer(&lat, &unary.data, unary.labels, params, |it, q| {
        snapshot.data.clear();
        snapshot.data.extend_from_slice(q);
        observer(it, &snapshot);
    });
    snapshot.data = q;
    Ok(snapshot)
}

/// CRF refinement of a probability map; returns the per-pixel argmax label
/// (channel index = label value).
pub fn crf_postproc(probs: &ScoreMap, image: &RgbImage, params: &CrfParams) -> Result<LabelMask> {
    if probs.channels() > IGNORE as usize {
        return Err(Error::Usage(format!(
            "{} labels do not fit below the ignore value",
            probs.channels()
        )));
    }
    let unary = UnaryField::from_probabilities(probs)?;
    let q = mean_field(&unary, image, params)?;
    let data = q.argmax().into_iter().map(|l| l as u8).collect();
    LabelMask::new(probs.height(), probs.width(), data)
}

fn seed_probability(label: usize, own: Option<usize>, labels: usize, confidence: f64) -> f64 {
    match own {
        Some(o) if o == label => confidence,
        Some(_) => (1.0 - confidence) / (labels - 1) as f64,
        None => 1.0 / labels as f64,
    }
}

fn check_confidence(confidence: f64) -> Result<()> {
    if !(confidence > 0.5 && confidence < 1.0) {
        return Err(Error::Usage(format!(
            "seed confidence {confidence} outside (0.5, 1)"
        )));
    }
    Ok(())
}

/// Smooth a seed mask with the CRF.
///
/// The label set is background plus the classes present in `seeds`. Each
/// labelled pixel puts `confidence` on its own label and spreads the rest
/// uniformly; ignore pixels get uniform unaries and stay ignore.
pub fn crf_seed(
    seeds: &LabelMask,
    image: &RgbImage,
    params: &CrfParams,
    confidence: f64,
) -> Result<LabelMask> {
    check_confidence(confidence)?;
    params.validate()?;
    ensure_same_dims(seeds, image)?;
    let label_values: Vec<u8> = std::iter::once(BACKGROUND)
        .chain(seeds.classes())
        .collect();
    let labels = label_values.len();
    if labels < 2 {
        return Ok(seeds.clone());
    }
    let mut index = [usize::MAX; 256];
    for (i, &v) in label_values.iter().enumerate() {
        index[v as usize] = i;
    }
    let n = seeds.len();
    let mut data = vec![0.0; labels * n];
    for (i, &v) in seeds.data().iter().enumerate() {
        let own = (v != IGNORE).then(|| index[v as usize]);
        for l in 0..labels {
            data[l * n + i] = -seed_probability(l, own, labels, confidence).ln();
        }
    }
    let unary = UnaryField::new(labels, seeds.height(), seeds.width(), data)?;
    let q = mean_field(&unary, image, params)?;
    let out = q
        .argmax()
        .into_iter()
        .zip(seeds.data())
        .map(|(l, &v)| if v == IGNORE { IGNORE } else { label_values[l] })
        .collect();
    LabelMask::new(seeds.height(), seeds.width(), out)
}

/// Labels for a subset of pixels; `None` means "not written".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialLabels {
    height: usize,
    width: usize,
    data: Vec<Option<u8>>,
}

impl PartialLabels {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![None; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Option<u8>] {
        &self.data
    }

    pub fn set(&mut self, index: usize, label: u8) {
        self.data[index] = Some(label);
    }

    pub fn get(&self, index: usize) -> Option<u8> {
        self.data[index]
    }

    /// Write every labelled pixel into `mask`.
    pub fn apply_to(&self, mask: &mut LabelMask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::Usage("partial labels do not match mask size".into()));
        }
        for (dst, src) in mask.data_mut().iter_mut().zip(&self.data) {
            if let Some(v) = src {
                *dst = *v;
            }
        }
        Ok(())
    }
}

/// CRF labelling restricted to one saliency component, over the seed classes
/// intersecting it (no background label).
///
/// Inference runs on the component's bounding box. Box pixels outside the
/// component are clamped to a uniform distribution, which sends the same
/// message to every label and therefore drops out of the normalized update;
/// they are left out of the computation and never written.
pub fn region_crf(
    component: &BinaryMask,
    seeds: &LabelMask,
    classes: &BTreeSet<u8>,
    image: &RgbImage,
    params: &CrfParams,
) -> Result<PartialLabels> {
    region_crf_with_confidence(
        component,
        seeds,
        classes,
        image,
        params,
        DEFAULT_SEED_CONFIDENCE,
    )
}

pub fn region_crf_with_confidence(
    component: &BinaryMask,
    seeds: &LabelMask,
    classes: &BTreeSet<u8>,
    image: &RgbImage,
    params: &CrfParams,
    confidence: f64,
) -> Result<PartialLabels> {
    if classes.len() < 2 {
        return Err(Error::Usage(format!(
            "region CRF needs at least two classes, got {}",
            classes.len()
        )));
    }
    if classes.contains(&BACKGROUND) || classes.contains(&IGNORE) {
        return Err(Error::Usage(
            "region CRF classes must be foreground classes".into(),
        ));
    }
    check_confidence(confidence)?;
    params.validate()?;
    ensure_same_dims(component, seeds)?;
    ensure_same_dims(component, image)?;

    let width = component.width();
    let mut out = PartialLabels::new(component.height(), width);
    let members: Vec<usize> = (0..component.data().len())
        .filter(|&i| component.data()[i])
        .collect();
    if members.is_empty() {
        return Ok(out);
    }
    check_size(members.len(), params)?;

    let (min_r, max_r) = members
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), &i| (lo.min(i / width), hi.max(i / width)));
    let (min_c, max_c) = members
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), &i| (lo.min(i % width), hi.max(i % width)));
    let (bh, bw) = (max_r - min_r + 1, max_c - min_c + 1);

    let lat = Lattice::new(
        bh,
        bw,
        members
            .iter()
            .map(|&i| (i / width - min_r, i % width - min_c, image.pixel(i))),
    );

    let class_list: Vec<u8> = classes.iter().copied().collect();
    let labels = class_list.len();
    let n = members.len();
    let mut unary = vec![0.0; labels * n];
    for (k, &i) in members.iter().enumerate() {
        let own = class_list.iter().position(|&c| c == seeds.data()[i]);
        for l in 0..labels {
            unary[l * n + k] = -seed_probability(l, own, labels, confidence).ln();
        }
    }
    let q = infer(&lat, &unary, labels, params, |_, _| {});
    for (k, l) in argmax_label_major(&q, labels, n).into_iter().enumerate() {
        out.set(members[k], class_list[l]);
    }
    Ok(out)
}
