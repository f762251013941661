//! Connected components of binary and label masks, area filtering, and the
//! overlap table between saliency components and seed components.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{BinaryMask, LabelMask, BACKGROUND, IGNORE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    /// Neighbours already visited in a raster scan: left, then the row above.
    fn back_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0)],
            Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    fn point(row: usize, col: usize) -> Self {
        Self {
            min_row: row,
            min_col: col,
            max_row: row,
            max_col: col,
        }
    }

    fn extend(&mut self, row: usize, col: usize) {
        self.min_row = self.min_row.min(row);
        self.min_col = self.min_col.min(col);
        self.max_row = self.max_row.max(row);
        self.max_col = self.max_col.max(col);
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentRecord {
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
    /// Set for seed components only.
    pub class: Option<u8>,
}

/// Decomposition of a mask into connected components.
///
/// Ids run densely from 1 and follow the raster order of each component's
/// first pixel; 0 in `id_map` means "no component".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentSet {
    height: usize,
    width: usize,
    id_map: Vec<u32>,
    records: Vec<ComponentRecord>,
}

impl ComponentSet {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn id_map(&self) -> &[u32] {
        &self.id_map
    }

    pub fn records(&self) -> &[ComponentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: u32) -> Option<&ComponentRecord> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| self.records.get(i))
    }

    /// Binary mask of a single component.
    pub fn component_mask(&self, id: u32) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.id_map.iter().map(|&v| v == id).collect(),
        )
        .expect("dimensions come from a valid mask")
    }

    /// Flat pixel indices of each component, indexed by `id - 1`.
    pub fn pixel_lists(&self) -> Vec<Vec<usize>> {
        let mut lists: Vec<Vec<usize>> = self
            .records
            .iter()
            .map(|r| Vec::with_capacity(r.area))
            .collect();
        for (i, &id) in self.id_map.iter().enumerate() {
            if id != 0 {
                lists[id as usize - 1].push(i);
            }
        }
        lists
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let grand = parent[parent[x as usize] as usize];
        parent[x as usize] = grand;
        x = grand;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling. `key` gives each pixel a group (`None` for
/// pixels outside every component); only neighbours with the same key join.
fn label_by_key(
    height: usize,
    width: usize,
    connectivity: Connectivity,
    key: impl Fn(usize) -> Option<u8>,
) -> ComponentSet {
    let n = height * width;
    let mut provisional = vec![0u32; n];
    // parent[0] is a dummy so provisional labels index directly.
    let mut parent: Vec<u32> = vec![0];
    let offsets = connectivity.back_offsets();

    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            let Some(k) = key(i) else { continue };
            let mut label = 0u32;
            for &(dr, dc) in offsets {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || c >= width as isize {
                    continue;
                }
                let j = r as usize * width + c as usize;
                if provisional[j] == 0 || key(j) != Some(k) {
                    continue;
                }
                if label == 0 {
                    label = provisional[j];
                } else {
                    union(&mut parent, label, provisional[j]);
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[i] = label;
        }
    }

    let mut final_id = vec![0u32; parent.len()];
    let mut id_map = vec![0u32; n];
    let mut records: Vec<ComponentRecord> = Vec::new();
    for i in 0..n {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        let (row, col) = (i / width, i % width);
        if final_id[root] == 0 {
            let id = records.len() as u32 + 1;
            final_id[root] = id;
            records.push(ComponentRecord {
                id,
                area: 0,
                bbox: BBox::point(row, col),
                class: None,
            });
        }
        let id = final_id[root];
        id_map[i] = id;
        let rec = &mut records[id as usize - 1];
        rec.area += 1;
        rec.bbox.extend(row, col);
    }

    ComponentSet {
        height,
        width,
        id_map,
        records,
    }
}

pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let data = mask.data();
    label_by_key(mask.height(), mask.width(), connectivity, |i| {
        data[i].then_some(1)
    })
}

/// Components of each seed class separately; a component never mixes classes.
/// Background and ignore pixels belong to no component.
pub fn label_seed_components(seeds: &LabelMask, connectivity: Connectivity) -> ComponentSet {
    let data = seeds.data();
    let mut set = label_by_key(seeds.height(), seeds.width(), connectivity, |i| {
        let v = data[i];
        (v != BACKGROUND && v != IGNORE).then_some(v)
    });
    for rec in &mut set.records {
        let b = &rec.bbox;
        // any pixel of the component carries its class; the first one sits on
        // the bbox's top row
        let first = (b.min_col..=b.max_col)
            .map(|c| b.min_row * set.width + c)
            .find(|&i| set.id_map[i] == rec.id)
            .expect("component has a pixel on its top row");
        rec.class = Some(data[first]);
    }
    set
}

/// Smallest pixel count that satisfies `area >= min_fraction * total`.
pub fn area_threshold(min_fraction: f64, total: usize) -> usize {
    let exact = min_fraction * total as f64;
    let nearest = exact.round();
    // absorb representation error such as 0.07 * 100 = 7.000000000000001
    if (exact - nearest).abs() <= 1e-9 * (total.max(1) as f64) {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
}

/// Keep components whose area reaches `ceil(min_fraction * H * W)`.
pub fn filter_by_area(cs: &ComponentSet, min_fraction: f64) -> Result<ComponentSet> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Usage(format!(
            "area fraction {min_fraction} outside [0, 1]"
        )));
    }
    let threshold = area_threshold(min_fraction, cs.height * cs.width);
    let mut remap = vec![0u32; cs.records.len() + 1];
    let mut records = Vec::new();
    for rec in &cs.records {
        if rec.area >= threshold {
            let id = records.len() as u32 + 1;
            remap[rec.id as usize] = id;
            records.push(ComponentRecord { id, ..rec.clone() });
        }
    }
    let id_map = cs.id_map.iter().map(|&v| remap[v as usize]).collect();
    Ok(ComponentSet {
        height: cs.height,
        width: cs.width,
        id_map,
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub fg: u32,
    pub seed: u32,
    pub pixels: usize,
}

/// Pixel overlaps between saliency components and seed components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntersectionTable {
    pairs: Vec<Overlap>,
    fg_classes: Vec<BTreeSet<u8>>,
    seed_fgs: Vec<BTreeSet<u32>>,
}

impl IntersectionTable {
    /// Overlapping pairs, sorted by (fg id, seed id).
    pub fn pairs(&self) -> &[Overlap] {
        &self.pairs
    }

    /// Distinct seed classes touching fg component `fg_id`.
    pub fn fg_classes(&self, fg_id: u32) -> &BTreeSet<u8> {
        &self.fg_classes[fg_id as usize - 1]
    }

    /// Fg components touched by seed component `seed_id`.
    pub fn seed_fgs(&self, seed_id: u32) -> &BTreeSet<u32> {
        &self.seed_fgs[seed_id as usize - 1]
    }

    pub fn overlap(&self, fg_id: u32, seed_id: u32) -> usize {
        self.pairs
            .binary_search_by_key(&(fg_id, seed_id), |o| (o.fg, o.seed))
            .map(|i| self.pairs[i].pixels)
            .unwrap_or(0)
    }
}

pub fn intersect(fg: &ComponentSet, seeds: &ComponentSet) -> Result<IntersectionTable> {
    if fg.height != seeds.height || fg.width != seeds.width {
        return Err(Error::Usage(format!(
            "component sets differ in size: {}x{} vs {}x{}",
            fg.height, fg.width, seeds.height, seeds.width
        )));
    }
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&f, &s) in fg.id_map.iter().zip(&seeds.id_map) {
        if f != 0 && s != 0 {
            *counts.entry((f, s)).or_default() += 1;
        }
    }
    let mut fg_classes = vec![BTreeSet::new(); fg.len()];
    let mut seed_fgs = vec![BTreeSet::new(); seeds.len()];
    let pairs = counts
        .into_iter()
        .map(|((f, s), pixels)| {
            if let Some(class) = seeds.records[s as usize - 1].class {
                fg_classes[f as usize - 1].insert(class);
            }
            seed_fgs[s as usize - 1].insert(f);
            Overlap {
                fg: f,
                seed: s,
                pixels,
            }
        })
        .collect();
    Ok(IntersectionTable {
        pairs,
        fg_classes,
        seed_fgs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    /// BFS flood fill in raster order of seeds; ids follow first-pixel order.
    fn flood_fill(h: usize, w: usize, key: &[Option<u8>], conn: Connectivity) -> Vec<u32> {
        let mut ids = vec![0u32; h * w];
        let mut next = 0;
        let deltas: Vec<(isize, isize)> = match conn {
            Connectivity::Four => vec![(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => (-1..=1)
                .flat_map(|a| (-1..=1).map(move |b| (a, b)))
                .filter(|&d| d != (0, 0))
                .collect(),
        };
        for start in 0..h * w {
            if key[start].is_none() || ids[start] != 0 {
                continue;
            }
            next += 1;
            ids[start] = next;
            let mut queue = VecDeque::from([start]);
            while let Some(p) = queue.pop_front() {
                let (r, c) = ((p / w) as isize, (p % w) as isize);
                for &(dr, dc) in &deltas {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if ids[q] == 0 && key[q].is_some() && key[q] == key[p] {
                        ids[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        ids
    }

    #[test]
    fn full_mask_is_one_component() {
        let cs = label_components(&mask(4, 4, &[1; 16]), Connectivity::Eight);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.records()[0].area, 16);
        assert_eq!(
            cs.records()[0].bbox,
            BBox {
                min_row: 0,
                min_col: 0,
                max_row: 3,
                max_col: 3
            }
        );
    }

    #[test]
    fn empty_mask_has_no_components() {
        let cs = label_components(&mask(3, 3, &[0; 9]), Connectivity::Four);
        assert!(cs.is_empty());
        assert!(cs.id_map().iter().all(|&v| v == 0));
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let seeds = LabelMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(label_seed_components(&seeds, Connectivity::Four).len(), 2);
        assert_eq!(label_seed_components(&seeds, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn adjacent_classes_split() {
        let seeds = LabelMask::new(1, 2, vec![1, 2]).unwrap();
        let cs = label_seed_components(&seeds, Connectivity::Eight);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.records()[0].class, Some(1));
        assert_eq!(cs.records()[1].class, Some(2));
    }

    #[test]
    fn u_shape_merges_under_union_find() {
        // two arms joined only on the bottom row
        let m = mask(3, 3, &[1, 0, 1, 1, 0, 1, 1, 1, 1]);
        let cs = label_components(&m, Connectivity::Four);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.records()[0].area, 7);
    }

    #[test]
    fn area_threshold_uses_ceiling() {
        assert_eq!(area_threshold(0.01, 1024), 11);
        assert_eq!(area_threshold(0.07, 100), 7);
        assert_eq!(area_threshold(0.0, 1024), 0);
        assert_eq!(area_threshold(1.0, 1024), 1024);
    }

    #[test]
    fn filter_drops_small_components() {
        // 32x32 with a 10-pixel bar and an 11-pixel bar
        let mut bits = vec![0u8; 1024];
        bits[..10].fill(1);
        bits[64..75].fill(1);
        let cs = label_components(&mask(32, 32, &bits), Connectivity::Eight);
        assert_eq!(cs.len(), 2);
        let kept = filter_by_area(&cs, 0.01).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.records()[0].id, 1);
        assert_eq!(kept.records()[0].area, 11);
        assert!(kept.id_map()[..10].iter().all(|&v| v == 0));
        assert!(kept.id_map()[64..75].iter().all(|&v| v == 1));
    }

    #[test]
    fn filter_extremes() {
        let mut bits = vec![1u8; 16];
        bits[5] = 0;
        let cs = label_components(&mask(4, 4, &bits), Connectivity::Four);
        assert_eq!(filter_by_area(&cs, 0.0).unwrap(), cs);
        assert!(filter_by_area(&cs, 1.0).unwrap().is_empty());
        assert!(filter_by_area(&cs, 1.5).is_err());
    }

    #[test]
    fn intersect_disjoint_and_contained() {
        let fg = label_components(&mask(1, 6, &[1, 1, 1, 0, 0, 0]), Connectivity::Four);
        let far = LabelMask::new(1, 6, vec![0, 0, 0, 0, 2, 2]).unwrap();
        let table = intersect(&fg, &label_seed_components(&far, Connectivity::Four)).unwrap();
        assert!(table.pairs().is_empty());

        let inside = LabelMask::new(1, 6, vec![0, 3, 3, 0, 0, 0]).unwrap();
        let seeds = label_seed_components(&inside, Connectivity::Four);
        let table = intersect(&fg, &seeds).unwrap();
        assert_eq!(
            table.pairs(),
            &[Overlap {
                fg: 1,
                seed: 1,
                pixels: 2
            }]
        );
        assert_eq!(table.fg_classes(1), &BTreeSet::from([3]));
        assert_eq!(table.seed_fgs(1), &BTreeSet::from([1]));
    }

    #[test]
    fn intersect_dimension_mismatch() {
        let a = label_components(&mask(1, 2, &[1, 1]), Connectivity::Four);
        let b = label_components(&mask(2, 1, &[1, 1]), Connectivity::Four);
        assert!(matches!(intersect(&a, &b), Err(Error::Usage(_))));
    }

    fn conn() -> impl Strategy<Value = Connectivity> {
        prop_oneof![Just(Connectivity::Four), Just(Connectivity::Eight)]
    }

    proptest! {
        #[test]
        fn binary_labelling_matches_flood_fill(
            bits in proptest::collection::vec(0u8..2, 32 * 32),
            conn in conn(),
        ) {
            let m = mask(32, 32, &bits);
            let cs = label_components(&m, conn);
            let key: Vec<Option<u8>> = bits.iter().map(|&b| (b == 1).then_some(1)).collect();
            prop_assert_eq!(cs.id_map(), &flood_fill(32, 32, &key, conn)[..]);
            let total: usize = cs.records().iter().map(|r| r.area).sum();
            prop_assert_eq!(total, m.count());
            for r in cs.records() {
                prop_assert_eq!(r.area, cs.id_map().iter().filter(|&&v| v == r.id).count());
            }
        }

        #[test]
        fn seed_labelling_matches_per_class_flood_fill(
            vals in proptest::collection::vec(0u8..4, 24 * 24),
            conn in conn(),
        ) {
            let seeds = LabelMask::new(24, 24, vals.clone()).unwrap();
            let cs = label_seed_components(&seeds, conn);
            let key: Vec<Option<u8>> = vals.iter().map(|&v| (v != 0).then_some(v)).collect();
            prop_assert_eq!(cs.id_map(), &flood_fill(24, 24, &key, conn)[..]);
            for (i, &id) in cs.id_map().iter().enumerate() {
                if id != 0 {
                    prop_assert_eq!(cs.record(id).unwrap().class, Some(vals[i]));
                }
            }
        }

        #[test]
        fn intersection_matches_double_loop(
            fg_bits in proptest::collection::vec(0u8..2, 16 * 16),
            seed_vals in proptest::collection::vec(0u8..3, 16 * 16),
        ) {
            let fg = label_components(&mask(16, 16, &fg_bits), Connectivity::Eight);
            let seeds = label_seed_components(&LabelMask::new(16, 16, seed_vals).unwrap(), Connectivity::Eight);
            let table = intersect(&fg, &seeds).unwrap();
            for f in 1..=fg.len() as u32 {
                for s in 1..=seeds.len() as u32 {
                    let mut count = 0;
                    for i in 0..256 {
                        if fg.id_map()[i] == f && seeds.id_map()[i] == s {
                            count += 1;
                        }
                    }
                    prop_assert_eq!(table.overlap(f, s), count);
                }
            }
            prop_assert!(table.pairs().iter().all(|o| o.pixels >= 1));
            // counting from the seed side agrees
            for o in table.pairs() {
                let from_seed = seeds.id_map().iter().zip(fg.id_map())
                    .filter(|&(&s, &f)| s == o.seed && f == o.fg).count();
                prop_assert_eq!(from_seed, o.pixels);
            }
        }

        #[test]
        fn labelling_is_deterministic(bits in proptest::collection::vec(0u8..2, 20 * 20)) {
            let m = mask(20, 20, &bits);
            prop_assert_eq!(label_components(&m, Connectivity::Eight), label_components(&m, Connectivity::Eight));
        }
    }
}
