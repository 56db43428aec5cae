//! Region structure derived from instance masks: overlap-free and
//! overlapping parts, foreground areas, adjacency, layer assignment and
//! target stacks.

use crate::error::{shape_err, Result};
use crate::losses::Prediction;
use crate::mask::Mask;

/// Per-object overlap-free and overlapping parts plus the global areas.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDecomposition {
    height: usize,
    width: usize,
    /// Full object masks `O_i`.
    pub objects: Vec<Mask>,
    /// Overlap-free parts `O_i^n`.
    pub free: Vec<Mask>,
    /// Overlapping parts `O_i^o`.
    pub overlapping: Vec<Mask>,
    /// Number of objects covering each pixel.
    pub coverage: Vec<u16>,
    /// Union of all objects.
    pub foreground: Mask,
    /// Pixels covered by exactly one object.
    pub free_foreground: Mask,
}

impl RegionDecomposition {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// Splits every object into its overlap-free and overlapping parts by
/// per-pixel coverage counting.
pub fn decompose(height: usize, width: usize, instances: &[Mask]) -> Result<RegionDecomposition> {
    let mut coverage = vec![0u16; height * width];
    for m in instances {
        if m.dims() != (height, width) {
            return Err(shape_err(
                "decompose",
                format!("mask {:?} in a {height}x{width} scene", m.dims()),
            ));
        }
        m.indices().for_each(|i| coverage[i] += 1);
    }
    let split = |m: &Mask, want_free: bool| {
        let mut out = Mask::new(height, width);
        for i in m.indices() {
            if (coverage[i] == 1) == want_free {
                out.set_flat(i, true);
            }
        }
        out
    };
    let free = instances.iter().map(|m| split(m, true)).collect();
    let overlapping = instances.iter().map(|m| split(m, false)).collect();
    let foreground = Mask::from_vec(height, width, coverage.iter().map(|&c| c > 0).collect())?;
    let free_foreground = Mask::from_vec(height, width, coverage.iter().map(|&c| c == 1).collect())?;
    Ok(RegionDecomposition {
        height,
        width,
        objects: instances.to_vec(),
        free,
        overlapping,
        coverage,
        foreground,
        free_foreground,
    })
}

/// `Adj(O_i)` for every object under a distance threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyGraph {
    pub threshold: f64,
    /// Sorted neighbour indices per object.
    pub neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Unordered adjacent pairs `(i, j)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }
}

/// Stand-in for "no set pixel" so the envelope arithmetic stays finite.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel centre to the nearest
/// set pixel of `mask` (infinite for an empty mask).
pub fn squared_distance_transform(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut grid: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { FAR })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter_mut()
        .filter(|d| **d >= FAR * 0.5)
        .for_each(|d| *d = f64::INFINITY);
    grid
}

/// Objects `i != j` are adjacent when the smallest Euclidean distance
/// between their pixel centres is below `threshold`.
pub fn adjacency(objects: &[Mask], threshold: f64) -> AdjacencyGraph {
    assert!(threshold > 0.0, "adjacency threshold must be positive");
    let c = objects.len();
    let t2 = threshold * threshold;
    let dts: Vec<Vec<f64>> = objects.iter().map(squared_distance_transform).collect();
    let mut neighbors = vec![Vec::new(); c];
    for i in 0..c {
        for j in (i + 1)..c {
            let d2 = objects[j]
                .indices()
                .map(|p| dts[i][p])
                .fold(f64::INFINITY, f64::min);
            if d2 < t2 {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    neighbors.iter_mut().for_each(|n| n.sort_unstable());
    AdjacencyGraph {
        threshold,
        neighbors,
    }
}

/// Per-object layer, derived from the prediction on the overlap-free part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerAssignment {
    /// Zero-based layer per object; `None` for skipped objects.
    pub layers: Vec<Option<usize>>,
    /// Objects with an empty overlap-free part.
    pub skipped: Vec<usize>,
}

/// Assigns every object to the channel with the largest mean activation
/// over its overlap-free part (lowest channel on ties).
pub fn assign_layers(prediction: &Prediction, regions: &RegionDecomposition) -> LayerAssignment {
    let n = prediction.channels();
    let mut layers = Vec::with_capacity(regions.len());
    let mut skipped = Vec::new();
    for (i, free) in regions.free.iter().enumerate() {
        let count = free.count();
        if count == 0 {
            layers.push(None);
            skipped.push(i);
            continue;
        }
        let mut sums = vec![0.0; n];
        for p in free.indices() {
            for (s, &e) in sums.iter_mut().zip(prediction.embedding(p)) {
                *s += e;
            }
        }
        let mut best = 0;
        for k in 1..n {
            if sums[k] > sums[best] {
                best = k;
            }
        }
        layers.push(Some(best));
    }
    LayerAssignment { layers, skipped }
}

/// Binary `H x W x N` stack; multi-hot where objects overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetStack {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl TargetStack {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Target vector `S_p` at flat pixel index `p`.
    pub fn at(&self, p: usize) -> &[u8] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn get(&self, p: usize, k: usize) -> u8 {
        self.data[p * self.channels + k]
    }

    pub fn set(&mut self, p: usize, k: usize) {
        self.data[p * self.channels + k] = 1;
    }

    pub fn layer_mask(&self, k: usize) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y * self.width + x, k) == 1)
    }
}

/// Target stack plus overlapping object pairs that landed in one layer.
#[derive(Clone, Debug)]
pub struct TargetBuild {
    pub stack: TargetStack,
    pub collisions: Vec<(usize, usize)>,
}

/// Places every assigned object's full mask into its layer.
pub fn build_target_stack(
    assignment: &LayerAssignment,
    regions: &RegionDecomposition,
    channels: usize,
) -> TargetBuild {
    let mut stack = TargetStack::zeros(regions.height(), regions.width(), channels);
    for (obj, layer) in regions.objects.iter().zip(&assignment.layers) {
        if let Some(k) = *layer {
            obj.indices().for_each(|p| stack.set(p, k));
        }
    }
    let mut collisions = Vec::new();
    for i in 0..regions.len() {
        for j in (i + 1)..regions.len() {
            let (Some(a), Some(b)) = (assignment.layers[i], assignment.layers[j]) else {
                continue;
            };
            if a == b && regions.objects[i].intersection_count(&regions.objects[j]).unwrap_or(0) > 0 {
                collisions.push((i, j));
            }
        }
    }
    if !collisions.is_empty() {
        log::warn!("{} overlapping object pair(s) share a layer", collisions.len());
    }
    TargetBuild { stack, collisions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn disjoint_masks_have_no_overlap_part() {
        let a = Mask::rect(8, 8, 0, 0, 3, 3);
        let b = Mask::rect(8, 8, 5, 5, 8, 8);
        let r = decompose(8, 8, &[a, b]).unwrap();
        assert!(r.overlapping.iter().all(Mask::is_empty));
        assert_eq!(r.free_foreground, r.foreground);
    }

    #[test]
    fn identical_masks_are_fully_overlapping() {
        let a = Mask::rect(8, 8, 1, 1, 5, 5);
        let r = decompose(8, 8, &[a.clone(), a]).unwrap();
        assert!(r.free.iter().all(Mask::is_empty));
        assert!(r.free_foreground.is_empty());
    }

    #[test]
    fn partial_overlap_counts_match_intersection() {
        let a = Mask::rect(10, 10, 0, 0, 6, 6);
        let b = Mask::rect(10, 10, 3, 4, 10, 10);
        let inter = a.intersection_count(&b).unwrap();
        assert_eq!(inter, 3 * 2);
        let r = decompose(10, 10, &[a, b]).unwrap();
        assert_eq!(r.overlapping[0].count(), inter);
        assert_eq!(r.overlapping[1].count(), inter);
    }

    #[test]
    fn adjacency_threshold_examples() {
        let mut a = Mask::new(1, 32);
        a.set(0, 0, true);
        let mut b = Mask::new(1, 32);
        b.set(0, 14, true);
        let mut c = Mask::new(1, 32);
        c.set(0, 20, true);
        let g = adjacency(&[a.clone(), b], 15.0);
        assert!(g.is_adjacent(0, 1) && g.is_adjacent(1, 0));
        let g = adjacency(&[a, c], 15.0);
        assert!(g.neighbors[0].is_empty());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut m = Mask::new(9, 13);
        m.set(2, 3, true);
        m.set(7, 11, true);
        m.set(8, 0, true);
        let dt = squared_distance_transform(&m);
        for y in 0..9 {
            for x in 0..13 {
                let brute = m
                    .indices()
                    .map(|p| ((p / 13) as f64 - y as f64).powi(2) + ((p % 13) as f64 - x as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(dt[y * 13 + x], brute, "({y},{x})");
            }
        }
        assert!(squared_distance_transform(&Mask::new(3, 3)).iter().all(|d| d.is_infinite()));
    }

    fn prediction_with_means(means: &[f64]) -> Prediction {
        let n = means.len();
        Prediction::new(
            Tensor::full(&[2, 2], 0.5),
            Tensor::from_fn(&[2, 2, n], |i| means[i % n]),
        )
        .unwrap()
    }

    #[test]
    fn assignment_takes_argmax_of_means() {
        let r = decompose(2, 2, &[Mask::rect(2, 2, 0, 0, 2, 2)]).unwrap();
        let a = assign_layers(&prediction_with_means(&[0.1, 0.9, 0.2, 0.1]), &r);
        assert_eq!(a.layers, vec![Some(1)]);
        let a = assign_layers(&prediction_with_means(&[0.5, 0.5, 0.1, 0.1]), &r);
        assert_eq!(a.layers, vec![Some(0)]);
    }

    #[test]
    fn objects_without_free_part_are_skipped() {
        let a = Mask::rect(2, 2, 0, 0, 2, 2);
        let r = decompose(2, 2, &[a.clone(), a]).unwrap();
        let asg = assign_layers(&prediction_with_means(&[0.1, 0.9]), &r);
        assert_eq!(asg.layers, vec![None, None]);
        assert_eq!(asg.skipped, vec![0, 1]);
    }

    #[test]
    fn stack_places_full_masks() {
        let a = Mask::rect(6, 6, 0, 0, 4, 4);
        let b = Mask::rect(6, 6, 2, 2, 6, 6);
        let r = decompose(6, 6, &[a, b]).unwrap();
        let asg = LayerAssignment {
            layers: vec![Some(0), Some(1)],
            skipped: vec![],
        };
        let t = build_target_stack(&asg, &r, 4);
        assert!(t.collisions.is_empty());
        assert_eq!(t.stack.at(2 * 6 + 2), &[1, 1, 0, 0]);
        assert_eq!(t.stack.at(0), &[1, 0, 0, 0]);
        assert_eq!(t.stack.at(35), &[0, 1, 0, 0]);

        let single = LayerAssignment {
            layers: vec![Some(2), None],
            skipped: vec![],
        };
        let t = build_target_stack(&single, &r, 4);
        assert_eq!(t.stack.layer_mask(2), r.objects[0]);
        assert!(t.stack.layer_mask(0).is_empty());

        let clash = LayerAssignment {
            layers: vec![Some(1), Some(1)],
            skipped: vec![],
        };
        assert_eq!(build_target_stack(&clash, &r, 4).collisions, vec![(0, 1)]);
    }
}
