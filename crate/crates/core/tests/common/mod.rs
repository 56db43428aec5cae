//! Independent reference implementations and helpers shared by the
//! integration tests.
#![allow(dead_code)]

use layerseg::losses::{
    attract_loss, foreground_loss, overlap_loss, repel_loss, sparse_loss, LossGrad, Prediction,
};
use layerseg::model::{self, init_params};
use layerseg::regions::{assign_layers, build_target_stack, AdjacencyGraph, RegionDecomposition, TargetStack};
use layerseg::train::PreparedScene;
use layerseg::{Mask, NetworkConfig, ParameterSet, PostprocessParams, SceneSpec, ShapeKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Union-find over flat pixel indices.
struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// 8-connected components by two-pass union-find labelling, ordered by
/// their smallest flat index.
pub fn components_reference(h: usize, w: usize, on: &[bool]) -> Vec<Vec<usize>> {
    let mut dsu = Dsu((0..h * w).collect());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !on[p] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut prev = Vec::with_capacity(4);
            if x > 0 {
                prev.push(p - 1);
            }
            if y > 0 {
                prev.push(p - w);
                if x > 0 {
                    prev.push(p - w - 1);
                }
                if x + 1 < w {
                    prev.push(p - w + 1);
                }
            }
            for q in prev {
                if on[q] {
                    dsu.union(p, q);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in 0..h * w {
        if on[p] {
            let r = dsu.find(p);
            groups.entry(r).or_default().push(p);
        }
    }
    // roots are the smallest member, so map order is discovery order
    groups.into_values().collect()
}

/// Pixel-by-pixel rendition of the post-processing algorithm.
pub fn segment_reference(pred: &Prediction, params: &PostprocessParams) -> Vec<(usize, Mask)> {
    let (h, w, n) = (pred.height(), pred.width(), pred.channels());
    let f: Vec<bool> = (0..h * w).map(|p| pred.foreground.data()[p] > params.tau).collect();
    let mut fg = vec![false; h * w];
    for comp in components_reference(h, w, &f) {
        if comp.len() >= params.s_min {
            for p in comp {
                fg[p] = true;
            }
        }
    }
    let mut layers = vec![vec![false; h * w]; n];
    for p in 0..h * w {
        let e: Vec<f64> = (0..n).map(|k| pred.layer_at(p / w, p % w, k)).collect();
        let mut best = 0;
        for k in 0..n {
            if e[k] > e[best] {
                best = k;
            }
        }
        layers[best][p] = true;
        if params.overlap_mode {
            for k in 0..n {
                if e[k] > params.tau {
                    layers[k][p] = true;
                }
            }
        }
    }
    if params.intersect_foreground {
        for layer in &mut layers {
            for p in 0..h * w {
                layer[p] = layer[p] && fg[p];
            }
        }
    }
    let mut out = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        for comp in components_reference(h, w, layer) {
            if comp.len() >= params.s_min {
                let mut m = Mask::new(h, w);
                for p in comp {
                    m.set_flat(p, true);
                }
                out.push((k, m));
            }
        }
    }
    out
}

/// Blocky random prediction in `(0, 1)`: coarse cells plus fine noise, so
/// thresholds cut out components of many sizes.
pub fn random_prediction(h: usize, w: usize, n: usize, seed: u64) -> Prediction {
    let mut r = rng(seed);
    let cell = r.random_range(2..=6usize);
    let (ch, cw) = (h.div_ceil(cell), w.div_ceil(cell));
    let coarse_f: Vec<f64> = (0..ch * cw).map(|_| r.random_range(0.0..1.0)).collect();
    let coarse_l: Vec<f64> = (0..ch * cw * n).map(|_| r.random_range(0.0..1.0)).collect();
    let fg = Tensor::from_fn(&[h, w], |p| {
        let c = (p / w / cell) * cw + (p % w) / cell;
        (0.8 * coarse_f[c] + 0.2 * r.random_range(0.0..1.0)).clamp(0.001, 0.999)
    });
    let lay = Tensor::from_fn(&[h, w, n], |i| {
        let (p, k) = (i / n, i % n);
        let c = (p / w / cell) * cw + (p % w) / cell;
        // occasional exact ties exercise the tie rule
        let v = 0.7 * coarse_l[c * n + k] + 0.3 * r.random_range(0.0..1.0);
        (v * 8.0).round() / 8.0 * 0.98 + 0.01
    });
    Prediction::new(fg, lay).unwrap()
}

/// Named loss terms evaluated on one prediction.
pub struct Terms {
    pub names: Vec<&'static str>,
    pub grads: Vec<LossGrad>,
}

/// Every individual term plus the phase totals. `target` enables the
/// overlap term and the phase-2 total.
pub fn all_terms(
    pred: &Prediction,
    regions: &RegionDecomposition,
    adj: &AdjacencyGraph,
    target: &TargetStack,
    lambda: f64,
) -> Terms {
    let fg = foreground_loss(pred, regions).unwrap();
    let at = attract_loss(pred, regions).unwrap();
    let rp = repel_loss(pred, regions, adj).unwrap();
    let sp = sparse_loss(pred, regions).unwrap();
    let ov = overlap_loss(pred, target, regions).unwrap();
    let combine = |parts: &[(&LossGrad, f64)]| {
        let mut out = LossGrad {
            value: 0.0,
            d_foreground: Tensor::zeros(pred.foreground.shape()),
            d_layering: Tensor::zeros(pred.layering.shape()),
        };
        for (g, wgt) in parts {
            out.value += wgt * g.value;
            for (a, b) in out.d_foreground.data_mut().iter_mut().zip(g.d_foreground.data()) {
                *a += wgt * b;
            }
            for (a, b) in out.d_layering.data_mut().iter_mut().zip(g.d_layering.data()) {
                *a += wgt * b;
            }
        }
        out
    };
    let layering = combine(&[(&at, 1.0), (&rp, 1.0), (&sp, lambda)]);
    let phase1 = combine(&[(&fg, 1.0), (&layering, 1.0)]);
    let phase2 = combine(&[(&phase1, 1.0), (&ov, 1.0)]);
    Terms {
        names: vec!["foreground", "attract", "repel", "sparse", "overlap", "layering", "total_phase1", "total_phase2"],
        grads: vec![fg, at, rp, sp, ov, layering, phase1, phase2],
    }
}

/// Outcome of comparing analytic derivatives against finite differences.
#[derive(Default, Debug, Clone)]
pub struct FdTally {
    pub checked: usize,
    pub failed: usize,
    /// Mismatches at the main step that agree with a central difference at
    /// the fine step: a nondifferentiable point lies within the main step.
    pub refined: usize,
    /// Points where the one-sided fine differences disagree and the
    /// analytic value equals one of them.
    pub kinks: usize,
    /// Largest `error / tolerance` among central matches.
    pub worst: f64,
    pub first_failure: Option<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FINE_STEP: f64 = 1e-7;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-8;

fn fd_tol(a: f64, b: f64) -> f64 {
    FD_REL * a.abs().max(b.abs()) + FD_ABS
}

/// Function values around one coordinate: at `x`, `x +- FD_STEP`, and
/// lazily at `x +- FD_FINE_STEP`.
pub struct Probe<'a> {
    pub zero: f64,
    pub plus: f64,
    pub minus: f64,
    pub fine: &'a mut dyn FnMut() -> (f64, f64),
}

impl FdTally {
    pub fn check(&mut self, label: impl FnOnce() -> String, analytic: f64, probe: Probe<'_>) {
        self.checked += 1;
        let central = (probe.plus - probe.minus) / (2.0 * FD_STEP);
        let err = (analytic - central).abs();
        if err <= fd_tol(analytic, central) {
            self.worst = self.worst.max(err / fd_tol(analytic, central));
            return;
        }
        let (fp, fm) = (probe.fine)();
        let fine = (fp - fm) / (2.0 * FD_FINE_STEP);
        if (analytic - fine).abs() <= fd_tol(analytic, fine) {
            self.refined += 1;
            return;
        }
        let fwd = (fp - probe.zero) / FD_FINE_STEP;
        let bwd = (probe.zero - fm) / FD_FINE_STEP;
        let sides_differ = (fwd - bwd).abs() > fd_tol(fwd, bwd);
        let one_side = (analytic - fwd).abs() <= fd_tol(analytic, fwd) || (analytic - bwd).abs() <= fd_tol(analytic, bwd);
        if sides_differ && one_side {
            self.kinks += 1;
            return;
        }
        self.failed += 1;
        if self.first_failure.is_none() {
            self.first_failure = Some(format!(
                "{}: analytic {analytic:.6e} central {central:.6e} fine {fine:.6e} (fwd {fwd:.6e}, bwd {bwd:.6e})",
                label()
            ));
        }
    }

    pub fn merge(&mut self, other: &FdTally) {
        self.checked += other.checked;
        self.failed += other.failed;
        self.refined += other.refined;
        self.kinks += other.kinks;
        self.worst = self.worst.max(other.worst);
        if self.first_failure.is_none() {
            self.first_failure = other.first_failure.clone();
        }
    }
}

/// Runs `check` for every term at one coordinate, evaluating the fine
/// step at most once.
fn check_terms(
    tallies: &mut [FdTally],
    names: &[&str],
    coord: &dyn Fn() -> String,
    analytic: &dyn Fn(usize) -> f64,
    zero: &[f64],
    eval: &mut dyn FnMut(f64) -> Vec<f64>,
) {
    let (plus, minus) = (eval(FD_STEP), eval(-FD_STEP));
    let mut fine: Option<(Vec<f64>, Vec<f64>)> = None;
    for t in 0..tallies.len() {
        let mut lazy = || {
            let (p, m) = fine.get_or_insert_with(|| (eval(FD_FINE_STEP), eval(-FD_FINE_STEP)));
            (p[t], m[t])
        };
        let probe = Probe {
            zero: zero[t],
            plus: plus[t],
            minus: minus[t],
            fine: &mut lazy,
        };
        tallies[t].check(|| format!("{} d/d{}", names[t], coord()), analytic(t), probe);
    }
}

/// Objects in the same layer must not touch; greedy colouring of the
/// touching graph gives a collision-free assignment.
pub fn non_touching_layers(objects: &[Mask], n: usize) -> Option<Vec<usize>> {
    let grown: Vec<Mask> = objects.iter().map(Mask::dilate8).collect();
    let mut layers = Vec::with_capacity(objects.len());
    for i in 0..objects.len() {
        let used: Vec<usize> = (0..i)
            .filter(|&j| grown[i].intersection_count(&objects[j]).unwrap() > 0)
            .map(|j| layers[j])
            .collect();
        layers.push((0..n).find(|k| !used.contains(k))?);
    }
    Some(layers)
}

fn dcos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

fn free_means(pred: &Prediction, regions: &RegionDecomposition) -> Vec<Option<Vec<f64>>> {
    regions
        .free
        .iter()
        .map(|m| {
            let px: Vec<usize> = m.indices().collect();
            if px.is_empty() {
                return None;
            }
            let n = pred.channels();
            Some((0..n).map(|k| px.iter().map(|&p| pred.embedding(p)[k]).sum::<f64>() / px.len() as f64).collect())
        })
        .collect()
}

/// Direct double sums over the overlap-free pixels.
pub fn attract_reference(pred: &Prediction, regions: &RegionDecomposition) -> f64 {
    let means = free_means(pred, regions);
    let (mut s, mut count) = (0.0, 0usize);
    for (m, u) in regions.free.iter().zip(&means) {
        for p in m.indices() {
            s += dcos(pred.embedding(p), u.as_ref().unwrap()).powi(2);
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { 1.0 - s / count as f64 }
}

pub fn repel_reference(pred: &Prediction, regions: &RegionDecomposition, adj: &AdjacencyGraph) -> f64 {
    let means = free_means(pred, regions);
    let c = means.iter().filter(|m| m.is_some()).count();
    if c == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (i, ui) in means.iter().enumerate() {
        let Some(ui) = ui else { continue };
        let nbrs: Vec<&Vec<f64>> = (0..means.len())
            .filter(|&j| j != i && adj.is_adjacent(i, j))
            .filter_map(|j| means[j].as_ref())
            .collect();
        if !nbrs.is_empty() {
            s += nbrs.iter().map(|uj| dcos(ui, uj).powi(2)).sum::<f64>() / nbrs.len() as f64;
        }
    }
    s / c as f64
}

pub fn sparse_reference(pred: &Prediction, regions: &RegionDecomposition) -> f64 {
    let (mut s, mut count) = (0.0, 0usize);
    for m in &regions.free {
        for p in m.indices() {
            let e = pred.embedding(p);
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            s += e.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / norm;
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { 1.0 - s / count as f64 }
}

pub fn foreground_reference(pred: &Prediction, regions: &RegionDecomposition) -> f64 {
    let f = pred.foreground.data();
    let total: f64 = (0..f.len())
        .map(|p| {
            if regions.foreground.get_flat(p) {
                -f[p].max(1e-7).ln()
            } else {
                -(1.0 - f[p]).max(1e-7).ln()
            }
        })
        .sum();
    total / f.len() as f64
}

pub fn overlap_reference(pred: &Prediction, target: &TargetStack, regions: &RegionDecomposition) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for obj in &regions.objects {
        for p in obj.indices() {
            let e = pred.embedding(p);
            let s = target.at(p);
            num += e.iter().zip(s).map(|(a, &b)| a * b as f64).sum::<f64>();
            den += e.iter().sum::<f64>() + s.iter().map(|&b| b as f64).sum::<f64>();
        }
    }
    if den == 0.0 { 0.0 } else { 1.0 - 2.0 * num / den }
}

/// Small random scenes for derivative checks.
pub fn fd_spec() -> SceneSpec {
    SceneSpec {
        height: 16,
        width: 16,
        object_count_range: [2, 4],
        shape_kind: ShapeKind::Ellipse,
        axis_range: [2.0, 4.0],
        overlap_probability: 0.5,
        max_overlap_fraction: 0.3,
        noise_sigma: 0.05,
        seed: 0,
    }
}

pub fn fd_network() -> NetworkConfig {
    NetworkConfig {
        depth: 2,
        base_channels: 4,
        layers: 3,
        head_channels: 2,
        input_channels: 1,
    }
}

pub const FD_TERMS: usize = 8;

/// Prediction with values drawn inside `(0.05, 0.95)`.
pub fn random_field(h: usize, w: usize, n: usize, seed: u64) -> Prediction {
    let mut r = rng(seed);
    let fg = Tensor::from_fn(&[h, w], |_| r.random_range(0.05..0.95));
    let lay = Tensor::from_fn(&[h, w, n], |_| r.random_range(0.05..0.95));
    Prediction::new(fg, lay).unwrap()
}

fn target_for(pred: &Prediction, regions: &RegionDecomposition) -> TargetStack {
    build_target_stack(&assign_layers(pred, regions), regions, pred.channels()).stack
}

fn term_values(pred: &Prediction, s: &PreparedScene, target: &TargetStack, lambda: f64) -> Vec<f64> {
    all_terms(pred, &s.regions, &s.adjacency, target, lambda).grads.iter().map(|g| g.value).collect()
}

/// Derivatives of every term with respect to each entry of `F_raw` and
/// `L_raw`, the target stack held fixed.
pub fn fd_prediction(pred: &Prediction, s: &PreparedScene, lambda: f64) -> Vec<FdTally> {
    let target = target_for(pred, &s.regions);
    let terms = all_terms(pred, &s.regions, &s.adjacency, &target, lambda);
    let f0 = term_values(pred, s, &target, lambda);
    let mut tallies = vec![FdTally::default(); FD_TERMS];
    for field in 0..2 {
        let len = if field == 0 { pred.foreground.len() } else { pred.layering.len() };
        for i in 0..len {
            let mut eval = |delta: f64| {
                let mut p = pred.clone();
                let data = if field == 0 { p.foreground.data_mut() } else { p.layering.data_mut() };
                data[i] += delta;
                term_values(&p, s, &target, lambda)
            };
            let analytic = |t: usize| {
                let g = &terms.grads[t];
                if field == 0 { g.d_foreground.data()[i] } else { g.d_layering.data()[i] }
            };
            let coord = || format!("{}[{i}]", ["F_raw", "L_raw"][field]);
            check_terms(&mut tallies, &terms.names, &coord, &analytic, &f0, &mut eval);
        }
    }
    tallies
}

/// Network parameters drawn from the initialiser and then jittered so that
/// biases, scales and shifts are generic.
pub fn fd_params(network: &NetworkConfig, seed: u64) -> ParameterSet<f64> {
    let mut params = init_params(network, seed).unwrap().cast::<f64>();
    let mut r = rng(seed ^ 0x9e37_79b9);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    params
}

/// Derivatives of every term with respect to every network parameter,
/// the target stack taken from the unperturbed forward pass.
pub fn fd_parameters(params: &ParameterSet<f64>, network: &NetworkConfig, s: &PreparedScene, lambda: f64) -> Vec<FdTally> {
    let image = s.image.cast::<f64>();
    let mut tape = Tape::<f64>::new();
    let vars = tape.bind(params).unwrap();
    let out = model::forward_on_tape(&mut tape, &vars, network, &image).unwrap();
    let pred = model::prediction_from_outputs(tape.value(out.foreground), tape.value(out.layering)).unwrap();
    let target = target_for(&pred, &s.regions);
    let terms = all_terms(&pred, &s.regions, &s.adjacency, &target, lambda);
    let (h, w) = (pred.height(), pred.width());
    let analytic: Vec<ParameterSet<f64>> = terms
        .grads
        .iter()
        .map(|g| {
            let d_fg = g.d_foreground.clone().reshape(&[1, h, w]).unwrap();
            let d_lay = model::channel_major::<f64>(&g.d_layering);
            let root = tape.external(g.value, vec![(out.foreground, d_fg), (out.layering, d_lay)]).unwrap();
            tape.gradient(root).unwrap()
        })
        .collect();

    let f0: Vec<f64> = terms.grads.iter().map(|g| g.value).collect();
    let values_at = |p: &ParameterSet<f64>| {
        let pred = model::forward(&image, p, network).unwrap();
        term_values(&pred, s, &target, lambda)
    };
    let mut tallies = vec![FdTally::default(); FD_TERMS];
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        for i in 0..len {
            let orig = params.get(name).unwrap().data()[i];
            let mut eval = |delta: f64| {
                work.get_mut(name).unwrap().data_mut()[i] = orig + delta;
                let v = values_at(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                v
            };
            let analytic = |t: usize| analytic[t].get(name).unwrap().data()[i];
            let coord = || format!("{name}[{i}]");
            check_terms(&mut tallies, &terms.names, &coord, &analytic, &f0, &mut eval);
        }
    }
    tallies
}
