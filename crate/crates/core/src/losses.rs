//! Training objective: foreground cross-entropy, the layering loss
//! (attracting, repelling and sparse terms) and the Dice-like overlap
//! completion loss. Every term returns its value together with exact
//! gradients with respect to both prediction fields.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::regions::{AdjacencyGraph, RegionDecomposition, TargetStack};
use crate::tensor::Tensor;

/// Norm floor used by the cosine similarity and the sparse term.
pub const NORM_FLOOR: f64 = 1e-8;
/// Clamp applied to cross-entropy log arguments.
pub const LOG_CLAMP: f64 = 1e-7;

/// Network outputs for one image.
///
/// `foreground` is `[H, W]`; `layering` is `[H, W, N]` so the embedding
/// `e_p` of pixel `p` is a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub foreground: Tensor<f64>,
    pub layering: Tensor<f64>,
}

impl Prediction {
    pub fn new(foreground: Tensor<f64>, layering: Tensor<f64>) -> Result<Self> {
        match (foreground.shape(), layering.shape()) {
            ([h, w], [lh, lw, n]) if h == lh && w == lw && *n >= 2 => Ok(Self {
                foreground,
                layering,
            }),
            (f, l) => Err(shape_err(
                "prediction",
                format!("foreground {f:?} / layering {l:?}; need [H, W] and [H, W, N>=2]"),
            )),
        }
    }

    pub fn height(&self) -> usize {
        self.foreground.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.foreground.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.layering.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Embedding vector `e_p` at flat pixel index `p`.
    pub fn embedding(&self, p: usize) -> &[f64] {
        let n = self.channels();
        &self.layering.data()[p * n..(p + 1) * n]
    }

    /// Layering activation of channel `k` at `(y, x)`.
    pub fn layer_at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.layering.data()[(y * self.width() + x) * self.channels() + k]
    }
}

/// Training phase: 1 = layering, 2 = layering plus overlap completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Phase {
    Layering,
    Completion,
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p.number()
    }
}

impl TryFrom<u8> for Phase {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Phase::Layering),
            2 => Ok(Phase::Completion),
            _ => Err(format!("phase must be 1 or 2, got {v}")),
        }
    }
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Layering => 1,
            Phase::Completion => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the sparse term.
    pub lambda: f64,
    pub phase: Phase,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            phase: Phase::Layering,
        }
    }
}

/// A loss value with its gradients with respect to `F_raw` and `L_raw`.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub d_foreground: Tensor<f64>,
    pub d_layering: Tensor<f64>,
}

impl LossGrad {
    fn zero(pred: &Prediction) -> Self {
        Self {
            value: 0.0,
            d_foreground: Tensor::zeros(pred.foreground.shape()),
            d_layering: Tensor::zeros(pred.layering.shape()),
        }
    }

    fn accumulate(&mut self, other: &LossGrad, weight: f64) {
        self.value += weight * other.value;
        for (a, b) in self.d_foreground.data_mut().iter_mut().zip(other.d_foreground.data()) {
            *a += weight * b;
        }
        for (a, b) in self.d_layering.data_mut().iter_mut().zip(other.d_layering.data()) {
            *a += weight * b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a| |b|)` with norms floored at [`NORM_FLOOR`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_FLOOR) * norm(b).max(NORM_FLOOR))
}

/// Cosine similarity and its gradients with respect to `a` and `b`.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (ra, rb) = (norm(a), norm(b));
    let (na, nb) = (ra.max(NORM_FLOOR), rb.max(NORM_FLOOR));
    let d = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - if ra > NORM_FLOOR { d * x / (na * na) } else { 0.0 })
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - if rb > NORM_FLOOR { d * y / (nb * nb) } else { 0.0 })
        .collect();
    (d, ga, gb)
}

/// Mean embeddings `u_i` over each object's overlap-free part.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectStats {
    /// `None` when the overlap-free part is empty.
    pub means: Vec<Option<Vec<f64>>>,
    pub free_counts: Vec<usize>,
}

impl ObjectStats {
    pub fn compute(pred: &Prediction, regions: &RegionDecomposition) -> Self {
        let n = pred.channels();
        let mut means = Vec::with_capacity(regions.len());
        let mut free_counts = Vec::with_capacity(regions.len());
        for free in &regions.free {
            let count = free.count();
            free_counts.push(count);
            if count == 0 {
                means.push(None);
                continue;
            }
            let mut u = vec![0.0; n];
            for p in free.indices() {
                u.iter_mut().zip(pred.embedding(p)).for_each(|(s, &e)| *s += e);
            }
            u.iter_mut().for_each(|s| *s /= count as f64);
            means.push(Some(u));
        }
        Self { means, free_counts }
    }

    fn total_free(&self) -> usize {
        self.free_counts.iter().sum()
    }

    /// Spreads `d_mean` (gradient w.r.t. `u_i`) uniformly over `O_i^n`.
    fn distribute(&self, regions: &RegionDecomposition, i: usize, d_mean: &[f64], out: &mut Tensor<f64>) {
        let n = d_mean.len();
        let c = self.free_counts[i] as f64;
        let data = out.data_mut();
        for p in regions.free[i].indices() {
            for k in 0..n {
                data[p * n + k] += d_mean[k] / c;
            }
        }
    }
}

fn check(pred: &Prediction, regions: &RegionDecomposition) -> Result<()> {
    if (pred.height(), pred.width()) != (regions.height(), regions.width()) {
        return Err(shape_err(
            "loss",
            format!(
                "prediction {}x{} vs regions {}x{}",
                pred.height(),
                pred.width(),
                regions.height(),
                regions.width()
            ),
        ));
    }
    Ok(())
}

/// `1 - (1/sum|O_i^n|) sum_i sum_{p in O_i^n} D(e_p, u_i)^2`.
pub fn attract_loss(pred: &Prediction, regions: &RegionDecomposition) -> Result<LossGrad> {
    check(pred, regions)?;
    let stats = ObjectStats::compute(pred, regions);
    let mut out = LossGrad::zero(pred);
    let total = stats.total_free();
    if total == 0 {
        return Ok(out);
    }
    let t = total as f64;
    let n = pred.channels();
    let mut sim_sum = 0.0;
    for (i, mean) in stats.means.iter().enumerate() {
        let Some(u) = mean else { continue };
        let mut d_mean = vec![0.0; n];
        for p in regions.free[i].indices() {
            let (d, de, du) = cosine_with_grad(pred.embedding(p), u);
            sim_sum += d * d;
            let g = out.d_layering.data_mut();
            for k in 0..n {
                g[p * n + k] -= 2.0 * d * de[k] / t;
                d_mean[k] -= 2.0 * d * du[k] / t;
            }
        }
        stats.distribute(regions, i, &d_mean, &mut out.d_layering);
    }
    out.value = 1.0 - sim_sum / t;
    Ok(out)
}

/// `(1/C) sum_i (1/|Adj(O_i)|) sum_{j in Adj(O_i)} D(u_i, u_j)^2`.
///
/// Objects without an overlap-free part have no mean embedding and take
/// no part in the sum; `C` counts the remaining objects. An object with no
/// neighbours contributes 0.
pub fn repel_loss(pred: &Prediction, regions: &RegionDecomposition, adjacency: &AdjacencyGraph) -> Result<LossGrad> {
    check(pred, regions)?;
    if adjacency.neighbors.len() != regions.len() {
        return Err(shape_err(
            "repel_loss",
            format!("adjacency for {} objects, regions for {}", adjacency.neighbors.len(), regions.len()),
        ));
    }
    let stats = ObjectStats::compute(pred, regions);
    let mut out = LossGrad::zero(pred);
    let defined = stats.means.iter().filter(|m| m.is_some()).count();
    if defined == 0 {
        return Ok(out);
    }
    let c = defined as f64;
    let n = pred.channels();
    let mut d_means: Vec<Vec<f64>> = vec![vec![0.0; n]; regions.len()];
    let mut value = 0.0;
    for (i, mean) in stats.means.iter().enumerate() {
        let Some(ui) = mean else { continue };
        let adj: Vec<usize> = adjacency.neighbors[i]
            .iter()
            .copied()
            .filter(|&j| stats.means[j].is_some())
            .collect();
        if adj.is_empty() {
            continue;
        }
        let w = 1.0 / (c * adj.len() as f64);
        for j in adj {
            let uj = stats.means[j].as_ref().expect("filtered");
            let (d, gi, gj) = cosine_with_grad(ui, uj);
            value += w * d * d;
            for k in 0..n {
                d_means[i][k] += w * 2.0 * d * gi[k];
                d_means[j][k] += w * 2.0 * d * gj[k];
            }
        }
    }
    for (i, dm) in d_means.iter().enumerate() {
        if stats.means[i].is_some() {
            stats.distribute(regions, i, dm, &mut out.d_layering);
        }
    }
    out.value = value;
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..v.len() {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

/// `1 - (1/sum|O_i^n|) sum_i sum_{p in O_i^n} max(e_p / |e_p|)`.
pub fn sparse_loss(pred: &Prediction, regions: &RegionDecomposition) -> Result<LossGrad> {
    check(pred, regions)?;
    let mut out = LossGrad::zero(pred);
    let total: usize = regions.free.iter().map(|m| m.count()).sum();
    if total == 0 {
        return Ok(out);
    }
    let t = total as f64;
    let n = pred.channels();
    let mut acc = 0.0;
    for free in &regions.free {
        for p in free.indices() {
            let e = pred.embedding(p);
            let r = norm(e);
            let nn = r.max(NORM_FLOOR);
            let m = argmax(e);
            acc += e[m] / nn;
            let g = &mut out.d_layering.data_mut()[p * n..(p + 1) * n];
            for k in 0..n {
                let mut dv = if k == m { 1.0 / nn } else { 0.0 };
                if r > NORM_FLOOR {
                    dv -= e[m] * e[k] / (nn * nn * nn);
                }
                g[k] -= dv / t;
            }
        }
    }
    out.value = 1.0 - acc / t;
    Ok(out)
}

/// The three layering terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LayeringTerms {
    pub attract: f64,
    pub repel: f64,
    pub sparse: f64,
    pub total: LossGrad,
}

/// `L_attr + L_rep + lambda * L_sparse`, computed on overlap-free pixels only.
pub fn layering_loss(
    pred: &Prediction,
    regions: &RegionDecomposition,
    adjacency: &AdjacencyGraph,
    lambda: f64,
) -> Result<LayeringTerms> {
    let a = attract_loss(pred, regions)?;
    let r = repel_loss(pred, regions, adjacency)?;
    let s = sparse_loss(pred, regions)?;
    let mut total = LossGrad::zero(pred);
    total.accumulate(&a, 1.0);
    total.accumulate(&r, 1.0);
    total.accumulate(&s, lambda);
    Ok(LayeringTerms {
        attract: a.value,
        repel: r.value,
        sparse: s.value,
        total,
    })
}

/// Mean binary cross-entropy between `F_raw` and the foreground indicator
/// over the whole image.
pub fn foreground_loss(pred: &Prediction, regions: &RegionDecomposition) -> Result<LossGrad> {
    check(pred, regions)?;
    let mut out = LossGrad::zero(pred);
    let m = pred.pixels() as f64;
    let mut acc = 0.0;
    for (p, (&f, g)) in pred
        .foreground
        .data()
        .iter()
        .zip(out.d_foreground.data_mut())
        .enumerate()
    {
        if regions.foreground.get_flat(p) {
            acc -= f.max(LOG_CLAMP).ln();
            if f > LOG_CLAMP {
                *g = -1.0 / (f * m);
            }
        } else {
            acc -= (1.0 - f).max(LOG_CLAMP).ln();
            if 1.0 - f > LOG_CLAMP {
                *g = 1.0 / ((1.0 - f) * m);
            }
        }
    }
    out.value = acc / m;
    Ok(out)
}

/// Dice-like overlap completion loss over the full object masks:
/// `1 - 2 sum_i sum_{p in O_i} e_p.S_p / sum_i sum_{p in O_i} (1.e_p + 1.S_p)`.
/// A pixel covered by several objects is counted once per object.
pub fn overlap_loss(pred: &Prediction, target: &TargetStack, regions: &RegionDecomposition) -> Result<LossGrad> {
    check(pred, regions)?;
    if target.channels() != pred.channels() || target.dims() != (pred.height(), pred.width()) {
        return Err(shape_err(
            "overlap_loss",
            format!(
                "target {:?}x{} vs prediction {}x{}x{}",
                target.dims(),
                target.channels(),
                pred.height(),
                pred.width(),
                pred.channels()
            ),
        ));
    }
    let mut out = LossGrad::zero(pred);
    let n = pred.channels();
    let (mut inter, mut denom) = (0.0, 0.0);
    for (p, &cov) in regions.coverage.iter().enumerate() {
        if cov == 0 {
            continue;
        }
        let w = cov as f64;
        let e = pred.embedding(p);
        let s = target.at(p);
        for k in 0..n {
            let sk = s[k] as f64;
            inter += w * e[k] * sk;
            denom += w * (e[k] + sk);
        }
    }
    if denom == 0.0 {
        return Ok(out);
    }
    let g = out.d_layering.data_mut();
    for (p, &cov) in regions.coverage.iter().enumerate() {
        if cov == 0 {
            continue;
        }
        let w = cov as f64;
        let s = target.at(p);
        for k in 0..n {
            g[p * n + k] = -2.0 * w * (s[k] as f64 * denom - inter) / (denom * denom);
        }
    }
    out.value = 1.0 - 2.0 * inter / denom;
    Ok(out)
}

/// Per-term breakdown of the total loss.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub foreground: f64,
    pub attract: f64,
    pub repel: f64,
    pub sparse: f64,
    pub layering: f64,
    pub overlap: Option<f64>,
    pub total: LossGrad,
}

impl TotalLoss {
    pub fn value(&self) -> f64 {
        self.total.value
    }
}

/// Phase 1: foreground + layering. Phase 2 adds the overlap term, which
/// needs a target stack.
pub fn total_loss(
    pred: &Prediction,
    regions: &RegionDecomposition,
    adjacency: &AdjacencyGraph,
    target: Option<&TargetStack>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let fg = foreground_loss(pred, regions)?;
    let lay = layering_loss(pred, regions, adjacency, weights.lambda)?;
    let mut total = LossGrad::zero(pred);
    total.accumulate(&fg, 1.0);
    total.accumulate(&lay.total, 1.0);
    let overlap = match weights.phase {
        Phase::Layering => None,
        Phase::Completion => {
            let target = target.ok_or(Error::MissingTarget)?;
            let ov = overlap_loss(pred, target, regions)?;
            total.accumulate(&ov, 1.0);
            Some(ov.value)
        }
    };
    Ok(TotalLoss {
        foreground: fg.value,
        attract: lay.attract,
        repel: lay.repel,
        sparse: lay.sparse,
        layering: lay.total.value,
        overlap,
        total,
    })
}
