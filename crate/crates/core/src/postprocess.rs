//! Turns raw network outputs into instance masks: threshold the
//! foreground, binarize every layer, and split layers into connected
//! components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Prediction;
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub tau: f64,
    pub s_min: usize,
    /// Also set every channel above `tau`, so overlapping objects can
    /// appear in several layers.
    pub overlap_mode: bool,
    /// Zero layer pixels outside the thresholded foreground.
    pub intersect_foreground: bool,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            s_min: 30,
            overlap_mode: true,
            intersect_foreground: true,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.s_min == 0 {
            return Err(Error::Config("s_min must be at least 1".into()));
        }
        Ok(())
    }
}

/// One predicted object and the layer it was read from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub mask: Mask,
    pub layer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstanceSegResult {
    pub instances: Vec<Instance>,
}

impl InstanceSegResult {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.instances.iter().map(|i| i.mask.clone()).collect()
    }
}

/// 8-connected components of `mask`, each as a list of flat indices, in
/// row-major order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.get_flat(start) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = yy * w + xx;
                    if !seen[q] && mask.get_flat(q) {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Binary layer maps before component extraction, one mask per channel.
pub fn binarize_layers(prediction: &Prediction, params: &PostprocessParams) -> Vec<Mask> {
    let (h, w, n) = (prediction.height(), prediction.width(), prediction.channels());

    let raw_fg = Mask::from_vec(h, w, prediction.foreground.data().iter().map(|&v| v > params.tau).collect())
        .expect("prediction dims");
    let mut fg = Mask::new(h, w);
    for comp in connected_components(&raw_fg) {
        if comp.len() >= params.s_min {
            comp.into_iter().for_each(|p| fg.set_flat(p, true));
        }
    }

    let mut layers = vec![Mask::new(h, w); n];
    for p in 0..h * w {
        if params.intersect_foreground && !fg.get_flat(p) {
            continue;
        }
        let e = prediction.embedding(p);
        let best = crate::losses::argmax(e);
        layers[best].set_flat(p, true);
        if params.overlap_mode {
            for (k, &v) in e.iter().enumerate() {
                if v > params.tau {
                    layers[k].set_flat(p, true);
                }
            }
        }
    }
    layers
}

/// Extracts instances: per layer, every 8-connected component with at
/// least `s_min` pixels. Ordered by layer, then by discovery order.
pub fn segment(prediction: &Prediction, params: &PostprocessParams) -> InstanceSegResult {
    let (h, w) = (prediction.height(), prediction.width());
    let mut instances = Vec::new();
    for (layer, m) in binarize_layers(prediction, params).iter().enumerate() {
        for comp in connected_components(m) {
            if comp.len() < params.s_min {
                continue;
            }
            let mut mask = Mask::new(h, w);
            comp.into_iter().for_each(|p| mask.set_flat(p, true));
            instances.push(Instance { mask, layer });
        }
    }
    InstanceSegResult { instances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pred_with(h: usize, w: usize, n: usize, fg: f64, f: impl Fn(usize, usize) -> f64) -> Prediction {
        let lay = Tensor::from_fn(&[h, w, n], |i| f(i / n, i % n));
        Prediction::new(Tensor::full(&[h, w], fg), lay).unwrap()
    }

    fn blob(h: usize, w: usize, size: usize) -> Mask {
        // first `size` pixels of a 20-column block
        Mask::from_fn(h, w, |y, x| x < 20 && y * 20 + x < size)
    }

    #[test]
    fn single_blob_becomes_one_object() {
        let b = blob(40, 40, 300);
        let pred = pred_with(40, 40, 4, 0.9, |p, k| if k == 2 && b.get_flat(p) { 0.9 } else { 0.1 });
        let params = PostprocessParams { s_min: 250, ..Default::default() };
        let r = segment(&pred, &params);
        // off the blob channel 0 wins the all-0.1 tie, giving one large background object
        let in_layer2: Vec<_> = r.instances.iter().filter(|i| i.layer == 2).collect();
        assert_eq!(in_layer2.len(), 1);
        assert_eq!(in_layer2[0].mask, b);
    }

    #[test]
    fn small_blob_is_dropped() {
        let b = blob(40, 40, 100);
        let fg = Tensor::from_fn(&[40, 40], |p| if b.get_flat(p) { 0.9 } else { 0.1 });
        let lay = Tensor::from_fn(&[40, 40, 4], |i| if i % 4 == 2 && b.get_flat(i / 4) { 0.9 } else { 0.1 });
        let pred = Prediction::new(fg, lay).unwrap();
        let params = PostprocessParams { s_min: 250, ..Default::default() };
        assert!(segment(&pred, &params).is_empty());
    }

    #[test]
    fn multi_hot_pixel_and_tie() {
        let vals = [0.9, 0.8, 0.1, 0.1];
        let pred = pred_with(1, 1, 4, 0.9, |_, k| vals[k]);
        let params = PostprocessParams { s_min: 1, ..Default::default() };
        let layers = binarize_layers(&pred, &params);
        let set: Vec<bool> = layers.iter().map(|m| m.get_flat(0)).collect();
        assert_eq!(set, [true, true, false, false]);

        let off = PostprocessParams { overlap_mode: false, ..params };
        let set: Vec<bool> = binarize_layers(&pred, &off).iter().map(|m| m.get_flat(0)).collect();
        assert_eq!(set, [true, false, false, false]);

        let tie = pred_with(1, 1, 4, 0.9, |_, k| if k == 1 || k == 3 { 0.4 } else { 0.2 });
        let set: Vec<bool> = binarize_layers(&tie, &params).iter().map(|m| m.get_flat(0)).collect();
        assert_eq!(set, [false, true, false, false]);
    }

    #[test]
    fn background_is_excluded_only_when_intersecting() {
        let pred = pred_with(4, 4, 2, 0.1, |_, k| if k == 0 { 0.9 } else { 0.1 });
        let params = PostprocessParams { s_min: 1, ..Default::default() };
        assert!(segment(&pred, &params).is_empty());
        let loose = PostprocessParams { intersect_foreground: false, ..params };
        assert_eq!(segment(&pred, &loose).len(), 1);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = Mask::from_fn(3, 3, |y, x| y == x);
        assert_eq!(connected_components(&m), vec![vec![0, 4, 8]]);
        let m = Mask::from_fn(3, 3, |y, x| (y, x) == (0, 0) || (y, x) == (2, 2));
        assert_eq!(connected_components(&m).len(), 2);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(PostprocessParams { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(PostprocessParams { s_min: 0, ..Default::default() }.validate().is_err());
        assert!(PostprocessParams::default().validate().is_ok());
    }
}
