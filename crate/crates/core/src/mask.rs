use crate::error::{shape_err, Result};

/// A binary `H x W` mask stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(
                "mask",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Axis-aligned filled rectangle `[y0, y1) x [x0, x1)`, clipped.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self::from_fn(height, width, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn get_flat(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn set_flat(&mut self, i: usize, v: bool) {
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Flat indices of set pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other, "intersection")?;
        Ok(self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other, "union")?;
        Ok(self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count())
    }

    /// Set when any 8-neighbour (or the pixel itself) is set.
    pub fn dilate8(&self) -> Mask {
        let (h, w) = self.dims();
        Mask::from_fn(h, w, |y, x| {
            let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
            ys.into_iter().any(|yy| {
                (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| self.get(yy, xx))
            })
        })
    }
}
