use crate::error::{Error, Result};

/// Dense `N × C × H × W` batch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn zeros_like(t: &Tensor) -> Self {
        Self::zeros(t.n, t.c, t.h, t.w)
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[b * l..(b + 1) * l]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let l = self.item_len();
        &mut self.data[b * l..(b + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel-wise concatenation of tensors sharing `n`, `h`, `w`.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if parts
            .iter()
            .any(|t| t.n != first.n || t.h != first.h || t.w != first.w)
        {
            return Err(Error::invalid("concatenated tensors disagree in shape"));
        }
        let c = parts.iter().map(|t| t.c).sum();
        let mut out = Tensor::zeros(first.n, c, first.h, first.w);
        for b in 0..first.n {
            let mut off = 0;
            let dst = out.item_mut(b);
            for t in parts {
                let src = t.item(b);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`] given the channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = counts
            .iter()
            .map(|&c| Tensor::zeros(self.n, c, self.h, self.w))
            .collect();
        let p = self.plane_len();
        for b in 0..self.n {
            let src = self.item(b);
            let mut off = 0;
            for t in out.iter_mut() {
                let len = t.c * p;
                t.item_mut(b).copy_from_slice(&src[off..off + len]);
                off += len;
            }
        }
        out
    }
}
