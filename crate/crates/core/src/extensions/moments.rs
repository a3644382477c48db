/// Per-dimension running mean and variance (Welford / Chan batch merge).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample variance `M2 / max(n - 1, 1)`.
    pub fn var(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|m| (m / d).max(0.0)).collect()
    }

    /// Standard deviation, or ones while fewer than two samples are seen.
    pub fn std(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![1.0; self.dim()];
        }
        self.var().into_iter().map(f64::sqrt).collect()
    }

    /// Merges a row-major batch of `dim`-wide rows. Empty batches are a no-op.
    pub fn update(&mut self, batch: &[f32]) {
        let dim = self.dim();
        if dim == 0 || batch.is_empty() {
            return;
        }
        let n_b = (batch.len() / dim) as u64;
        let mut mean_b = vec![0.0f64; dim];
        for row in batch.chunks_exact(dim) {
            for (m, &x) in mean_b.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean_b.iter_mut().for_each(|m| *m /= n_b as f64);
        let m2_b = sum_sq_dev(batch, &mean_b);
        self.merge(n_b, &mean_b, &m2_b);
    }

    /// Chan merge of a batch summarized by its count, mean and `M2`.
    pub fn merge(&mut self, n_b: u64, mean_b: &[f64], m2_b: &[f64]) {
        if n_b == 0 {
            return;
        }
        let n_a = self.count as f64;
        let n = n_a + n_b as f64;
        for i in 0..self.dim() {
            let delta = mean_b[i] - self.mean[i];
            self.mean[i] += delta * n_b as f64 / n;
            self.m2[i] += m2_b[i] + delta * delta * n_a * n_b as f64 / n;
        }
        self.count += n_b;
    }

    /// `clamp((x - mean) / std, -limit, limit)` applied row-wise.
    pub fn normalize(&self, batch: &[f32], limit: f32) -> Vec<f32> {
        let dim = self.dim();
        let std = self.std();
        batch
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = i % dim;
                let z = (x as f64 - self.mean[j]) / (std[j] + 1e-8);
                (z as f32).clamp(-limit, limit)
            })
            .collect()
    }
}

/// Per-dimension `Σ (x - center)²` over row-major rows.
pub fn sum_sq_dev(batch: &[f32], center: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; center.len()];
    for row in batch.chunks_exact(center.len().max(1)) {
        for ((s, &x), m) in out.iter_mut().zip(row).zip(center) {
            let d = x as f64 - m;
            *s += d * d;
        }
    }
    out
}

/// Functional form of [`RunningMoments::update`].
pub fn running_update(moments: &RunningMoments, batch: &[f32]) -> RunningMoments {
    let mut m = moments.clone();
    m.update(batch);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Streams};
    use proptest::prelude::*;

    fn two_pass(xs: &[f32]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        let ss = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>();
        (mean, ss / (n - 1.0).max(1.0))
    }

    #[test]
    fn single_value() {
        let m = running_update(&RunningMoments::new(1), &[3.5]);
        assert_eq!(m.mean, vec![3.5]);
        assert_eq!(m.var(), vec![0.0]);
    }

    #[test]
    fn merge_equals_joint() {
        let a = running_update(&running_update(&RunningMoments::new(1), &[1.0, 2.0]), &[3.0, 4.0]);
        let b = running_update(&RunningMoments::new(1), &[1.0, 2.0, 3.0, 4.0]);
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
        assert!((a.var()[0] - b.var()[0]).abs() < 1e-12);
        assert!((b.var()[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_moments() {
        let xs = Streams::new(3).normals(Domain::Init, 0, 0, 1_000_000);
        let mut m = RunningMoments::new(1);
        for chunk in xs.chunks(4096) {
            m.update(chunk);
        }
        assert!(m.mean[0].abs() < 0.01);
        assert!((m.var()[0] - 1.0).abs() < 0.01);
    }

    #[test]
    fn empty_batch_is_noop() {
        let m = RunningMoments::new(2);
        assert_eq!(running_update(&m, &[]), m);
    }

    proptest! {
        #[test]
        fn chunked_matches_two_pass(
            xs in proptest::collection::vec(-100.0f32..100.0, 1..200),
            split in 0usize..200,
        ) {
            let split = split.min(xs.len());
            let mut m = RunningMoments::new(1);
            m.update(&xs[..split]);
            m.update(&xs[split..]);
            let (mean, var) = two_pass(&xs);
            prop_assert!((m.mean[0] - mean).abs() <= 1e-5 * mean.abs().max(1.0));
            prop_assert!((m.var()[0] - var).abs() <= 1e-5 * var.abs().max(1.0));
            prop_assert!(m.var()[0] >= 0.0);
        }
    }
}
