//! Supervised linear projection: top generalized eigenvectors of the
//! between-class scatter against the regularized within-class scatter.
//!
//! Scatter accumulation is streaming (global second moment plus per-class
//! first moments), so callers never materialize the whole spliced feature
//! matrix. Both scatters are normalized by the total frame count; the
//! projection whitens the within-class covariance on the retained
//! dimensions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Learned projection: `out_dim x input_dim` rows plus the input mean
/// subtracted before projecting.
#[derive(Debug, Clone)]
pub struct LdaTransform {
    pub matrix: Array2<f64>,
    pub input_mean: Array1<f64>,
    /// Generalized eigenvalues, descending, one per retained dimension.
    pub eigenvalues: Vec<f64>,
}

impl LdaTransform {
    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Projects `T x input_dim` features to `T x out_dim`.
    pub fn apply(&self, feats: ArrayView2<f64>) -> Array2<f64> {
        (&feats - &self.input_mean).dot(&self.matrix.t())
    }
}

/// Streaming scatter statistics.
#[derive(Debug, Clone)]
pub struct LdaAccumulator {
    dim: usize,
    second_moment: Array2<f64>,
    class_sums: BTreeMap<usize, (f64, Array1<f64>)>,
    count: f64,
}

impl LdaAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            second_moment: Array2::zeros((dim, dim)),
            class_sums: BTreeMap::new(),
            count: 0.0,
        }
    }

    /// Adds labeled frames; `labels.len()` must equal `feats.nrows()`.
    pub fn add(&mut self, feats: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if feats.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "LDA: {} frames vs {} labels",
                feats.nrows(),
                labels.len()
            )));
        }
        if feats.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "LDA: dim {} != accumulator dim {}",
                feats.ncols(),
                self.dim
            )));
        }
        self.second_moment += &feats.t().dot(&feats);
        for (row, &label) in feats.rows().into_iter().zip(labels) {
            let entry = self
                .class_sums
                .entry(label)
                .or_insert_with(|| (0.0, Array1::zeros(self.dim)));
            entry.0 += 1.0;
            entry.1 += &row;
        }
        self.count += labels.len() as f64;
        Ok(())
    }

    pub fn merge(&mut self, other: &LdaAccumulator) {
        self.second_moment += &other.second_moment;
        for (label, (n, sum)) in &other.class_sums {
            let entry = self
                .class_sums
                .entry(*label)
                .or_insert_with(|| (0.0, Array1::zeros(self.dim)));
            entry.0 += n;
            entry.1 += sum;
        }
        self.count += other.count;
    }

    pub fn num_classes(&self) -> usize {
        self.class_sums.len()
    }
}

/// Estimates the projection from accumulated scatter statistics.
///
/// The within-class scatter is regularized with `eps * I`,
/// `eps = 1e-6 * trace(Sw) / dim`, before the generalized eigensolve.
pub fn estimate_lda_from(acc: &LdaAccumulator, out_dim: usize) -> Result<LdaTransform> {
    let d = acc.dim;
    let classes = acc.num_classes();
    if classes < out_dim + 1 {
        return Err(Error::TooFewClasses { need: out_dim + 1, got: classes });
    }
    let n = acc.count;
    let mut global_sum = Array1::<f64>::zeros(d);
    for (_, (_, sum)) in &acc.class_sums {
        global_sum += sum;
    }
    let global_mean = &global_sum / n;

    // Total scatter = E[xx^T] - mu mu^T; between-class from class means;
    // within-class is the difference. All normalized by n.
    let mut total = &acc.second_moment / n;
    for i in 0..d {
        for j in 0..d {
            total[[i, j]] -= global_mean[i] * global_mean[j];
        }
    }
    let mut between = Array2::<f64>::zeros((d, d));
    for (_, (cn, sum)) in &acc.class_sums {
        let cm = sum / *cn;
        let diff = &cm - &global_mean;
        for i in 0..d {
            for j in 0..d {
                between[[i, j]] += cn / n * diff[i] * diff[j];
            }
        }
    }
    let within = &total - &between;

    let trace: f64 = (0..d).map(|i| within[[i, i]]).sum();
    if !(trace > 0.0) {
        return Err(Error::Invalid(
            "LDA: within-class scatter is degenerate (zero trace)".into(),
        ));
    }
    let eps = 1e-6 * trace / d as f64;

    // Solve Sb v = lambda (Sw + eps I) v via W = (Sw+eps I)^(-1/2):
    // the symmetric eigenproblem of W Sb W.
    let mut within_reg = within;
    for i in 0..d {
        within_reg[[i, i]] += eps;
    }
    let sw = DMatrix::from_fn(d, d, |i, j| within_reg[[i, j]]);
    let eig_sw = SymmetricEigen::new(sw);
    let mut inv_sqrt = DMatrix::zeros(d, d);
    for (k, &lambda) in eig_sw.eigenvalues.iter().enumerate() {
        if lambda <= 0.0 {
            return Err(Error::Invalid(
                "LDA: regularized within-class scatter is not positive definite".into(),
            ));
        }
        let v = eig_sw.eigenvectors.column(k);
        let scale = 1.0 / lambda.sqrt();
        for i in 0..d {
            for j in 0..d {
                inv_sqrt[(i, j)] += scale * v[i] * v[j];
            }
        }
    }

    let sb = DMatrix::from_fn(d, d, |i, j| between[[i, j]]);
    let m: DMatrix<f64> = &inv_sqrt * sb * &inv_sqrt;
    // Symmetrize against rounding drift before the eigensolve.
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut matrix = Array2::zeros((out_dim, d));
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (row, &k) in order[..out_dim].iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[k]);
        let y = eig.eigenvectors.column(k);
        let direction = &inv_sqrt * y;
        for j in 0..d {
            matrix[[row, j]] = direction[j];
        }
    }

    Ok(LdaTransform { matrix, input_mean: global_mean, eigenvalues })
}

/// One-shot estimation from a single labeled feature matrix.
pub fn estimate_lda(
    feats: ArrayView2<f64>,
    labels: &[usize],
    out_dim: usize,
) -> Result<LdaTransform> {
    let mut acc = LdaAccumulator::new(feats.ncols());
    acc.add(feats, labels)?;
    estimate_lda_from(&acc, out_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn two_gaussian_classes(
        rng: &mut ChaCha20Rng,
        n_per_class: usize,
        offset: [f64; 2],
    ) -> (Array2<f64>, Vec<usize>) {
        let mut feats = Array2::zeros((2 * n_per_class, 2));
        let mut labels = Vec::with_capacity(2 * n_per_class);
        for i in 0..2 * n_per_class {
            let class = i % 2;
            let sign = if class == 0 { -0.5 } else { 0.5 };
            feats[[i, 0]] = sign * offset[0] + rng.sample::<f64, _>(StandardNormal);
            feats[[i, 1]] = sign * offset[1] + rng.sample::<f64, _>(StandardNormal);
            labels.push(class);
        }
        (feats, labels)
    }

    #[test]
    fn fisher_direction_on_two_isotropic_classes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let offset = [3.0, 1.5];
        let (feats, labels) = two_gaussian_classes(&mut rng, 2000, offset);
        let lda = estimate_lda(feats.view(), &labels, 1).unwrap();
        // With isotropic within-class covariance the Fisher direction is
        // parallel to the mean difference.
        let dir = [lda.matrix[[0, 0]], lda.matrix[[0, 1]]];
        let norm_d = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let norm_o = (offset[0] * offset[0] + offset[1] * offset[1]).sqrt();
        let cosine = (dir[0] * offset[0] + dir[1] * offset[1]) / (norm_d * norm_o);
        assert!(cosine.abs() >= 0.99, "cosine {cosine}");
    }

    #[test]
    fn shuffled_labels_kill_the_leading_eigenvalue() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (feats, mut labels) = two_gaussian_classes(&mut rng, 2000, [3.0, 0.0]);
        labels.shuffle(&mut rng);
        let lda = estimate_lda(feats.view(), &labels, 1).unwrap();
        assert!(lda.eigenvalues[0] <= 0.1, "eigenvalue {}", lda.eigenvalues[0]);
    }

    #[test]
    fn projection_whitens_within_class_covariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let n = 3000;
        let d = 5;
        let classes = 4;
        let mut feats = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            for j in 0..d {
                let center = (c as f64) * ((j + 1) as f64) * 0.8;
                feats[[i, j]] = center + rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64);
            }
            labels.push(c);
        }
        let lda = estimate_lda(feats.view(), &labels, 3).unwrap();
        let projected = lda.apply(feats.view());

        // Within-class covariance of the projected data.
        let mut class_means = vec![vec![0.0; 3]; classes];
        let mut counts = vec![0.0; classes];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1.0;
            for j in 0..3 {
                class_means[c][j] += projected[[i, j]];
            }
        }
        for c in 0..classes {
            for j in 0..3 {
                class_means[c][j] /= counts[c];
            }
        }
        let mut cov = Array2::<f64>::zeros((3, 3));
        for (i, &c) in labels.iter().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    cov[[a, b]] += (projected[[i, a]] - class_means[c][a])
                        * (projected[[i, b]] - class_means[c][b]);
                }
            }
        }
        cov /= n as f64;
        for a in 0..3 {
            assert!((cov[[a, a]] - 1.0).abs() < 0.1, "diag {} = {}", a, cov[[a, a]]);
        }
    }

    #[test]
    fn too_few_classes_rejected() {
        let feats = Array2::zeros((10, 3));
        let labels = vec![0usize; 10];
        assert!(matches!(
            estimate_lda(feats.view(), &labels, 1),
            Err(Error::TooFewClasses { need: 2, got: 1 })
        ));
    }

    #[test]
    fn accumulator_merge_equals_single_pass() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let (feats, labels) = two_gaussian_classes(&mut rng, 500, [2.0, 1.0]);
        let whole = estimate_lda(feats.view(), &labels, 1).unwrap();

        let mut a = LdaAccumulator::new(2);
        let mut b = LdaAccumulator::new(2);
        a.add(feats.slice(ndarray::s![..400, ..]), &labels[..400]).unwrap();
        b.add(feats.slice(ndarray::s![400.., ..]), &labels[400..]).unwrap();
        a.merge(&b);
        let merged = estimate_lda_from(&a, 1).unwrap();
        for j in 0..2 {
            assert!((whole.matrix[[0, j]] - merged.matrix[[0, j]]).abs() < 1e-8);
        }
    }
}
