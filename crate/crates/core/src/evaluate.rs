//! Accuracy, confidence, Fréchet distance, transferability and class preservation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attack::AttackRecord;
use crate::data::Dataset;
use crate::error::{AptError, Result};
use crate::models::{argmax, ClassifierHandle, ImageTensor, PerceptualNet};

/// Relative eigenvalue tolerance below which a covariance counts as not PSD.
pub const PSD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub acc: f64,
    pub conf: f64,
    pub count: usize,
}

/// `(acc, conf)` from probability rows; ties go to the lowest class index.
pub fn accuracy_confidence_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<Score> {
    if probs.len() != labels.len() {
        return Err(AptError::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(AptError::InvalidArgument("accuracy over an empty set".into()));
    }
    let mut hits = 0usize;
    let mut conf = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| AptError::InvalidArgument(format!("label {y} out of range")))?;
        if argmax(p) == y {
            hits += 1;
        }
        conf += py;
    }
    let n = labels.len() as f64;
    Ok(Score {
        acc: hits as f64 / n,
        conf: conf / n,
        count: labels.len(),
    })
}

pub fn accuracy_confidence(clf: &ClassifierHandle, images: &[ImageTensor], labels: &[usize]) -> Result<Score> {
    if images.len() != labels.len() {
        return Err(AptError::Shape(format!("{} images for {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Err(AptError::InvalidArgument("accuracy over an empty set".into()));
    }
    accuracy_confidence_probs(&clf.classify_many(images)?, labels)
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(AptError::InvalidArgument(format!(
                "feature statistics need at least two samples, got {}",
                rows.len()
            )));
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(AptError::Shape("ragged feature rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; f];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; f * f];
        for r in rows {
            for i in 0..f {
                let di = r[i] - mean[i];
                for j in i..f {
                    cov[i * f + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..f {
            for j in i..f {
                let v = cov[i * f + j] / (n - 1.0);
                cov[i * f + j] = v;
                cov[j * f + i] = v;
            }
        }
        Ok(Self {
            mean,
            cov,
            count: rows.len(),
        })
    }

    /// Statistics of the union of the two underlying samples.
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        if self.dim() != other.dim() {
            return Err(AptError::Shape(format!("feature dims {} and {}", self.dim(), other.dim())));
        }
        let f = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean: Vec<f64> = self.mean.iter().zip(&delta).map(|(a, d)| a + d * nb / n).collect();
        let mut cov = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                let m2 = self.cov[i * f + j] * (na - 1.0)
                    + other.cov[i * f + j] * (nb - 1.0)
                    + delta[i] * delta[j] * na * nb / n;
                cov[i * f + j] = m2 / (n - 1.0);
            }
        }
        Ok(FeatureStats {
            mean,
            cov,
            count: self.count + other.count,
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let f = self.dim();
        let m = DMatrix::from_row_slice(f, f, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

pub fn feature_stats(net: &PerceptualNet, images: &[ImageTensor]) -> Result<FeatureStats> {
    FeatureStats::from_rows(&net.features_many(images))
}

/// Square root of a symmetric PSD matrix; eigenvalues below
/// `-PSD_TOL * max(1, λ_max)` are an error, smaller negative ones are clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = PSD_TOL * lmax.max(1.0);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(AptError::Numerical(format!(
            "matrix is not positive semidefinite: eigenvalue {bad:.3e} (largest {lmax:.3e})"
        )));
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian summaries.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(AptError::Shape(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    if a.count < 2 || b.count < 2 {
        return Err(AptError::InvalidArgument("feature statistics need at least two samples".into()));
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa)?;
    psd_sqrt(&sb)?;
    let inner = &ra * &sb * &ra;
    let cross = psd_sqrt(&inner)?.trace();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let v = dmu + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

/// Images and original labels of the emitted records. With `fallback`, a
/// record without an emitted image contributes its unmodified input instead.
pub fn attacked_set(records: &[AttackRecord], fallback: Option<&Dataset>) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in records {
        match (&r.image, fallback, r.image_id) {
            (Some(img), _, _) => xs.push(img.clone()),
            (None, Some(ds), Some(id)) if !r.emitted => xs.push(ImageTensor(ds.image(id).clone())),
            (None, _, _) if r.emitted => {
                return Err(AptError::InvalidArgument(format!(
                    "record for image {:?} was emitted but its pixels are not loaded",
                    r.image_id
                )))
            }
            _ => continue,
        }
        ys.push(r.true_class);
    }
    Ok((xs, ys))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub evaluated: Vec<String>,
    /// `acc[s][e]`: accuracy of classifier `e` on images attacking `s`.
    pub acc: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl TransferMatrix {
    pub fn is_diagonal(&self, s: usize, e: usize) -> bool {
        self.sources[s] == self.evaluated[e]
    }

    pub fn entry(&self, source: &str, evaluated: &str) -> Option<f64> {
        let s = self.sources.iter().position(|x| x == source)?;
        let e = self.evaluated.iter().position(|x| x == evaluated)?;
        Some(self.acc[s][e])
    }
}

/// Accuracy of every zoo classifier on every source's labeled image set.
pub fn transfer_matrix(
    sets: &[(String, Vec<ImageTensor>, Vec<usize>)],
    zoo: &[&ClassifierHandle],
) -> Result<TransferMatrix> {
    let mut acc = Vec::with_capacity(sets.len());
    for (_, xs, ys) in sets {
        let row = zoo
            .iter()
            .map(|c| accuracy_confidence(c, xs, ys).map(|s| s.acc))
            .collect::<Result<Vec<_>>>()?;
        acc.push(row);
    }
    Ok(TransferMatrix {
        sources: sets.iter().map(|s| s.0.clone()).collect(),
        evaluated: zoo.iter().map(|c| c.id.clone()).collect(),
        acc,
        counts: sets.iter().map(|s| s.1.len()).collect(),
    })
}

/// Fraction of emitted images the oracle assigns their original class.
pub fn class_preservation_rate(records: &[AttackRecord], oracle: &ClassifierHandle) -> Result<f64> {
    let (xs, ys) = attacked_set(records, None)?;
    if xs.is_empty() {
        return Err(AptError::InvalidArgument("no emitted images to judge".into()));
    }
    Ok(accuracy_confidence(oracle, &xs, &ys)?.acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub campaign: String,
    pub target: String,
    pub inputs: usize,
    pub emitted: usize,
    /// Scores on the unmodified inputs.
    pub real: BTreeMap<String, Score>,
    /// Scores on the attacked inputs; inputs without an emitted image count as unmodified.
    pub attacked: BTreeMap<String, Score>,
    pub fid: BTreeMap<String, f64>,
    pub transfer: Option<TransferMatrix>,
    pub class_preservation: Option<f64>,
}

/// Evaluate one campaign against the classifier zoo and the oracle.
pub fn evaluate_campaign(
    campaign: &str,
    ds: &Dataset,
    records: &[AttackRecord],
    target: &str,
    zoo: &[&ClassifierHandle],
    oracle: &ClassifierHandle,
    net: &PerceptualNet,
    reference_ids: &[usize],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(AptError::InvalidArgument(format!("campaign `{campaign}` has no records")));
    }
    let ids: Vec<usize> = records
        .iter()
        .map(|r| {
            r.image_id
                .ok_or_else(|| AptError::InvalidArgument("campaign records need source image ids".into()))
        })
        .collect::<Result<_>>()?;
    let real_x: Vec<ImageTensor> = ids.iter().map(|&i| ImageTensor(ds.image(i).clone())).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.true_class).collect();
    let (att_x, att_y) = attacked_set(records, Some(ds))?;
    let mut real = BTreeMap::new();
    let mut attacked = BTreeMap::new();
    let mut all: Vec<&ClassifierHandle> = zoo.to_vec();
    if !all.iter().any(|c| c.id == oracle.id) {
        all.push(oracle);
    }
    for c in &all {
        real.insert(c.id.clone(), accuracy_confidence(c, &real_x, &labels)?);
        attacked.insert(c.id.clone(), accuracy_confidence(c, &att_x, &att_y)?);
    }
    let (em_x, em_y) = attacked_set(records, None)?;
    let mut fid_map = BTreeMap::new();
    if reference_ids.len() >= 2 {
        let reference: Vec<ImageTensor> = reference_ids.iter().map(|&i| ImageTensor(ds.image(i).clone())).collect();
        let rs = feature_stats(net, &reference)?;
        fid_map.insert("reference_vs_inputs".to_string(), fid(&rs, &feature_stats(net, &real_x)?)?);
        if em_x.len() >= 2 {
            fid_map.insert("reference_vs_attacked".to_string(), fid(&rs, &feature_stats(net, &em_x)?)?);
        }
    }
    let transfer = if em_x.is_empty() {
        None
    } else {
        Some(transfer_matrix(&[(target.to_string(), em_x, em_y)], zoo)?)
    };
    let class_preservation = if transfer.is_some() {
        Some(class_preservation_rate(records, oracle)?)
    } else {
        None
    };
    Ok(EvalReport {
        campaign: campaign.to_string(),
        target: target.to_string(),
        inputs: records.len(),
        emitted: records.iter().filter(|r| r.emitted).count(),
        real,
        attacked,
        fid: fid_map,
        transfer,
        class_preservation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
        FeatureStats { mean, cov, count: 100 }
    }

    #[test]
    fn closed_form_fids() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let a = stats(vec![0.0, 0.0], eye.clone());
        let b = stats(vec![1.0, 0.0], eye.clone());
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = stats(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]);
        assert!((fid(&a, &c).unwrap() - 2.0).abs() < 1e-12);
        assert!(fid(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn non_psd_is_reported() {
        let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]);
        let err = fid(&a, &a).unwrap_err().to_string();
        assert!(err.contains("eigenvalue"), "{err}");
    }

    #[test]
    fn sampled_gaussians_approach_analytic_fid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let draw = |mu: [f64; 3], sd: [f64; 3], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..3)
                        .map(|i| {
                            let z: f64 = StandardNormal.sample(rng);
                            mu[i] + sd[i] * z
                        })
                        .collect()
                })
                .collect()
        };
        let a = FeatureStats::from_rows(&draw([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], &mut rng)).unwrap();
        let b = FeatureStats::from_rows(&draw([1.0, 0.5, 0.0], [2.0, 1.0, 0.5], &mut rng)).unwrap();
        // |Δμ|² + Σ (σa - σb)² for diagonal covariances
        let analytic = 1.25 + 1.0 + 0.0 + 0.25;
        let est = fid(&a, &b).unwrap();
        assert!((est - analytic).abs() / analytic < 0.05, "{est} vs {analytic}");
    }

    #[test]
    fn duplicated_image_has_zero_covariance() {
        let rows = vec![vec![0.3, -1.0, 2.0]; 5];
        let s = FeatureStats::from_rows(&rows).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert_eq!(s.mean, vec![0.3, -1.0, 2.0]);
        assert!(FeatureStats::from_rows(&rows[..1]).is_err());
    }

    #[test]
    fn commuting_square_roots_agree() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 0.25]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 16.0]));
        let ra = psd_sqrt(&a).unwrap();
        let via = psd_sqrt(&(&ra * &b * &ra)).unwrap();
        let direct = psd_sqrt(&(&a * &b)).unwrap();
        assert!((via - direct).abs().max() < 1e-8);
    }

    #[test]
    fn uniform_probs_give_lowest_index() {
        let probs = vec![vec![0.1; 10]; 4];
        let s = accuracy_confidence_probs(&probs, &[0, 3, 0, 9]).unwrap();
        assert_eq!(s.acc, 0.5);
        assert!((s.conf - 0.1).abs() < 1e-15);
        assert!(accuracy_confidence_probs(&[], &[]).is_err());
    }
}
