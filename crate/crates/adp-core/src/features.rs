//! Nearest-centroid deep-feature labeling function.
//!
//! A small autoencoder is trained unsupervised on the training images; the
//! per-unit absolute activation magnitudes of its hidden layer are the
//! feature vector. K-means (k = number of classes) clusters the training
//! features, the bank stores each cluster's mean magnitudes, and the labeling
//! function answers with the one-hot of the L1-nearest cluster.
//!
//! Cluster ids carry no class meaning: downstream consumers treat this as a
//! weak labeling function whose relative accuracy absorbs the permutation.

use std::path::Path;

use rand::Rng;

use crate::adam::AdamParams;
use crate::autodiff::Tape;
use crate::container::{read_container, write_container, TensorRecord};
use crate::data::Image;
use crate::lfb::{LabelingFunction, ProbLabel};
use crate::nn::{sample_indices, Activation, NetworkSpec, TrainableNet};
use crate::rng;
use crate::{AdpError, Result};

/// Lloyd's algorithm from seeded k-means++ starts.
///
/// Returns (assignments, centroids, inertia after each iteration). An empty
/// cluster is reseeded to the point farthest from its current centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> {
    if k == 0 || k > points.len() {
        return Err(AdpError::invalid(
            "kmeans",
            format!("k={k} with {} points", points.len()),
        ));
    }
    let dim = points[0].len();
    let mut r = rng::derive(seed, "kmeans", 0);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[r.random_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            r.random_range(0..points.len())
        } else {
            let mut target = r.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
    }

    let mut assignments = vec![0usize; points.len()];
    let mut inertia_log = Vec::new();
    for _ in 0..iters {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (c, cen) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia_log.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                // reseed dead centroid to the farthest point
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        sq_dist(a, &centroids[c])
                            .partial_cmp(&sq_dist(b, &centroids[c]))
                            .unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = points[far].clone();
                moved = true;
                continue;
            }
            for (j, s) in sums[c].iter().enumerate() {
                let next = s / counts[c] as f64;
                if next != centroids[c][j] {
                    moved = true;
                }
                centroids[c][j] = next;
            }
        }
        if !moved {
            break;
        }
    }
    Ok((assignments, centroids, inertia_log))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Autoencoder trained on unlabeled images; exposes hidden-layer magnitudes.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    encoder: TrainableNet,
    decoder: TrainableNet,
    pub feat_dim: usize,
    input_dim: usize,
}

impl FeatureNet {
    /// Train for `epochs` full passes (minibatch 32, Adam 1e-3).
    pub fn train_unsupervised(
        images: &[&Image],
        feat_dim: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<FeatureNet> {
        assert!(!images.is_empty());
        let input_dim = images[0].pixels.len();
        let mut init_rng = rng::derive(seed, "featnet-init", 0);
        let mut net = FeatureNet {
            encoder: TrainableNet::new(
                NetworkSpec::chain(&[input_dim, feat_dim], Activation::Tanh, Activation::Tanh),
                &mut init_rng,
            ),
            decoder: TrainableNet::new(
                NetworkSpec::chain(&[feat_dim, input_dim], Activation::Tanh, Activation::Tanh),
                &mut init_rng,
            ),
            feat_dim,
            input_dim,
        };
        let hp = AdamParams::new(1e-3);
        let batch = 32.min(images.len());
        let steps_per_epoch = images.len().div_ceil(batch);
        for epoch in 0..epochs {
            for step in 0..steps_per_epoch {
                let mut r = rng::derive(seed, "featnet-batch", (epoch * steps_per_epoch + step) as u64);
                let idx = sample_indices(images.len(), batch, &mut r);
                let mut x_flat = Vec::with_capacity(batch * input_dim);
                for &i in &idx {
                    x_flat.extend_from_slice(&images[i].pixels);
                }
                let mut tape = Tape::new();
                let x = tape.leaf(&[batch, input_dim], x_flat, false);
                let enc = net.encoder.params.bind(&mut tape, true);
                let dec = net.decoder.params.bind(&mut tape, true);
                let h = enc.forward(&mut tape, x)?;
                let y = dec.forward(&mut tape, h)?;
                let diff = tape.sub(y, x)?;
                let sq = tape.mul(diff, diff)?;
                let loss = tape.mean(sq);
                tape.backward(loss)?;
                let ge = enc.grads(&tape);
                let gd = dec.grads(&tape);
                net.encoder.step(&ge, &hp);
                net.decoder.step(&gd, &hp);
            }
        }
        Ok(net)
    }

    /// Per-unit absolute activation magnitude of the hidden layer.
    pub fn features(&self, image: &Image) -> Vec<f64> {
        assert_eq!(image.pixels.len(), self.input_dim);
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, self.input_dim], image.pixels.clone(), false);
        let enc = self.encoder.params.bind(&mut tape, false);
        let h = enc.forward(&mut tape, x).expect("shape-checked net");
        tape.data(h).iter().map(|v| v.abs()).collect()
    }
}

/// Per-cluster mean feature magnitudes.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// k × feat_dim row-major.
    pub v_avg: Vec<f64>,
    pub clusters: usize,
    pub feat_dim: usize,
    /// Clusters that came up empty and were filled with the global mean.
    pub backfilled: Vec<usize>,
}

/// `v_avg[i][j]` = mean of feature magnitude j over cluster i's members.
/// Empty clusters get the global mean row and are reported in `backfilled`.
pub fn build_feature_bank(
    features: &[Vec<f64>],
    assignments: &[usize],
    clusters: usize,
) -> Result<FeatureBank> {
    if features.is_empty() || features.len() != assignments.len() {
        return Err(AdpError::invalid(
            "feature bank",
            format!(
                "{} features vs {} assignments",
                features.len(),
                assignments.len()
            ),
        ));
    }
    let feat_dim = features[0].len();
    let mut sums = vec![0.0; clusters * feat_dim];
    let mut counts = vec![0usize; clusters];
    let mut global = vec![0.0; feat_dim];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        for (j, v) in f.iter().enumerate() {
            sums[a * feat_dim + j] += v;
            global[j] += v;
        }
    }
    for g in global.iter_mut() {
        *g /= features.len() as f64;
    }
    let mut backfilled = Vec::new();
    let mut v_avg = vec![0.0; clusters * feat_dim];
    for c in 0..clusters {
        if counts[c] == 0 {
            backfilled.push(c);
            v_avg[c * feat_dim..(c + 1) * feat_dim].copy_from_slice(&global);
        } else {
            for j in 0..feat_dim {
                v_avg[c * feat_dim + j] = sums[c * feat_dim + j] / counts[c] as f64;
            }
        }
    }
    Ok(FeatureBank {
        v_avg,
        clusters,
        feat_dim,
        backfilled,
    })
}

impl FeatureBank {
    /// One-hot of the cluster minimizing Σ_j |v_avg[i][j] − v[j]|,
    /// lowest-index tie-break.
    pub fn nearest(&self, features: &[f64]) -> usize {
        let mut scores = Vec::with_capacity(self.clusters);
        for c in 0..self.clusters {
            let row = &self.v_avg[c * self.feat_dim..(c + 1) * self.feat_dim];
            let d: f64 = row.iter().zip(features).map(|(a, b)| (a - b).abs()).sum();
            scores.push(-d);
        }
        crate::lfb::argmax(&scores)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(
            path,
            &[TensorRecord::new(
                "v_avg",
                vec![self.clusters, self.feat_dim],
                self.v_avg.clone(),
            )],
        )
    }

    pub fn load(path: &Path) -> Result<FeatureBank> {
        let recs = read_container(path)?;
        let r = recs
            .iter()
            .find(|r| r.name == "v_avg")
            .ok_or_else(|| AdpError::Format {
                path: path.display().to_string(),
                detail: "missing v_avg record".to_string(),
            })?;
        Ok(FeatureBank {
            v_avg: r.data.clone(),
            clusters: r.dims[0],
            feat_dim: r.dims[1],
            backfilled: Vec::new(),
        })
    }
}

/// The deep-feature labeling function: bank + feature net.
pub struct DeepFeatureLf {
    id: String,
    arity: (usize, usize),
    classes: usize,
    net: FeatureNet,
    bank: FeatureBank,
}

impl DeepFeatureLf {
    /// Build from unlabeled training images: train the feature net, cluster
    /// the features with k = `classes`, average per cluster.
    pub fn build(
        images: &[&Image],
        classes: usize,
        feat_dim: usize,
        seed: u64,
    ) -> Result<DeepFeatureLf> {
        let (h, w) = (images[0].height, images[0].width);
        let net = FeatureNet::train_unsupervised(images, feat_dim, 20, seed)?;
        let feats: Vec<Vec<f64>> = images.iter().map(|img| net.features(img)).collect();
        let (assignments, _, _) = kmeans(&feats, classes, seed, 50)?;
        let bank = build_feature_bank(&feats, &assignments, classes)?;
        Ok(DeepFeatureLf {
            id: format!("deep_feature(k={classes})"),
            arity: (h, w),
            classes,
            net,
            bank,
        })
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }
}

impl LabelingFunction for DeepFeatureLf {
    fn id(&self) -> &str {
        &self.id
    }

    fn arity(&self) -> (usize, usize) {
        self.arity
    }

    fn evaluate(&self, image: &Image) -> ProbLabel {
        let f = self.net.features(image);
        let cluster = self.bank.nearest(&f);
        let mut v = vec![0.0; self.classes];
        v[cluster] = 1.0;
        ProbLabel::new(v).expect("one-hot is a valid label")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_each_point_its_own_cluster() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-3.0, 1.0]];
        let (asn, _, inertia) = kmeans(&pts, 3, 1, 20).unwrap();
        let mut sorted = asn.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        assert!(inertia.last().unwrap() < &1e-12);
    }

    #[test]
    fn kmeans_separated_blobs() {
        let mut pts = Vec::new();
        let mut r = rng::derive(3, "blobs", 0);
        for i in 0..40 {
            let center = if i < 20 { 0.0 } else { 100.0 };
            pts.push(vec![
                center + r.random_range(-0.5..0.5),
                center + r.random_range(-0.5..0.5),
            ]);
        }
        let (asn, _, _) = kmeans(&pts, 2, 7, 30).unwrap();
        assert!(asn[..20].iter().all(|a| *a == asn[0]));
        assert!(asn[20..].iter().all(|a| *a == asn[20]));
        assert_ne!(asn[0], asn[20]);
    }

    #[test]
    fn kmeans_inertia_non_increasing() {
        let mut r = rng::derive(9, "cloud", 0);
        let pts: Vec<Vec<f64>> = (0..120)
            .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        let (_, _, inertia) = kmeans(&pts, 4, 11, 40).unwrap();
        for w in inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_deterministic_given_seed() {
        let mut r = rng::derive(5, "cloud", 1);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        let a = kmeans(&pts, 3, 17, 25).unwrap();
        let b = kmeans(&pts, 3, 17, 25).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn bank_means_match_hand_arithmetic() {
        let feats = vec![
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![10.0, 10.0],
            vec![0.0, 0.0],
        ];
        let asn = vec![0, 0, 1, 2];
        let bank = build_feature_bank(&feats, &asn, 3).unwrap();
        assert_eq!(&bank.v_avg[0..2], &[2.0, 3.0]);
        assert_eq!(&bank.v_avg[2..4], &[10.0, 10.0]);
        assert_eq!(&bank.v_avg[4..6], &[0.0, 0.0]);
        assert!(bank.backfilled.is_empty());
    }

    #[test]
    fn bank_single_and_duplicate_members() {
        let feats = vec![vec![1.0, 5.0], vec![1.0, 5.0]];
        let bank = build_feature_bank(&feats, &[0, 0], 2).unwrap();
        assert_eq!(&bank.v_avg[0..2], &[1.0, 5.0]);
        // empty cluster 1 got the global mean, flagged
        assert_eq!(bank.backfilled, vec![1]);
        assert_eq!(&bank.v_avg[2..4], &[1.0, 5.0]);
    }

    #[test]
    fn nearest_matches_straight_loop_and_breaks_ties_low() {
        let bank = FeatureBank {
            v_avg: vec![0.0, 0.0, 4.0, 4.0, 1.0, 1.0],
            clusters: 3,
            feat_dim: 2,
            backfilled: vec![],
        };
        // straight-loop oracle
        let probe = vec![0.9, 0.9];
        let oracle = {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..3 {
                let d: f64 = bank.v_avg[c * 2..c * 2 + 2]
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        };
        assert_eq!(bank.nearest(&probe), oracle);
        // equidistant → lower index wins
        let tie = FeatureBank {
            v_avg: vec![0.0, 2.0],
            clusters: 2,
            feat_dim: 1,
            backfilled: vec![],
        };
        assert_eq!(tie.nearest(&[1.0]), 0);
    }

    #[test]
    fn bank_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let bank = FeatureBank {
            v_avg: vec![1.5, 2.5, 3.5, 4.5],
            clusters: 2,
            feat_dim: 2,
            backfilled: vec![],
        };
        bank.save(&path).unwrap();
        let back = FeatureBank::load(&path).unwrap();
        assert_eq!(back.v_avg, bank.v_avg);
        assert_eq!(back.clusters, 2);
    }
}
