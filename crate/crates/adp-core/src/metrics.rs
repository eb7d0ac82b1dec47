//! Quantitative evaluation: a fixed small classifier, the exp-KL label score
//! (MIS), Fréchet distance over learned features (FID), the train-on-real /
//! train-on-generated accuracy protocols, and the ablation harnesses.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::adam::AdamParams;
use crate::autodiff::Tape;
use crate::baselines::{dp_mle_fit, dp_predict, majority_vote, votes_from_rows};
use crate::config::TrainConfig;
use crate::data::{Dataset, Image, LabeledSample};
use crate::gan::{generate_samples, train, AdpModel, FreezeSet, ModelMeta, Variant};
use crate::lfb::{apply_lfs, LabelingFunction, ProbLabel};
use crate::lfs::{build_lfs, standard_pool_specs};
use crate::nn::{sample_indices, Activation, NetworkSpec, TrainableNet};
use crate::rng;
use crate::{AdpError, Result};

/// Feature dimension of the classifier's penultimate layer.
pub const FEATURE_DIM: usize = 16;

/// Minimum per-set sample count for a stable covariance estimate.
pub const FID_MIN_SAMPLES: usize = 1000;

const CLASSIFIER_EPOCHS: usize = 30;
const CLASSIFIER_HIDDEN: usize = 64;

/// Small dense classifier with a fixed recipe, shared by every comparison
/// inside one experiment (the recipe hash seals that).
pub struct EvalClassifier {
    net: TrainableNet,
    pub classes: usize,
    input_dim: usize,
    recipe: String,
}

impl EvalClassifier {
    /// Train on (image, label) pairs: 2 hidden layers, 30 epochs, Adam 1e-3,
    /// deterministic in `seed`.
    pub fn train_pairs(pairs: &[(&Image, usize)], classes: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(AdpError::invalid("EvalClassifier", "no training pairs"));
        }
        let input_dim = pairs[0].0.pixels.len();
        let spec = NetworkSpec::chain(
            &[input_dim, CLASSIFIER_HIDDEN, FEATURE_DIM, classes],
            Activation::Relu,
            Activation::Linear,
        );
        let mut net = TrainableNet::new(spec, &mut rng::derive(seed, "clf-init", 0));
        let hp = AdamParams::new(1e-3);
        let batch = 32.min(pairs.len());
        let steps = pairs.len().div_ceil(batch);
        for epoch in 0..CLASSIFIER_EPOCHS {
            for step in 0..steps {
                let mut r = rng::derive(seed, "clf-batch", (epoch * steps + step) as u64);
                let idx = sample_indices(pairs.len(), batch, &mut r);
                let mut x = Vec::with_capacity(batch * input_dim);
                let mut onehot = vec![0.0; batch * classes];
                for (row, &i) in idx.iter().enumerate() {
                    x.extend_from_slice(&pairs[i].0.pixels);
                    onehot[row * classes + pairs[i].1] = 1.0;
                }
                let mut tape = Tape::new();
                let xt = tape.leaf(&[batch, input_dim], x, false);
                let bound = net.params.bind(&mut tape, true);
                let logits = bound.forward(&mut tape, xt)?;
                let probs = tape.softmax_rows(logits)?;
                let logp = tape.log(probs);
                let yt = tape.leaf(&[batch, classes], onehot, false);
                let picked = tape.mul(logp, yt)?;
                let total = tape.sum(picked);
                let loss = tape.scale(total, -1.0 / batch as f64);
                tape.backward(loss)?;
                let grads = bound.grads(&tape);
                net.step(&grads, &hp);
            }
        }
        Ok(EvalClassifier {
            net,
            classes,
            input_dim,
            recipe: format!(
                "arch={input_dim}-{CLASSIFIER_HIDDEN}-{FEATURE_DIM}-{classes};epochs={CLASSIFIER_EPOCHS};seed={seed}"
            ),
        })
    }

    pub fn train_on(samples: &[LabeledSample], classes: usize, seed: u64) -> Result<Self> {
        let pairs: Vec<(&Image, usize)> = samples.iter().map(|s| (&s.image, s.label)).collect();
        Self::train_pairs(&pairs, classes, seed)
    }

    /// Hash of the training recipe; equality across compared systems is the
    /// fairness invariant.
    pub fn recipe_hash(&self) -> u64 {
        rng::hash_bytes(self.recipe.as_bytes())
    }

    pub fn predict(&self, image: &Image) -> ProbLabel {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, self.input_dim], image.pixels.clone(), false);
        let bound = self.net.params.bind(&mut tape, false);
        let logits = bound.forward(&mut tape, x).expect("classifier shapes");
        let probs = tape.softmax_rows(logits).expect("classifier shapes");
        ProbLabel::new(tape.data(probs).to_vec()).expect("softmax row")
    }

    /// Penultimate-layer embedding.
    pub fn features(&self, image: &Image) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, self.input_dim], image.pixels.clone(), false);
        let bound = self.net.params.bind(&mut tape, false);
        let h = bound
            .forward_penultimate(&mut tape, x)
            .expect("classifier shapes");
        tape.data(h).to_vec()
    }

    pub fn accuracy(&self, pairs: &[(&Image, usize)]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let hits = pairs
            .iter()
            .filter(|(img, y)| self.predict(img).argmax() == *y)
            .count();
        hits as f64 / pairs.len() as f64
    }

    /// Mean −log p(y|x) over pairs (guarded log).
    pub fn cross_entropy(&self, pairs: &[(&Image, usize)]) -> f64 {
        let mut total = 0.0;
        for (img, y) in pairs {
            let p = self.predict(img).probs()[*y];
            total -= p.max(1e-12).ln();
        }
        total / pairs.len().max(1) as f64
    }
}

/// exp of the mean KL between per-sample label distributions and their
/// marginal.
pub fn mis(conditionals: &[ProbLabel]) -> Result<f64> {
    if conditionals.is_empty() {
        return Err(AdpError::invalid("mis", "empty set"));
    }
    let m = conditionals[0].len();
    let mut marginal = vec![0.0; m];
    for p in conditionals {
        for (a, b) in marginal.iter_mut().zip(p.probs()) {
            *a += b;
        }
    }
    for v in marginal.iter_mut() {
        *v /= conditionals.len() as f64;
    }
    let mut mean_kl = 0.0;
    for p in conditionals {
        let mut kl = 0.0;
        for (pi, qi) in p.probs().iter().zip(&marginal) {
            if *pi > 0.0 {
                kl += pi * (pi / qi.max(1e-300)).ln();
            }
        }
        mean_kl += kl;
    }
    mean_kl /= conditionals.len() as f64;
    Ok(mean_kl.exp())
}

/// MIS over a generated set through a trained classifier.
pub fn mis_with_classifier(clf: &EvalClassifier, images: &[Image]) -> Result<f64> {
    let conds: Vec<ProbLabel> = images.iter().map(|img| clf.predict(img)).collect();
    mis(&conds)
}

fn mean_and_cov(set: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mean = vec![0.0; d];
    for row in set {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in set {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2}). The matrix square root is taken by
/// eigendecomposition of the symmetrized product Σ₂^{1/2}Σ₁Σ₂^{1/2}, with
/// negative eigenvalues clamped at zero. Requires ≥ 1000 samples per set.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let d = set_a.first().map(|r| r.len()).unwrap_or(0);
    if set_a.len() < FID_MIN_SAMPLES.max(d + 1) || set_b.len() < FID_MIN_SAMPLES.max(d + 1) {
        return Err(AdpError::invalid(
            "fid",
            format!(
                "need ≥ {} samples per set, got {} and {}",
                FID_MIN_SAMPLES.max(d + 1),
                set_a.len(),
                set_b.len()
            ),
        ));
    }
    let (mu_a, cov_a) = mean_and_cov(set_a);
    let (mu_b, cov_b) = mean_and_cov(set_b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sqrt_b = psd_sqrt(&cov_b);
    let inner = &sqrt_b * &cov_a * &sqrt_b;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Embed images through the classifier and compute FID.
pub fn fid_images(
    clf: &EvalClassifier,
    real: &[&Image],
    generated: &[&Image],
) -> Result<f64> {
    let fa: Vec<Vec<f64>> = real.iter().map(|i| clf.features(i)).collect();
    let fb: Vec<Vec<f64>> = generated.iter().map(|i| clf.features(i)).collect();
    fid(&fa, &fb)
}

/// Accuracy of a classifier trained on real labeled images, tested on
/// generated pairs (percentage).
pub fn c_rt(
    real_train: &[LabeledSample],
    generated: &[(Image, usize)],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let clf = EvalClassifier::train_on(real_train, classes, seed)?;
    let pairs: Vec<(&Image, usize)> = generated.iter().map(|(i, y)| (i, *y)).collect();
    Ok(100.0 * clf.accuracy(&pairs))
}

/// Accuracy of a classifier trained on generated pairs, tested on real
/// labeled images (percentage).
pub fn c_rg(
    generated: &[(Image, usize)],
    real_test: &[LabeledSample],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let pairs: Vec<(&Image, usize)> = generated.iter().map(|(i, y)| (i, *y)).collect();
    let clf = EvalClassifier::train_pairs(&pairs, classes, seed)?;
    let test: Vec<(&Image, usize)> = real_test.iter().map(|s| (&s.image, s.label)).collect();
    Ok(100.0 * clf.accuracy(&test))
}

/// Hard-label pairs sampled from a trained model through its LFB.
pub fn generated_pairs(
    model: &AdpModel,
    lfs: &[Box<dyn LabelingFunction>],
    count: usize,
    seed: u64,
) -> Result<Vec<(Image, usize)>> {
    Ok(generate_samples(model, lfs, count, seed, None)?
        .into_iter()
        .map(|(img, label)| {
            let y = label.argmax();
            (img, y)
        })
        .collect())
}

/// One row of the labeling-function-count sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lf_count: usize,
    pub cross_entropy: f64,
    pub c_rt: f64,
}

/// Train one model per count from prefixes of the standard pool and report
/// the pretrained classifier's cross-entropy on the generated pairs. The
/// classifier is trained once on real data and shared across counts.
pub fn lf_count_sweep(
    tc: &TrainConfig,
    dataset: &Dataset,
    counts: &[usize],
    eval_count: usize,
) -> Result<Vec<SweepRow>> {
    let clf = EvalClassifier::train_on(dataset.train(), dataset.manifest.classes, tc.seed)?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let specs = standard_pool_specs(count)?;
        let lfs = build_lfs(&specs, dataset, tc.seed)?;
        let meta = ModelMeta {
            classes: dataset.manifest.classes,
            height: dataset.manifest.height,
            width: dataset.manifest.width,
            lf_count: lfs.len(),
            latent_dim: tc.latent_dim,
            cond_dim: 0,
        };
        let model = AdpModel::new(tc, meta, &mut rng::derive(tc.seed, "sweep-init", count as u64));
        let out = train(
            tc,
            dataset,
            &lfs,
            Variant::Standard,
            FreezeSet::none(),
            None,
            model,
        )?;
        let pairs = generated_pairs(&out.model, &lfs, eval_count, tc.seed ^ 0xabcd)?;
        let refs: Vec<(&Image, usize)> = pairs.iter().map(|(i, y)| (i, *y)).collect();
        rows.push(SweepRow {
            lf_count: count,
            cross_entropy: clf.cross_entropy(&refs),
            c_rt: 100.0 * clf.accuracy(&refs),
        });
    }
    Ok(rows)
}

/// One aggregator's comparison entry.
#[derive(Debug, Clone)]
pub struct AggregatorRow {
    pub method: String,
    pub cross_entropy: f64,
    pub agreement_with_classifier: f64,
}

/// Train one model on a correlated labeling-function pool, generate one
/// image set, then label it three ways: the model's own Θ/Φ aggregation,
/// majority vote, and the EM-fit label model. All three are scored by the
/// same pretrained classifier to mirror the vote-aggregation comparison.
pub fn compare_aggregators(
    tc: &TrainConfig,
    dataset: &Dataset,
    lfs: &[Box<dyn LabelingFunction>],
    eval_count: usize,
) -> Result<Vec<AggregatorRow>> {
    let classes = dataset.manifest.classes;
    let clf = EvalClassifier::train_on(dataset.train(), classes, tc.seed)?;
    let meta = ModelMeta {
        classes,
        height: dataset.manifest.height,
        width: dataset.manifest.width,
        lf_count: lfs.len(),
        latent_dim: tc.latent_dim,
        cond_dim: 0,
    };
    let model = AdpModel::new(tc, meta, &mut rng::derive(tc.seed, "agg-init", 0));
    let out = train(
        tc,
        dataset,
        lfs,
        Variant::Standard,
        FreezeSet::none(),
        None,
        model,
    )?;

    let samples = generate_samples(&out.model, lfs, eval_count, tc.seed ^ 0x77, None)?;
    let images: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
    let lfb_labels: Vec<usize> = samples.iter().map(|(_, l)| l.argmax()).collect();

    let rows_per_sample: Vec<Vec<ProbLabel>> = images
        .iter()
        .map(|img| apply_lfs(lfs, img))
        .collect::<Result<_>>()?;
    let mv_labels: Vec<usize> = rows_per_sample
        .iter()
        .map(|rows| majority_vote(rows).map(|l| l.argmax()))
        .collect::<Result<_>>()?;
    let votes = votes_from_rows(&rows_per_sample);
    let dp = dp_mle_fit(&votes, classes, 200)?;
    let dp_labels: Vec<usize> = rows_per_sample
        .iter()
        .map(|rows| dp_predict(&dp, rows).map(|l| l.argmax()))
        .collect::<Result<_>>()?;

    let score = |labels: &[usize], method: &str| -> AggregatorRow {
        let pairs: Vec<(&Image, usize)> = images.iter().zip(labels.iter().copied()).collect();
        AggregatorRow {
            method: method.to_string(),
            cross_entropy: clf.cross_entropy(&pairs),
            agreement_with_classifier: clf.accuracy(&pairs),
        }
    };
    Ok(vec![
        score(&lfb_labels, "adp-lfb"),
        score(&mv_labels, "majority"),
        score(&dp_labels, "dp-mle"),
    ])
}

/// Wall-clock comparison: one aggregation pass (final-label aggregation plus
/// the Φ counting construction per sample) against EM fit to convergence on
/// the same votes. Returns (one-pass ms, EM ms).
pub fn bench_runtime(n_lfs: usize, samples: usize, classes: usize, seed: u64) -> Result<(f64, f64)> {
    use crate::baselines::plant_votes;
    use crate::lfb::{aggregate_final, compute_phi_real, PhiMatrix, PhiProvenance, ThetaVector};

    let alphas: Vec<f64> = (0..n_lfs).map(|i| 0.6 + 0.3 * (i as f64 / n_lfs as f64)).collect();
    let (_, votes) = plant_votes(&alphas, classes, samples, seed);
    let rows_per_sample: Vec<Vec<ProbLabel>> = votes
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| ProbLabel::one_hot_class(v, classes))
                .collect()
        })
        .collect();

    let theta = ThetaVector::uniform(n_lfs);
    let phi = PhiMatrix::identity(n_lfs, PhiProvenance::Generated);
    let start = Instant::now();
    let mut acc = 0.0;
    for rows in &rows_per_sample {
        let (label, _) = aggregate_final(&theta, &phi, rows)?;
        let phi_real = compute_phi_real(&theta, rows)?;
        acc += label.probs()[0] + phi_real.get(0, 0);
    }
    let lfb_ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(acc);

    let start = Instant::now();
    let model = dp_mle_fit(&votes, classes, 500)?;
    let dp_ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(model.alphas.len());
    Ok((lfb_ms, dp_ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, Style};

    #[test]
    fn mis_is_one_for_constant_conditionals() {
        let p = ProbLabel::new(vec![0.25, 0.5, 0.25]).unwrap();
        let set: Vec<ProbLabel> = (0..50).map(|_| p.clone()).collect();
        let v = mis(&set).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "MIS {v}");
    }

    #[test]
    fn mis_equals_class_count_for_one_hot_uniform_marginal() {
        let m = 4;
        let set: Vec<ProbLabel> = (0..400)
            .map(|i| ProbLabel::one_hot_class(i % m, m))
            .collect();
        let v = mis(&set).unwrap();
        assert!((v - m as f64).abs() < 1e-9, "MIS {v}");
    }

    #[test]
    fn fid_zero_on_identical_sets() {
        let mut r = rng::derive(3, "fid", 0);
        use rand::Rng;
        let set: Vec<Vec<f64>> = (0..1200)
            .map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let v = fid(&set, &set).unwrap();
        assert!(v.abs() < 1e-6, "FID {v}");
    }

    #[test]
    fn fid_is_symmetric() {
        use rand::Rng;
        let mut r = rng::derive(5, "fid", 1);
        let a: Vec<Vec<f64>> = (0..1100)
            .map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..1100)
            .map(|_| (0..6).map(|_| 0.3 + r.random_range(-1.0..1.0)).collect())
            .collect();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "asymmetry {}", (ab - ba).abs());
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_rejects_small_sets() {
        let a: Vec<Vec<f64>> = (0..10).map(|_| vec![0.0; 4]).collect();
        assert!(fid(&a, &a).is_err());
    }

    #[test]
    fn fid_matches_mean_shift_analytic_case() {
        // equal covariance, mean shift δ → FID = ‖δ‖²
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = rng::derive(7, "fid", 2);
        let d = 6;
        let delta = [1.0, -0.6, 0.4, 0.0, 0.8, -0.2];
        let n = 10_000;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| normal.sample(&mut r)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| normal.sample(&mut r) + delta[j])
                    .collect()
            })
            .collect();
        let expect: f64 = delta.iter().map(|v| v * v).sum();
        let v = fid(&a, &b).unwrap();
        assert!(
            (v - expect).abs() / expect < 0.05,
            "FID {v} vs ‖δ‖² = {expect}"
        );
    }

    #[test]
    fn classifier_learns_clean_shapes() {
        let ds = gen_shapes(3, 300, 3, 8, 8, Style::A).unwrap();
        let clf = EvalClassifier::train_on(ds.train(), 3, 11).unwrap();
        let test: Vec<(&Image, usize)> = ds.test().iter().map(|s| (&s.image, s.label)).collect();
        let acc = clf.accuracy(&test);
        assert!(acc > 0.95, "test accuracy {acc}");
        assert_eq!(clf.features(&ds.samples[0].image).len(), FEATURE_DIM);
    }

    #[test]
    fn c_rt_self_consistency_and_chance_controls() {
        let ds = gen_shapes(13, 400, 4, 8, 8, Style::A).unwrap();
        // generated set = copy of the train set with true labels → C_RT equals
        // the classifier's train accuracy
        let copy: Vec<(Image, usize)> = ds
            .train()
            .iter()
            .map(|s| (s.image.clone(), s.label))
            .collect();
        let v = c_rt(ds.train(), &copy, 4, 21).unwrap();
        let clf = EvalClassifier::train_on(ds.train(), 4, 21).unwrap();
        let train_pairs: Vec<(&Image, usize)> =
            ds.train().iter().map(|s| (&s.image, s.label)).collect();
        let train_acc = 100.0 * clf.accuracy(&train_pairs);
        assert!((v - train_acc).abs() < 1e-9);

        // shuffled labels → chance level within a generous binomial band
        let shuffled: Vec<(Image, usize)> = ds
            .train()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.image.clone(), (s.label + 1 + i % 3) % 4))
            .collect();
        let v = c_rt(ds.train(), &shuffled, 4, 21).unwrap();
        assert!(v < 20.0, "shuffled-label C_RT {v}% should be ≈ chance");
    }

    #[test]
    fn bench_runtime_reports_positive_times() {
        let (lfb_ms, dp_ms) = bench_runtime(5, 500, 3, 3).unwrap();
        assert!(lfb_ms > 0.0 && dp_ms > 0.0);
    }
}
