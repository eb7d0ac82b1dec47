//! Rotation self-supervision: labeled generation from unlabeled data.
//!
//! Real images get their labels from the LFB itself, and the Θ/Φ update is
//! regularized by how much the aggregated label moves when the input image is
//! rotated. Rotation-sensitive labeling functions get down-weighted because
//! their votes change under rotation while the target label should not.

use crate::config::TrainConfig;
use crate::data::{rotate, Dataset, Image, Rotation};
use crate::gan::{train, AdpModel, FreezeSet, RunSink, TrainOutcome, Variant};
use crate::lfb::{aggregate_final, apply_lfs, LabelingFunction, PhiMatrix, ThetaVector};
use crate::Result;

/// Mean L1 distance between the aggregated label of each image and of its
/// rotated copies, under fixed (θ̃, Φ). The plain reference implementation of
/// the regularizer; training uses the tape-side equivalent.
pub fn self_supervised_loss(
    theta: &ThetaVector,
    phi: &PhiMatrix,
    lfs: &[Box<dyn LabelingFunction>],
    images: &[&Image],
    rotations: &[Rotation],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let rows = apply_lfs(lfs, img)?;
        let (base, _) = aggregate_final(theta, phi, &rows)?;
        for &r in rotations {
            let rotated = rotate(img, r)?;
            let rows_rot = apply_lfs(lfs, &rotated)?;
            let (lab, _) = aggregate_final(theta, phi, &rows_rot)?;
            total += base
                .probs()
                .iter()
                .zip(lab.probs())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Train on a dataset treated as unlabeled: the loop never reads labels.
pub fn train_ss(
    tc: &TrainConfig,
    unlabeled: &Dataset,
    lfs: &[Box<dyn LabelingFunction>],
    sink: Option<&RunSink>,
    model: AdpModel,
) -> Result<TrainOutcome> {
    train(
        tc,
        unlabeled,
        lfs,
        Variant::SelfSup {
            lambda_self: tc.lambda_self,
            full_average: tc.ss_full_average,
            literal_fake: tc.ss_literal_fake,
        },
        FreezeSet::none(),
        sink,
        model,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{gen_shapes, Style};
    use crate::gan::ModelMeta;
    use crate::lfb::PhiProvenance;
    use crate::lfs::{build_lfs, parse_lf_specs};
    use crate::rng;

    #[test]
    fn identity_rotation_gives_zero_loss() {
        let ds = gen_shapes(3, 20, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(&parse_lf_specs("template, quad_mass").unwrap(), &ds, 1).unwrap();
        let theta = ThetaVector::uniform(2);
        let phi = PhiMatrix::identity(2, PhiProvenance::Generated);
        let images: Vec<&Image> = ds.samples.iter().take(8).map(|s| &s.image).collect();
        let loss =
            self_supervised_loss(&theta, &phi, &lfs, &images, &[Rotation::R0]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rotation_invariant_functions_give_zero_loss() {
        let ds = gen_shapes(3, 20, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(
            &parse_lf_specs("constant(class=1), uniform").unwrap(),
            &ds,
            1,
        )
        .unwrap();
        let theta = ThetaVector::uniform(2);
        let phi = PhiMatrix::identity(2, PhiProvenance::Generated);
        let images: Vec<&Image> = ds.samples.iter().take(8).map(|s| &s.image).collect();
        for r in Rotation::ALL {
            let loss = self_supervised_loss(&theta, &phi, &lfs, &images, &[r]).unwrap();
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn fixture_matches_straight_loop_oracle() {
        // hand-set labeling functions with known rotation behaviour
        let ds = gen_shapes(9, 16, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(
            &parse_lf_specs("template, rot_template(r=1), enclosure").unwrap(),
            &ds,
            1,
        )
        .unwrap();
        let theta = ThetaVector::new(vec![0.5, 0.3, 0.2]).unwrap().normalize();
        let phi = PhiMatrix::new(
            3,
            vec![1.0, 0.2, 0.1, 0.2, 1.0, 0.3, 0.1, 0.3, 1.0],
            PhiProvenance::Generated,
        )
        .unwrap();
        let images: Vec<&Image> = ds.samples.iter().take(6).map(|s| &s.image).collect();
        let rotations = [Rotation::R90, Rotation::R180];
        let fast = self_supervised_loss(&theta, &phi, &lfs, &images, &rotations).unwrap();

        // straight-loop oracle over every (image, rotation) pair
        let mut total = 0.0;
        let mut count = 0;
        for img in &images {
            let rows = apply_lfs(&lfs, img).unwrap();
            let (base, _) = aggregate_final(&theta, &phi, &rows).unwrap();
            for &r in &rotations {
                let rot = rotate(img, r).unwrap();
                let rows_r = apply_lfs(&lfs, &rot).unwrap();
                let (lab, _) = aggregate_final(&theta, &phi, &rows_r).unwrap();
                let mut d = 0.0;
                for j in 0..base.len() {
                    d += (base.probs()[j] - lab.probs()[j]).abs();
                }
                total += d;
                count += 1;
            }
        }
        let oracle = total / count as f64;
        assert!((fast - oracle).abs() < 1e-12);
        assert!(fast > 0.0, "rotation-sensitive pool should score > 0");
    }

    #[test]
    fn ss_short_run_trains_without_labels() {
        let mut cfg = Config::default();
        cfg.set("iterations", 3);
        cfg.set("batch", 6);
        cfg.set("trunk", "16,16");
        cfg.set("image_head", "16");
        cfg.set("param_head", "16");
        cfg.set("disc_image", "16");
        cfg.set("disc_label", "8");
        cfg.set("disc_common", "16");
        cfg.set("dlfb", "8");
        cfg.set("log_every", "1");
        let tc = TrainConfig::from_config(&cfg).unwrap();
        let ds = gen_shapes(5, 60, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(
            &parse_lf_specs("template, rot_template(r=1), enclosure").unwrap(),
            &ds,
            2,
        )
        .unwrap();
        let model = AdpModel::new(
            &tc,
            ModelMeta {
                classes: 3,
                height: 8,
                width: 8,
                lf_count: lfs.len(),
                latent_dim: tc.latent_dim,
                cond_dim: 0,
            },
            &mut rng::derive(tc.seed, "model-init", 0),
        );
        let out = train_ss(&tc, &ds, &lfs, None, model).unwrap();
        assert_eq!(out.log.len(), 3);
        for row in &out.log {
            assert!(row.loss_extra.is_finite());
            assert!(row.loss_extra >= 0.0);
        }
    }
}
