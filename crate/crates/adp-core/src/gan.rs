//! Generator/discriminator networks, adversarial losses, and the training
//! loop.
//!
//! The generator is a shared trunk forking into an image head (tanh) and a
//! parameter head that emits the labeling-function weights Θ and dependency
//! matrix Φ through softplus. The pair discriminator runs separate image and
//! label branches whose features merge into a common trunk ending in one
//! sigmoid; a second discriminator judges dependency matrices, with the
//! "real" side counted from labeling-function agreement on each generated
//! batch. Per outer iteration the discriminators take `disc_steps` updates,
//! then the generator takes one.
//!
//! Labeling functions are black boxes in the image: their outputs enter the
//! tape as constants, so the label channel's gradient reaches only the
//! parameter head (and through it the trunk), never the image head.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::adam::AdamParams;
use crate::autodiff::{Tape, TensorId};
use crate::config::TrainConfig;
use crate::container::{read_container, read_kv, write_container, write_kv, TensorRecord};
use crate::data::{rotate, Dataset, Image, LabeledSample, Rotation};
use crate::lfb::{
    aggregate_final_on_tape, apply_lfs, compute_phi_real, symmetrize_phi_on_tape, LabelingFunction,
    PhiMatrix, PhiProvenance, ProbLabel, ScoreDirection, SignatureTable, ThetaVector,
};
use crate::nn::{sample_indices, sample_latent, Activation, NetworkSpec, TrainableNet};
use crate::rng;
use crate::{AdpError, Result};

/// Fixed geometry of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    /// Label-space size seen by the discriminator (classes, or K for the
    /// conditional variant).
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Number of labeling functions (attributes in the conditional variant).
    pub lf_count: usize,
    pub latent_dim: usize,
    /// 0 for unconditional models.
    pub cond_dim: usize,
}

/// All trainable blocks.
#[derive(Debug, Clone)]
pub struct AdpModel {
    pub meta: ModelMeta,
    pub g_common: TrainableNet,
    pub g_image: TrainableNet,
    pub g_param: TrainableNet,
    pub d_image: TrainableNet,
    pub d_label: TrainableNet,
    pub d_common: TrainableNet,
    pub d_lfb: TrainableNet,
}

impl AdpModel {
    pub fn new(tc: &TrainConfig, meta: ModelMeta, rng: &mut ChaCha12Rng) -> Self {
        let n = meta.lf_count;
        let mut trunk_widths = vec![meta.latent_dim + meta.cond_dim];
        trunk_widths.extend(&tc.trunk);
        let trunk_out = *trunk_widths.last().unwrap();

        let mut image_widths = vec![trunk_out];
        image_widths.extend(&tc.image_head);
        image_widths.push(meta.height * meta.width);

        let mut param_widths = vec![trunk_out];
        param_widths.extend(&tc.param_head);
        param_widths.push(n + n * n);

        let mut di_widths = vec![meta.height * meta.width + meta.cond_dim];
        di_widths.extend(&tc.disc_image);
        let mut dl_widths = vec![meta.classes + meta.cond_dim];
        dl_widths.extend(&tc.disc_label);
        let mut dc_widths = vec![*di_widths.last().unwrap() + *dl_widths.last().unwrap()];
        dc_widths.extend(&tc.disc_common);
        dc_widths.push(1);
        let mut dlfb_widths = vec![n * n];
        dlfb_widths.extend(&tc.dlfb);
        dlfb_widths.push(1);
        let hidden = tc.hidden_activation;

        AdpModel {
            meta,
            g_common: TrainableNet::new(
                NetworkSpec::chain(&trunk_widths, hidden, hidden),
                rng,
            ),
            g_image: TrainableNet::new(
                NetworkSpec::chain(&image_widths, hidden, Activation::Tanh),
                rng,
            ),
            g_param: TrainableNet::new(
                NetworkSpec::chain(&param_widths, hidden, Activation::Softplus),
                rng,
            ),
            d_image: TrainableNet::new(
                NetworkSpec::chain(&di_widths, hidden, hidden),
                rng,
            ),
            d_label: TrainableNet::new(
                NetworkSpec::chain(&dl_widths, hidden, hidden),
                rng,
            ),
            d_common: TrainableNet::new(
                NetworkSpec::chain(&dc_widths, hidden, Activation::Sigmoid),
                rng,
            ),
            d_lfb: TrainableNet::new(
                NetworkSpec::chain(&dlfb_widths, hidden, Activation::Sigmoid),
                rng,
            ),
        }
    }

    #[cfg(test)]
    fn discriminator_nets(&mut self) -> [&mut TrainableNet; 4] {
        [
            &mut self.d_image,
            &mut self.d_label,
            &mut self.d_common,
            &mut self.d_lfb,
        ]
    }
}

/// Which blocks receive updates; used by transfer fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct FreezeSet {
    pub g_common: bool,
    pub g_image: bool,
    pub g_param: bool,
    pub d_image: bool,
    pub d_label: bool,
    pub d_common: bool,
    pub d_lfb: bool,
}

impl FreezeSet {
    pub fn none() -> Self {
        FreezeSet {
            g_common: false,
            g_image: false,
            g_param: false,
            d_image: false,
            d_label: false,
            d_common: false,
            d_lfb: false,
        }
    }

    pub fn all() -> Self {
        FreezeSet {
            g_common: true,
            g_image: true,
            g_param: true,
            d_image: true,
            d_label: true,
            d_common: true,
            d_lfb: true,
        }
    }

    /// Transfer recipe: only the image head (and the pair discriminator)
    /// adapt; the trunk, parameter head and Φ discriminator stay fixed.
    pub fn transfer() -> Self {
        FreezeSet {
            g_common: true,
            g_image: false,
            g_param: true,
            d_image: false,
            d_label: false,
            d_common: false,
            d_lfb: true,
        }
    }
}

/// Variant hooks layered onto the shared loop.
pub enum Variant<'a> {
    /// Plain joint image–label training on a labeled dataset.
    Standard,
    /// Rotation self-supervision over unlabeled data: the real label channel
    /// is the LFB applied to the real image; λ·L_self regularizes Θ/Φ.
    SelfSup {
        lambda_self: f64,
        full_average: bool,
        literal_fake: bool,
    },
    /// Attribute-conditioned training on seen classes with an optional
    /// cycle-consistency pull of predicted attributes toward the
    /// conditioning signature.
    ZeroShot {
        lambda_cycle: f64,
        signatures: &'a SignatureTable,
        embeddings: &'a [Vec<f64>],
        seen_classes: usize,
        direction: ScoreDirection,
    },
}

/// One metric-log row.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_dlfb: f64,
    pub loss_g_phi: f64,
    pub theta_entropy: f64,
    /// Variant extra (L_self or cycle loss); 0 for the standard loop.
    pub loss_extra: f64,
}

/// Output sink for checkpoints and sample grids during training.
pub struct RunSink<'a> {
    pub out_dir: &'a Path,
    pub config_hash: &'a str,
}

/// Trained model plus the metric log.
pub struct TrainOutcome {
    pub model: AdpModel,
    pub log: Vec<LogRow>,
}

// ---- tape-side building blocks ----------------------------------------------

struct BoundGenerator {
    trunk: crate::nn::BoundNetwork,
    image: crate::nn::BoundNetwork,
    param: crate::nn::BoundNetwork,
}

fn bind_generator(model: &AdpModel, tape: &mut Tape, tracked: bool) -> BoundGenerator {
    BoundGenerator {
        trunk: model.g_common.params.bind(tape, tracked),
        image: model.g_image.params.bind(tape, tracked),
        param: model.g_param.params.bind(tape, tracked),
    }
}

struct BoundDiscriminator {
    image: crate::nn::BoundNetwork,
    label: crate::nn::BoundNetwork,
    common: crate::nn::BoundNetwork,
}

fn bind_discriminator(model: &AdpModel, tape: &mut Tape, tracked: bool) -> BoundDiscriminator {
    BoundDiscriminator {
        image: model.d_image.params.bind(tape, tracked),
        label: model.d_label.params.bind(tape, tracked),
        common: model.d_common.params.bind(tape, tracked),
    }
}

impl BoundGenerator {
    /// (images B×HW, raw params B×(n+n²)).
    fn forward(
        &self,
        tape: &mut Tape,
        z: TensorId,
        cond: Option<TensorId>,
    ) -> Result<(TensorId, TensorId)> {
        let input = match cond {
            Some(c) => tape.concat(&[z, c], 1)?,
            None => z,
        };
        let trunk = self.trunk.forward(tape, input)?;
        let images = self.image.forward(tape, trunk)?;
        let params = self.param.forward(tape, trunk)?;
        Ok((images, params))
    }
}

impl BoundDiscriminator {
    /// Joint pair score in (0,1), shape B×1.
    fn forward(
        &self,
        tape: &mut Tape,
        images: TensorId,
        labels: TensorId,
        cond: Option<TensorId>,
    ) -> Result<TensorId> {
        let xi = match cond {
            Some(c) => tape.concat(&[images, c], 1)?,
            None => images,
        };
        let yi = match cond {
            Some(c) => tape.concat(&[labels, c], 1)?,
            None => labels,
        };
        let fi = self.image.forward(tape, xi)?;
        let fl = self.label.forward(tape, yi)?;
        let merged = tape.concat(&[fi, fl], 1)?;
        self.common.forward(tape, merged)
    }
}

/// Split one sample's parameter row into (θ̃ 1×n normalized, Φ n×n
/// symmetrized). The row is softplus output, so both are nonnegative.
fn split_params_row(
    tape: &mut Tape,
    params: TensorId,
    sample: usize,
    n: usize,
) -> Result<(TensorId, TensorId)> {
    let row = tape.slice_rows(params, sample, 1)?;
    let col = tape.reshape(row, &[n + n * n, 1])?;
    let theta_raw = tape.slice_rows(col, 0, n)?;
    let theta_row = tape.reshape(theta_raw, &[1, n])?;
    let theta_norm = tape.row_normalize(theta_row)?;
    let phi_raw = tape.slice_rows(col, n, n * n)?;
    let phi = tape.reshape(phi_raw, &[n, n])?;
    let phi_sym = symmetrize_phi_on_tape(tape, phi)?;
    Ok((theta_norm, phi_sym))
}

/// Per-sample LFB products for one generated batch.
struct LfbBatch {
    /// B×m soft labels (tape).
    labels: TensorId,
    /// B×n² symmetrized generated Φ, flattened per row (tape).
    phi_flat: TensorId,
    /// Per-sample normalized θ̃ rows (tape).
    thetas: Vec<TensorId>,
    /// Per-sample labeling-function outputs (plain), for Φ_real counting.
    rows: Vec<Vec<ProbLabel>>,
}

/// Evaluate the labeling functions on each generated image and build the
/// differentiable Eq.-7 aggregation per sample.
fn lfb_on_batch(
    tape: &mut Tape,
    model: &AdpModel,
    images: TensorId,
    params: TensorId,
    lfs: &[Box<dyn LabelingFunction>],
) -> Result<LfbBatch> {
    let meta = &model.meta;
    let batch = tape.shape(images)[0];
    let hw = meta.height * meta.width;
    let n = meta.lf_count;
    let mut labels = Vec::with_capacity(batch);
    let mut phis = Vec::with_capacity(batch);
    let mut thetas = Vec::with_capacity(batch);
    let mut rows_all = Vec::with_capacity(batch);
    for b in 0..batch {
        let pixels = tape.data(images)[b * hw..(b + 1) * hw].to_vec();
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(AdpError::NonFinite("generated image"));
        }
        let img = Image::new(meta.height, meta.width, pixels);
        let rows = apply_lfs(lfs, &img)?;
        let (theta_norm, phi_sym) = split_params_row(tape, params, b, n)?;
        let label = aggregate_final_on_tape(tape, theta_norm, phi_sym, &rows)?;
        let phi_row = tape.reshape(phi_sym, &[1, n * n])?;
        labels.push(label);
        phis.push(phi_row);
        thetas.push(theta_norm);
        rows_all.push(rows);
    }
    Ok(LfbBatch {
        labels: tape.concat(&labels, 0)?,
        phi_flat: tape.concat(&phis, 0)?,
        thetas,
        rows: rows_all,
    })
}

/// Counted Φ_real per sample, flattened into a constant B×n² leaf.
fn phi_real_batch(tape: &mut Tape, lfb: &LfbBatch, n: usize) -> Result<TensorId> {
    let batch = lfb.rows.len();
    let mut flat = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        let theta = ThetaVector::new(tape.data(lfb.thetas[b]).to_vec())?.normalize();
        let phi = compute_phi_real(&theta, &lfb.rows[b])?;
        flat.extend_from_slice(phi.values());
    }
    Ok(tape.leaf(&[batch, n * n], flat, false))
}

/// −mean(log x) with the guarded log.
fn neg_mean_log(tape: &mut Tape, x: TensorId) -> TensorId {
    let lx = tape.log(x);
    let m = tape.mean(lx);
    tape.scale(m, -1.0)
}

/// mean(log(1−x)) with the guarded log.
fn mean_log_one_minus(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let len = tape.data(x).len();
    let shape = tape.shape(x).to_vec();
    let ones = tape.leaf(&shape, vec![1.0; len], false);
    let om = tape.sub(ones, x)?;
    let lx = tape.log(om);
    Ok(tape.mean(lx))
}

/// Annealed instance noise: σ decays linearly to zero over the run. Both
/// sides of the pair discriminator see the same corruption level, which
/// smooths the density ratio early without changing the final objective.
fn with_instance_noise(
    tape: &mut Tape,
    images: TensorId,
    tc: &TrainConfig,
    iter: usize,
    stream: &str,
    tick: u64,
) -> Result<TensorId> {
    if tc.instance_noise <= 0.0 {
        return Ok(images);
    }
    use rand_distr::Distribution;
    let frac = 1.0 - iter as f64 / tc.iterations.max(1) as f64;
    let sigma = tc.instance_noise * frac;
    if sigma <= 0.0 {
        return Ok(images);
    }
    let shape = tape.shape(images).to_vec();
    let len: usize = shape.iter().product();
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let mut r = rng::derive(tc.seed, stream, tick);
    let noise: Vec<f64> = (0..len).map(|_| normal.sample(&mut r)).collect();
    let nt = tape.leaf(&shape, noise, false);
    tape.add(images, nt)
}

fn one_hot_batch(samples: &[&LabeledSample], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; samples.len() * m];
    for (i, s) in samples.iter().enumerate() {
        out[i * m + s.label] = 1.0;
    }
    out
}

fn mean_theta_entropy(tape: &Tape, thetas: &[TensorId]) -> f64 {
    let mut total = 0.0;
    for &t in thetas {
        for &v in tape.data(t) {
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    total / thetas.len() as f64
}

fn condition_rows(
    variant: &Variant,
    classes: &[usize],
) -> Option<Vec<f64>> {
    match variant {
        Variant::ZeroShot {
            signatures,
            embeddings,
            ..
        } => {
            let mut rows = Vec::new();
            for &c in classes {
                rows.extend_from_slice(&embeddings[c]);
                rows.extend_from_slice(signatures.row(c));
            }
            Some(rows)
        }
        _ => None,
    }
}

/// Condition vector for one class of a conditional model.
pub fn condition_for_class(
    signatures: &SignatureTable,
    embeddings: &[Vec<f64>],
    class: usize,
) -> Vec<f64> {
    let mut v = embeddings[class].clone();
    v.extend_from_slice(signatures.row(class));
    v
}

// ---- training ----------------------------------------------------------------

/// Algorithm: per outer iteration, `disc_steps` discriminator updates (pair
/// discriminator and Φ discriminator together), then one generator update.
pub fn train(
    tc: &TrainConfig,
    dataset: &Dataset,
    lfs: &[Box<dyn LabelingFunction>],
    variant: Variant,
    freeze: FreezeSet,
    sink: Option<&RunSink>,
    mut model: AdpModel,
) -> Result<TrainOutcome> {
    let meta = model.meta.clone();
    for lf in lfs {
        if lf.arity() != (meta.height, meta.width) {
            return Err(AdpError::ShapeMismatch {
                op: "train",
                lhs: vec![lf.arity().0, lf.arity().1],
                rhs: vec![meta.height, meta.width],
            });
        }
    }
    if let Variant::SelfSup { .. } = variant {
        // the self-supervised loop must not read dataset labels
    } else if let Variant::ZeroShot { seen_classes, .. } = variant {
        for s in dataset.train() {
            if s.label >= seen_classes {
                return Err(AdpError::invalid(
                    "zero-shot split",
                    format!("training image with unseen class {}", s.label),
                ));
            }
        }
    }

    let gen_hp = AdamParams::with_betas(tc.lr_gen, tc.beta1, tc.beta2);
    let disc_hp = AdamParams::with_betas(tc.lr_disc, tc.beta1, tc.beta2);
    let mut log = Vec::new();
    let train_split = dataset.train();
    if train_split.is_empty() {
        return Err(AdpError::invalid("dataset", "empty train split"));
    }

    let mut last_d = 0.0;
    let mut last_dlfb = 0.0;
    for iter in 0..tc.iterations {
        for step in 0..tc.disc_steps {
            let (ld, ldlfb) = disc_step(
                tc, &mut model, train_split, lfs, &variant, &freeze, &disc_hp, iter, step,
            )?;
            last_d = ld;
            last_dlfb = ldlfb;
        }
        let g = gen_step(tc, &mut model, train_split, lfs, &variant, &freeze, &gen_hp, iter)?;

        if !last_d.is_finite() || !g.loss_g.is_finite() {
            if let Some(sink) = sink {
                save_checkpoint(
                    &sink.out_dir.join("crash-checkpoint"),
                    &model,
                    iter,
                    sink.config_hash,
                )?;
            }
            return Err(AdpError::NonFinite("training loss"));
        }

        if iter % tc.log_every.max(1) == 0 || iter + 1 == tc.iterations {
            log.push(LogRow {
                iteration: iter,
                loss_d: last_d,
                loss_g: g.loss_g,
                loss_dlfb: last_dlfb,
                loss_g_phi: g.loss_g_phi,
                theta_entropy: g.theta_entropy,
                loss_extra: g.loss_extra,
            });
        }
        if let Some(sink) = sink {
            if tc.checkpoint_every > 0 && (iter + 1) % tc.checkpoint_every == 0 {
                save_checkpoint(
                    &sink.out_dir.join(format!("checkpoint-{:06}", iter + 1)),
                    &model,
                    iter + 1,
                    sink.config_hash,
                )?;
            }
            if tc.sample_grid_every > 0 && (iter + 1) % tc.sample_grid_every == 0 {
                let samples = generate_samples(&model, lfs, 16, tc.seed ^ 0x9e37, None)?;
                let images: Vec<Image> = samples.into_iter().map(|(img, _)| img).collect();
                crate::container::write_pgm_grid(
                    &sink.out_dir.join(format!("grid-{:06}.pgm", iter + 1)),
                    &images,
                    4,
                    sink.config_hash,
                )?;
            }
        }
    }
    Ok(TrainOutcome { model, log })
}

#[allow(clippy::too_many_arguments)]
fn disc_step(
    tc: &TrainConfig,
    model: &mut AdpModel,
    train_split: &[LabeledSample],
    lfs: &[Box<dyn LabelingFunction>],
    variant: &Variant,
    freeze: &FreezeSet,
    hp: &AdamParams,
    iter: usize,
    step: usize,
) -> Result<(f64, f64)> {
    let meta = model.meta.clone();
    let n = meta.lf_count;
    let tick = (iter * tc.disc_steps + step) as u64;
    let mut tape = Tape::new();

    // fake side: generator untracked
    let gen = bind_generator(model, &mut tape, false);
    let mut zr = rng::derive(tc.seed, "z-disc", tick);
    let z_data = sample_latent(tc.batch, meta.latent_dim, &mut zr);
    let z = tape.leaf(&[tc.batch, meta.latent_dim], z_data, false);

    let mut br = rng::derive(tc.seed, "real-batch", tick);
    let idx = sample_indices(train_split.len(), tc.batch, &mut br);
    let real_samples: Vec<&LabeledSample> = idx.iter().map(|&i| &train_split[i]).collect();
    let real_classes: Vec<usize> = real_samples.iter().map(|s| s.label).collect();

    let cond = condition_rows(variant, &real_classes)
        .map(|rows| tape.leaf(&[tc.batch, meta.cond_dim], rows, false));

    let (fake_images, fake_params) = gen.forward(&mut tape, z, cond)?;
    let lfb = lfb_batch_for_variant(&mut tape, model, fake_images, fake_params, lfs, variant)?;

    let disc = bind_discriminator(model, &mut tape, true);
    let dlfb = model.d_lfb.params.bind(&mut tape, true);

    // real side
    let hw = meta.height * meta.width;
    let mut real_pixels = Vec::with_capacity(tc.batch * hw);
    for s in &real_samples {
        real_pixels.extend_from_slice(&s.image.pixels);
    }
    let real_x = tape.leaf(&[tc.batch, hw], real_pixels, false);
    let real_y = match variant {
        Variant::SelfSup { .. } => {
            // labels for real unlabeled images come from the LFB itself,
            // using this batch's generated Θ/Φ as constants
            let mut rows = Vec::with_capacity(tc.batch);
            for (b, s) in real_samples.iter().enumerate() {
                let lf_rows = apply_lfs(lfs, &s.image)?;
                let theta = ThetaVector::new(tape.data(lfb.thetas[b]).to_vec())?.normalize();
                let phi = phi_from_tape(&tape, lfb.phi_flat, b, n)?;
                let (label, _) = crate::lfb::aggregate_final(&theta, &phi, &lf_rows)?;
                rows.extend_from_slice(label.probs());
            }
            tape.leaf(&[tc.batch, meta.classes], rows, false)
        }
        _ => {
            let oh = one_hot_batch(&real_samples, meta.classes);
            tape.leaf(&[tc.batch, meta.classes], oh, false)
        }
    };

    let real_noisy = with_instance_noise(&mut tape, real_x, tc, iter, "inst-real", tick)?;
    let fake_noisy = with_instance_noise(&mut tape, fake_images, tc, iter, "inst-fake", tick)?;
    let d_real = disc.forward(&mut tape, real_noisy, real_y, cond)?;
    let d_fake = disc.forward(&mut tape, fake_noisy, lfb.labels, cond)?;
    let t_real = neg_mean_log(&mut tape, d_real);
    let lf1m = mean_log_one_minus(&mut tape, d_fake)?;
    let t_fake = tape.scale(lf1m, -1.0);
    let loss_d = tape.add(t_real, t_fake)?;

    let phi_real = phi_real_batch(&mut tape, &lfb, n)?;
    let dl_real = dlfb.forward(&mut tape, phi_real)?;
    let dl_fake = dlfb.forward(&mut tape, lfb.phi_flat)?;
    let t_lreal = neg_mean_log(&mut tape, dl_real);
    let lf1m2 = mean_log_one_minus(&mut tape, dl_fake)?;
    let t_lfake = tape.scale(lf1m2, -1.0);
    let loss_dlfb = tape.add(t_lreal, t_lfake)?;

    let total = tape.add(loss_d, loss_dlfb)?;
    tape.backward(total)?;

    let gi = disc.image.grads(&tape);
    let gl = disc.label.grads(&tape);
    let gc = disc.common.grads(&tape);
    let gf = dlfb.grads(&tape);
    if !freeze.d_image {
        model.d_image.step(&gi, hp);
    }
    if !freeze.d_label {
        model.d_label.step(&gl, hp);
    }
    if !freeze.d_common {
        model.d_common.step(&gc, hp);
    }
    if !freeze.d_lfb {
        model.d_lfb.step(&gf, hp);
    }
    Ok((tape.value(loss_d), tape.value(loss_dlfb)))
}

struct GenStepOut {
    loss_g: f64,
    loss_g_phi: f64,
    theta_entropy: f64,
    loss_extra: f64,
}

#[allow(clippy::too_many_arguments)]
fn gen_step(
    tc: &TrainConfig,
    model: &mut AdpModel,
    train_split: &[LabeledSample],
    lfs: &[Box<dyn LabelingFunction>],
    variant: &Variant,
    freeze: &FreezeSet,
    hp: &AdamParams,
    iter: usize,
) -> Result<GenStepOut> {
    let meta = model.meta.clone();
    let mut tape = Tape::new();
    let gen = bind_generator(model, &mut tape, true);
    let disc = bind_discriminator(model, &mut tape, false);
    let dlfb = model.d_lfb.params.bind(&mut tape, false);

    let mut zr = rng::derive(tc.seed, "z-gen", iter as u64);
    let z_data = sample_latent(tc.batch, meta.latent_dim, &mut zr);
    let z = tape.leaf(&[tc.batch, meta.latent_dim], z_data, false);

    let mut br = rng::derive(tc.seed, "gen-real", iter as u64);
    let idx = sample_indices(train_split.len(), tc.batch, &mut br);
    let real_samples: Vec<&LabeledSample> = idx.iter().map(|&i| &train_split[i]).collect();
    let real_classes: Vec<usize> = real_samples.iter().map(|s| s.label).collect();
    let cond = condition_rows(variant, &real_classes)
        .map(|rows| tape.leaf(&[tc.batch, meta.cond_dim], rows, false));

    let (fake_images, fake_params) = gen.forward(&mut tape, z, cond)?;
    let lfb = lfb_batch_for_variant(&mut tape, model, fake_images, fake_params, lfs, variant)?;

    let fake_noisy = with_instance_noise(
        &mut tape,
        fake_images,
        tc,
        iter,
        "inst-gen",
        iter as u64,
    )?;
    let d_fake = disc.forward(&mut tape, fake_noisy, lfb.labels, cond)?;
    let dl_fake = dlfb.forward(&mut tape, lfb.phi_flat)?;
    let (loss_g, loss_g_phi) = if tc.saturating_generator {
        (
            mean_log_one_minus(&mut tape, d_fake)?,
            mean_log_one_minus(&mut tape, dl_fake)?,
        )
    } else {
        (
            neg_mean_log(&mut tape, d_fake),
            neg_mean_log(&mut tape, dl_fake),
        )
    };
    let mut total = tape.add(loss_g, loss_g_phi)?;

    if tc.lambda_diversity > 0.0 {
        // mode-seeking bonus: reward mean L1 distance between consecutive
        // generated images so the latent stays influential
        let hw = (meta.height * meta.width) as f64;
        let mut dists = Vec::with_capacity(tc.batch - 1);
        for b in 0..tc.batch - 1 {
            let a = tape.slice_rows(fake_images, b, 1)?;
            let c = tape.slice_rows(fake_images, b + 1, 1)?;
            dists.push(tape.l1_distance(a, c)?);
        }
        let stacked = tape.concat(&dists, 1)?;
        let mean_dist = tape.mean(stacked);
        let bonus = tape.scale(mean_dist, -tc.lambda_diversity / hw);
        total = tape.add(total, bonus)?;
    }

    let mut loss_extra = 0.0;
    match variant {
        Variant::SelfSup {
            lambda_self,
            full_average,
            ..
        } => {
            let l_self = self_sup_loss_on_tape(
                &mut tape,
                &lfb,
                &real_samples,
                lfs,
                *full_average,
                tc.seed,
                iter,
            )?;
            loss_extra = tape.value(l_self);
            if *lambda_self > 0.0 {
                let weighted = tape.scale(l_self, *lambda_self);
                total = tape.add(total, weighted)?;
            }
        }
        Variant::ZeroShot {
            lambda_cycle,
            signatures,
            ..
        } => {
            let cycle = cycle_loss_on_tape(
                &mut tape,
                model,
                fake_images,
                &lfb,
                signatures,
                &real_classes,
            )?;
            loss_extra = tape.value(cycle);
            if *lambda_cycle > 0.0 {
                let weighted = tape.scale(cycle, *lambda_cycle);
                total = tape.add(total, weighted)?;
            }
        }
        Variant::Standard => {}
    }

    tape.backward(total)?;
    let gt = gen.trunk.grads(&tape);
    let gi = gen.image.grads(&tape);
    let gp = gen.param.grads(&tape);
    if !freeze.g_common {
        model.g_common.step(&gt, hp);
    }
    if !freeze.g_image {
        model.g_image.step(&gi, hp);
    }
    if !freeze.g_param {
        model.g_param.step(&gp, hp);
    }
    Ok(GenStepOut {
        loss_g: tape.value(loss_g),
        loss_g_phi: tape.value(loss_g_phi),
        theta_entropy: mean_theta_entropy(&tape, &lfb.thetas),
        loss_extra,
    })
}

/// LFB labels for a generated batch; the conditional variant scores
/// attribute signatures instead of aggregating class votes, and the literal
/// self-supervised form replaces the fake label with a uniform placeholder.
fn lfb_batch_for_variant(
    tape: &mut Tape,
    model: &AdpModel,
    images: TensorId,
    params: TensorId,
    lfs: &[Box<dyn LabelingFunction>],
    variant: &Variant,
) -> Result<LfbBatch> {
    match variant {
        Variant::ZeroShot {
            signatures,
            direction,
            ..
        } => zs_lfb_on_batch(tape, model, images, params, signatures, *direction),
        Variant::SelfSup {
            literal_fake: true, ..
        } => {
            let mut lfb = lfb_on_batch(tape, model, images, params, lfs)?;
            let batch = tape.shape(images)[0];
            let m = model.meta.classes;
            lfb.labels = tape.leaf(&[batch, m], vec![1.0 / m as f64; batch * m], false);
            Ok(lfb)
        }
        _ => lfb_on_batch(tape, model, images, params, lfs),
    }
}

/// Mean L1 distance between the LFB label of each real image and of its
/// rotated copy, with rotations sampled per sample (or averaged over all
/// four). Labeling-function outputs are constants; gradients reach Θ and Φ.
fn self_sup_loss_on_tape(
    tape: &mut Tape,
    lfb: &LfbBatch,
    real_samples: &[&LabeledSample],
    lfs: &[Box<dyn LabelingFunction>],
    full_average: bool,
    seed: u64,
    iter: usize,
) -> Result<TensorId> {
    use rand::Rng;
    let batch = real_samples.len();
    let n = lfb.thetas.len();
    debug_assert_eq!(batch, n);
    let mut terms = Vec::new();
    let mut rr = rng::derive(seed, "rotation", iter as u64);
    for (b, s) in real_samples.iter().enumerate() {
        let rows_base = apply_lfs(lfs, &s.image)?;
        let phi_sym = phi_tensor_from_flat(tape, lfb.phi_flat, b)?;
        let base = aggregate_final_on_tape(tape, lfb.thetas[b], phi_sym, &rows_base)?;
        let rotations: Vec<Rotation> = if full_average {
            Rotation::ALL.to_vec()
        } else {
            vec![Rotation::ALL[rr.random_range(0..4)]]
        };
        for r in rotations {
            let rotated = rotate(&s.image, r)?;
            let rows_rot = apply_lfs(lfs, &rotated)?;
            let phi_sym = phi_tensor_from_flat(tape, lfb.phi_flat, b)?;
            let lab_rot = aggregate_final_on_tape(tape, lfb.thetas[b], phi_sym, &rows_rot)?;
            terms.push(tape.l1_distance(base, lab_rot)?);
        }
    }
    let stacked = tape.concat(&terms, 1)?;
    Ok(tape.mean(stacked))
}

/// Reform one sample's flattened Φ back into an n×n tape tensor.
fn phi_tensor_from_flat(tape: &mut Tape, phi_flat: TensorId, sample: usize) -> Result<TensorId> {
    let cols = tape.shape(phi_flat)[1];
    let n = (cols as f64).sqrt().round() as usize;
    let row = tape.slice_rows(phi_flat, sample, 1)?;
    tape.reshape(row, &[n, n])
}

fn phi_from_tape(tape: &Tape, phi_flat: TensorId, sample: usize, n: usize) -> Result<PhiMatrix> {
    let vals = tape.data(phi_flat)[sample * n * n..(sample + 1) * n * n].to_vec();
    PhiMatrix::new(n, vals, PhiProvenance::Generated)
}

/// Conditional-variant LFB: per-class similarity scores of the predicted
/// attribute vector, L1-normalized into a distribution over all K classes.
fn zs_lfb_on_batch(
    tape: &mut Tape,
    model: &AdpModel,
    images: TensorId,
    params: TensorId,
    signatures: &SignatureTable,
    _direction: ScoreDirection,
) -> Result<LfbBatch> {
    let meta = &model.meta;
    let batch = tape.shape(images)[0];
    let hw = meta.height * meta.width;
    let p = meta.lf_count;
    let k = signatures.classes;
    let mut labels = Vec::with_capacity(batch);
    let mut phis = Vec::with_capacity(batch);
    let mut thetas = Vec::with_capacity(batch);
    let mut rows_all = Vec::with_capacity(batch);
    // S_gtᵀ as a constant p×K matrix
    let mut sgt_t = vec![0.0; p * k];
    for y in 0..k {
        for j in 0..p {
            sgt_t[j * k + y] = signatures.row(y)[j];
        }
    }
    for b in 0..batch {
        let pixels = tape.data(images)[b * hw..(b + 1) * hw].to_vec();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(AdpError::NonFinite("generated image"));
        }
        let img = Image::new(meta.height, meta.width, pixels);
        let s_pred = crate::zeroshot::predict_attributes(&img, p)?;
        let (theta_norm, phi_sym) = split_params_row(tape, params, b, p)?;

        // w = Φ·Θ̃ᵀ → 1×p, then ∘ s_pred, then · S_gtᵀ → 1×K scores
        let theta_col = tape.transpose(theta_norm)?;
        let w_col = tape.matmul(phi_sym, theta_col)?;
        let w_row = tape.reshape(w_col, &[1, p])?;
        let s_const = tape.leaf(&[1, p], s_pred.values().to_vec(), false);
        let weighted = tape.mul(w_row, s_const)?;
        let sgt = tape.leaf(&[p, k], sgt_t.clone(), false);
        let scores = tape.matmul(weighted, sgt)?;
        let label = tape.row_normalize(scores)?;

        let phi_row = tape.reshape(phi_sym, &[1, p * p])?;
        labels.push(label);
        phis.push(phi_row);
        thetas.push(theta_norm);
        // attribute votes as one-hot-free rows are not meaningful here;
        // Φ_real still counts agreement between attribute detectors
        let rows: Vec<ProbLabel> = s_pred
            .values()
            .iter()
            .map(|&v| {
                ProbLabel::new(vec![1.0 - v, v]).unwrap_or_else(|_| ProbLabel::uniform(2))
            })
            .collect();
        rows_all.push(rows);
    }
    Ok(LfbBatch {
        labels: tape.concat(&labels, 0)?,
        phi_flat: tape.concat(&phis, 0)?,
        thetas,
        rows: rows_all,
    })
}

/// Cycle-consistency pull: (Φ·Θ̃) ∘ s_pred toward the conditioning class's
/// ground-truth signature, averaged over the batch.
fn cycle_loss_on_tape(
    tape: &mut Tape,
    model: &AdpModel,
    images: TensorId,
    lfb: &LfbBatch,
    signatures: &SignatureTable,
    classes: &[usize],
) -> Result<TensorId> {
    let meta = &model.meta;
    let p = meta.lf_count;
    let hw = meta.height * meta.width;
    let mut terms = Vec::new();
    for (b, &c) in classes.iter().enumerate() {
        let pixels = tape.data(images)[b * hw..(b + 1) * hw].to_vec();
        let img = Image::new(meta.height, meta.width, pixels);
        let s_pred = crate::zeroshot::predict_attributes(&img, p)?;
        let phi_sym = phi_tensor_from_flat(tape, lfb.phi_flat, b)?;
        let theta_col = tape.transpose(lfb.thetas[b])?;
        let w_col = tape.matmul(phi_sym, theta_col)?;
        let w_row = tape.reshape(w_col, &[1, p])?;
        let s_const = tape.leaf(&[1, p], s_pred.values().to_vec(), false);
        let s_hat = tape.mul(w_row, s_const)?;
        let target = tape.leaf(&[1, p], signatures.row(c).to_vec(), false);
        terms.push(tape.l1_distance(s_hat, target)?);
    }
    let stacked = tape.concat(&terms, 1)?;
    Ok(tape.mean(stacked))
}

// ---- inference & persistence --------------------------------------------------

/// Sample images with their LFB labels from a trained model. Conditions, if
/// given, are one row per sample.
pub fn generate_samples(
    model: &AdpModel,
    lfs: &[Box<dyn LabelingFunction>],
    count: usize,
    seed: u64,
    conditions: Option<&[Vec<f64>]>,
) -> Result<Vec<(Image, ProbLabel)>> {
    let meta = &model.meta;
    let hw = meta.height * meta.width;
    let mut out = Vec::with_capacity(count);
    let mut tape = Tape::new();
    let gen = bind_generator(model, &mut tape, false);
    let mut zr = rng::derive(seed, "sample-z", 0);
    let z_data = sample_latent(count, meta.latent_dim, &mut zr);
    let z = tape.leaf(&[count, meta.latent_dim], z_data, false);
    let cond = match conditions {
        Some(rows) => {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Some(tape.leaf(&[count, meta.cond_dim], flat, false))
        }
        None => None,
    };
    let (images, params) = gen.forward(&mut tape, z, cond)?;
    for b in 0..count {
        let pixels = tape.data(images)[b * hw..(b + 1) * hw].to_vec();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(AdpError::NonFinite("generated image"));
        }
        let img = Image::new(meta.height, meta.width, pixels);
        let (theta, phi) = sample_params(&tape, params, b, meta.lf_count)?;
        let rows = apply_lfs(lfs, &img)?;
        let (label, _) = crate::lfb::aggregate_final(&theta, &phi, &rows)?;
        out.push((img, label));
    }
    Ok(out)
}

/// Plain (θ̃, symmetrized Φ) for one sample of a raw parameter batch.
pub fn sample_params(
    tape: &Tape,
    params: TensorId,
    sample: usize,
    n: usize,
) -> Result<(ThetaVector, PhiMatrix)> {
    let row = &tape.data(params)[sample * (n + n * n)..(sample + 1) * (n + n * n)];
    let theta = ThetaVector::new(row[..n].to_vec())?.normalize();
    let phi = PhiMatrix::new(n, row[n..].to_vec(), PhiProvenance::Generated)?.symmetrized();
    Ok((theta, phi))
}

/// Raw generator pass without labeling: (images, θ̃ batch, symmetrized Φ batch).
pub fn generate(
    model: &AdpModel,
    count: usize,
    seed: u64,
    conditions: Option<&[Vec<f64>]>,
) -> Result<(Vec<Image>, Vec<ThetaVector>, Vec<PhiMatrix>)> {
    let meta = &model.meta;
    let hw = meta.height * meta.width;
    let mut tape = Tape::new();
    let gen = bind_generator(model, &mut tape, false);
    let mut zr = rng::derive(seed, "sample-z", 0);
    let z_data = sample_latent(count, meta.latent_dim, &mut zr);
    let z = tape.leaf(&[count, meta.latent_dim], z_data, false);
    let cond = match conditions {
        Some(rows) => {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Some(tape.leaf(&[count, meta.cond_dim], flat, false))
        }
        None => None,
    };
    let (images, params) = gen.forward(&mut tape, z, cond)?;
    let mut imgs = Vec::with_capacity(count);
    let mut thetas = Vec::with_capacity(count);
    let mut phis = Vec::with_capacity(count);
    for b in 0..count {
        let pixels = tape.data(images)[b * hw..(b + 1) * hw].to_vec();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(AdpError::NonFinite("generated image"));
        }
        imgs.push(Image::new(meta.height, meta.width, pixels));
        let (t, p) = sample_params(&tape, params, b, meta.lf_count)?;
        thetas.push(t);
        phis.push(p);
    }
    Ok((imgs, thetas, phis))
}

/// Pair probability for explicit image/label inputs (test/eval helper).
pub fn discriminate(model: &AdpModel, image: &Image, label: &ProbLabel) -> Result<f64> {
    if label.len() != model.meta.classes {
        return Err(AdpError::ShapeMismatch {
            op: "discriminate",
            lhs: vec![model.meta.classes],
            rhs: vec![label.len()],
        });
    }
    let mut tape = Tape::new();
    let disc = bind_discriminator(model, &mut tape, false);
    let x = tape.leaf(&[1, image.pixels.len()], image.pixels.clone(), false);
    let y = tape.leaf(&[1, label.len()], label.probs().to_vec(), false);
    let d = disc.forward(&mut tape, x, y, None)?;
    Ok(tape.value(d))
}

/// Fine-tune toward a target dataset with the given freeze set. The target
/// label space must match the source model's.
pub fn finetune_transfer(
    model: AdpModel,
    tc: &TrainConfig,
    target: &Dataset,
    lfs: &[Box<dyn LabelingFunction>],
    freeze: FreezeSet,
    sink: Option<&RunSink>,
) -> Result<TrainOutcome> {
    if target.manifest.classes != model.meta.classes {
        return Err(AdpError::ShapeMismatch {
            op: "finetune_transfer",
            lhs: vec![model.meta.classes],
            rhs: vec![target.manifest.classes],
        });
    }
    train(tc, target, lfs, Variant::Standard, freeze, sink, model)
}

const NET_NAMES: [&str; 7] = [
    "g_common", "g_image", "g_param", "d_image", "d_label", "d_common", "d_lfb",
];

fn nets_of(model: &AdpModel) -> [&TrainableNet; 7] {
    [
        &model.g_common,
        &model.g_image,
        &model.g_param,
        &model.d_image,
        &model.d_label,
        &model.d_common,
        &model.d_lfb,
    ]
}

/// Write model weights, optimizer state and meta into a checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    model: &AdpModel,
    iteration: usize,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AdpError::io(dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for (name, net) in NET_NAMES.iter().zip(nets_of(model)) {
        let flat = net.params.flatten();
        records.push(TensorRecord::new(
            format!("{name}.params"),
            vec![flat.len()],
            flat,
        ));
        records.push(TensorRecord::new(
            format!("{name}.adam.m"),
            vec![net.opt.m.len()],
            net.opt.m.clone(),
        ));
        records.push(TensorRecord::new(
            format!("{name}.adam.v"),
            vec![net.opt.v.len()],
            net.opt.v.clone(),
        ));
        records.push(TensorRecord::new(
            format!("{name}.adam.t"),
            vec![2],
            vec![net.opt.t as f64, net.opt.skipped as f64],
        ));
    }
    write_container(&dir.join("weights.bin"), &records)?;
    let meta = &model.meta;
    let mut kv = BTreeMap::new();
    kv.insert("iteration".to_string(), iteration.to_string());
    kv.insert("config_hash".to_string(), config_hash.to_string());
    kv.insert("classes".to_string(), meta.classes.to_string());
    kv.insert("height".to_string(), meta.height.to_string());
    kv.insert("width".to_string(), meta.width.to_string());
    kv.insert("lf_count".to_string(), meta.lf_count.to_string());
    kv.insert("latent_dim".to_string(), meta.latent_dim.to_string());
    kv.insert("cond_dim".to_string(), meta.cond_dim.to_string());
    write_kv(&dir.join("manifest.txt"), &kv)
}

/// Load a checkpoint produced by [`save_checkpoint`]; `tc` must describe the
/// same layer widths.
pub fn load_checkpoint(dir: &Path, tc: &TrainConfig) -> Result<(AdpModel, usize)> {
    let kv = read_kv(&dir.join("manifest.txt"))?;
    let get_usize = |key: &str| -> Result<usize> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AdpError::Config {
                field: key.to_string(),
                detail: "missing or invalid in checkpoint manifest".to_string(),
            })
    };
    let meta = ModelMeta {
        classes: get_usize("classes")?,
        height: get_usize("height")?,
        width: get_usize("width")?,
        lf_count: get_usize("lf_count")?,
        latent_dim: get_usize("latent_dim")?,
        cond_dim: get_usize("cond_dim")?,
    };
    let mut model = AdpModel::new(tc, meta, &mut rng::derive(0, "ckpt-shape", 0));
    let records = read_container(&dir.join("weights.bin"))?;
    let find = |name: String| -> Result<&TensorRecord> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| AdpError::Format {
                path: dir.join("weights.bin").display().to_string(),
                detail: format!("missing record {name}"),
            })
    };
    {
        let nets: [&mut TrainableNet; 7] = [
            &mut model.g_common,
            &mut model.g_image,
            &mut model.g_param,
            &mut model.d_image,
            &mut model.d_label,
            &mut model.d_common,
            &mut model.d_lfb,
        ];
        for (name, net) in NET_NAMES.iter().zip(nets) {
            let p = find(format!("{name}.params"))?;
            net.params.load_flat(&p.data);
            net.opt.m = find(format!("{name}.adam.m"))?.data.clone();
            net.opt.v = find(format!("{name}.adam.v"))?.data.clone();
            let t = find(format!("{name}.adam.t"))?;
            net.opt.t = t.data[0] as u64;
            net.opt.skipped = t.data[1] as u64;
        }
    }
    Ok((model, get_usize("iteration")?))
}

/// Stable checksum of one block's parameters (freeze-contract assertions).
pub fn param_checksum(net: &TrainableNet) -> u64 {
    let bytes: Vec<u8> = net
        .params
        .flatten()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    rng::hash_bytes(&bytes)
}
