//! Labeling Function Block: pluggable weak labelers, relative-accuracy
//! weights Θ, the inter-function dependency matrix Φ, and their aggregation
//! rules.
//!
//! Two views of every aggregation exist here. The plain-f64 functions are the
//! reference path used at inference time and by the baselines; the `*_on_tape`
//! builders express the same arithmetic as recorded tape ops so gradients can
//! flow into the generated Θ and Φ during training. A recomputation test pins
//! the two routes to each other.

use crate::autodiff::{Tape, TensorId, NORMALIZE_GUARD};
use crate::data::Image;
use crate::{AdpError, Result};

/// Point on the m-class probability simplex: one labeling decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbLabel(Vec<f64>);

impl ProbLabel {
    /// Validate: entries in [0,1], sum within 1e-9 of 1.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(AdpError::invalid("ProbLabel", "empty vector"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AdpError::invalid(
                "ProbLabel",
                format!("entry outside [0,1] in {probs:?}"),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AdpError::invalid(
                "ProbLabel",
                format!("sum {sum} not within 1e-9 of 1"),
            ));
        }
        Ok(ProbLabel(probs))
    }

    /// Renormalize a nonnegative vector with positive mass onto the simplex.
    pub fn renormalized(mut raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(AdpError::invalid(
                "ProbLabel",
                format!("negative or non-finite entry in {raw:?}"),
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(AdpError::invalid("ProbLabel", "zero total mass"));
        }
        for p in raw.iter_mut() {
            *p /= sum;
        }
        Ok(ProbLabel(raw))
    }

    pub fn uniform(m: usize) -> Self {
        ProbLabel(vec![1.0 / m as f64; m])
    }

    pub fn one_hot_class(class: usize, m: usize) -> Self {
        let mut v = vec![0.0; m];
        v[class] = 1.0;
        ProbLabel(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// argmax with lowest-index tie-break.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A weak labeler: pure mapping from an image to a probabilistic label.
pub trait LabelingFunction {
    fn id(&self) -> &str;
    /// (height, width) the function accepts.
    fn arity(&self) -> (usize, usize);
    fn evaluate(&self, image: &Image) -> ProbLabel;
}

/// Per-function relative accuracy weights.
#[derive(Debug, Clone)]
pub struct ThetaVector {
    theta: Vec<f64>,
    normalized: bool,
}

impl ThetaVector {
    /// Raw nonnegative weights. Negative entries are rejected: the generator
    /// emits Θ through a softplus head precisely so this can't happen.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(AdpError::invalid("ThetaVector", "empty"));
        }
        if let Some(bad) = theta.iter().find(|t| **t < 0.0 || !t.is_finite()) {
            return Err(AdpError::invalid(
                "ThetaVector",
                format!("negative or non-finite entry {bad}"),
            ));
        }
        Ok(ThetaVector {
            theta,
            normalized: false,
        })
    }

    pub fn uniform(n: usize) -> Self {
        ThetaVector {
            theta: vec![1.0 / n as f64; n],
            normalized: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// θ̃ = θ / Σθ. An all-zero input (sum < 1e-12) normalizes to uniform so
    /// training stays defined at initialization.
    pub fn normalize(&self) -> ThetaVector {
        let sum: f64 = self.theta.iter().sum();
        let n = self.theta.len();
        let theta = if sum < NORMALIZE_GUARD {
            vec![1.0 / n as f64; n]
        } else {
            self.theta.iter().map(|t| t / sum).collect()
        };
        ThetaVector {
            theta,
            normalized: true,
        }
    }
}

/// Where a Φ matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiProvenance {
    /// Emitted by the generator's parameter head.
    Generated,
    /// Counted from labeling-function agreement (the "real" side).
    Real,
}

/// n×n inter-function dependency matrix, row-major.
#[derive(Debug, Clone)]
pub struct PhiMatrix {
    n: usize,
    values: Vec<f64>,
    provenance: PhiProvenance,
}

impl PhiMatrix {
    pub fn new(n: usize, values: Vec<f64>, provenance: PhiProvenance) -> Result<Self> {
        if values.len() != n * n {
            return Err(AdpError::ShapeMismatch {
                op: "PhiMatrix",
                lhs: vec![n, n],
                rhs: vec![values.len()],
            });
        }
        if provenance == PhiProvenance::Real {
            for i in 0..n {
                for j in 0..n {
                    let v = values[i * n + j];
                    if v < 0.0 {
                        return Err(AdpError::invalid(
                            "PhiMatrix",
                            format!("real Φ has negative entry at ({i},{j})"),
                        ));
                    }
                    if (v - values[j * n + i]).abs() > 1e-12 {
                        return Err(AdpError::invalid(
                            "PhiMatrix",
                            format!("real Φ not symmetric at ({i},{j})"),
                        ));
                    }
                }
            }
        }
        Ok(PhiMatrix {
            n,
            values,
            provenance,
        })
    }

    pub fn identity(n: usize, provenance: PhiProvenance) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        PhiMatrix {
            n,
            values,
            provenance,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> PhiProvenance {
        self.provenance
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// (Φ + Φᵀ)/2; used on generated Φ so both game sides share symmetry.
    pub fn symmetrized(&self) -> PhiMatrix {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        PhiMatrix {
            n,
            values,
            provenance: self.provenance,
        }
    }
}

/// Attribute vector in [0,1]^p (attribute mode treats these as LFs).
#[derive(Debug, Clone)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AdpError::invalid(
                "AttributeVector",
                format!("entry outside [0,1] in {s:?}"),
            ));
        }
        Ok(AttributeVector(s))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ground-truth attribute signatures, one row per class (K×p).
#[derive(Debug, Clone)]
pub struct SignatureTable {
    pub classes: usize,
    pub attrs: usize,
    rows: Vec<f64>,
}

impl SignatureTable {
    pub fn new(classes: usize, attrs: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != classes * attrs {
            return Err(AdpError::ShapeMismatch {
                op: "SignatureTable",
                lhs: vec![classes, attrs],
                rhs: vec![rows.len()],
            });
        }
        Ok(SignatureTable {
            classes,
            attrs,
            rows,
        })
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.attrs..(class + 1) * self.attrs]
    }

    pub fn raw(&self) -> &[f64] {
        &self.rows
    }
}

/// Direction of the zero-shot similarity ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreDirection {
    #[default]
    Argmax,
    Argmin,
}

/// e_k where k = argmax(v), lowest-index tie-break.
pub fn one_hot(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    out[argmax(v)] = 1.0;
    out
}

/// Lowest-index argmax.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Apply every labeling function to one image: row i of the result is
/// `lfs[i].evaluate(image)`. Non-simplex outputs with positive mass are
/// renormalized; zero-mass outputs are rejected.
pub fn apply_lfs(lfs: &[Box<dyn LabelingFunction>], image: &Image) -> Result<Vec<ProbLabel>> {
    let mut rows = Vec::with_capacity(lfs.len());
    for lf in lfs {
        let (h, w) = lf.arity();
        if (h, w) != (image.height, image.width) {
            return Err(AdpError::ShapeMismatch {
                op: "apply_lfs",
                lhs: vec![h, w],
                rhs: vec![image.height, image.width],
            });
        }
        let raw = lf.evaluate(image);
        let sum: f64 = raw.probs().iter().sum();
        let row = if (sum - 1.0).abs() <= 1e-9 {
            raw
        } else {
            ProbLabel::renormalized(raw.probs().to_vec()).map_err(|_| {
                AdpError::invalid(
                    "LabelingFunction output",
                    format!("{} returned a zero-mass vector", lf.id()),
                )
            })?
        };
        rows.push(row);
    }
    Ok(rows)
}

/// ỹ = Θ̃·A: convex combination of the per-function label rows.
pub fn aggregate_theta(theta: &ThetaVector, rows: &[ProbLabel]) -> Result<ProbLabel> {
    if !theta.is_normalized() {
        return Err(AdpError::invalid("ThetaVector", "must be normalized"));
    }
    if theta.len() != rows.len() {
        return Err(AdpError::ShapeMismatch {
            op: "aggregate_theta",
            lhs: vec![theta.len()],
            rhs: vec![rows.len()],
        });
    }
    let m = rows[0].len();
    let mut out = vec![0.0; m];
    for (w, row) in theta.values().iter().zip(rows) {
        if row.len() != m {
            return Err(AdpError::ShapeMismatch {
                op: "aggregate_theta",
                lhs: vec![m],
                rhs: vec![row.len()],
            });
        }
        for (o, p) in out.iter_mut().zip(row.probs()) {
            *o += w * p;
        }
    }
    ProbLabel::new(out).or_else(|_| ProbLabel::renormalized(vec![1.0; m]))
}

/// Counted inter-function dependency matrix.
///
/// Start from the identity; for every pair i<j add 1 to entry (i,j) when the
/// one-hot encodings of θ_i·a_i and θ_j·a_j agree; row-normalize; then
/// complete by symmetry as Φ + Φᵀ − diag(Φ). The result depends on θ only
/// through which entries are zero (argmax scaling invariance).
pub fn compute_phi_real(theta: &ThetaVector, rows: &[ProbLabel]) -> Result<PhiMatrix> {
    let n = rows.len();
    if theta.len() != n {
        return Err(AdpError::ShapeMismatch {
            op: "compute_phi_real",
            lhs: vec![theta.len()],
            rhs: vec![n],
        });
    }
    if n == 0 {
        return Err(AdpError::invalid("compute_phi_real", "no labeling functions"));
    }
    let hots: Vec<Vec<f64>> = theta
        .values()
        .iter()
        .zip(rows)
        .map(|(t, row)| {
            let scaled: Vec<f64> = row.probs().iter().map(|p| t * p).collect();
            one_hot(&scaled)
        })
        .collect();

    let mut phi = vec![0.0; n * n];
    for i in 0..n {
        phi[i * n + i] = 1.0;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = hots[i].iter().zip(&hots[j]).map(|(a, b)| a * b).sum();
            phi[i * n + j] += dot;
        }
    }
    for p in 0..n {
        let sum: f64 = phi[p * n..(p + 1) * n].iter().sum();
        for v in &mut phi[p * n..(p + 1) * n] {
            *v /= sum;
        }
    }
    // Φ ← Φ + Φᵀ − diag(Φ)
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = phi[i * n + j] + phi[j * n + i];
        }
        sym[i * n + i] -= phi[i * n + i];
    }
    PhiMatrix::new(n, sym, PhiProvenance::Real)
}

/// Final label: ỹ = Θ̃·Φᵀ·A, renormalized onto the simplex by its L1 mass.
///
/// Φ is not stochastic, so the raw product can leave the simplex; dividing by
/// its mass keeps downstream discriminator inputs valid distributions. An
/// all-zero product returns the uniform label and reports it via the flag.
pub fn aggregate_final(
    theta: &ThetaVector,
    phi: &PhiMatrix,
    rows: &[ProbLabel],
) -> Result<(ProbLabel, bool)> {
    if !theta.is_normalized() {
        return Err(AdpError::invalid("ThetaVector", "must be normalized"));
    }
    let n = rows.len();
    if theta.len() != n || phi.n() != n {
        return Err(AdpError::ShapeMismatch {
            op: "aggregate_final",
            lhs: vec![theta.len(), phi.n()],
            rhs: vec![n],
        });
    }
    let m = rows[0].len();
    // v = Θ̃ · Φᵀ  (vᵢ = Σₖ θ̃ₖ Φᵀₖᵢ = Σₖ θ̃ₖ Φᵢₖ)
    let mut v = vec![0.0; n];
    for (i, vi) in v.iter_mut().enumerate() {
        for (k, t) in theta.values().iter().enumerate() {
            *vi += t * phi.get(i, k);
        }
    }
    let mut raw = vec![0.0; m];
    for (vi, row) in v.iter().zip(rows) {
        for (o, p) in raw.iter_mut().zip(row.probs()) {
            *o += vi * p;
        }
    }
    let mass: f64 = raw.iter().sum();
    if mass < NORMALIZE_GUARD {
        return Ok((ProbLabel::uniform(m), true));
    }
    Ok((ProbLabel::renormalized(raw)?, false))
}

/// Zero-shot class decision: score(y) = ((Φ·Θ) ∘ s_pred) · S_gt[y], ranked in
/// the configured direction with lowest-index tie-break.
pub fn zero_shot_label(
    theta: &ThetaVector,
    phi: &PhiMatrix,
    s_pred: &AttributeVector,
    s_gt: &SignatureTable,
    direction: ScoreDirection,
) -> Result<usize> {
    if s_gt.classes == 0 {
        return Err(AdpError::invalid("zero_shot_label", "empty class set"));
    }
    let scores = zero_shot_scores(theta, phi, s_pred, s_gt)?;
    Ok(match direction {
        ScoreDirection::Argmax => argmax(&scores),
        ScoreDirection::Argmin => {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            argmax(&neg)
        }
    })
}

/// Per-class similarity scores of the zero-shot rule.
pub fn zero_shot_scores(
    theta: &ThetaVector,
    phi: &PhiMatrix,
    s_pred: &AttributeVector,
    s_gt: &SignatureTable,
) -> Result<Vec<f64>> {
    let p = s_pred.len();
    if theta.len() != p || phi.n() != p || s_gt.attrs != p {
        return Err(AdpError::ShapeMismatch {
            op: "zero_shot_label",
            lhs: vec![theta.len(), phi.n(), s_gt.attrs],
            rhs: vec![p],
        });
    }
    // w = Φ·Θ (matrix–vector), then Hadamard with s_pred
    let mut w = vec![0.0; p];
    for (i, wi) in w.iter_mut().enumerate() {
        for (k, t) in theta.values().iter().enumerate() {
            *wi += phi.get(i, k) * t;
        }
    }
    let weighted: Vec<f64> = w
        .iter()
        .zip(s_pred.values())
        .map(|(wi, si)| wi * si)
        .collect();
    Ok((0..s_gt.classes)
        .map(|y| {
            weighted
                .iter()
                .zip(s_gt.row(y))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect())
}

// ---- tape-side builders ----------------------------------------------------

/// Differentiable θ̃ from a raw nonnegative θ row batch (B×n).
pub fn normalize_theta_on_tape(tape: &mut Tape, theta_raw: TensorId) -> Result<TensorId> {
    tape.row_normalize(theta_raw)
}

/// Differentiable (Φ+Φᵀ)/2 of one n×n tape tensor.
pub fn symmetrize_phi_on_tape(tape: &mut Tape, phi: TensorId) -> Result<TensorId> {
    let pt = tape.transpose(phi)?;
    let sum = tape.add(phi, pt)?;
    Ok(tape.scale(sum, 0.5))
}

/// Differentiable Eq.-7 aggregation for one sample.
///
/// `theta_norm` is 1×n (already normalized), `phi_sym` n×n (already
/// symmetrized, nonnegative), `rows` the constant LF output matrix. Returns a
/// 1×m simplex row on the tape.
pub fn aggregate_final_on_tape(
    tape: &mut Tape,
    theta_norm: TensorId,
    phi_sym: TensorId,
    rows: &[ProbLabel],
) -> Result<TensorId> {
    let n = rows.len();
    let m = rows[0].len();
    let mut a_flat = Vec::with_capacity(n * m);
    for row in rows {
        a_flat.extend_from_slice(row.probs());
    }
    let a = tape.leaf(&[n, m], a_flat, false);
    let phi_t = tape.transpose(phi_sym)?;
    let v = tape.matmul(theta_norm, phi_t)?;
    let raw = tape.matmul(v, a)?;
    tape.row_normalize(raw)
}
