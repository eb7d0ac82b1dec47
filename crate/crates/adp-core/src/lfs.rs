//! Built-in labeling functions for the glyph worlds, plus the declarative
//! registry that instantiates them from config strings.
//!
//! Three families mirror the usual taxonomy of weak supervision sources:
//! geometric heuristics (enclosure, symmetry, quadrant mass), template and
//! deep-feature matchers, and salted noisy oracles with configurable accuracy
//! whose shared salts plant pairwise error dependence for the aggregation
//! experiments. Every function is pure in the image bytes.

use crate::data::{
    glyph_prototype, has_enclosed_region, rotate, Dataset, Glyph, Image, Rotation, Style,
    WorldKind, GLYPHS,
};
use crate::features::DeepFeatureLf;
use crate::lfb::{LabelingFunction, ProbLabel};
use crate::rng::hash_bytes;
use crate::{AdpError, Result};

/// Shared context the builders need: image geometry and class prototypes.
#[derive(Debug, Clone)]
pub struct WorldInfo {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub prototypes: Vec<Image>,
}

impl WorldInfo {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let style = match ds.manifest.kind {
            WorldKind::Shapes { style } => style,
            _ => Style::A,
        };
        let prototypes = GLYPHS
            .iter()
            .take(ds.manifest.classes)
            .map(|g| glyph_prototype(*g, ds.manifest.height, ds.manifest.width, style))
            .collect();
        WorldInfo {
            classes: ds.manifest.classes,
            height: ds.manifest.height,
            width: ds.manifest.width,
            prototypes,
        }
    }
}

fn uniform_over(members: &[usize], m: usize) -> ProbLabel {
    if members.is_empty() {
        return ProbLabel::uniform(m);
    }
    let mut v = vec![0.0; m];
    for &c in members {
        v[c] = 1.0 / members.len() as f64;
    }
    ProbLabel::renormalized(v).expect("non-empty member set")
}

/// Fires on the loop class when the image contains an enclosed background
/// region; otherwise spreads mass over the remaining classes.
pub struct EnclosureLf {
    info: WorldInfo,
}

impl LabelingFunction for EnclosureLf {
    fn id(&self) -> &str {
        "enclosure"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        let m = self.info.classes;
        if has_enclosed_region(image) {
            ProbLabel::one_hot_class(Glyph::Loop as usize, m)
        } else {
            let others: Vec<usize> = (0..m).filter(|&c| c != Glyph::Loop as usize).collect();
            uniform_over(&others, m)
        }
    }
}

fn fg_bbox(img: &Image) -> Option<(usize, usize, usize, usize)> {
    let mut r0 = usize::MAX;
    let mut c0 = usize::MAX;
    let mut r1 = 0;
    let mut c1 = 0;
    for r in 0..img.height {
        for c in 0..img.width {
            if img.get(r, c) > 0.0 {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then_some((r0, c0, r1, c1))
}

fn bbox_sym_score(img: &Image) -> f64 {
    // mean |x − mirror(x)| of the thresholded mask inside the fg bounding box
    let Some((r0, c0, r1, c1)) = fg_bbox(img) else {
        return 1.0;
    };
    let mut diff = 0.0;
    let mut n = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let a = (img.get(r, c) > 0.0) as u8 as f64;
            let b = (img.get(r, c1 - (c - c0)) > 0.0) as u8 as f64;
            diff += (a - b).abs();
            n += 1.0;
        }
    }
    diff / n
}

/// Splits classes by left-right symmetry of the glyph inside its bounding
/// box; answers with the uniform distribution over the matching group.
pub struct SymmetryLf {
    info: WorldInfo,
    symmetric: Vec<usize>,
    asymmetric: Vec<usize>,
}

impl SymmetryLf {
    fn new(info: WorldInfo) -> Self {
        let mut symmetric = Vec::new();
        let mut asymmetric = Vec::new();
        for (c, proto) in info.prototypes.iter().enumerate() {
            if bbox_sym_score(proto) < 0.05 {
                symmetric.push(c);
            } else {
                asymmetric.push(c);
            }
        }
        SymmetryLf {
            info,
            symmetric,
            asymmetric,
        }
    }
}

impl LabelingFunction for SymmetryLf {
    fn id(&self) -> &str {
        "vsym"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        let m = self.info.classes;
        if bbox_sym_score(image) < 0.12 {
            uniform_over(&self.symmetric, m)
        } else {
            uniform_over(&self.asymmetric, m)
        }
    }
}

fn quadrant_mass(img: &Image) -> [f64; 4] {
    let (h, w) = (img.height, img.width);
    let mut q = [0.0; 4];
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            if img.get(r, c) > 0.0 {
                let idx = (r >= h / 2) as usize * 2 + (c >= w / 2) as usize;
                q[idx] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        for v in q.iter_mut() {
            *v /= total;
        }
    }
    q
}

/// Soft nearest-prototype matcher on quadrant-mass profiles.
pub struct QuadrantMassLf {
    info: WorldInfo,
    profiles: Vec<[f64; 4]>,
    temperature: f64,
}

impl QuadrantMassLf {
    fn new(info: WorldInfo) -> Self {
        let profiles = info.prototypes.iter().map(quadrant_mass).collect();
        QuadrantMassLf {
            info,
            profiles,
            temperature: 0.25,
        }
    }
}

impl LabelingFunction for QuadrantMassLf {
    fn id(&self) -> &str {
        "quad_mass"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        let q = quadrant_mass(image);
        let weights: Vec<f64> = self
            .profiles
            .iter()
            .map(|p| {
                let d: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
                (-d / self.temperature).exp()
            })
            .collect();
        ProbLabel::renormalized(weights).expect("positive exp weights")
    }
}

/// One-hot nearest prototype by mean squared pixel distance.
pub struct TemplateLf {
    info: WorldInfo,
}

impl TemplateLf {
    fn classify(&self, image: &Image) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, proto) in self.info.prototypes.iter().enumerate() {
            // minimum over position jitter: compare against the prototype and
            // its one-pixel translations via direct distance on shifted reads
            let d = template_distance(image, proto);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn template_distance(img: &Image, proto: &Image) -> f64 {
    // best alignment over small shifts, so jitter does not swamp the match
    let mut best = f64::INFINITY;
    let range = 2i64;
    for dr in -range..=range {
        for dc in -range..=range {
            let mut d = 0.0;
            for r in 0..img.height {
                for c in 0..img.width {
                    let pr = r as i64 + dr;
                    let pc = c as i64 + dc;
                    let pv = if pr >= 0
                        && pr < proto.height as i64
                        && pc >= 0
                        && pc < proto.width as i64
                    {
                        proto.get(pr as usize, pc as usize)
                    } else {
                        -1.0
                    };
                    let diff = img.get(r, c) - pv;
                    d += diff * diff;
                }
            }
            if d < best {
                best = d;
            }
        }
    }
    best
}

impl LabelingFunction for TemplateLf {
    fn id(&self) -> &str {
        "template"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        ProbLabel::one_hot_class(self.classify(image), self.info.classes)
    }
}

/// Template matcher followed by a deterministic salted corruption: with
/// probability 1−accuracy (decided by a hash of the image bytes and the
/// salt) the vote flips to a pseudo-random wrong class. Functions sharing a
/// salt err on the same images toward the same class, which plants the
/// pairwise dependence the aggregation comparisons need.
pub struct NoisyOracleLf {
    id: String,
    template: TemplateLf,
    accuracy: f64,
    salt: u64,
}

impl LabelingFunction for NoisyOracleLf {
    fn id(&self) -> &str {
        &self.id
    }
    fn arity(&self) -> (usize, usize) {
        self.template.arity()
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        let m = self.template.info.classes;
        let clean = self.template.classify(image);
        let mut bytes = image.to_bytes();
        bytes.extend_from_slice(&self.salt.to_le_bytes());
        let h = hash_bytes(&bytes);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let class = if u < 1.0 - self.accuracy && m > 1 {
            let offset = 1 + (h % (m as u64 - 1)) as usize;
            (clean + offset) % m
        } else {
            clean
        };
        ProbLabel::one_hot_class(class, m)
    }
}

/// Always answers the same one-hot class (rotation-invariant by construction).
pub struct ConstantLf {
    info: WorldInfo,
    class: usize,
}

impl LabelingFunction for ConstantLf {
    fn id(&self) -> &str {
        "constant"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, _image: &Image) -> ProbLabel {
        ProbLabel::one_hot_class(self.class, self.info.classes)
    }
}

/// Always answers the uniform distribution.
pub struct UniformLf {
    info: WorldInfo,
}

impl LabelingFunction for UniformLf {
    fn id(&self) -> &str {
        "uniform"
    }
    fn arity(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }
    fn evaluate(&self, _image: &Image) -> ProbLabel {
        ProbLabel::uniform(self.info.classes)
    }
}

/// Template matcher applied to a fixed pre-rotation of the image; its votes
/// move under input rotation, giving the self-supervision loss something to
/// down-weight.
pub struct RotatedTemplateLf {
    id: String,
    template: TemplateLf,
    rotation: Rotation,
}

impl LabelingFunction for RotatedTemplateLf {
    fn id(&self) -> &str {
        &self.id
    }
    fn arity(&self) -> (usize, usize) {
        self.template.arity()
    }
    fn evaluate(&self, image: &Image) -> ProbLabel {
        match rotate(image, self.rotation) {
            Ok(img) => self.template.evaluate(&img),
            Err(_) => ProbLabel::uniform(self.template.info.classes),
        }
    }
}

/// One parsed registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LfSpec {
    pub name: String,
    pub args: Vec<(String, String)>,
}

impl LfSpec {
    fn arg_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.args.iter().find(|(k, _)| k == key) {
            None => Ok(default),
            Some((_, v)) => v.parse().map_err(|_| {
                AdpError::invalid("labeling function arg", format!("{key}={v}"))
            }),
        }
    }

    fn arg_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.args.iter().find(|(k, _)| k == key) {
            None => Ok(default),
            Some((_, v)) => v.parse().map_err(|_| {
                AdpError::invalid("labeling function arg", format!("{key}={v}"))
            }),
        }
    }

    fn arg_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.arg_u64(key, default as u64)? as usize)
    }
}

/// Parse a comma-separated registry string such as
/// `template, enclosure, noisy(acc=0.8,salt=3), deep_feature(dim=16)`.
pub fn parse_lf_specs(text: &str) -> Result<Vec<LfSpec>> {
    let mut specs = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                current.push(ch);
            }
            ',' if depth == 0 => {
                if !current.trim().is_empty() {
                    specs.push(parse_one(current.trim())?);
                }
                current.clear();
            }
            _ => current.push(ch),
        }
    }
    if !current.trim().is_empty() {
        specs.push(parse_one(current.trim())?);
    }
    if specs.is_empty() {
        return Err(AdpError::invalid("lfs", "empty labeling-function list"));
    }
    Ok(specs)
}

fn parse_one(token: &str) -> Result<LfSpec> {
    let (name, args) = match token.split_once('(') {
        None => (token.to_string(), Vec::new()),
        Some((name, rest)) => {
            let inner = rest.strip_suffix(')').ok_or_else(|| {
                AdpError::invalid("lfs", format!("missing `)` in `{token}`"))
            })?;
            let args = inner
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|pair| {
                    let (k, v) = pair.split_once('=').ok_or_else(|| {
                        AdpError::invalid("lfs", format!("expected k=v in `{pair}`"))
                    })?;
                    Ok((k.trim().to_string(), v.trim().to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            (name.trim().to_string(), args)
        }
    };
    Ok(LfSpec { name, args })
}

/// Instantiate labeling functions. `deep_feature` trains its feature net on
/// the dataset's train split, so building is deterministic in `seed`.
pub fn build_lfs(
    specs: &[LfSpec],
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<Box<dyn LabelingFunction>>> {
    let info = WorldInfo::from_dataset(dataset);
    let mut out: Vec<Box<dyn LabelingFunction>> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let lf: Box<dyn LabelingFunction> = match spec.name.as_str() {
            "enclosure" => Box::new(EnclosureLf { info: info.clone() }),
            "vsym" => Box::new(SymmetryLf::new(info.clone())),
            "quad_mass" => Box::new(QuadrantMassLf::new(info.clone())),
            "template" => Box::new(TemplateLf { info: info.clone() }),
            "rot_template" => {
                let quarter = spec.arg_usize("r", 1)? % 4;
                Box::new(RotatedTemplateLf {
                    id: format!("rot_template(r={quarter})"),
                    template: TemplateLf { info: info.clone() },
                    rotation: Rotation::ALL[quarter],
                })
            }
            "noisy" => {
                let accuracy = spec.arg_f64("acc", 0.75)?;
                let salt = spec.arg_u64("salt", i as u64)?;
                Box::new(NoisyOracleLf {
                    id: format!("noisy(acc={accuracy},salt={salt})"),
                    template: TemplateLf { info: info.clone() },
                    accuracy,
                    salt,
                })
            }
            "constant" => Box::new(ConstantLf {
                info: info.clone(),
                class: spec.arg_usize("class", 0)?,
            }),
            "uniform" => Box::new(UniformLf { info: info.clone() }),
            "deep_feature" => {
                let dim = spec.arg_usize("dim", 16)?;
                let train: Vec<&Image> = dataset.train().iter().map(|s| &s.image).collect();
                Box::new(DeepFeatureLf::build(
                    &train,
                    dataset.manifest.classes,
                    dim,
                    seed ^ 0x5f0_0d + i as u64,
                )?)
            }
            other => {
                return Err(AdpError::invalid(
                    "lfs",
                    format!("unknown labeling function `{other}`"),
                ))
            }
        };
        out.push(lf);
    }
    Ok(out)
}

/// The default pool used by the sweeps, ordered so that prefixes of
/// increasing length move from weak heuristics to strong matchers and then
/// to redundant salted oracles.
pub fn standard_pool_specs(n: usize) -> Result<Vec<LfSpec>> {
    let full = "quad_mass, vsym, enclosure, noisy(acc=0.7,salt=1), noisy(acc=0.75,salt=2), \
                template, noisy(acc=0.8,salt=3), deep_feature(dim=16), \
                noisy(acc=0.72,salt=1), noisy(acc=0.77,salt=2), noisy(acc=0.7,salt=4), \
                noisy(acc=0.74,salt=3)";
    let specs = parse_lf_specs(full)?;
    if n == 0 || n > specs.len() {
        return Err(AdpError::invalid(
            "lf count",
            format!("n={n}, pool holds {}", specs.len()),
        ));
    }
    Ok(specs[..n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes;
    use crate::lfb::apply_lfs;

    fn world() -> Dataset {
        gen_shapes(3, 100, 5, 8, 8, Style::A).unwrap()
    }

    #[test]
    fn parse_specs_with_and_without_args() {
        let specs = parse_lf_specs("template, noisy(acc=0.8,salt=3), enclosure").unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].name, "template");
        assert_eq!(specs[1].args, vec![
            ("acc".to_string(), "0.8".to_string()),
            ("salt".to_string(), "3".to_string())
        ]);
        assert!(parse_lf_specs("noisy(acc=0.8").is_err());
        assert!(parse_lf_specs("").is_err());
    }

    #[test]
    fn enclosure_fires_on_loop_images() {
        let ds = world();
        let lfs = build_lfs(&parse_lf_specs("enclosure").unwrap(), &ds, 1).unwrap();
        for s in ds.samples.iter().take(40) {
            let rows = apply_lfs(&lfs, &s.image).unwrap();
            if s.label == 0 {
                assert_eq!(rows[0].argmax(), 0);
                assert_eq!(rows[0].probs()[0], 1.0);
            } else if s.label < 4 {
                assert_eq!(rows[0].probs()[0], 0.0);
            }
        }
    }

    #[test]
    fn template_is_accurate_on_clean_world() {
        let ds = world();
        let lfs = build_lfs(&parse_lf_specs("template").unwrap(), &ds, 1).unwrap();
        let mut hits = 0;
        for s in &ds.samples {
            let rows = apply_lfs(&lfs, &s.image).unwrap();
            if rows[0].argmax() == s.label {
                hits += 1;
            }
        }
        assert!(
            hits as f64 / ds.samples.len() as f64 > 0.95,
            "template accuracy {hits}/{}",
            ds.samples.len()
        );
    }

    #[test]
    fn noisy_oracle_hits_target_accuracy_and_is_pure() {
        let ds = gen_shapes(17, 600, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(&parse_lf_specs("noisy(acc=0.75,salt=9)").unwrap(), &ds, 1).unwrap();
        let mut hits = 0;
        for s in &ds.samples {
            let a = lfs[0].evaluate(&s.image);
            let b = lfs[0].evaluate(&s.image);
            assert_eq!(a.probs(), b.probs(), "oracle must be pure");
            if a.argmax() == s.label {
                hits += 1;
            }
        }
        let acc = hits as f64 / ds.samples.len() as f64;
        assert!((acc - 0.75).abs() < 0.08, "accuracy {acc}");
    }

    #[test]
    fn shared_salt_plants_correlated_errors() {
        let ds = gen_shapes(23, 400, 3, 8, 8, Style::A).unwrap();
        let lfs = build_lfs(
            &parse_lf_specs("noisy(acc=0.7,salt=5), noisy(acc=0.7,salt=5), noisy(acc=0.7,salt=99)")
                .unwrap(),
            &ds,
            1,
        )
        .unwrap();
        let mut both_wrong = 0;
        let mut first_wrong = 0;
        let mut indep_joint = 0;
        for s in &ds.samples {
            let a = lfs[0].evaluate(&s.image).argmax() != s.label;
            let b = lfs[1].evaluate(&s.image).argmax() != s.label;
            let c = lfs[2].evaluate(&s.image).argmax() != s.label;
            if a {
                first_wrong += 1;
            }
            if a && b {
                both_wrong += 1;
            }
            if a && c {
                indep_joint += 1;
            }
        }
        // same salt errs together; independent salt errs roughly at the product rate
        assert_eq!(both_wrong, first_wrong);
        assert!(indep_joint < first_wrong);
    }

    #[test]
    fn standard_pool_prefixes() {
        assert_eq!(standard_pool_specs(2).unwrap().len(), 2);
        assert_eq!(standard_pool_specs(12).unwrap().len(), 12);
        assert!(standard_pool_specs(13).is_err());
    }

    #[test]
    fn lf_outputs_are_valid_rows() {
        let ds = world();
        let specs = parse_lf_specs("quad_mass, vsym, enclosure, template, uniform").unwrap();
        let lfs = build_lfs(&specs, &ds, 5).unwrap();
        for s in ds.samples.iter().take(20) {
            let rows = apply_lfs(&lfs, &s.image).unwrap();
            for row in rows {
                let sum: f64 = row.probs().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.probs().iter().all(|p| *p >= 0.0));
            }
        }
    }
}
