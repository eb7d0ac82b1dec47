//! Numerical equilibrium checks on tabular joint distributions.
//!
//! For finite (x, y) grids the minimax game admits closed forms: the optimal
//! discriminator is p_real/(p_real+p_fake) cellwise, the value there equals
//! −log 4 + 2·JSD(p_real‖p_fake), and gradient ascent on a per-cell sigmoid
//! parameterization converges to the closed form. Zero-mass cells contribute
//! nothing to any integral (0·log 0 ≡ 0), which keeps the identities exact.

use rand::Rng;

use crate::rng;
use crate::{AdpError, Result};

/// Finite joint distribution over an (x-index, y-index) grid.
#[derive(Debug, Clone)]
pub struct TabularJoint {
    pub xs: usize,
    pub ys: usize,
    p: Vec<f64>,
}

impl TabularJoint {
    pub fn new(xs: usize, ys: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != xs * ys {
            return Err(AdpError::ShapeMismatch {
                op: "TabularJoint",
                lhs: vec![xs, ys],
                rhs: vec![p.len()],
            });
        }
        if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(AdpError::invalid("TabularJoint", "negative or non-finite mass"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(AdpError::invalid(
                "TabularJoint",
                format!("mass {sum} not within 1e-12 of 1"),
            ));
        }
        Ok(TabularJoint { xs, ys, p })
    }

    /// Random table (Dirichlet-ish via exponential draws, exactly normalized).
    pub fn random(xs: usize, ys: usize, seed: u64, index: u64) -> Self {
        let mut r = rng::derive(seed, "tabular", index);
        let mut p: Vec<f64> = (0..xs * ys)
            .map(|_| -f64::ln(1.0 - r.random_range(0.0..1.0)))
            .collect();
        let sum: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= sum;
        }
        // re-sum to push the total within 1e-16 of 1
        let resum: f64 = p.iter().sum();
        p[0] += 1.0 - resum;
        TabularJoint { xs, ys, p }
    }

    pub fn cells(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// D*(x,y) = p_real/(p_real+p_fake), with 0/0 cells fixed at 1/2.
pub fn optimal_d(p_real: &TabularJoint, p_fake: &TabularJoint) -> Result<Vec<f64>> {
    check_same_grid(p_real, p_fake)?;
    Ok(p_real
        .cells()
        .iter()
        .zip(p_fake.cells())
        .map(|(&r, &f)| {
            let denom = r + f;
            if denom <= 0.0 {
                0.5
            } else {
                r / denom
            }
        })
        .collect())
}

/// Game value Σ p_real·log d + Σ p_fake·log(1−d). Terms with zero mass are
/// skipped (0·log 0 ≡ 0); positive-mass cells guard the log at 1e-12.
pub fn game_value(p_real: &TabularJoint, p_fake: &TabularJoint, d: &[f64]) -> Result<f64> {
    check_same_grid(p_real, p_fake)?;
    if d.len() != p_real.len() {
        return Err(AdpError::ShapeMismatch {
            op: "game_value",
            lhs: vec![p_real.len()],
            rhs: vec![d.len()],
        });
    }
    let mut v = 0.0;
    for ((&r, &f), &di) in p_real.cells().iter().zip(p_fake.cells()).zip(d) {
        if r > 0.0 {
            v += r * di.max(1e-12).ln();
        }
        if f > 0.0 {
            v += f * (1.0 - di).max(1e-12).ln();
        }
    }
    Ok(v)
}

/// Jensen–Shannon divergence, natural log, zero-mass terms skipped.
pub fn jsd(p_real: &TabularJoint, p_fake: &TabularJoint) -> Result<f64> {
    check_same_grid(p_real, p_fake)?;
    let kl_to_mid = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| {
                let mid = 0.5 * (pi + qi);
                pi * (pi / mid).ln()
            })
            .sum()
    };
    Ok(0.5 * kl_to_mid(p_real.cells(), p_fake.cells())
        + 0.5 * kl_to_mid(p_fake.cells(), p_real.cells()))
}

/// Per-cell sigmoid-parameterized gradient ascent on the game value.
///
/// The ascent direction in the logit u is p_real·(1−d) − p_fake·d; the step
/// is scaled by 1/(p_real+p_fake) per cell, which keeps ascent monotone on
/// this concave-per-cell objective. Cells with no mass stay at d = 1/2.
pub fn train_tabular_d(
    p_real: &TabularJoint,
    p_fake: &TabularJoint,
    steps: usize,
) -> Result<Vec<f64>> {
    check_same_grid(p_real, p_fake)?;
    let n = p_real.len();
    let mut u = vec![0.0; n];
    for _ in 0..steps {
        let mut done = true;
        for i in 0..n {
            let (r, f) = (p_real.cells()[i], p_fake.cells()[i]);
            let mass = r + f;
            if mass <= 0.0 {
                continue;
            }
            let d = crate::autodiff::sigmoid(u[i]);
            let g = r * (1.0 - d) - f * d;
            let step = g / mass;
            u[i] += step;
            if step.abs() > 1e-9 {
                done = false;
            }
        }
        if done {
            break;
        }
    }
    Ok(u.iter().map(|&ui| crate::autodiff::sigmoid(ui)).collect())
}

fn check_same_grid(a: &TabularJoint, b: &TabularJoint) -> Result<()> {
    if a.xs != b.xs || a.ys != b.ys {
        return Err(AdpError::ShapeMismatch {
            op: "tabular game",
            lhs: vec![a.xs, a.ys],
            rhs: vec![b.xs, b.ys],
        });
    }
    Ok(())
}

pub const LOG4: f64 = 1.3862943611198906; // ln 4

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_distributions_give_half_and_minus_log4() {
        let p = TabularJoint::random(4, 2, 3, 0);
        let d = optimal_d(&p, &p).unwrap();
        for &v in &d {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let value = game_value(&p, &p, &d).unwrap();
        assert!((value + LOG4).abs() < 1e-12, "value {value}");
    }

    #[test]
    fn empty_fake_support_pushes_d_to_one() {
        let p_real = TabularJoint::new(1, 2, vec![1.0, 0.0]).unwrap();
        let p_fake = TabularJoint::new(1, 2, vec![0.0, 1.0]).unwrap();
        let d = optimal_d(&p_real, &p_fake).unwrap();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn zero_zero_cells_sit_at_half() {
        let p_real = TabularJoint::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let p_fake = TabularJoint::new(1, 3, vec![0.5, 0.5, 0.0]).unwrap();
        let d = optimal_d(&p_real, &p_fake).unwrap();
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn optimal_d_matches_duplicate_formula_oracle() {
        for t in 0..20 {
            let p_real = TabularJoint::random(4, 2, 17, t);
            let p_fake = TabularJoint::random(4, 2, 18, t);
            let d = optimal_d(&p_real, &p_fake).unwrap();
            // independent evaluation of the same closed form
            for i in 0..d.len() {
                let r = p_real.cells()[i];
                let f = p_fake.cells()[i];
                let expect = r / (r + f);
                assert!((d[i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn value_at_optimum_is_locally_maximal() {
        let p_real = TabularJoint::random(3, 3, 5, 0);
        let p_fake = TabularJoint::random(3, 3, 6, 0);
        let d = optimal_d(&p_real, &p_fake).unwrap();
        let base = game_value(&p_real, &p_fake, &d).unwrap();
        let mut r = rng::derive(9, "perturb", 0);
        for _ in 0..100 {
            let perturbed: Vec<f64> = d
                .iter()
                .map(|&v| (v + r.random_range(-1e-3..1e-3)).clamp(1e-9, 1.0 - 1e-9))
                .collect();
            let v = game_value(&p_real, &p_fake, &perturbed).unwrap();
            assert!(v <= base + 1e-12, "perturbation beat the optimum: {v} > {base}");
        }
    }

    #[test]
    fn value_decomposes_into_log4_plus_twice_jsd() {
        for t in 0..50 {
            let p_real = TabularJoint::random(4, 2, 21, t);
            let p_fake = TabularJoint::random(4, 2, 22, t);
            let d = optimal_d(&p_real, &p_fake).unwrap();
            let v = game_value(&p_real, &p_fake, &d).unwrap();
            let expect = -LOG4 + 2.0 * jsd(&p_real, &p_fake).unwrap();
            assert!((v - expect).abs() < 1e-10, "gap {}", (v - expect).abs());
        }
    }

    #[test]
    fn ascent_fixed_point_at_equal_distributions() {
        let p = TabularJoint::random(2, 2, 33, 0);
        let d = train_tabular_d(&p, &p, 100).unwrap();
        for &v in &d {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn ascent_converges_to_closed_form() {
        for t in 0..10 {
            let p_real = TabularJoint::random(4, 2, 41, t);
            let p_fake = TabularJoint::random(4, 2, 42, t);
            let opt = optimal_d(&p_real, &p_fake).unwrap();
            let d = train_tabular_d(&p_real, &p_fake, 10_000).unwrap();
            let max_dev = d
                .iter()
                .zip(&opt)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-4, "max deviation {max_dev}");
        }
    }

    #[test]
    fn ascent_is_monotone() {
        let p_real = TabularJoint::random(3, 2, 51, 0);
        let p_fake = TabularJoint::random(3, 2, 52, 0);
        let mut u = vec![0.0; p_real.len()];
        let mut last = f64::NEG_INFINITY;
        for _ in 0..200 {
            let d: Vec<f64> = u.iter().map(|&x| crate::autodiff::sigmoid(x)).collect();
            let v = game_value(&p_real, &p_fake, &d).unwrap();
            assert!(v >= last - 1e-12, "value dropped {last} -> {v}");
            last = v;
            for i in 0..u.len() {
                let (r, f) = (p_real.cells()[i], p_fake.cells()[i]);
                let mass = r + f;
                if mass <= 0.0 {
                    continue;
                }
                let di = crate::autodiff::sigmoid(u[i]);
                u[i] += (r * (1.0 - di) - f * di) / mass;
            }
        }
    }

    #[test]
    fn equilibrium_is_global_minimum_over_fake_grid() {
        // 3-cell tables: sweep p_fake over a simplex grid, value at the
        // optimal discriminator is minimized exactly at p_fake = p_real
        let p_real = TabularJoint::new(1, 3, vec![0.5, 0.3, 0.2]).unwrap();
        let d = optimal_d(&p_real, &p_real).unwrap();
        let base = game_value(&p_real, &p_real, &d).unwrap();
        assert!((base + LOG4).abs() < 1e-12);
        let steps = 40;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let a = i as f64 / steps as f64;
                let b = j as f64 / steps as f64;
                let mut cells = vec![a, b, 1.0 - a - b];
                let sum: f64 = cells.iter().sum();
                cells[2] += 1.0 - sum;
                if cells[2] < 0.0 {
                    continue;
                }
                let p_fake = TabularJoint::new(1, 3, cells.clone()).unwrap();
                let d = optimal_d(&p_real, &p_fake).unwrap();
                let v = game_value(&p_real, &p_fake, &d).unwrap();
                assert!(v >= base - 1e-12);
                let same = cells
                    .iter()
                    .zip(p_real.cells())
                    .all(|(x, y)| (x - y).abs() < 1e-9);
                if !same {
                    assert!(v > base - 1e-12);
                }
            }
        }
    }
}
