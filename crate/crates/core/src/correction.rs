//! Corrected log-covariates `log(W + z)` and the zero-replacement baseline.
//!
//! No division by the sequencing depth happens here: `log((W + z)/N_i)`
//! differs from `log(W + z)` by a per-row constant, and any per-row constant
//! is annihilated once the design is projected onto the null space of a
//! constraint that contains `1_p`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};

/// Error distribution assumed for non-multinomial count-like covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// `W ~ Poisson(nu)`: `log(W + 1/2)`.
    Poisson,
    /// `W ~ N(nu, gamma * nu)`: `log(max(W + gamma/2, 1))`.
    Normal { gamma: f64 },
    /// `W ~ Gamma(shape = nu, scale = gamma)`: `log(W + gamma/2)`.
    Gamma { gamma: f64 },
}

impl Family {
    fn check(&self) -> Result<()> {
        match *self {
            Family::Poisson => Ok(()),
            Family::Normal { gamma } | Family::Gamma { gamma } => {
                if gamma > 0.0 && gamma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("gamma must be positive, got {gamma}")))
                }
            }
        }
    }

    fn shift(&self) -> f64 {
        match *self {
            Family::Poisson => 0.5,
            Family::Normal { gamma } | Family::Gamma { gamma } => gamma / 2.0,
        }
    }

    /// The correction function applied to a single observation.
    pub fn apply(&self, w: f64) -> f64 {
        match self {
            Family::Normal { .. } => (w + self.shift()).max(1.0).ln(),
            _ => (w + self.shift()).ln(),
        }
    }
}

/// How a design matrix was derived from the observed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectionRecipe {
    /// `log(W + 1/2)`.
    MultinomialHalf,
    /// `log(W + (N_i + alpha_i + 1) / (2 (alpha_i + 1)))`.
    DirichletMultinomial {
        #[serde(with = "crate::serde_inf::vec")]
        alpha: Vec<f64>,
    },
    General { family: Family },
    /// `log(max(W, c))`.
    ZeroReplace { c: f64 },
    /// `log X` from known compositions (simulation only).
    OracleLogComposition,
}

impl CorrectionRecipe {
    pub fn label(&self) -> String {
        match self {
            CorrectionRecipe::MultinomialHalf => "vc_half".into(),
            CorrectionRecipe::DirichletMultinomial { .. } => "vc_dm".into(),
            CorrectionRecipe::General { family } => match family {
                Family::Poisson => "general_poisson".into(),
                Family::Normal { gamma } => format!("general_normal_{gamma}"),
                Family::Gamma { gamma } => format!("general_gamma_{gamma}"),
            },
            CorrectionRecipe::ZeroReplace { c } => format!("zr{c}"),
            CorrectionRecipe::OracleLogComposition => "oracle".into(),
        }
    }
}

/// A corrected design with the recipe and per-row offsets that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectedDesign {
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub recipe: CorrectionRecipe,
    /// Additive offset `z_i` per row (the replacement constant for zero
    /// replacement, zero for the oracle design).
    pub offsets: Vec<f64>,
    pub note: String,
}

/// Dirichlet-multinomial offset `z = (N + alpha + 1) / (2 (alpha + 1))`,
/// equal to `1/2` in the multinomial limit `alpha = inf`.
pub fn dm_offset(total: u64, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        0.5
    } else {
        (total as f64 + alpha + 1.0) / (2.0 * (alpha + 1.0))
    }
}

fn additive(counts: &CountMatrix, offsets: &[f64]) -> DMatrix<f64> {
    let (n, p) = (counts.nrows(), counts.ncols());
    DMatrix::from_fn(n, p, |i, j| (counts.get(i, j) as f64 + offsets[i]).ln())
}

/// Deterministic spot check of `matrix[i][j] == log(W_ij + z_i)` on ten cells.
fn spot_check(counts: &CountMatrix, design: &CorrectedDesign) -> Result<()> {
    let (n, p) = (counts.nrows(), counts.ncols());
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15 ^ ((n as u64) << 32 | p as u64);
    for _ in 0..10 {
        state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        let i = ((state >> 33) as usize) % n;
        let j = ((state >> 7) as usize) % p;
        let expected = (counts.get(i, j) as f64 + design.offsets[i]).ln();
        if design.matrix[(i, j)].to_bits() != expected.to_bits() {
            return Err(Error::Numerical(format!("corrected design mismatch at ({i}, {j})")));
        }
    }
    Ok(())
}

/// `log(W + 1/2)`.
pub fn correct_multinomial(counts: &CountMatrix) -> CorrectedDesign {
    let offsets = vec![0.5; counts.nrows()];
    let design = CorrectedDesign {
        matrix: additive(counts, &offsets),
        recipe: CorrectionRecipe::MultinomialHalf,
        offsets,
        note: "log(W + 1/2)".into(),
    };
    debug_assert!(spot_check(counts, &design).is_ok());
    design
}

/// `log(W + z_i)` with the overdispersion-dependent offset.
pub fn correct_dirichlet_multinomial(counts: &CountMatrix, alpha: &[f64]) -> Result<CorrectedDesign> {
    if alpha.len() != counts.nrows() {
        return Err(Error::invalid(format!(
            "{} alpha values for {} samples",
            alpha.len(),
            counts.nrows()
        )));
    }
    if let Some(i) = alpha.iter().position(|&a| !(a > 0.0)) {
        return Err(Error::invalid(format!("alpha[{i}] = {} is not positive", alpha[i])));
    }
    let offsets: Vec<f64> = counts
        .row_totals()
        .iter()
        .zip(alpha)
        .map(|(&n, &a)| dm_offset(n, a))
        .collect();
    let design = CorrectedDesign {
        matrix: additive(counts, &offsets),
        recipe: CorrectionRecipe::DirichletMultinomial { alpha: alpha.to_vec() },
        offsets,
        note: "log(W + (N + alpha + 1) / (2 (alpha + 1)))".into(),
    };
    spot_check(counts, &design)?;
    Ok(design)
}

/// Elementwise correction for real-valued observations under `family`.
pub fn correct_general(observations: &DMatrix<f64>, family: Family) -> Result<CorrectedDesign> {
    family.check()?;
    if let Some(v) = observations.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite observation {v}")));
    }
    let matrix = observations.map(|w| family.apply(w));
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "correction produced a non-finite value (observation below -shift)",
        ));
    }
    Ok(CorrectedDesign {
        matrix,
        recipe: CorrectionRecipe::General { family },
        offsets: vec![family.shift(); observations.nrows()],
        note: match family {
            Family::Normal { .. } => "log(max(W + gamma/2, 1))".into(),
            _ => "log(W + shift)".into(),
        },
    })
}

/// Zero-replacement baseline `log(max(W, c))`.
pub fn zero_replace(counts: &CountMatrix, c: f64) -> Result<CorrectedDesign> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("replacement constant must be positive, got {c}")));
    }
    let (n, p) = (counts.nrows(), counts.ncols());
    let matrix = DMatrix::from_fn(n, p, |i, j| (counts.get(i, j) as f64).max(c).ln());
    Ok(CorrectedDesign {
        matrix,
        recipe: CorrectionRecipe::ZeroReplace { c },
        offsets: vec![c; n],
        note: "log(max(W, c)); only zero counts are replaced".into(),
    })
}

/// `log X` for known compositions.
pub fn oracle_log_composition(compositions: &DMatrix<f64>) -> Result<CorrectedDesign> {
    if compositions.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("compositions must be strictly positive"));
    }
    Ok(CorrectedDesign {
        matrix: compositions.map(f64::ln),
        recipe: CorrectionRecipe::OracleLogComposition,
        offsets: vec![0.0; compositions.nrows()],
        note: "log of the true compositions".into(),
    })
}

/// Applies a count-based recipe.
pub fn correct(counts: &CountMatrix, recipe: &CorrectionRecipe) -> Result<CorrectedDesign> {
    match recipe {
        CorrectionRecipe::MultinomialHalf => Ok(correct_multinomial(counts)),
        CorrectionRecipe::DirichletMultinomial { alpha } => correct_dirichlet_multinomial(counts, alpha),
        CorrectionRecipe::General { family } => correct_general(&counts.to_f64(), *family),
        CorrectionRecipe::ZeroReplace { c } => zero_replace(counts, *c),
        CorrectionRecipe::OracleLogComposition => Err(Error::invalid(
            "the oracle design needs the true compositions, not counts",
        )),
    }
}
