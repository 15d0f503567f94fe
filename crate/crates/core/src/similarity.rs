//! HSIC and centered kernel alignment between two sets of representations.
//!
//! Both inputs hold one sample per row over the *same* samples; their
//! feature widths may differ. The layer score used for pruning is
//! `1 − CKA`, so a candidate whose removal leaves the representation
//! unchanged scores 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_gram, frob_inner, gram_linear, transpose_matmul, GramMatrix, Matrix};

/// Largest tolerated excess of CKA over 1 before clamping.
pub const OVERSHOOT_TOL: f64 = 1e-9;

/// Relative threshold below which a self-HSIC is treated as zero.
///
/// A representation is degenerate when `HSIC(K, K) <= DEGENERATE_REL ·
/// (‖K‖_F / (n−1))²`, i.e. when centering wipes out essentially all of the
/// kernel's energy. This is the case for constant representations.
pub const DEGENERATE_REL: f64 = 1e-12;

/// Bandwidth for the RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

/// Kernel used inside HSIC.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelKind {
    #[default]
    Linear,
    Rbf { bandwidth: Bandwidth },
}

impl KernelKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelKind::Rbf {
                bandwidth: Bandwidth::Fixed(s),
            } if !(s.is_finite() && *s > 0.0) => Err(Error::Config(format!(
                "rbf bandwidth must be positive, got {s}"
            ))),
            _ => Ok(()),
        }
    }
}

/// CKA value together with its pruning score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub cka: f64,
    pub score: f64,
    pub degenerate: bool,
}

impl SimilarityScore {
    fn from_raw(raw: f64, degenerate: bool) -> Result<Self> {
        if degenerate {
            return Ok(Self {
                cka: 0.0,
                score: 1.0,
                degenerate: true,
            });
        }
        if !raw.is_finite() {
            return Err(Error::NonFinite("cka"));
        }
        if raw > 1.0 + OVERSHOOT_TOL {
            return Err(Error::CkaOvershoot(raw - 1.0));
        }
        let cka = raw.clamp(0.0, 1.0);
        Ok(Self {
            cka,
            score: 1.0 - cka,
            degenerate: false,
        })
    }
}

/// Biased HSIC estimator `tr(K·H·L·H) / (n−1)²`.
pub fn hsic_biased(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.n() != l.n() {
        return Err(Error::Shape {
            op: "hsic",
            left: k.matrix().shape(),
            right: l.matrix().shape(),
        });
    }
    let n = k.n();
    if n < 2 {
        return Err(Error::TooFewSamples("hsic", n));
    }
    // tr(KHLH) = <HKH, HLH>_F since H is symmetric idempotent.
    let kc = center_gram(k);
    let lc = center_gram(l);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(frob_inner(kc.matrix(), lc.matrix())? / denom)
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "cka",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::TooFewSamples("cka", x.rows()));
    }
    if x.data().iter().chain(y.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cka input"));
    }
    Ok(())
}

/// Gram matrix of `x` under `kernel`.
pub fn gram(x: &Matrix, kernel: KernelKind) -> Result<GramMatrix> {
    match kernel {
        KernelKind::Linear => gram_linear(x),
        KernelKind::Rbf { bandwidth } => gram_rbf(x, bandwidth),
    }
}

fn sq_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.set(i, j, s);
            d.set(j, i, s);
        }
    }
    d
}

/// Median of the pairwise Euclidean distances between rows (`i < j`).
pub fn median_pairwise_distance(x: &Matrix) -> f64 {
    let d = sq_distances(x);
    let n = x.rows();
    let mut all: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j).sqrt())
        .collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    }
}

/// RBF Gram matrix `exp(−‖xᵢ − xⱼ‖² / (2σ²))`.
pub fn gram_rbf(x: &Matrix, bandwidth: Bandwidth) -> Result<GramMatrix> {
    if x.rows() < 2 {
        return Err(Error::TooFewSamples("gram_rbf", x.rows()));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::Config(format!("rbf bandwidth must be positive, got {s}")))
        }
        Bandwidth::MedianHeuristic => {
            let med = median_pairwise_distance(x);
            // All-equal rows give median 0; any positive σ yields the same
            // all-ones kernel, which is flagged degenerate downstream.
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let d = sq_distances(x);
    let denom = 2.0 * sigma * sigma;
    let n = x.rows();
    let k = Matrix::from_fn(n, n, |i, j| (-d.get(i, j) / denom).exp());
    Ok(GramMatrix::new_unchecked(k))
}

fn is_degenerate(self_hsic: f64, k_norm: f64, n: usize) -> bool {
    let scale = k_norm / (n - 1) as f64;
    self_hsic <= DEGENERATE_REL * scale * scale
}

/// CKA computed from Gram matrices, as the ratio of HSIC terms.
pub fn cka(x: &Matrix, y: &Matrix, kernel: KernelKind) -> Result<SimilarityScore> {
    check_pair(x, y)?;
    kernel.validate()?;
    let n = x.rows();
    let kx = gram(x, kernel)?;
    let ky = gram(y, kernel)?;
    let hxy = hsic_biased(&kx, &ky)?;
    let hxx = hsic_biased(&kx, &kx)?;
    let hyy = hsic_biased(&ky, &ky)?;
    let degenerate = is_degenerate(hxx, kx.matrix().frobenius_norm(), n)
        || is_degenerate(hyy, ky.matrix().frobenius_norm(), n);
    SimilarityScore::from_raw(hxy / (hxx * hyy).sqrt(), degenerate)
}

/// Linear CKA in feature space: `‖ȳᵀx̄‖²_F / (‖x̄ᵀx̄‖_F · ‖ȳᵀȳ‖_F)` on
/// column-centred inputs. Same value as `cka(x, y, Linear)` at
/// `O(n·dx·dy)` cost.
pub fn cka_linear_feature(x: &Matrix, y: &Matrix) -> Result<SimilarityScore> {
    check_pair(x, y)?;
    let n = x.rows();
    let xc = x.center_columns();
    let yc = y.center_columns();
    let cross = cross_product(&yc, &xc);
    let xx = cross_product(&xc, &xc);
    let yy = cross_product(&yc, &yc);
    let num = cross.data().iter().map(|v| v * v).sum::<f64>();
    let nx = xx.frobenius_norm();
    let ny = yy.frobenius_norm();
    // ‖xxᵀ‖_F = ‖xᵀx‖_F, so the degeneracy test matches the Gram route.
    let denom = ((n - 1) * (n - 1)) as f64;
    let degenerate = is_degenerate(nx * nx / denom, cross_product(x, x).frobenius_norm(), n)
        || is_degenerate(ny * ny / denom, cross_product(y, y).frobenius_norm(), n);
    SimilarityScore::from_raw(num / (nx * ny), degenerate)
}

fn cross_product(a: &Matrix, b: &Matrix) -> Matrix {
    transpose_matmul(a, b).expect("row counts checked")
}

/// Pruning score of a candidate: `1 − CKA(r, r_pruned)`.
///
/// The linear kernel goes through the feature-space route, which is cheaper
/// when the sample count exceeds the representation width.
pub fn layer_score(r: &Matrix, r_pruned: &Matrix, kernel: KernelKind) -> Result<SimilarityScore> {
    match kernel {
        KernelKind::Linear => cka_linear_feature(r, r_pruned),
        _ => cka(r, r_pruned, kernel),
    }
}
