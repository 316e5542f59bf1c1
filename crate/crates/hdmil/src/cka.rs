//! Classifier heads for the dual-branch bag representations.
//!
//! The main head contracts a Chebyshev polynomial basis of the tanh-squashed
//! bag representation against learnable coefficients. FC, MLP, and a
//! piecewise-linear KA stand-in are available as ablation baselines.

use ndarray::Array2;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::normal;
use crate::tape::{Tape, Var};

/// Tolerance for the Chebyshev domain guard; inputs are clamped afterwards.
const DOMAIN_TOL: f64 = 1e-9;

/// Learnable coefficients of one Chebyshev head: `omega[o]` is Q×(K+1).
#[derive(Debug, Clone, PartialEq)]
pub struct CkaParams {
    pub omega: Vec<Array2<f64>>,
    pub order: usize,
}

impl CkaParams {
    /// Coefficients start at N(0, (1/(Q(K+1)))^2) so initial logits are O(1).
    pub fn init(q: usize, out_dim: usize, order: usize, rng: &mut impl Rng) -> Self {
        assert!(order >= 1, "Chebyshev order must be >= 1");
        let std = 1.0 / (q * (order + 1)) as f64;
        let omega = (0..out_dim)
            .map(|_| Array2::from_shape_fn((q, order + 1), |_| normal(rng) * std))
            .collect();
        CkaParams { omega, order }
    }

    pub fn out_dim(&self) -> usize {
        self.omega.len()
    }

    pub fn param_count(&self) -> usize {
        self.omega.iter().map(|o| o.len()).sum()
    }
}

/// Chebyshev basis rows T_0..T_K of a 1×Q input, stacked to (K+1)×Q.
///
/// T_0 = 1, T_1 = x, T_k = 2x*T_{k-1} - T_{k-2}. Inputs must lie in [-1, 1]
/// up to a small tolerance.
pub fn chebyshev_basis(t: &mut Tape, x: Var, order: usize) -> Result<Var> {
    let xv = t.value(x);
    debug_assert_eq!(xv.nrows(), 1);
    if let Some(bad) = xv.iter().find(|v| v.abs() > 1.0 + DOMAIN_TOL) {
        return Err(Error::InvalidConfig(format!(
            "Chebyshev input {bad} outside [-1, 1]"
        )));
    }
    let q = xv.ncols();
    let ones = t.leaf(Array2::from_elem((1, q), 1.0));
    if order == 0 {
        return Ok(ones);
    }
    let mut rows = vec![ones, x];
    for k in 2..=order {
        let prod = t.mul(x, rows[k - 1]);
        let doubled = t.scale(prod, 2.0);
        let next = t.sub(doubled, rows[k - 2]);
        rows.push(next);
    }
    Ok(t.concat_rows(&rows))
}

/// Contract basis values against the coefficients: Φ(x)[o] = Σ_k Σ_q T_k(x)[q] Ω[q,o,k].
pub fn cka_forward(t: &mut Tape, x: Var, omega_vars: &[Var], order: usize) -> Result<Var> {
    let basis = chebyshev_basis(t, x, order)?;
    let mut outs = Vec::with_capacity(omega_vars.len());
    for &om in omega_vars {
        let omt = t.transpose(om);
        let prod = t.mul(basis, omt);
        outs.push(t.sum_all(prod));
    }
    Ok(t.concat_cols(&outs))
}

/// Which classifier sits on top of the bag representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Cka,
    Fc,
    Mlp,
    KaSplineLite,
}

impl HeadKind {
    pub fn tag(&self) -> u8 {
        match self {
            HeadKind::Cka => 0,
            HeadKind::Fc => 1,
            HeadKind::Mlp => 2,
            HeadKind::KaSplineLite => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => HeadKind::Cka,
            1 => HeadKind::Fc,
            2 => HeadKind::Mlp,
            3 => HeadKind::KaSplineLite,
            other => return Err(Error::InvalidConfig(format!("unknown head kind tag {other}"))),
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cka" => HeadKind::Cka,
            "fc" => HeadKind::Fc,
            "mlp" => HeadKind::Mlp,
            "ka-spline-lite" => HeadKind::KaSplineLite,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown classifier kind {other:?} (expected cka|fc|mlp|ka-spline-lite)"
                )))
            }
        })
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadKind::Cka => "cka",
            HeadKind::Fc => "fc",
            HeadKind::Mlp => "mlp",
            HeadKind::KaSplineLite => "ka-spline-lite",
        };
        f.write_str(s)
    }
}

/// Grid segments of the KA-spline-lite activation.
pub const PWL_SEGMENTS: usize = 8;

/// Parameters of one per-branch classifier head (Q -> 1).
#[derive(Debug, Clone, PartialEq)]
pub enum BranchHead {
    Cka(CkaParams),
    /// w: Q×1, b: 1×1
    Fc { w: Array2<f64>, b: Array2<f64> },
    /// Q -> Q/2 -> 1 with ReLU
    Mlp {
        w1: Array2<f64>,
        b1: Array2<f64>,
        w2: Array2<f64>,
        b2: Array2<f64>,
    },
    /// Per-dimension piecewise-linear activation over [-1, 1], then summation.
    KaSplineLite { knots: Array2<f64> },
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl BranchHead {
    pub fn init(kind: HeadKind, q: usize, order: usize, rng: &mut impl Rng) -> Self {
        match kind {
            HeadKind::Cka => BranchHead::Cka(CkaParams::init(q, 1, order, rng)),
            HeadKind::Fc => BranchHead::Fc {
                w: xavier(q, 1, rng),
                b: Array2::zeros((1, 1)),
            },
            HeadKind::Mlp => {
                let h = (q / 2).max(1);
                BranchHead::Mlp {
                    w1: xavier(q, h, rng),
                    b1: Array2::zeros((1, h)),
                    w2: xavier(h, 1, rng),
                    b2: Array2::zeros((1, 1)),
                }
            }
            HeadKind::KaSplineLite => {
                // start as a random shallow linear ramp per dimension
                let bound = (3.0 / q as f64).sqrt();
                let knots = Array2::from_shape_fn((q, PWL_SEGMENTS + 1), |(qi, m)| {
                    let _ = qi;
                    let x = -1.0 + 2.0 * m as f64 / PWL_SEGMENTS as f64;
                    x * bound
                });
                let slopes: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut knots = knots;
                for (qi, s) in slopes.iter().enumerate() {
                    for m in 0..=PWL_SEGMENTS {
                        knots[(qi, m)] *= s;
                    }
                }
                BranchHead::KaSplineLite { knots }
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            BranchHead::Cka(_) => HeadKind::Cka,
            BranchHead::Fc { .. } => HeadKind::Fc,
            BranchHead::Mlp { .. } => HeadKind::Mlp,
            BranchHead::KaSplineLite { .. } => HeadKind::KaSplineLite,
        }
    }

    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        match self {
            BranchHead::Cka(p) => p.omega.iter().collect(),
            BranchHead::Fc { w, b } => vec![w, b],
            BranchHead::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            BranchHead::KaSplineLite { knots } => vec![knots],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            BranchHead::Cka(p) => p.omega.iter_mut().collect(),
            BranchHead::Fc { w, b } => vec![w, b],
            BranchHead::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            BranchHead::KaSplineLite { knots } => vec![knots],
        }
    }

    pub fn param_names(&self, branch: usize) -> Vec<String> {
        match self {
            BranchHead::Cka(p) => (0..p.omega.len())
                .map(|o| format!("head{branch}.omega{o}"))
                .collect(),
            BranchHead::Fc { .. } => vec![format!("head{branch}.w"), format!("head{branch}.b")],
            BranchHead::Mlp { .. } => ["w1", "b1", "w2", "b2"]
                .iter()
                .map(|n| format!("head{branch}.{n}"))
                .collect(),
            BranchHead::KaSplineLite { .. } => vec![format!("head{branch}.knots")],
        }
    }

    pub fn register(&self, t: &mut Tape) -> BranchHeadVars {
        let vars = self.arrays().iter().map(|a| t.leaf((*a).clone())).collect();
        BranchHeadVars {
            kind: self.kind(),
            order: match self {
                BranchHead::Cka(p) => p.order,
                _ => 0,
            },
            vars,
        }
    }
}

/// Tape handles for one branch head, in the same order as [`BranchHead::arrays`].
pub struct BranchHeadVars {
    kind: HeadKind,
    order: usize,
    pub vars: Vec<Var>,
}

impl BranchHeadVars {
    /// Score one 1×Q bag representation down to a 1×1 logit.
    pub fn forward(&self, t: &mut Tape, e_row: Var) -> Result<Var> {
        match self.kind {
            HeadKind::Cka => {
                let x = t.tanh(e_row);
                cka_forward(t, x, &self.vars, self.order)
            }
            HeadKind::Fc => {
                let z = t.matmul(e_row, self.vars[0]);
                Ok(t.add(z, self.vars[1]))
            }
            HeadKind::Mlp => {
                let z1 = t.matmul(e_row, self.vars[0]);
                let z1 = t.add_row(z1, self.vars[1]);
                let h = t.relu(z1);
                let z2 = t.matmul(h, self.vars[2]);
                Ok(t.add(z2, self.vars[3]))
            }
            HeadKind::KaSplineLite => {
                let x = t.tanh(e_row);
                let acts = t.pwl(x, self.vars[0], -1.0, 1.0);
                Ok(t.sum_all(acts))
            }
        }
    }
}

/// Dual-branch prediction: logits[c] = head_c(E[c]) for a 2×Q representation.
pub fn dual_branch_predict(
    t: &mut Tape,
    e: Var,
    heads: &[BranchHeadVars; 2],
) -> Result<Var> {
    debug_assert_eq!(t.value(e).nrows(), 2);
    let mut logits = Vec::with_capacity(2);
    for (c, head) in heads.iter().enumerate() {
        let row = t.select_rows(e, vec![c]);
        logits.push(head.forward(t, row)?);
    }
    Ok(t.concat_cols(&logits))
}
