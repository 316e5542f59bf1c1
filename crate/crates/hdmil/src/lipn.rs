//! Lightweight instance pre-screening network over low-resolution features.
//!
//! A two-layer per-instance scorer producing dual-branch keep probabilities in
//! (0, 1). It is trained by cross-distillation from frozen DMIN masks
//! (mask-to-mask by default; attention regression as an ablation arm).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;

use crate::datamodel::{BagPair, MaskMatrix};
use crate::dmin::{retention_ratio, MaskKind};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Loss weights and thresholds for the cross-distillation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LipnHyper {
    /// Mask-agreement and retention-rate loss weights.
    pub betas: [f64; 2],
    /// Binarization threshold, shared with the DMIN mask threshold.
    pub gamma: f64,
    /// Preset retention ratio.
    pub r: f64,
}

impl Default for LipnHyper {
    fn default() -> Self {
        LipnHyper {
            betas: [1.0, 2.0],
            gamma: 0.5,
            r: 0.5,
        }
    }
}

impl LipnHyper {
    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidConfig("betas must be finite and >= 0".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0 < self.r && self.r <= 1.0) {
            return Err(Error::InvalidConfig(format!("r must be in (0, 1], got {}", self.r)));
        }
        Ok(())
    }
}

/// Trainable arrays: D_lo -> H_lo (ReLU) -> 2 (sigmoid), shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LipnParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl LipnParams {
    pub fn init(d_lo: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::rngutil::stream_rng(seed, &[0x4c_4950_4e]);
        let mut xavier = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        LipnParams {
            w1: xavier(d_lo, hidden),
            b1: Array2::zeros((1, hidden)),
            w2: xavier(hidden, 2),
            b2: Array2::zeros((1, 2)),
        }
    }

    pub fn d_lo(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect()
    }

    pub fn register(&self, t: &mut Tape) -> LipnVars {
        LipnVars {
            w1: t.leaf(self.w1.clone()),
            b1: t.leaf(self.b1.clone()),
            w2: t.leaf(self.w2.clone()),
            b2: t.leaf(self.b2.clone()),
        }
    }
}

pub struct LipnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LipnVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Independent per-instance scoring of low-resolution features: N×2 in (0, 1).
pub fn lipn_forward(t: &mut Tape, lo: Var, vars: &LipnVars) -> Result<Var> {
    if t.value(lo).ncols() != t.value(vars.w1).nrows() {
        return Err(Error::shape(
            "lipn_forward",
            format!("input cols {}", t.value(vars.w1).nrows()),
            format!("{}", t.value(lo).ncols()),
        ));
    }
    let z1 = t.matmul(lo, vars.w1);
    let z1 = t.add_row(z1, vars.b1);
    let h = t.relu(z1);
    let z2 = t.matmul(h, vars.w2);
    let z2 = t.add_row(z2, vars.b2);
    Ok(t.sigmoid(z2))
}

/// Straight-through binarization of the keep probabilities (no noise).
pub fn lipn_binarize(t: &mut Tape, p: Var, gamma: f64, kind: MaskKind) -> Var {
    match kind {
        MaskKind::Hard => t.st_binarize(p, gamma),
        MaskKind::Identity => p,
    }
}

/// Loss terms of the cross-distillation stage.
pub struct LipnLossTerms {
    pub total: Var,
    pub agreement: Var,
    pub rate: Var,
}

/// Hybrid loss against frozen DMIN hard masks:
/// beta1 * mean |M_lr - M_hr| + beta2 * (r_lr - r)^2.
pub fn lipn_loss(
    t: &mut Tape,
    mask_lr: Var,
    m_hr_hard: &Array2<f64>,
    hyper: &LipnHyper,
) -> Result<LipnLossTerms> {
    if t.value(mask_lr).dim() != m_hr_hard.dim() {
        return Err(Error::shape(
            "lipn_loss",
            format!("{:?}", m_hr_hard.dim()),
            format!("{:?}", t.value(mask_lr).dim()),
        ));
    }
    // the per-branch means averaged over the two branches collapse to one
    // grand mean over all N*2 entries
    let target = t.leaf(m_hr_hard.clone());
    let diff = t.sub(mask_lr, target);
    let ad = t.abs(diff);
    let agreement = t.mean_all(ad);

    let r_lr = retention_ratio(t, mask_lr);
    let err = t.add_scalar(r_lr, -hyper.r);
    let rate = t.mul(err, err);

    let w1 = t.scale(agreement, hyper.betas[0]);
    let w2 = t.scale(rate, hyper.betas[1]);
    let total = t.add(w1, w2);
    Ok(LipnLossTerms {
        total,
        agreement,
        rate,
    })
}

/// Per-branch min-max normalization of attention scores to [0, 1]; a constant
/// column normalizes to 0.5.
pub fn normalize_attention(a_hr: &Array2<f64>) -> Array2<f64> {
    let mut out = a_hr.clone();
    for mut col in out.columns_mut() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            col.fill(0.5);
        } else {
            col.mapv_inplace(|v| (v - lo) / (hi - lo));
        }
    }
    out
}

/// Ablation arm: regress keep probabilities onto normalized attention scores.
pub fn attention_regression_loss(t: &mut Tape, p: Var, a_hr: &Array2<f64>) -> Result<Var> {
    if t.value(p).dim() != a_hr.dim() {
        return Err(Error::shape(
            "attention_regression_loss",
            format!("{:?}", a_hr.dim()),
            format!("{:?}", t.value(p).dim()),
        ));
    }
    let target = t.leaf(normalize_attention(a_hr));
    let diff = t.sub(p, target);
    let sq = t.mul(diff, diff);
    Ok(t.mean_all(sq))
}

/// Evaluation outputs for one bag.
#[derive(Debug, Clone)]
pub struct LipnEval {
    pub probs: Array2<f64>,
    pub masks: MaskMatrix,
}

pub fn lipn_eval(params: &LipnParams, gamma: f64, lo: &Array2<f64>) -> Result<LipnEval> {
    let mut t = Tape::new();
    let vars = params.register(&mut t);
    let lov = t.leaf(lo.clone());
    let p = lipn_forward(&mut t, lov, &vars)?;
    let probs = t.value(p).clone();
    Ok(LipnEval {
        masks: MaskMatrix::from_soft(probs.clone(), gamma),
        probs,
    })
}

/// Fraction of entries where two hard masks agree.
pub fn mask_agreement(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let same = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

/// Per-instance keep/discard CSV for one bag.
pub fn export_keep_csv(
    params: &LipnParams,
    gamma: f64,
    bag: &BagPair,
    path: &Path,
) -> Result<()> {
    let eval = lipn_eval(params, gamma, bag.lo_features.array())?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "instance,p1,p2,hard1,hard2,union")?;
    for i in 0..bag.n_instances() {
        let union = if eval.masks.hard[(i, 0)] > 0.0 || eval.masks.hard[(i, 1)] > 0.0 {
            1
        } else {
            0
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i,
            eval.probs[(i, 0)],
            eval.probs[(i, 1)],
            eval.masks.hard[(i, 0)],
            eval.masks.hard[(i, 1)],
            union,
        )?;
    }
    w.flush()?;
    Ok(())
}

pub const LIPN_MAGIC: [u8; 4] = *b"HLPC";
pub const LIPN_VERSION: u16 = 1;

pub fn save_checkpoint(params: &LipnParams, hyper: &LipnHyper, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LIPN_MAGIC)?;
    w.write_all(&LIPN_VERSION.to_le_bytes())?;
    for v in [hyper.betas[0], hyper.betas[1], hyper.gamma, hyper.r] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(params.d_lo() as u32).to_le_bytes())?;
    w.write_all(&(params.hidden() as u32).to_le_bytes())?;
    for a in params.arrays() {
        w.write_all(&(a.nrows() as u32).to_le_bytes())?;
        w.write_all(&(a.ncols() as u32).to_le_bytes())?;
        for &v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(LipnParams, LipnHyper)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != LIPN_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != LIPN_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: LIPN_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let beta1 = read_f64(&mut r)?;
    let beta2 = read_f64(&mut r)?;
    let gamma = read_f64(&mut r)?;
    let rr = read_f64(&mut r)?;
    let mut b4 = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let d_lo = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let mut params = LipnParams::init(d_lo, hidden, 0);
    for target in params.arrays_mut() {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if (rows, cols) != target.dim() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("array shape {rows}x{cols} does not match {:?}", target.dim()),
            });
        }
        let mut data = Array2::zeros((rows, cols));
        for i in 0..rows * cols {
            data[(i / cols, i % cols)] = read_f64(&mut r)?;
        }
        *target = data;
    }
    Ok((
        params,
        LipnHyper {
            betas: [beta1, beta2],
            gamma,
            r: rr,
        },
    ))
}
