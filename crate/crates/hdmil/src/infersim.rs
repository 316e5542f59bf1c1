//! Three-step efficient inference plus a fixed-plus-per-patch staged cost
//! model, quantifying the time saved by pre-screening as a function of the
//! realized retention ratio.
//!
//! Timing is simulated through the calibrated cost model, never measured:
//! the pipeline here has no real slide I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cka::dual_branch_predict;
use crate::datamodel::BagPair;
use crate::dmin::{
    build_dmin_forward, gated_attention, project, student_aggregate_with_fallback, DminHyper,
    DminParams, MaskKind,
};
use crate::error::{Error, Result};
use crate::lipn::{lipn_eval, LipnParams};
use crate::tape::Tape;

pub const STAGE_NAMES: [&str; 4] = ["screen", "crop", "feature", "classify"];

/// Fixed-plus-per-patch cost of one inference stage, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub fixed: f64,
    pub per_patch: f64,
}

impl StageCost {
    pub fn of(&self, patches: usize) -> f64 {
        self.fixed + self.per_patch * patches as f64
    }
}

/// Costs of the four stages: pre-screening, cropping, feature extraction,
/// bag classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCostModel {
    pub screen: StageCost,
    pub crop: StageCost,
    pub feature: StageCost,
    pub classify: StageCost,
}

impl StageCostModel {
    pub fn zero() -> Self {
        let z = StageCost {
            fixed: 0.0,
            per_patch: 0.0,
        };
        StageCostModel {
            screen: z,
            crop: z,
            feature: z,
            classify: z,
        }
    }

    pub fn stages(&self) -> [StageCost; 4] {
        [self.screen, self.crop, self.feature, self.classify]
    }

    pub fn validate(&self) -> Result<()> {
        for (s, name) in self.stages().iter().zip(STAGE_NAMES) {
            if s.fixed < 0.0 || s.per_patch < 0.0 || !s.fixed.is_finite() || !s.per_patch.is_finite()
            {
                return Err(Error::InvalidConfig(format!(
                    "stage {name} has negative or non-finite cost"
                )));
            }
        }
        Ok(())
    }

    /// Pre-screened pipeline: all patches scanned, only kept ones processed.
    pub fn hdmil_breakdown(&self, n_total: usize, n_kept: usize) -> [f64; 4] {
        [
            self.screen.of(n_total),
            self.crop.of(n_kept),
            self.feature.of(n_kept),
            self.classify.of(n_kept),
        ]
    }

    /// Plain pipeline: no screening stage, every patch processed.
    pub fn dmin_only_breakdown(&self, n_total: usize) -> [f64; 4] {
        [
            0.0,
            self.crop.of(n_total),
            self.feature.of(n_total),
            self.classify.of(n_total),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("cost model serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: StageCostModel = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }
}

/// Outcome of one simulated inference run.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub logits: [f64; 2],
    pub kept_indices: Vec<usize>,
    /// Kept fraction of the instances that drive the per-patch stages. For the
    /// plain pipeline this is the union-mask retention of the deterministic
    /// masks (everything still passes the feature path).
    pub r_realized: f64,
    pub simulated_time: f64,
    pub stage_times: [f64; 4],
    /// Set when the pre-screen kept nothing and the top-scored instance per
    /// branch was pulled in instead.
    pub empty_fallback: bool,
    /// Branches whose mask kept nothing within the processed set and fell
    /// back to unmasked attention weights.
    pub degenerate_branches: [bool; 2],
}

/// Which branch classifies in the plain (no pre-screening) pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferBranch {
    #[default]
    Student,
    Teacher,
}

/// How the student branch treats instances that survived pre-screening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeptMaskRule {
    /// Use the per-branch pre-screen masks restricted to the kept set.
    #[default]
    PerBranch,
    /// Treat every kept instance as mask one in both branches.
    AllOnes,
}

/// Classify a subset of high-resolution rows with the student branch under
/// the given per-branch masks.
fn classify_subset(
    dmin: &DminParams,
    rows: &Array2<f64>,
    masks: &Array2<f64>,
) -> Result<([f64; 2], [bool; 2])> {
    let mut t = Tape::new();
    let vars = dmin.register(&mut t);
    let x = t.leaf(rows.clone());
    let f = project(&mut t, x, vars.proj_w, vars.proj_b)?;
    let attn = gated_attention(&mut t, f, vars.attn_v, vars.attn_u, vars.attn_w)?;
    let mask = t.leaf(masks.clone());
    let (e_stu, degenerate) = student_aggregate_with_fallback(&mut t, f, attn, mask);
    let logits = dual_branch_predict(&mut t, e_stu, &vars.heads)?;
    let l = t.value(logits);
    Ok(([l[(0, 0)], l[(0, 1)]], degenerate))
}

/// Pre-screened inference: score all low-resolution instances, keep the union
/// of the branch masks, and classify only the kept high-resolution rows.
pub fn infer_hdmil(
    bag: &BagPair,
    dmin: &DminParams,
    lipn: &LipnParams,
    hyper: &DminHyper,
    costs: &StageCostModel,
    rule: KeptMaskRule,
) -> Result<InferenceResult> {
    let n = bag.n_instances();
    let screen = lipn_eval(lipn, hyper.gamma, bag.lo_features.array())?;
    let mut kept = screen.masks.union_kept_indices();
    let mut empty_fallback = false;
    if kept.is_empty() {
        // keep the top-scored instance per branch
        empty_fallback = true;
        let mut fallback = Vec::new();
        for c in 0..2 {
            let best = (0..n)
                .max_by(|&a, &b| {
                    screen.probs[(a, c)]
                        .partial_cmp(&screen.probs[(b, c)])
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap();
            fallback.push(best);
        }
        fallback.sort_unstable();
        fallback.dedup();
        kept = fallback;
    }

    let hi = bag.hi_features.array();
    let mut rows = Array2::zeros((kept.len(), hi.ncols()));
    let mut masks = Array2::zeros((kept.len(), 2));
    for (i, &idx) in kept.iter().enumerate() {
        rows.row_mut(i).assign(&hi.row(idx));
        for c in 0..2 {
            masks[(i, c)] = match rule {
                KeptMaskRule::PerBranch => {
                    if empty_fallback {
                        1.0
                    } else {
                        screen.masks.hard[(idx, c)]
                    }
                }
                KeptMaskRule::AllOnes => 1.0,
            };
        }
    }

    let (logits, degenerate_branches) = classify_subset(dmin, &rows, &masks)?;
    let stage_times = costs.hdmil_breakdown(n, kept.len());
    Ok(InferenceResult {
        logits,
        r_realized: kept.len() as f64 / n as f64,
        kept_indices: kept,
        simulated_time: stage_times.iter().sum(),
        stage_times,
        empty_fallback,
        degenerate_branches,
    })
}

/// Plain inference without pre-screening: every instance passes the feature
/// path; deterministic eval-mode masks feed the student branch (or the
/// teacher branch classifies directly).
pub fn infer_dmin_only(
    bag: &BagPair,
    dmin: &DminParams,
    hyper: &DminHyper,
    costs: &StageCostModel,
    branch: InferBranch,
) -> Result<InferenceResult> {
    let n = bag.n_instances();
    let mut t = Tape::new();
    let vars = dmin.register(&mut t);
    let graph = build_dmin_forward(&mut t, &vars, bag.hi_features.array(), hyper, None, MaskKind::Hard)?;
    let logits_var = match branch {
        InferBranch::Student => graph.logits_stu,
        InferBranch::Teacher => graph.logits_tea,
    };
    let l = t.value(logits_var);
    let mask_hard = t.value(graph.mask);
    let kept_indices: Vec<usize> = (0..n)
        .filter(|&j| mask_hard[(j, 0)] > 0.0 || mask_hard[(j, 1)] > 0.0)
        .collect();
    let r_realized = kept_indices.len() as f64 / n as f64;
    let stage_times = costs.dmin_only_breakdown(n);
    Ok(InferenceResult {
        logits: [l[(0, 0)], l[(0, 1)]],
        kept_indices,
        r_realized,
        simulated_time: stage_times.iter().sum(),
        stage_times,
        empty_fallback: false,
        degenerate_branches: graph.degenerate,
    })
}

/// Fit fixed and per-patch costs from paired baseline/pre-screened stage
/// times at a known keep fraction (patch counts normalized to 1).
///
/// The screening stage is special: the baseline pipeline never runs it, so
/// its whole reduced-pipeline time is attributed to per-patch work over the
/// full patch count.
pub fn calibrate_costs(
    baseline_times: [f64; 4],
    reduced_times: [f64; 4],
    keep_fraction: f64,
) -> Result<StageCostModel> {
    if !(0.0 < keep_fraction && keep_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep fraction must be in (0, 1), got {keep_fraction}"
        )));
    }
    if baseline_times[0] != 0.0 {
        return Err(Error::InvalidConfig(
            "baseline pipeline has no screening stage; its screen time must be 0".into(),
        ));
    }
    let mut stages = [StageCost {
        fixed: 0.0,
        per_patch: reduced_times[0],
    }; 4];
    for i in 1..4 {
        let (baseline, reduced) = (baseline_times[i], reduced_times[i]);
        if reduced > baseline {
            return Err(Error::CalibrationInfeasible {
                stage: STAGE_NAMES[i].into(),
                fixed: baseline - reduced,
            });
        }
        let per_patch = (baseline - reduced) / (1.0 - keep_fraction);
        let fixed = baseline - per_patch;
        if fixed < -1e-9 {
            return Err(Error::CalibrationInfeasible {
                stage: STAGE_NAMES[i].into(),
                fixed,
            });
        }
        stages[i] = StageCost {
            fixed: fixed.max(0.0),
            per_patch,
        };
    }
    Ok(StageCostModel {
        screen: stages[0],
        crop: stages[1],
        feature: stages[2],
        classify: stages[3],
    })
}

/// One row of the retention sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub r: f64,
    pub mean_realized_retention: f64,
    pub mean_dmin_union_retention: f64,
    pub mean_auc: f64,
    pub mean_time_hdmil: f64,
    pub mean_time_dmin_only: f64,
}

/// Evaluate trained (DMIN, LIPN) pairs per preset retention ratio over a bag
/// set, recording realized retention, AUC, and simulated times.
pub fn sweep_retention(
    bags: &[&BagPair],
    models: &[(f64, DminParams, LipnParams, DminHyper)],
    costs: &StageCostModel,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(models.len());
    for (r, dmin, lipn, hyper) in models {
        let mut retention = 0.0;
        let mut dmin_retention = 0.0;
        let mut time_hdmil = 0.0;
        let mut time_plain = 0.0;
        let mut scores = Vec::with_capacity(bags.len());
        let mut labels = Vec::with_capacity(bags.len());
        for bag in bags {
            let res = infer_hdmil(bag, dmin, lipn, hyper, costs, KeptMaskRule::PerBranch)?;
            let plain = infer_dmin_only(bag, dmin, hyper, costs, InferBranch::Student)?;
            retention += res.r_realized;
            dmin_retention += plain.r_realized;
            time_hdmil += res.simulated_time;
            time_plain += plain.simulated_time;
            scores.push(crate::tape::sigmoid(res.logits[1] - res.logits[0]));
            labels.push(bag.label);
        }
        let n = bags.len() as f64;
        rows.push(SweepRow {
            r: *r,
            mean_realized_retention: retention / n,
            mean_dmin_union_retention: dmin_retention / n,
            mean_auc: crate::trainer::compute_auc(&scores, &labels)?,
            mean_time_hdmil: time_hdmil / n,
            mean_time_dmin_only: time_plain / n,
        });
    }
    Ok(rows)
}

/// Per-bag inference CSV: id, label, logits, realized retention, stage times.
pub fn write_inference_csv(rows: &[(String, u8, InferenceResult)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "id,label,logit0,logit1,r_realized,screen_s,crop_s,feature_s,classify_s,total_s,empty_fallback"
    )?;
    for (id, label, res) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            id,
            label,
            res.logits[0],
            res.logits[1],
            res.r_realized,
            res.stage_times[0],
            res.stage_times[1],
            res.stage_times[2],
            res.stage_times[3],
            res.simulated_time,
            res.empty_fallback as u8,
        )?;
    }
    w.flush()?;
    Ok(())
}
