//! The dynamic multi-instance network: projection, dual-branch gated
//! attention, teacher/student aggregation, instance clustering heads, and the
//! hybrid training loss.
//!
//! All forward passes are expressed on the gradient [`Tape`], so training,
//! evaluation, and the finite-difference verification suite share one numeric
//! path. Masks use a straight-through binarization: the forward value is hard
//! 0/1, the backward pass treats binarization as identity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;

use crate::cka::{BranchHead, BranchHeadVars, HeadKind, dual_branch_predict};
use crate::datamodel::{BagPair, MaskMatrix};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Hyper-parameters of the network and its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DminHyper {
    /// Gumbel-sigmoid temperature.
    pub tau: f64,
    /// Binarization threshold (strict `soft > gamma`).
    pub gamma: f64,
    /// Preset retention ratio targeted by the rate loss.
    pub r: f64,
    /// Loss term weights: classification, clustering, representation
    /// distillation, logit distillation, retention rate.
    pub alphas: [f64; 5],
    /// Instances per side in the clustering loss, clamped to N/4.
    pub topk: usize,
}

impl Default for DminHyper {
    fn default() -> Self {
        DminHyper {
            tau: 1.0,
            gamma: 0.5,
            r: 0.5,
            alphas: [0.7, 0.3, 0.5, 0.5, 2.0],
            topk: 8,
        }
    }
}

impl DminHyper {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
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
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidConfig("alphas must be finite and >= 0".into()));
        }
        if self.topk == 0 {
            return Err(Error::InvalidConfig("topk must be >= 1".into()));
        }
        Ok(())
    }

    pub fn self_distill_enabled(&self) -> bool {
        self.alphas[2] != 0.0 || self.alphas[3] != 0.0 || self.alphas[4] != 0.0
    }
}

/// All trainable arrays of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct DminParams {
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub attn_u: Array2<f64>,
    pub attn_w: Array2<f64>,
    /// Per-branch linear instance classifiers (Q -> 2) for the clustering loss.
    pub inst_w: [Array2<f64>; 2],
    pub inst_b: [Array2<f64>; 2],
    /// Per-branch classifier heads on the bag representations.
    pub heads: [BranchHead; 2],
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl DminParams {
    pub fn init(
        d_hi: usize,
        q: usize,
        h: usize,
        head_kind: HeadKind,
        cka_order: usize,
        seed: u64,
    ) -> Self {
        let mut rng = crate::rngutil::stream_rng(seed, &[0x44_4d49_4e]);
        DminParams {
            proj_w: xavier(d_hi, q, &mut rng),
            proj_b: Array2::zeros((1, q)),
            attn_v: xavier(q, h, &mut rng),
            attn_u: xavier(q, h, &mut rng),
            attn_w: xavier(h, 2, &mut rng),
            inst_w: [xavier(q, 2, &mut rng), xavier(q, 2, &mut rng)],
            inst_b: [Array2::zeros((1, 2)), Array2::zeros((1, 2))],
            heads: [
                BranchHead::init(head_kind, q, cka_order, &mut rng),
                BranchHead::init(head_kind, q, cka_order, &mut rng),
            ],
        }
    }

    pub fn d_hi(&self) -> usize {
        self.proj_w.nrows()
    }

    pub fn q(&self) -> usize {
        self.proj_w.ncols()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.heads[0].kind()
    }

    pub fn cka_order(&self) -> usize {
        match &self.heads[0] {
            BranchHead::Cka(p) => p.order,
            _ => 0,
        }
    }

    /// Canonical parameter-array order shared by the optimizer, checkpoints,
    /// and the gradient checker.
    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![
            &self.proj_w,
            &self.proj_b,
            &self.attn_v,
            &self.attn_u,
            &self.attn_w,
            &self.inst_w[0],
            &self.inst_b[0],
            &self.inst_w[1],
            &self.inst_b[1],
        ];
        v.extend(self.heads[0].arrays());
        v.extend(self.heads[1].arrays());
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let [iw0, iw1] = &mut self.inst_w;
        let [ib0, ib1] = &mut self.inst_b;
        let [h0, h1] = &mut self.heads;
        let mut v = vec![
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.attn_v,
            &mut self.attn_u,
            &mut self.attn_w,
            iw0,
            ib0,
            iw1,
            ib1,
        ];
        v.extend(h0.arrays_mut());
        v.extend(h1.arrays_mut());
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "proj_w".to_string(),
            "proj_b".to_string(),
            "attn_v".to_string(),
            "attn_u".to_string(),
            "attn_w".to_string(),
            "inst0.w".to_string(),
            "inst0.b".to_string(),
            "inst1.w".to_string(),
            "inst1.b".to_string(),
        ];
        names.extend(self.heads[0].param_names(0));
        names.extend(self.heads[1].param_names(1));
        names
    }

    /// Register every parameter on a tape.
    pub fn register(&self, t: &mut Tape) -> DminVars {
        DminVars {
            proj_w: t.leaf(self.proj_w.clone()),
            proj_b: t.leaf(self.proj_b.clone()),
            attn_v: t.leaf(self.attn_v.clone()),
            attn_u: t.leaf(self.attn_u.clone()),
            attn_w: t.leaf(self.attn_w.clone()),
            inst_w: [t.leaf(self.inst_w[0].clone()), t.leaf(self.inst_w[1].clone())],
            inst_b: [t.leaf(self.inst_b[0].clone()), t.leaf(self.inst_b[1].clone())],
            heads: [self.heads[0].register(t), self.heads[1].register(t)],
        }
    }
}

/// Tape handles for [`DminParams`], in the same canonical order.
pub struct DminVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub attn_v: Var,
    pub attn_u: Var,
    pub attn_w: Var,
    pub inst_w: [Var; 2],
    pub inst_b: [Var; 2],
    pub heads: [BranchHeadVars; 2],
}

impl DminVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.proj_w,
            self.proj_b,
            self.attn_v,
            self.attn_u,
            self.attn_w,
            self.inst_w[0],
            self.inst_b[0],
            self.inst_w[1],
            self.inst_b[1],
        ];
        v.extend(self.heads[0].vars.iter().copied());
        v.extend(self.heads[1].vars.iter().copied());
        v
    }
}

/// Row-wise affine projection followed by ReLU.
pub fn project(t: &mut Tape, x: Var, proj_w: Var, proj_b: Var) -> Result<Var> {
    if t.value(x).ncols() != t.value(proj_w).nrows() {
        return Err(Error::shape(
            "project",
            format!("input cols {}", t.value(proj_w).nrows()),
            format!("{}", t.value(x).ncols()),
        ));
    }
    let z = t.matmul(x, proj_w);
    let z = t.add_row(z, proj_b);
    Ok(t.relu(z))
}

/// Gated attention scores: A = [tanh(F V) ⊙ sigmoid(F U)] W, one column per branch.
pub fn gated_attention(t: &mut Tape, f: Var, v: Var, u: Var, w: Var) -> Result<Var> {
    if t.value(f).ncols() != t.value(v).nrows() || t.value(f).ncols() != t.value(u).nrows() {
        return Err(Error::shape(
            "gated_attention",
            format!("{} feature cols", t.value(v).nrows()),
            format!("{}", t.value(f).ncols()),
        ));
    }
    let tv = t.matmul(f, v);
    let tv = t.tanh(tv);
    let su = t.matmul(f, u);
    let su = t.sigmoid(su);
    let gated = t.mul(tv, su);
    Ok(t.matmul(gated, w))
}

/// Softmax weights for one branch, optionally masked. The running maximum is
/// subtracted as a constant; softmax shift invariance keeps both the values
/// and the gradients exact.
fn attention_weights(t: &mut Tape, a_col: Var, mask_col: Option<Var>) -> Var {
    let m = t
        .value(a_col)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = t.add_scalar(a_col, -m);
    let e = t.exp(shifted);
    let num = match mask_col {
        Some(mc) => t.mul(e, mc),
        None => e,
    };
    let den = t.sum_all(num);
    t.div_by_scalar(num, den)
}

/// Attention-softmax bag aggregation over all instances.
/// Returns the 2×Q representation and the N×2 weight matrix.
pub fn teacher_aggregate(t: &mut Tape, f: Var, attn: Var) -> (Var, Var) {
    let mut reps = Vec::with_capacity(2);
    let mut weights = Vec::with_capacity(2);
    for c in 0..2 {
        let a_col = t.select_col(attn, c);
        let w = attention_weights(t, a_col, None);
        let wt = t.transpose(w);
        reps.push(t.matmul(wt, f));
        weights.push(w);
    }
    (t.concat_rows(&reps), t.concat_cols(&weights))
}

/// How binarization behaves on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Hard 0/1 forward with straight-through backward (training/inference).
    Hard,
    /// Mask equals the soft score; the loss becomes a smooth function, which
    /// is what central finite differences are checked against.
    Identity,
}

/// Gumbel-sigmoid relaxation and straight-through binarization.
///
/// With `noise` present (training): soft = sigmoid((A + G1 - G2)/tau).
/// Without noise (evaluation): soft = sigmoid(A/tau), fully deterministic.
pub fn gumbel_mask(
    t: &mut Tape,
    attn: Var,
    hyper: &DminHyper,
    noise: Option<&Array2<f64>>,
    kind: MaskKind,
) -> (Var, Var) {
    let logits = match noise {
        Some(g) => {
            debug_assert_eq!(g.dim(), t.value(attn).dim());
            let gv = t.leaf(g.clone());
            t.add(attn, gv)
        }
        None => attn,
    };
    let scaled = t.scale(logits, 1.0 / hyper.tau);
    let soft = t.sigmoid(scaled);
    let mask = match kind {
        MaskKind::Hard => t.st_binarize(soft, hyper.gamma),
        MaskKind::Identity => soft,
    };
    (soft, mask)
}

/// Draw per-entry Gumbel noise differences G1 - G2 for an N×2 attention matrix.
pub fn sample_gumbel_noise(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut gumbel = || -> f64 {
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    };
    Array2::from_shape_fn((n, 2), |_| gumbel() - gumbel())
}

/// Masked-attention bag aggregation over the surviving instances.
///
/// Errors with [`Error::DegenerateMask`] if a branch keeps nothing.
pub fn student_aggregate(t: &mut Tape, f: Var, attn: Var, mask: Var) -> Result<Var> {
    let (rep, degenerate) = student_aggregate_with_fallback(t, f, attn, mask);
    if let Some(branch) = degenerate.iter().position(|&d| d) {
        return Err(Error::DegenerateMask { branch });
    }
    Ok(rep)
}

/// Like [`student_aggregate`], but a branch whose mask is all zero falls back
/// to unmasked teacher weights and is reported instead of failing.
pub fn student_aggregate_with_fallback(
    t: &mut Tape,
    f: Var,
    attn: Var,
    mask: Var,
) -> (Var, [bool; 2]) {
    let mut reps = Vec::with_capacity(2);
    let mut degenerate = [false; 2];
    for c in 0..2 {
        let a_col = t.select_col(attn, c);
        let mask_col = t.select_col(mask, c);
        let empty = t.value(mask_col).iter().all(|&m| m == 0.0);
        let w = if empty {
            degenerate[c] = true;
            attention_weights(t, a_col, None)
        } else {
            attention_weights(t, a_col, Some(mask_col))
        };
        let wt = t.transpose(w);
        reps.push(t.matmul(wt, f));
    }
    (t.concat_rows(&reps), degenerate)
}

/// Fraction of instances kept by either branch, differentiable through the
/// straight-through path. The union 1-(1-m1)(1-m2) equals max(m1, m2) on
/// binary masks and stays smooth on soft ones.
pub fn retention_ratio(t: &mut Tape, mask: Var) -> Var {
    let m1 = t.select_col(mask, 0);
    let m2 = t.select_col(mask, 1);
    let s = t.add(m1, m2);
    let p = t.mul(m1, m2);
    let union = t.sub(s, p);
    t.mean_all(union)
}

/// Frozen top/bottom instance choices of the clustering loss for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

fn rank_instances(a_col: &[f64], k: usize) -> ClusterSelection {
    let mut order: Vec<usize> = (0..a_col.len()).collect();
    order.sort_by(|&i, &j| {
        a_col[j]
            .partial_cmp(&a_col[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    ClusterSelection {
        top: order[..k].to_vec(),
        bottom: order[order.len() - k..].iter().rev().copied().collect(),
    }
}

/// CLAM-style clustering loss over pseudo-labeled extreme-attention instances.
///
/// For each branch, the top-k attention instances are pseudo-positive when the
/// branch matches the bag label (and pseudo-negative otherwise); the bottom-k
/// are always pseudo-negative. Mean cross-entropy through the branch's linear
/// instance classifier, averaged over branches. Returns `None` selections when
/// the bag is too small and the loss was skipped.
pub fn clustering_loss(
    t: &mut Tape,
    f: Var,
    attn: Var,
    inst_w: &[Var; 2],
    inst_b: &[Var; 2],
    label: u8,
    topk: usize,
    frozen: Option<&[ClusterSelection; 2]>,
) -> (Var, Option<[ClusterSelection; 2]>) {
    let n = t.value(f).nrows();
    let k = topk.min(n / 4);
    if k == 0 && frozen.is_none() {
        let zero = t.leaf(Array2::zeros((1, 1)));
        return (zero, None);
    }

    let mut branch_losses = Vec::with_capacity(2);
    let mut selections = Vec::with_capacity(2);
    for c in 0..2 {
        let sel = match frozen {
            Some(fs) => fs[c].clone(),
            None => {
                let a_col: Vec<f64> = t.value(attn).column(c).to_vec();
                rank_instances(&a_col, k)
            }
        };
        let k_eff = sel.top.len();
        let mut rows = sel.top.clone();
        rows.extend(&sel.bottom);
        let picked = t.select_rows(f, rows);
        let logits = t.matmul(picked, inst_w[c]);
        let logits = t.add_row(logits, inst_b[c]);
        let ls = t.log_softmax_rows(logits);
        // one-hot pseudo-labels: top-k positive only in the in-class branch
        let mut onehot = Array2::zeros((2 * k_eff, 2));
        for i in 0..2 * k_eff {
            let pseudo = if i < k_eff && c == label as usize { 1 } else { 0 };
            onehot[(i, pseudo)] = 1.0;
        }
        let picked_ll = t.mul_const(ls, onehot);
        let total = t.sum_all(picked_ll);
        branch_losses.push(t.scale(total, -1.0 / (2 * k_eff) as f64));
        selections.push(sel);
    }
    let sum = t.add(branch_losses[0], branch_losses[1]);
    let loss = t.scale(sum, 0.5);
    (loss, Some([selections[0].clone(), selections[1].clone()]))
}

/// Teacher-side values frozen for the distillation terms. During training
/// these are simply the current forward's values; the gradient checker reuses
/// them across perturbed evaluations so the detachment is respected.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargets {
    pub e_tea: Array2<f64>,
    pub p_tea: Array2<f64>,
}

/// Everything data-dependent that the loss treats as constant: Gumbel noise,
/// detached distillation targets, and clustering instance choices.
#[derive(Debug, Clone, Default)]
pub struct DminPlan {
    pub noise: Option<Array2<f64>>,
    pub distill: Option<DistillTargets>,
    pub cluster: Option<[ClusterSelection; 2]>,
}

/// Tape handles of one full forward pass.
pub struct DminGraph {
    pub f: Var,
    pub attn: Var,
    pub soft: Var,
    pub mask: Var,
    pub e_tea: Var,
    pub teacher_weights: Var,
    pub logits_tea: Var,
    pub e_stu: Var,
    pub logits_stu: Var,
    pub r_hat: Var,
    pub degenerate: [bool; 2],
}

/// Loss value plus its per-term breakdown (unweighted terms).
pub struct DminLossTerms {
    pub total: Var,
    pub ce_tea: Var,
    pub clu: Var,
    pub dis1: Var,
    pub dis2: Var,
    pub rate: Var,
}

fn softmax_row(values: &Array2<f64>) -> Array2<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = values.mapv(|z| (z - m).exp());
    let sum = exps.sum();
    exps / sum
}

/// Full forward pass: projection, attention, both aggregation branches,
/// dual-branch classification, and the retention ratio.
pub fn build_dmin_forward(
    t: &mut Tape,
    vars: &DminVars,
    x: &Array2<f64>,
    hyper: &DminHyper,
    noise: Option<&Array2<f64>>,
    kind: MaskKind,
) -> Result<DminGraph> {
    let xv = t.leaf(x.clone());
    let f = project(t, xv, vars.proj_w, vars.proj_b)?;
    let attn = gated_attention(t, f, vars.attn_v, vars.attn_u, vars.attn_w)?;
    let (e_tea, teacher_weights) = teacher_aggregate(t, f, attn);
    let logits_tea = dual_branch_predict(t, e_tea, &vars.heads)?;
    let (soft, mask) = gumbel_mask(t, attn, hyper, noise, kind);
    let (e_stu, degenerate) = student_aggregate_with_fallback(t, f, attn, mask);
    let logits_stu = dual_branch_predict(t, e_stu, &vars.heads)?;
    let r_hat = retention_ratio(t, mask);
    Ok(DminGraph {
        f,
        attn,
        soft,
        mask,
        e_tea,
        teacher_weights,
        logits_tea,
        e_stu,
        logits_stu,
        r_hat,
        degenerate,
    })
}

/// Assemble the hybrid loss on top of a forward pass.
///
/// `plan` freezes the data-dependent constants; pass the plan returned by a
/// previous call to re-evaluate the identical loss function (finite
/// differences), or default to compute them from this forward.
pub fn build_dmin_loss(
    t: &mut Tape,
    vars: &DminVars,
    x: &Array2<f64>,
    label: u8,
    hyper: &DminHyper,
    kind: MaskKind,
    plan: DminPlan,
) -> Result<(DminGraph, DminLossTerms, DminPlan)> {
    let graph = build_dmin_forward(t, vars, x, hyper, plan.noise.as_ref(), kind)?;
    let [a1, a2, a3, a4, a5] = hyper.alphas;

    // teacher cross-entropy
    let ls_tea = t.log_softmax_rows(graph.logits_tea);
    let mut onehot = Array2::zeros((1, 2));
    onehot[(0, label as usize)] = 1.0;
    let picked = t.mul_const(ls_tea, onehot);
    let sum = t.sum_all(picked);
    let ce_tea = t.scale(sum, -1.0);

    // clustering over extreme-attention instances
    let (clu, cluster_sel) = clustering_loss(
        t,
        graph.f,
        graph.attn,
        &vars.inst_w,
        &vars.inst_b,
        label,
        hyper.topk,
        plan.cluster.as_ref(),
    );

    // distillation targets are detached from the teacher path
    let distill = match plan.distill {
        Some(d) => d,
        None => DistillTargets {
            e_tea: t.value(graph.e_tea).clone(),
            p_tea: softmax_row(t.value(graph.logits_tea)),
        },
    };

    // representation distillation (mean squared error over the 2Q entries)
    let e_tea_const = t.leaf(distill.e_tea.clone());
    let diff = t.sub(graph.e_stu, e_tea_const);
    let sq = t.mul(diff, diff);
    let dis1 = t.mean_all(sq);

    // logit distillation KL(p_tea || p_stu) with constant teacher distribution
    let entropy: f64 = distill.p_tea.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
    let ls_stu = t.log_softmax_rows(graph.logits_stu);
    let cross = t.mul_const(ls_stu, distill.p_tea.clone());
    let cross_sum = t.sum_all(cross);
    let neg_cross = t.scale(cross_sum, -1.0);
    let dis2 = t.add_scalar(neg_cross, entropy);

    // retention rate
    let r_err = t.add_scalar(graph.r_hat, -hyper.r);
    let rate = t.mul(r_err, r_err);

    let mut total = t.scale(ce_tea, a1);
    for (term, weight) in [(clu, a2), (dis1, a3), (dis2, a4), (rate, a5)] {
        let w = t.scale(term, weight);
        total = t.add(total, w);
    }

    let plan_out = DminPlan {
        noise: plan.noise,
        distill: Some(distill),
        cluster: cluster_sel,
    };
    Ok((
        graph,
        DminLossTerms {
            total,
            ce_tea,
            clu,
            dis1,
            dis2,
            rate,
        },
        plan_out,
    ))
}

/// Deterministic evaluation outputs for one bag.
#[derive(Debug, Clone)]
pub struct DminEval {
    pub logits_tea: [f64; 2],
    pub logits_stu: [f64; 2],
    pub attn: Array2<f64>,
    pub masks: MaskMatrix,
    pub r_hat: f64,
    pub degenerate: [bool; 2],
}

/// Run the network in evaluation mode (no noise, hard masks) on one bag.
pub fn dmin_eval(params: &DminParams, hyper: &DminHyper, x: &Array2<f64>) -> Result<DminEval> {
    let mut t = Tape::new();
    let vars = params.register(&mut t);
    let g = build_dmin_forward(&mut t, &vars, x, hyper, None, MaskKind::Hard)?;
    let lt = t.value(g.logits_tea);
    let ls = t.value(g.logits_stu);
    Ok(DminEval {
        logits_tea: [lt[(0, 0)], lt[(0, 1)]],
        logits_stu: [ls[(0, 0)], ls[(0, 1)]],
        attn: t.value(g.attn).clone(),
        masks: MaskMatrix {
            hard: t.value(g.mask).clone(),
            soft: t.value(g.soft).clone(),
        },
        r_hat: t.scalar_value(g.r_hat),
        degenerate: g.degenerate,
    })
}

/// Eval-mode masks for one bag (the cross-distillation targets).
pub fn eval_masks(params: &DminParams, hyper: &DminHyper, x: &Array2<f64>) -> Result<MaskMatrix> {
    Ok(dmin_eval(params, hyper, x)?.masks)
}

/// Per-instance attention/mask CSV for one bag (eval mode).
pub fn export_attention_csv(
    params: &DminParams,
    hyper: &DminHyper,
    bag: &BagPair,
    path: &Path,
) -> Result<()> {
    let eval = dmin_eval(params, hyper, bag.hi_features.array())?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "instance,a1,a2,soft1,soft2,hard1,hard2")?;
    for i in 0..bag.n_instances() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            i,
            eval.attn[(i, 0)],
            eval.attn[(i, 1)],
            eval.masks.soft[(i, 0)],
            eval.masks.soft[(i, 1)],
            eval.masks.hard[(i, 0)],
            eval.masks.hard[(i, 1)],
        )?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HDMC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Versioned binary dump of parameters plus hyper-parameters.
pub fn save_checkpoint(params: &DminParams, hyper: &DminHyper, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [hyper.tau, hyper.gamma, hyper.r] {
        w.write_all(&v.to_le_bytes())?;
    }
    for a in hyper.alphas {
        w.write_all(&a.to_le_bytes())?;
    }
    w.write_all(&(hyper.topk as u32).to_le_bytes())?;
    w.write_all(&(params.d_hi() as u32).to_le_bytes())?;
    w.write_all(&(params.q() as u32).to_le_bytes())?;
    w.write_all(&(params.attn_v.ncols() as u32).to_le_bytes())?;
    w.write_all(&[params.head_kind().tag()])?;
    w.write_all(&(params.cka_order() as u32).to_le_bytes())?;
    let arrays = params.arrays();
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        w.write_all(&(a.nrows() as u32).to_le_bytes())?;
        w.write_all(&(a.ncols() as u32).to_le_bytes())?;
        for &v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DminParams, DminHyper)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let tau = read_f64(&mut r)?;
    let gamma = read_f64(&mut r)?;
    let rr = read_f64(&mut r)?;
    let mut alphas = [0.0; 5];
    for a in &mut alphas {
        *a = read_f64(&mut r)?;
    }
    let mut b4 = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let topk = read_u32(&mut r)? as usize;
    let d_hi = read_u32(&mut r)? as usize;
    let q = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let head_kind = HeadKind::from_tag(tag[0])?;
    let cka_order = read_u32(&mut r)? as usize;
    let n_arrays = read_u32(&mut r)? as usize;

    let hyper = DminHyper {
        tau,
        gamma,
        r: rr,
        alphas,
        topk,
    };
    let mut params = DminParams::init(d_hi, q, h, head_kind, cka_order.max(1), 0);
    let mut targets = params.arrays_mut();
    if targets.len() != n_arrays {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {} arrays, file has {n_arrays}", targets.len()),
        });
    }
    for target in targets.iter_mut() {
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
        **target = data;
    }
    Ok((params, hyper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cka::CkaParams;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;

    fn small_params(d: usize, q: usize, h: usize, seed: u64) -> DminParams {
        DminParams::init(d, q, h, HeadKind::Cka, 4, seed)
    }

    fn random_bag(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn project_identity_block_passes_through() {
        let mut t = Tape::new();
        let d = 4;
        let q = 2;
        let mut w = Array2::zeros((d, q));
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let x = array![[0.5, 0.25, 9.0, 9.0], [0.75, 0.1, 9.0, 9.0]];
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w);
        let bv = t.leaf(Array2::zeros((1, q)));
        let out = project(&mut t, xv, wv, bv).unwrap();
        assert_eq!(t.value(out), &array![[0.5, 0.25], [0.75, 0.1]]);
    }

    #[test]
    fn project_zero_input_gives_relu_bias() {
        let mut t = Tape::new();
        let xv = t.leaf(Array2::zeros((3, 2)));
        let wv = t.leaf(Array2::from_elem((2, 2), 5.0));
        let bv = t.leaf(array![[-1.0, 2.0]]);
        let out = project(&mut t, xv, wv, bv).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(out)[(i, 0)], 0.0);
            assert_eq!(t.value(out)[(i, 1)], 2.0);
        }
    }

    #[test]
    fn project_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let xv = t.leaf(Array2::zeros((3, 5)));
        let wv = t.leaf(Array2::zeros((4, 2)));
        let bv = t.leaf(Array2::zeros((1, 2)));
        assert!(project(&mut t, xv, wv, bv).is_err());
    }

    #[test]
    fn project_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_bag(&mut rng, 3, 4);
        let w0 = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let b0 = Array2::from_shape_fn((1, 2), |_| rng.random_range(-1.0..1.0));
        let eval = |w: &Array2<f64>, b: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let out = project(&mut t, xv, wv, bv).unwrap();
            let loss = t.mean_all(out);
            let g = t.backward(loss);
            (t.scalar_value(loss), g.wrt_or_zeros(wv, w.dim()))
        };
        let (_, gw) = eval(&w0, &b0);
        let eps = 1e-5;
        for idx in 0..w0.len() {
            let pos = (idx / 2, idx % 2);
            let mut wp = w0.clone();
            wp[pos] += eps;
            let mut wm = w0.clone();
            wm[pos] -= eps;
            let num = (eval(&wp, &b0).0 - eval(&wm, &b0).0) / (2.0 * eps);
            let denom = num.abs().max(gw[pos].abs()).max(1e-6);
            assert!((num - gw[pos]).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn attention_zero_v_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut t = Tape::new();
        let f = t.leaf(random_bag(&mut rng, 5, 3));
        let v = t.leaf(Array2::zeros((3, 4)));
        let u = t.leaf(random_bag(&mut rng, 3, 4));
        let w = t.leaf(random_bag(&mut rng, 4, 2));
        let a = gated_attention(&mut t, f, v, u, w).unwrap();
        assert!(t.value(a).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_scalar_case_is_zero_at_origin() {
        let mut t = Tape::new();
        let f = t.leaf(array![[0.0]]);
        let v = t.leaf(array![[1.0]]);
        let u = t.leaf(array![[1.0]]);
        let w = t.leaf(array![[1.0, 1.0]]);
        let a = gated_attention(&mut t, f, v, u, w).unwrap();
        assert_eq!(t.value(a)[(0, 0)], 0.0);
        assert_eq!(t.value(a)[(0, 1)], 0.0);
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, q, h) = (4, 3, 5);
        let fm = random_bag(&mut rng, n, q);
        let vm = random_bag(&mut rng, q, h);
        let um = random_bag(&mut rng, q, h);
        let wm = random_bag(&mut rng, h, 2);

        let mut t = Tape::new();
        let f = t.leaf(fm.clone());
        let v = t.leaf(vm.clone());
        let u = t.leaf(um.clone());
        let w = t.leaf(wm.clone());
        let a = gated_attention(&mut t, f, v, u, w).unwrap();

        for i in 0..n {
            for c in 0..2 {
                let mut expect = 0.0;
                for hh in 0..h {
                    let mut fv = 0.0;
                    let mut fu = 0.0;
                    for qq in 0..q {
                        fv += fm[(i, qq)] * vm[(qq, hh)];
                        fu += fm[(i, qq)] * um[(qq, hh)];
                    }
                    expect += fv.tanh() * crate::tape::sigmoid(fu) * wm[(hh, c)];
                }
                assert!((t.value(a)[(i, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_single_instance_returns_that_row() {
        let mut t = Tape::new();
        let f = t.leaf(array![[1.0, 2.0, 3.0]]);
        let a = t.leaf(array![[0.3, -4.0]]);
        let (e, w) = teacher_aggregate(&mut t, f, a);
        assert_eq!(t.value(e), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert_eq!(t.value(w), &array![[1.0, 1.0]]);
    }

    #[test]
    fn teacher_constant_attention_is_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let fm = random_bag(&mut rng, 6, 3);
        let mut t = Tape::new();
        let f = t.leaf(fm.clone());
        let a = t.leaf(Array2::from_elem((6, 2), 0.77));
        let (e, _) = teacher_aggregate(&mut t, f, a);
        for c in 0..2 {
            for q in 0..3 {
                let mean = fm.column(q).sum() / 6.0;
                assert!((t.value(e)[(c, q)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_weights_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let fm = random_bag(&mut rng, 8, 4);
        let am = random_bag(&mut rng, 8, 2) * 3.0;

        let run = |a: &Array2<f64>| {
            let mut t = Tape::new();
            let f = t.leaf(fm.clone());
            let av = t.leaf(a.clone());
            let (e, w) = teacher_aggregate(&mut t, f, av);
            (t.value(e).clone(), t.value(w).clone())
        };
        let (e1, w1) = run(&am);
        for c in 0..2 {
            let s: f64 = w1.column(c).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (e2, _) = run(&(&am + 10.0));
        for (x, y) in e1.iter().zip(e2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mask_at_origin_is_half_and_not_kept() {
        let hyper = DminHyper::default();
        let mut t = Tape::new();
        let a = t.leaf(Array2::zeros((3, 2)));
        let (soft, mask) = gumbel_mask(&mut t, a, &hyper, None, MaskKind::Hard);
        assert!(t.value(soft).iter().all(|&s| s == 0.5));
        // strict threshold: exactly gamma is discarded
        assert!(t.value(mask).iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mask_threshold_forced_cases() {
        let m = MaskMatrix::from_soft(array![[0.7, 0.3]], 0.5);
        assert_eq!(m.hard, array![[1.0, 0.0]]);
    }

    #[test]
    fn straight_through_gradient_flows_as_if_identity() {
        // With a loss linear in the mask, d loss/d attn must agree between the
        // hard straight-through path and the soft identity path.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let hyper = DminHyper::default();
        let a0 = random_bag(&mut rng, 5, 2);
        let coeff = random_bag(&mut rng, 5, 2);
        let noise = sample_gumbel_noise(5, &mut rng);

        let grad_of = |kind: MaskKind| {
            let mut t = Tape::new();
            let a = t.leaf(a0.clone());
            let (_, mask) = gumbel_mask(&mut t, a, &hyper, Some(&noise), kind);
            let weighted = t.mul_const(mask, coeff.clone());
            let loss = t.sum_all(weighted);
            let g = t.backward(loss);
            g.wrt_or_zeros(a, a0.dim())
        };
        let hard = grad_of(MaskKind::Hard);
        let soft = grad_of(MaskKind::Identity);
        for (x, y) in hard.iter().zip(soft.iter()) {
            assert!((x - y).abs() < 1e-15);
        }

        // and the identity path agrees with finite differences
        let eval = |a: &Array2<f64>| {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let (_, mask) = gumbel_mask(&mut t, av, &hyper, Some(&noise), MaskKind::Identity);
            let weighted = t.mul_const(mask, coeff.clone());
            let loss = t.sum_all(weighted);
            t.scalar_value(loss)
        };
        let eps = 1e-5;
        for idx in 0..a0.len() {
            let pos = (idx / 2, idx % 2);
            let mut ap = a0.clone();
            ap[pos] += eps;
            let mut am = a0.clone();
            am[pos] -= eps;
            let num = (eval(&ap) - eval(&am)) / (2.0 * eps);
            let denom = num.abs().max(soft[pos].abs()).max(1e-6);
            assert!((num - soft[pos]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn eval_mask_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let params = small_params(4, 3, 3, 7);
        let hyper = DminHyper::default();
        let x = random_bag(&mut rng, 6, 4);
        let a = eval_masks(&params, &hyper, &x).unwrap();
        let b = eval_masks(&params, &hyper, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lowering_gamma_never_drops_kept_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let soft = Array2::from_shape_fn((20, 2), |_| rng.random::<f64>());
        let high = MaskMatrix::from_soft(soft.clone(), 0.6);
        let low = MaskMatrix::from_soft(soft, 0.4);
        for (h, l) in high.hard.iter().zip(low.hard.iter()) {
            assert!(l >= h);
        }
    }

    #[test]
    fn student_all_ones_mask_equals_teacher_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let fm = random_bag(&mut rng, 7, 4);
        let am = random_bag(&mut rng, 7, 2) * 2.0;
        let mut t = Tape::new();
        let f = t.leaf(fm);
        let a = t.leaf(am);
        let ones = t.leaf(Array2::from_elem((7, 2), 1.0));
        let (e_tea, _) = teacher_aggregate(&mut t, f, a);
        let e_stu = student_aggregate(&mut t, f, a, ones).unwrap();
        assert_eq!(t.value(e_tea), t.value(e_stu));
    }

    #[test]
    fn student_single_survivor_returns_that_row() {
        let mut t = Tape::new();
        let f = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let a = t.leaf(array![[0.1, 5.0], [2.0, -1.0]]);
        let mask = t.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let e = student_aggregate(&mut t, f, a, mask).unwrap();
        assert_eq!(t.value(e), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn student_matches_subset_restricted_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (n, q) = (9, 4);
        let fm = random_bag(&mut rng, n, q);
        let am = random_bag(&mut rng, n, 2) * 3.0;
        let maskm = Array2::from_shape_fn((n, 2), |_| if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 });
        // ensure both branches keep something
        let mut maskm = maskm;
        maskm[(0, 0)] = 1.0;
        maskm[(1, 1)] = 1.0;

        let mut t = Tape::new();
        let f = t.leaf(fm.clone());
        let a = t.leaf(am.clone());
        let mk = t.leaf(maskm.clone());
        let e = student_aggregate(&mut t, f, a, mk).unwrap();

        for c in 0..2 {
            let kept: Vec<usize> = (0..n).filter(|&j| maskm[(j, c)] > 0.0).collect();
            let mx = kept.iter().map(|&j| am[(j, c)]).fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = kept.iter().map(|&j| (am[(j, c)] - mx).exp()).sum();
            for qi in 0..q {
                let expect: f64 = kept
                    .iter()
                    .map(|&j| (am[(j, c)] - mx).exp() / den * fm[(j, qi)])
                    .sum();
                assert!(
                    (t.value(e)[(c, qi)] - expect).abs() <= 1e-12,
                    "c={c} q={qi}"
                );
            }
        }
    }

    #[test]
    fn student_empty_branch_is_degenerate() {
        let mut t = Tape::new();
        let f = t.leaf(array![[1.0], [2.0]]);
        let a = t.leaf(array![[0.0, 0.0], [0.0, 0.0]]);
        let mask = t.leaf(array![[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            student_aggregate(&mut t, f, a, mask),
            Err(Error::DegenerateMask { branch: 1 })
        ));
        let (e, degenerate) = student_aggregate_with_fallback(&mut t, f, a, mask);
        assert_eq!(degenerate, [false, true]);
        // fallback branch equals teacher aggregation
        let (e_tea, _) = teacher_aggregate(&mut t, f, a);
        assert_eq!(t.value(e)[(1, 0)], t.value(e_tea)[(1, 0)]);
    }

    #[test]
    fn retention_counts_union_rows() {
        let mut t = Tape::new();
        let mask = t.leaf(array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [1.0, 1.0]]);
        let r = retention_ratio(&mut t, mask);
        assert_eq!(t.scalar_value(r), 0.75);

        let zeros = t.leaf(Array2::zeros((4, 2)));
        let r0 = retention_ratio(&mut t, zeros);
        assert_eq!(t.scalar_value(r0), 0.0);
        let ones = t.leaf(Array2::from_elem((4, 2), 1.0));
        let r1 = retention_ratio(&mut t, ones);
        assert_eq!(t.scalar_value(r1), 1.0);
    }

    #[test]
    fn rate_loss_has_gradient_near_threshold() {
        // noise-free soft masks near gamma: d (r_hat - r)^2 / d attn != 0
        let hyper = DminHyper::default();
        let a0 = array![[0.05, -0.1], [-0.02, 0.08], [0.01, 0.02]];
        let eval = |a: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let (_, mask) = gumbel_mask(&mut t, av, &hyper, None, MaskKind::Identity);
            let r_hat = retention_ratio(&mut t, mask);
            let err = t.add_scalar(r_hat, -hyper.r);
            let loss = t.mul(err, err);
            let g = t.backward(loss);
            (t.scalar_value(loss), g.wrt_or_zeros(av, a.dim()))
        };
        let (_, grad) = eval(&a0);
        assert!(grad.iter().any(|&g| g.abs() > 1e-6));

        let eps = 1e-5;
        for idx in 0..a0.len() {
            let pos = (idx / 2, idx % 2);
            let mut ap = a0.clone();
            ap[pos] += eps;
            let mut am = a0.clone();
            am[pos] -= eps;
            let num = (eval(&ap).0 - eval(&am).0) / (2.0 * eps);
            let denom = num.abs().max(grad[pos].abs()).max(1e-6);
            assert!((num - grad[pos]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn clustering_perfect_classifier_has_zero_loss() {
        // craft a bag where attention ranks instances and the instance
        // classifiers output huge correct logits
        let n = 8;
        let q = 2;
        let f0 = Array2::from_shape_fn((n, q), |(i, _)| if i < 2 { 1.0 } else { -1.0 });
        let attn = Array2::from_shape_fn((n, 2), |(i, _)| -(i as f64));
        let mut t = Tape::new();
        let f = t.leaf(f0);
        let a = t.leaf(attn);
        // branch 0 (in-class for label 0) maps feature sign to the right
        // pseudo-class with a huge margin; branch 1 wants everything negative,
        // which a bias handles regardless of features
        let w0 = array![[-500.0, 500.0], [0.0, 0.0]];
        let inst_w = [t.leaf(w0), t.leaf(Array2::zeros((2, 2)))];
        let inst_b = [
            t.leaf(Array2::zeros((1, 2))),
            t.leaf(array![[500.0, -500.0]]),
        ];
        let (loss, sel) = clustering_loss(&mut t, f, a, &inst_w, &inst_b, 0, 2, None);
        assert!(sel.is_some());
        assert!(t.scalar_value(loss) < 1e-10);
    }

    #[test]
    fn clustering_uniform_logits_cost_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f0 = random_bag(&mut rng, 12, 3);
        let a0 = random_bag(&mut rng, 12, 2);
        let mut t = Tape::new();
        let f = t.leaf(f0);
        let a = t.leaf(a0);
        let zw = [t.leaf(Array2::zeros((3, 2))), t.leaf(Array2::zeros((3, 2)))];
        let zb = [t.leaf(Array2::zeros((1, 2))), t.leaf(Array2::zeros((1, 2)))];
        let (loss, _) = clustering_loss(&mut t, f, a, &zw, &zb, 1, 3, None);
        assert!((t.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn clustering_skips_tiny_bags() {
        let mut t = Tape::new();
        let f = t.leaf(Array2::zeros((3, 2)));
        let a = t.leaf(Array2::zeros((3, 2)));
        let zw = [t.leaf(Array2::zeros((2, 2))), t.leaf(Array2::zeros((2, 2)))];
        let zb = [t.leaf(Array2::zeros((1, 2))), t.leaf(Array2::zeros((1, 2)))];
        let (loss, sel) = clustering_loss(&mut t, f, a, &zw, &zb, 0, 8, None);
        assert!(sel.is_none());
        assert_eq!(t.scalar_value(loss), 0.0);
    }

    #[test]
    fn confident_teacher_reduces_to_clustering_term() {
        // alphas 3..5 zero, teacher extremely confident and correct
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut params = small_params(4, 3, 3, 8);
        // overwrite heads so logits are (big, small) for label 0
        params.heads = [
            BranchHead::Fc {
                w: Array2::zeros((3, 1)),
                b: Array2::from_elem((1, 1), 50.0),
            },
            BranchHead::Fc {
                w: Array2::zeros((3, 1)),
                b: Array2::from_elem((1, 1), -50.0),
            },
        ];
        let hyper = DminHyper {
            alphas: [1.0, 0.5, 0.0, 0.0, 0.0],
            ..DminHyper::default()
        };
        let x = random_bag(&mut rng, 10, 4);
        let mut t = Tape::new();
        let vars = params.register(&mut t);
        let (_, terms, _) =
            build_dmin_loss(&mut t, &vars, &x, 0, &hyper, MaskKind::Hard, DminPlan::default())
                .unwrap();
        let total = t.scalar_value(terms.total);
        let clu = t.scalar_value(terms.clu);
        assert!(t.scalar_value(terms.ce_tea) < 1e-12);
        assert!((total - 0.5 * clu).abs() < 1e-10);
    }

    #[test]
    fn all_ones_mask_zeroes_distillation_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..100 {
            let params = small_params(5, 4, 3, trial);
            let hyper = DminHyper::default();
            let n = rng.random_range(2..12);
            let x = random_bag(&mut rng, n, 5);
            // force an all-ones mask by driving attention through a huge noise offset
            let noise = Array2::from_elem((n, 2), 50.0);
            let mut t = Tape::new();
            let vars = params.register(&mut t);
            let plan = DminPlan {
                noise: Some(noise),
                ..DminPlan::default()
            };
            let (graph, terms, _) =
                build_dmin_loss(&mut t, &vars, &x, (trial % 2) as u8, &hyper, MaskKind::Hard, plan)
                    .unwrap();
            assert!(t.value(graph.mask).iter().all(|&m| m == 1.0));
            let e_tea = t.value(graph.e_tea);
            let e_stu = t.value(graph.e_stu);
            assert_eq!(e_tea, e_stu);
            assert!(t.scalar_value(terms.dis1).abs() <= 1e-12);
            assert!(t.scalar_value(terms.dis2).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let params = DminParams::init(6, 4, 3, HeadKind::Cka, 5, 42);
        let hyper = DminHyper {
            r: 0.4,
            ..DminHyper::default()
        };
        let path = dir.path().join("dmin.ckpt");
        save_checkpoint(&params, &hyper, &path).unwrap();
        let (p2, h2) = load_checkpoint(&path).unwrap();
        assert_eq!(params, p2);
        assert_eq!(hyper, h2);

        // also for a baseline head
        let params = DminParams::init(6, 4, 3, HeadKind::Mlp, 1, 43);
        let path2 = dir.path().join("dmin_mlp.ckpt");
        save_checkpoint(&params, &hyper, &path2).unwrap();
        let (p3, _) = load_checkpoint(&path2).unwrap();
        assert_eq!(params, p3);
    }

    #[test]
    fn arrays_and_vars_align() {
        let params = DminParams::init(5, 3, 2, HeadKind::Cka, 4, 1);
        let mut t = Tape::new();
        let vars = params.register(&mut t);
        let arrays = params.arrays();
        let var_list = vars.vars();
        assert_eq!(arrays.len(), var_list.len());
        assert_eq!(arrays.len(), params.param_names().len());
        for (a, v) in arrays.iter().zip(&var_list) {
            assert_eq!(a.dim(), t.value(*v).dim());
            assert_eq!(*a, t.value(*v));
        }
        let mut p2 = params.clone();
        assert_eq!(p2.arrays_mut().len(), var_list.len());
    }

    #[test]
    fn cka_head_params_roundtrip_in_checkpoint_order() {
        let params = DminParams::init(4, 3, 2, HeadKind::Cka, 6, 9);
        match &params.heads[0] {
            BranchHead::Cka(CkaParams { omega, order }) => {
                assert_eq!(*order, 6);
                assert_eq!(omega[0].dim(), (3, 7));
            }
            _ => panic!("expected cka head"),
        }
    }
}
