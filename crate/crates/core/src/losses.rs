//! Training objectives, recorded on a [`Tape`] so they differentiate.
//!
//! All functions are generic over the element type so the same code runs
//! under `f64` finite-difference checks and `f32` training.

use crate::error::{Error, Result};
use crate::ndgrad::{Element, Tape, Tensor, Var};

const ALIGN_EPS: f64 = 1e-8;

/// Weights of the four pre-training terms and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub con: f64,
    pub align: f64,
    pub sep: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, con: 0.5, align: 0.1, sep: 0.1, margin: 0.2 }
    }
}

impl LossWeights {
    /// Reconstruction term only.
    pub fn rec_only() -> Self {
        LossWeights::default().masked([true, false, false, false])
    }

    /// Zeroes the terms whose mask entry (rec, con, align, sep) is false.
    pub fn masked(self, mask: [bool; 4]) -> Self {
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        LossWeights {
            rec: keep(mask[0], self.rec),
            con: keep(mask[1], self.con),
            align: keep(mask[2], self.align),
            sep: keep(mask[3], self.sep),
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_rec", self.rec), ("lambda_con", self.con), ("lambda_align", self.align), ("lambda_sep", self.sep)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParam(format!("loss.{k} must be >= 0, got {v}")));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidParam(format!("loss.margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn mse<T: Element>(tape: &mut Tape<T>, op: &'static str, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, op, a, b)?;
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    tape.mean_all(d2)
}

/// Mean squared error between the student reconstruction and the target.
pub fn l_rec<T: Element>(tape: &mut Tape<T>, x_s: Var, x_16bit: Var) -> Result<Var> {
    mse(tape, "l_rec", x_s, x_16bit)
}

/// Mean squared error between teacher and student reconstructions.
pub fn l_con<T: Element>(tape: &mut Tape<T>, x_t: Var, x_s: Var) -> Result<Var> {
    mse(tape, "l_con", x_t, x_s)
}

fn flatten<T: Element>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f);
    let n = s[0];
    let d = s.iter().skip(1).product::<usize>().max(1);
    tape.reshape(f, &[n, d])
}

/// `1 - cos(f_T, f_S)` per sample (features flattened), averaged over the batch.
/// Norms are guarded as `sqrt(|f|^2 + eps^2)`.
pub fn l_align<T: Element>(tape: &mut Tape<T>, f_t: Var, f_s: Var) -> Result<Var> {
    same_shape(tape, "l_align", f_t, f_s)?;
    let (a, b) = (flatten(tape, f_t)?, flatten(tape, f_s)?);
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab, &[1], false)?;
    let norm = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let sq = tape.square(v)?;
        let s = tape.sum(sq, &[1], false)?;
        let s = tape.affine(s, 1.0, ALIGN_EPS * ALIGN_EPS)?;
        tape.sqrt(s)
    };
    let (na, nb) = (norm(tape, a)?, norm(tape, b)?);
    let den = tape.mul(na, nb)?;
    let cos = tape.div(dot, den)?;
    let m = tape.mean_all(cos)?;
    tape.affine(m, -1.0, 1.0)
}

/// Batch-hard triplet loss, summed over anchors that have an in-batch positive.
///
/// Hardest positive and negative are selected on the current values; the
/// selection itself is not differentiated. With `normalize`, rows are
/// centred on the batch mean and L2-normalised before distances are taken.
/// Centring matters for post-ReLU features: they all sit in the positive
/// orthant, so their raw directions start nearly collinear and the loss
/// stalls at the collapsed value (margin per anchor).
pub fn l_sep<T: Element>(tape: &mut Tape<T>, f_s: Var, labels: &[usize], margin: f64, normalize: bool) -> Result<Var> {
    let n = tape.shape(f_s)[0];
    if labels.len() != n {
        return Err(Error::shape("l_sep", format!("{} labels for batch of {n}", labels.len())));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Precondition("l_sep needs at least two classes in the batch".into()));
    }
    let mut f = flatten(tape, f_s)?;
    if normalize {
        let mu = tape.mean(f, &[0], true)?;
        f = tape.sub(f, mu)?;
        let sq = tape.square(f)?;
        let s = tape.sum(sq, &[1], true)?;
        let s = tape.affine(s, 1.0, ALIGN_EPS * ALIGN_EPS)?;
        let nrm = tape.sqrt(s)?;
        f = tape.div(f, nrm)?;
    }
    let dist = tape.pairwise_distance(f)?;
    let dv = tape.value(dist).data();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        let hardest = |same: bool, pick_max: bool| {
            (0..n)
                .filter(|&j| j != i && (labels[j] == labels[i]) == same)
                .map(|j| (j, dv[i * n + j]))
                .reduce(|a, b| {
                    let better = if pick_max { b.1 > a.1 } else { b.1 < a.1 };
                    if better { b } else { a }
                })
        };
        let Some((p, _)) = hardest(true, true) else { continue };
        let (q, _) = hardest(false, false).expect("two classes present");
        pos.push(i * n + p);
        neg.push(i * n + q);
    }
    if pos.is_empty() {
        return Err(Error::Precondition("l_sep: no anchor has an in-batch positive".into()));
    }
    let dp = tape.gather(dist, pos)?;
    let dn = tape.gather(dist, neg)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.affine(gap, 1.0, margin)?;
    let hinge = tape.relu(gap)?;
    tape.sum_all(hinge)
}

/// Handles of the four component losses on one tape.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub rec: Var,
    pub con: Var,
    pub align: Var,
    pub sep: Var,
}

/// `sum lambda_i * L_i`. Zero weights still record the term (with zero
/// gradient) so every component stays on the tape for logging.
pub fn compound<T: Element>(tape: &mut Tape<T>, c: &Components, w: &LossWeights) -> Result<Var> {
    let terms = [(c.rec, w.rec), (c.con, w.con), (c.align, w.align), (c.sep, w.sep)];
    let mut total = tape.scale(terms[0].0, terms[0].1)?;
    for &(v, l) in &terms[1..] {
        let s = tape.scale(v, l)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Mean of `-alpha_y (1 - p_y)^gamma log p_y` over the batch, from `(N, C)` logits.
pub fn focal_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("focal", format!("logits {s:?} with {} labels", labels.len())));
    }
    let c = s[1];
    if alpha.len() != c {
        return Err(Error::shape("focal", format!("{} alpha weights for {c} classes", alpha.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidParam(format!("label {bad} out of range for {c} classes")));
    }
    if !(gamma >= 0.0) || alpha.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::InvalidParam("focal gamma and alpha must be non-negative".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let idx = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let logp_y = tape.gather(logp, idx)?;
    let a = tape.input(Tensor::new(&[labels.len()], labels.iter().map(|&l| T::from_f64_lossy(-alpha[l])).collect())?);
    let mut per = tape.mul(logp_y, a)?;
    if gamma != 0.0 {
        let p = tape.exp(logp_y)?;
        let q = tape.affine(p, -1.0, 1.0)?;
        let w = tape.pow(q, gamma)?;
        per = tape.mul(per, w)?;
    }
    tape.mean_all(per)
}

/// Inverse class frequency, normalised to mean 1; empty classes get 0.
pub fn inverse_frequency_alpha(counts: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = counts.iter().map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 }).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean == 0.0 {
        return raw;
    }
    raw.into_iter().map(|a| a / mean).collect()
}
