//! Segmentation loss: soft Dice on the Dirichlet mean plus the evidential
//! term (Bayes-risk cross-entropy and a KL regularizer), with analytic
//! gradients back to the pre-softplus activations.
//!
//! The raw functions work on class-major `f64` slices
//! (`values[class * voxels + voxel]`), which is what the trainer feeds them;
//! the `Volume`-based wrappers validate shapes and delegate.

use crate::error::{Error, Result};
use crate::evidential::EvidenceField;
use crate::special::{gamma_family, ln_gamma, psi};
use crate::volume::{Element, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the evidential term in the total loss.
    pub lambda: f64,
    /// Weight of the KL term inside the evidential term.
    pub lambda_kl: f64,
    /// Smoothing added to numerator and denominator of each Dice ratio.
    pub epsilon_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.7,
            lambda_kl: 0.4,
            epsilon_dice: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda_kl >= 0.0
            && self.epsilon_dice > 0.0
            && self.lambda.is_finite()
            && self.lambda_kl.is_finite()
            && self.epsilon_dice.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Individual terms and their combinations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub dice: f64,
    pub rce: f64,
    pub kl: f64,
    /// `rce + lambda_kl * kl`
    pub edl: f64,
    /// `dice + lambda * edl`
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(dice: f64, rce: f64, kl: f64, cfg: &LossConfig) -> Self {
        let edl = rce + cfg.lambda_kl * kl;
        LossBreakdown {
            dice,
            rce,
            kl,
            edl,
            total: dice + cfg.lambda * edl,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.dice, self.rce, self.kl, self.edl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let k = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| {
            pairwise_sum(&items.iter().map(f).collect::<Vec<_>>()) / k
        };
        LossBreakdown {
            dice: sum(|b| b.dice),
            rce: sum(|b| b.rce),
            kl: sum(|b| b.kl),
            edl: sum(|b| b.edl),
            total: sum(|b| b.total),
        }
    }
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn voxel_count(values: &[f64], target: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 || !values.len().is_multiple_of(classes) || values.len() != target.len() {
        return Err(Error::shape(format!(
            "{} values and {} targets for {classes} classes",
            values.len(),
            target.len()
        )));
    }
    Ok(values.len() / classes)
}

/// Per-class sums `(sum p*y, sum p, sum y)` over voxels.
fn dice_sums(probs: &[f64], target: &[f64], classes: usize, voxels: usize) -> Vec<(f64, f64, f64)> {
    let mut tmp = vec![0.0; voxels];
    (0..classes)
        .map(|c| {
            let p = &probs[c * voxels..(c + 1) * voxels];
            let y = &target[c * voxels..(c + 1) * voxels];
            for ((t, a), b) in tmp.iter_mut().zip(p).zip(y) {
                *t = a * b;
            }
            (pairwise_sum(&tmp), pairwise_sum(p), pairwise_sum(y))
        })
        .collect()
}

/// `1 - mean_c (2 I_c + eps) / (P_c + G_c + eps)` over class-major slices.
pub fn dice_from_probs(probs: &[f64], target: &[f64], classes: usize, eps: f64) -> Result<f64> {
    let voxels = voxel_count(probs, target, classes)?;
    let sums = dice_sums(probs, target, classes, voxels);
    let mean = sums
        .iter()
        .map(|&(i, p, g)| (2.0 * i + eps) / (p + g + eps))
        .sum::<f64>()
        / classes as f64;
    Ok(1.0 - mean)
}

/// Mean over voxels of `sum_n y_n (psi(S) - psi(alpha_n))`.
pub fn rce_from_alpha(alpha: &[f64], target: &[f64], classes: usize) -> Result<f64> {
    let voxels = voxel_count(alpha, target, classes)?;
    let terms: Vec<f64> = (0..voxels)
        .map(|m| {
            let s: f64 = (0..classes).map(|c| alpha[c * voxels + m]).sum();
            let ps = psi(s);
            (0..classes)
                .map(|c| {
                    let y = target[c * voxels + m];
                    if y == 0.0 {
                        0.0
                    } else {
                        y * (ps - psi(alpha[c * voxels + m]))
                    }
                })
                .sum::<f64>()
        })
        .collect();
    Ok(pairwise_sum(&terms) / voxels as f64)
}

/// KL divergence from `Dir(alpha_tilde)` to the flat Dirichlet, where the
/// target coordinate of `alpha` is replaced by one.
#[inline]
fn kl_voxel(alpha_tilde: &[f64]) -> f64 {
    let n = alpha_tilde.len() as f64;
    let s: f64 = alpha_tilde.iter().sum();
    let ps = psi(s);
    let mut acc = ln_gamma(s) - ln_gamma(n);
    for &a in alpha_tilde {
        acc -= ln_gamma(a);
        if a != 1.0 {
            acc += (a - 1.0) * (psi(a) - ps);
        }
    }
    acc
}

#[inline]
fn alpha_tilde(alpha: f64, y: f64) -> f64 {
    y + (1.0 - y) * alpha
}

/// Mean over voxels of the KL regularizer.
pub fn kl_from_alpha(alpha: &[f64], target: &[f64], classes: usize) -> Result<f64> {
    let voxels = voxel_count(alpha, target, classes)?;
    let mut at = vec![0.0; classes];
    let terms: Vec<f64> = (0..voxels)
        .map(|m| {
            for (c, a) in at.iter_mut().enumerate() {
                *a = alpha_tilde(alpha[c * voxels + m], target[c * voxels + m]);
            }
            kl_voxel(&at)
        })
        .collect();
    Ok(pairwise_sum(&terms) / voxels as f64)
}

/// All terms from non-negative evidence (class-major).
pub fn loss_from_evidence(
    evidence: &[f64],
    target: &[f64],
    classes: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let voxels = voxel_count(evidence, target, classes)?;
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let mut probs = vec![0.0; alpha.len()];
    for m in 0..voxels {
        let s: f64 = (0..classes).map(|c| alpha[c * voxels + m]).sum();
        for c in 0..classes {
            probs[c * voxels + m] = alpha[c * voxels + m] / s;
        }
    }
    let dice = dice_from_probs(&probs, target, classes, cfg.epsilon_dice)?;
    let rce = rce_from_alpha(&alpha, target, classes)?;
    let kl = kl_from_alpha(&alpha, target, classes)?;
    Ok(LossBreakdown::compose(dice, rce, kl, cfg))
}

/// All terms from pre-softplus activations `z` (class-major).
pub fn loss_from_activations(
    z: &[f64],
    target: &[f64],
    classes: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let e: Vec<f64> = z.iter().map(|&v| softplus(v)).collect();
    loss_from_evidence(&e, target, classes, cfg)
}

/// Loss and its gradient with respect to the pre-softplus activations.
pub fn loss_and_gradient(
    z: &[f64],
    target: &[f64],
    classes: usize,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let voxels = voxel_count(z, target, classes)?;
    let vf = voxels as f64;
    let nf = classes as f64;

    let alpha: Vec<f64> = z.iter().map(|&v| softplus(v) + 1.0).collect();
    let mut strength = vec![0.0; voxels];
    let mut probs = vec![0.0; alpha.len()];
    for m in 0..voxels {
        let s: f64 = (0..classes).map(|c| alpha[c * voxels + m]).sum();
        strength[m] = s;
        for c in 0..classes {
            probs[c * voxels + m] = alpha[c * voxels + m] / s;
        }
    }

    // Dice: dL/dp_c,m = -(1/N) [2 y / den_c - num_c / den_c^2]
    let sums = dice_sums(&probs, target, classes, voxels);
    let mut dice_mean = 0.0;
    let coeffs: Vec<(f64, f64)> = sums
        .iter()
        .map(|&(i, p, g)| {
            let num = 2.0 * i + cfg.epsilon_dice;
            let den = p + g + cfg.epsilon_dice;
            dice_mean += num / den;
            (2.0 / den, num / (den * den))
        })
        .collect();
    let dice = 1.0 - dice_mean / nf;

    let mut grad = vec![0.0; alpha.len()];
    let mut rce_terms = vec![0.0; voxels];
    let mut kl_terms = vec![0.0; voxels];
    let mut dp = vec![0.0; classes];
    let mut at = vec![0.0; classes];
    let mut fam_a = vec![(0.0, 0.0, 0.0); classes];
    let mut fam_t = vec![(0.0, 0.0, 0.0); classes];
    let w_edl = cfg.lambda / vf;
    let w_kl = cfg.lambda * cfg.lambda_kl / vf;
    let ln_gamma_n = ln_gamma(nf);

    for m in 0..voxels {
        let s = strength[m];

        let mut dot = 0.0;
        let mut s_tilde = 0.0;
        for c in 0..classes {
            let idx = c * voxels + m;
            let y = target[idx];
            let (a, b) = coeffs[c];
            dp[c] = -(y * a - b) / nf;
            dot += dp[c] * probs[idx];
            let alpha_c = alpha[idx];
            fam_a[c] = gamma_family(alpha_c);
            at[c] = alpha_tilde(alpha_c, y);
            fam_t[c] = if at[c] == alpha_c {
                fam_a[c]
            } else if at[c] == 1.0 {
                // Only the log-gamma term survives at one, and it is zero.
                (0.0, 0.0, 0.0)
            } else {
                gamma_family(at[c])
            };
            s_tilde += at[c];
        }

        let (_, ps, t1_s) = gamma_family(s);
        let (lg_st, ps_t, t1_st) = gamma_family(s_tilde);

        let mut ysum = 0.0;
        let mut rce = 0.0;
        let mut kl = lg_st - ln_gamma_n;
        for c in 0..classes {
            let y = target[c * voxels + m];
            ysum += y;
            if y != 0.0 {
                rce += y * (ps - fam_a[c].1);
            }
            kl -= fam_t[c].0;
            if at[c] != 1.0 {
                kl += (at[c] - 1.0) * (fam_t[c].1 - ps_t);
            }
        }
        rce_terms[m] = rce;
        kl_terms[m] = kl;

        let kl_s = (s_tilde - nf) * t1_st;
        for c in 0..classes {
            let idx = c * voxels + m;
            let y = target[idx];
            let d_dice = (dp[c] - dot) / s;
            let d_rce = ysum * t1_s - if y != 0.0 { y * fam_a[c].2 } else { 0.0 };
            let d_kl = if y == 1.0 {
                0.0
            } else {
                (1.0 - y) * ((at[c] - 1.0) * fam_t[c].2 - kl_s)
            };
            let d_alpha = d_dice + w_edl * d_rce + w_kl * d_kl;
            grad[idx] = d_alpha * sigmoid(z[idx]);
        }
    }

    let rce = pairwise_sum(&rce_terms) / vf;
    let kl = pairwise_sum(&kl_terms) / vf;
    Ok((LossBreakdown::compose(dice, rce, kl, cfg), grad))
}

fn same_shape<A: Element, B: Element>(a: &Volume<A>, b: &Volume<B>) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

fn widen<T: Element>(v: &Volume<T>) -> Vec<f64> {
    v.data().iter().map(|x| x.to_f64()).collect()
}

/// Soft Dice loss of per-voxel probabilities against a one-hot target.
pub fn dice_loss<T: Element, U: Element>(
    pred_probs: &Volume<T>,
    target: &Volume<U>,
    cfg: &LossConfig,
) -> Result<f64> {
    same_shape(pred_probs, target)?;
    dice_from_probs(
        &widen(pred_probs),
        &widen(target),
        target.channels(),
        cfg.epsilon_dice,
    )
}

pub fn rce_loss<T: Element, U: Element>(alpha: &Volume<T>, target: &Volume<U>) -> Result<f64> {
    same_shape(alpha, target)?;
    rce_from_alpha(&widen(alpha), &widen(target), target.channels())
}

pub fn kl_loss<T: Element, U: Element>(alpha: &Volume<T>, target: &Volume<U>) -> Result<f64> {
    same_shape(alpha, target)?;
    kl_from_alpha(&widen(alpha), &widen(target), target.channels())
}

pub fn total_loss<U: Element>(
    evidence: &EvidenceField,
    target: &Volume<U>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    same_shape(evidence.volume(), target)?;
    loss_from_evidence(
        &widen(evidence.volume()),
        &widen(target),
        target.channels(),
        cfg,
    )
}

/// Gradient of [`total_loss`] with respect to the activations `z` that
/// produced the evidence through softplus.
pub fn loss_gradient<U: Element>(
    z: &Volume<f64>,
    target: &Volume<U>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Volume<f64>)> {
    same_shape(z, target)?;
    let (loss, grad) = loss_and_gradient(z.data(), &widen(target), target.channels(), cfg)?;
    Ok((
        loss,
        Volume::new(z.dims(), z.channels(), z.voxel_size(), grad)?,
    ))
}
