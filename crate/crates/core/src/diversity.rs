//! Paired-worker regularization.
//!
//! Paired workers train on the same mixed batch and add `lambda * KL(y1 || y2)`
//! to their loss, where `y1` are their own predictions and `y2` the partner's
//! predictions with gradient stopped. `lambda < 0` pushes the pair apart,
//! `lambda > 0` is co-distillation. Exchanging `y2` each step is cross-worker
//! communication; runs using this are not communication-free.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, softmax, ExampleObjective, Matrix};

/// Lower clamp for the second argument of the KL divergence.
pub const KL_Q_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MixSource {
    /// Coefficient drawn from `Beta(alpha, alpha)` per batch.
    Beta { alpha: f64 },
    /// Fixed coefficient.
    Fixed { coeff: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    pub lambda: f64,
    /// `pairing[k]` is the partner of worker (group) `k`. Empty means
    /// adjacent pairs `(0, 1), (2, 3), ...`.
    #[serde(default)]
    pub pairing: Vec<usize>,
    pub mix: MixSource,
}

impl DiversityConfig {
    pub fn adjacent_pairs(num_workers: usize) -> Vec<usize> {
        (0..num_workers).map(|k| k ^ 1).collect()
    }

    /// Pairing resolved for `num_workers` workers.
    pub fn partners(&self, num_workers: usize) -> Result<Vec<usize>> {
        let pairing = if self.pairing.is_empty() {
            Self::adjacent_pairs(num_workers)
        } else {
            self.pairing.clone()
        };
        if pairing.len() != num_workers {
            return Err(Error::InvalidConfig(format!(
                "pairing covers {} workers, run has {num_workers}",
                pairing.len()
            )));
        }
        for (k, &p) in pairing.iter().enumerate() {
            if p >= num_workers || p == k || pairing[p] != k {
                return Err(Error::InvalidConfig(format!(
                    "pairing must be an involution without fixed points; worker {k} -> {p}"
                )));
            }
        }
        Ok(pairing)
    }

    pub fn validate(&self, num_workers: usize) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        match self.mix {
            MixSource::Beta { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::InvalidConfig(format!("Beta parameter must be positive, got {alpha}")));
            }
            MixSource::Fixed { coeff } if !(0.0..=1.0).contains(&coeff) => {
                return Err(Error::InvalidConfig(format!("mix coefficient must lie in [0, 1], got {coeff}")));
            }
            _ => {}
        }
        self.partners(num_workers).map(|_| ())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("{name} has entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0` and `q` clamped below by
/// [`KL_Q_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} classes", p.len(), q.len())));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_Q_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// A batch seen by both workers of a pair, with soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Matrix,
    pub ids: Vec<u64>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    /// Weight of `batch_a` in the mix.
    pub coeff: f64,
}

/// Convex combination `coeff * a + (1 - coeff) * b` of two equal-size batches.
pub fn mix_batches(a: &Batch, b: &Batch, source: MixSource, mix_seed: u64) -> Result<MixedBatch> {
    if a.len() != b.len() || a.inputs.cols != b.inputs.cols {
        return Err(Error::DimensionMismatch(format!(
            "cannot mix batches of {}x{} and {}x{}",
            a.inputs.rows, a.inputs.cols, b.inputs.rows, b.inputs.cols
        )));
    }
    let coeff = match source {
        MixSource::Fixed { coeff } => coeff,
        MixSource::Beta { alpha } => {
            let beta = Beta::new(alpha, alpha)
                .map_err(|e| Error::InvalidConfig(format!("Beta({alpha}, {alpha}): {e}")))?;
            beta.sample(&mut ChaCha8Rng::seed_from_u64(mix_seed))
        }
    };
    let inputs = if coeff == 1.0 {
        a.inputs.clone()
    } else {
        Matrix {
            rows: a.inputs.rows,
            cols: a.inputs.cols,
            data: a
                .inputs
                .data
                .iter()
                .zip(&b.inputs.data)
                .map(|(x, y)| coeff * x + (1.0 - coeff) * y)
                .collect(),
        }
    };
    Ok(MixedBatch {
        inputs,
        ids: a.ids.clone(),
        labels_a: a.labels.clone(),
        labels_b: b.labels.clone(),
        coeff,
    })
}

/// Adds the KL terms to a pair of base losses:
/// `(loss_a + lambda KL(y1 || y2), loss_b + lambda KL(y2 || y1))`.
pub fn paired_loss(loss_a: f64, loss_b: f64, y1: &[f64], y2: &[f64], lambda: f64) -> Result<(f64, f64)> {
    if lambda == 0.0 {
        return Ok((loss_a, loss_b));
    }
    Ok((
        loss_a + lambda * kl_divergence(y1, y2)?,
        loss_b + lambda * kl_divergence(y2, y1)?,
    ))
}

/// Per-example training loss of one worker in a pair: mixed cross-entropy
/// plus `lambda * KL(own || partner)`, with the partner's probabilities held
/// constant.
pub struct PairedObjective<'a> {
    pub batch: &'a MixedBatch,
    pub partner_probs: &'a Matrix,
    pub lambda: f64,
}

impl ExampleObjective for PairedObjective<'_> {
    fn eval(&self, row: usize, logits: &[f64], dlogits: &mut [f64]) -> Result<f64> {
        let c = logits.len();
        let (ya, yb) = (self.batch.labels_a[row], self.batch.labels_b[row]);
        if ya >= c || yb >= c {
            return Err(Error::LabelOutOfRange {
                label: ya.max(yb),
                num_classes: c,
            });
        }
        let w = self.batch.coeff;
        let p = softmax(logits);
        let lse = log_sum_exp(logits);
        let mut loss = w * (lse - logits[ya]) + (1.0 - w) * (lse - logits[yb]);
        dlogits.copy_from_slice(&p);
        dlogits[ya] -= w;
        dlogits[yb] -= 1.0 - w;
        if self.lambda != 0.0 {
            let q = self.partner_probs.row(row);
            // d KL(p || q) / d z = p * (c - <p, c>), c_i = ln p_i - ln q_i
            let log_ratio: Vec<f64> = p
                .iter()
                .zip(q)
                .map(|(pi, qi)| if *pi > 0.0 { pi.ln() - qi.max(KL_Q_FLOOR).ln() } else { 0.0 })
                .collect();
            let kl: f64 = p.iter().zip(&log_ratio).map(|(pi, r)| pi * r).sum();
            loss += self.lambda * kl;
            for i in 0..c {
                dlogits[i] += self.lambda * p[i] * (log_ratio[i] - kl);
            }
        }
        Ok(loss)
    }
}

/// Fraction of rows on which two score matrices have different argmax.
pub fn disagreement(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols || a.rows == 0 {
        return Err(Error::DimensionMismatch("disagreement needs equal nonempty shapes".into()));
    }
    let pa = crate::stats::predictions(a);
    let pb = crate::stats::predictions(b);
    Ok(pa.iter().zip(&pb).filter(|(x, y)| x != y).count() as f64 / a.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_differences, forward_with_ids, grad_payload, init_params, probabilities, Mode, NetworkConfig};

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let big = kl_divergence(&[0.5, 0.5], &[1.0 - KL_Q_FLOOR, KL_Q_FLOOR]).unwrap();
        assert!(big.is_finite() && big > 5.0);
        let zero_q = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(zero_q.is_finite());
        assert!(kl_divergence(&[1.2, -0.2], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    fn batch(values: &[f64], labels: &[usize]) -> Batch {
        Batch {
            inputs: Matrix::new(values.len(), 1, values.to_vec()).unwrap(),
            labels: labels.to_vec(),
            ids: (0..values.len() as u64).collect(),
        }
    }

    #[test]
    fn mix_examples() {
        let a = batch(&[0.0], &[0]);
        let b = batch(&[2.0], &[1]);
        let m = mix_batches(&a, &b, MixSource::Fixed { coeff: 1.0 }, 0).unwrap();
        assert_eq!(m.inputs, a.inputs);
        let m = mix_batches(&a, &b, MixSource::Fixed { coeff: 0.5 }, 0).unwrap();
        assert_eq!(m.inputs.data, vec![1.0]);
        assert_eq!((m.labels_a[0], m.labels_b[0], m.coeff), (0, 1, 0.5));
        let beta = MixSource::Beta { alpha: 0.4 };
        let x = mix_batches(&a, &b, beta, 17).unwrap();
        assert_eq!(x, mix_batches(&a, &b, beta, 17).unwrap());
        assert!((0.0..=1.0).contains(&x.coeff));
        assert!(mix_batches(&a, &batch(&[1.0, 2.0], &[0, 0]), beta, 1).is_err());
    }

    #[test]
    fn paired_loss_examples() {
        let y1 = [0.7, 0.3];
        let y2 = [0.4, 0.6];
        assert_eq!(paired_loss(1.0, 2.0, &y1, &y2, 0.0).unwrap(), (1.0, 2.0));
        assert_eq!(paired_loss(1.0, 2.0, &y1, &y1, -3.0).unwrap(), (1.0, 2.0));
        let (a, b) = paired_loss(1.0, 2.0, &y1, &y2, 0.5).unwrap();
        assert!((a - 1.0 - 0.5 * kl_divergence(&y1, &y2).unwrap()).abs() < 1e-15);
        assert!((b - 2.0 - 0.5 * kl_divergence(&y2, &y1).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pairing_validation() {
        let cfg = DiversityConfig {
            lambda: 0.1,
            pairing: vec![],
            mix: MixSource::Beta { alpha: 1.0 },
        };
        assert_eq!(cfg.partners(4).unwrap(), vec![1, 0, 3, 2]);
        assert!(cfg.partners(3).is_err());
        let bad = DiversityConfig {
            pairing: vec![1, 2, 0],
            ..cfg.clone()
        };
        assert!(bad.validate(3).is_err());
        let fixed_point = DiversityConfig {
            pairing: vec![0, 1],
            ..cfg
        };
        assert!(fixed_point.validate(2).is_err());
    }

    #[test]
    fn paired_gradient_matches_finite_differences_with_partner_frozen() {
        let net = NetworkConfig {
            input_dim: 2,
            hidden_dim: 3,
            num_blocks: 1,
            num_classes: 3,
            drop_prob: 0.0,
        };
        let theta_a = init_params(&net, 1, false).unwrap();
        let theta_b = init_params(&net, 2, false).unwrap();
        let a = Batch {
            inputs: Matrix::new(3, 2, vec![0.1, -0.4, 1.0, 0.3, -0.7, 0.9]).unwrap(),
            labels: vec![0, 1, 2],
            ids: vec![0, 1, 2],
        };
        let b = Batch {
            inputs: Matrix::new(3, 2, vec![0.5, 0.5, -1.0, 0.2, 0.0, -0.3]).unwrap(),
            labels: vec![2, 2, 1],
            ids: vec![3, 4, 5],
        };
        let mixed = mix_batches(&a, &b, MixSource::Fixed { coeff: 0.3 }, 0).unwrap();
        let partner = probabilities(&forward_with_ids(&theta_b, &mixed.inputs, &mixed.ids, Mode::Eval).unwrap());
        for lambda in [-0.7, 0.0, 0.9] {
            let obj = PairedObjective {
                batch: &mixed,
                partner_probs: &partner,
                lambda,
            };
            let (_, g) = grad_payload(&theta_a, &mixed.inputs, &mixed.ids, Mode::Eval, &obj)
                .unwrap()
                .finish()
                .unwrap();
            let total_a = |v: &[f64]| -> f64 {
                let p = theta_a.with_values(v.to_vec());
                let z = forward_with_ids(&p, &mixed.inputs, &mixed.ids, Mode::Eval).unwrap();
                let mut sum = 0.0;
                let mut scratch = vec![0.0; 3];
                for i in 0..3 {
                    sum += obj.eval(i, z.row(i), &mut scratch).unwrap();
                }
                sum / 3.0
            };
            let fd = central_differences(theta_a.values(), 1e-6, total_a);
            for (x, y) in g.values().iter().zip(&fd) {
                assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "lambda {lambda}: {x} vs {y}");
            }
            // the partner's parameters do not enter total_a once its predictions are fixed
            let fd_partner = central_differences(theta_b.values(), 1e-6, |_| total_a(theta_a.values()));
            assert!(fd_partner.iter().all(|&v| v == 0.0));
        }
    }
}
