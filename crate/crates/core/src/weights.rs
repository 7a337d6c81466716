//! Operations on parameter vectors: averaging, EMA, interpolation,
//! ensembling, head initialization and interpolation barrier scans.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exact::exact_mean;
use crate::nn::{self, forward, probabilities, Matrix, Mode, ParamVector};
use crate::stats::accuracy;

/// Elementwise mean of parameter vectors with identical layouts.
///
/// Uses the exact reduction, so the result does not depend on list order.
pub fn uniform_average<P: Borrow<ParamVector>>(params: &[P]) -> Result<ParamVector> {
    let first = params
        .first()
        .ok_or_else(|| Error::Empty("uniform_average of an empty list".into()))?
        .borrow();
    for p in params {
        first.check_same_layout(p.borrow())?;
    }
    let slices: Vec<&[f64]> = params.iter().map(|p| p.borrow().values()).collect();
    Ok(first.with_values(exact_mean(&slices)?))
}

/// Exponential moving average of parameters with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub beta: f64,
    /// Biased accumulator, zero-initialized.
    pub accum: ParamVector,
    pub steps: u64,
    /// Running value of `accum / (1 - beta^steps)`, updated incrementally.
    debiased: ParamVector,
}

impl EmaState {
    pub fn new(beta: f64, like: &ParamVector) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "EMA decay must lie in (0, 1), got {beta}"
            )));
        }
        Ok(Self {
            beta,
            accum: ParamVector::zeros_like(like),
            steps: 0,
            debiased: ParamVector::zeros_like(like),
        })
    }

    pub fn update(&mut self, params: &ParamVector) -> Result<()> {
        self.accum.check_same_layout(params)?;
        let beta = self.beta;
        self.steps += 1;
        for (a, &v) in self.accum.values_mut().iter_mut().zip(params.values()) {
            *a = beta * *a + (1.0 - beta) * v;
        }
        // m_t = m_{t-1} + w_t (v - m_{t-1}), w_t = (1 - beta) / (1 - beta^t);
        // algebraically equal to accum / (1 - beta^t) and exact on constant streams
        let weight = if self.steps == 1 {
            1.0
        } else {
            (1.0 - beta) / (1.0 - beta.powf(self.steps as f64))
        };
        for (m, &v) in self.debiased.values_mut().iter_mut().zip(params.values()) {
            *m += weight * (v - *m);
        }
        Ok(())
    }
}

/// `accum <- beta * accum + (1 - beta) * params`.
pub fn ema_update(mut state: EmaState, params: &ParamVector) -> Result<EmaState> {
    state.update(params)?;
    Ok(state)
}

/// Bias-corrected average, `accum / (1 - beta^t)`.
pub fn ema_debias(state: &EmaState) -> Result<ParamVector> {
    if state.steps == 0 {
        return Err(Error::Empty("EMA has no observations yet".into()));
    }
    Ok(state.debiased.clone())
}

/// Mixing coefficient for weight interpolation, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct InterpolationCoefficient(f64);

impl InterpolationCoefficient {
    pub fn new(alpha: f64) -> Self {
        Self(if alpha.is_nan() { 0.0 } else { alpha.clamp(0.0, 1.0) })
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<f64> for InterpolationCoefficient {
    fn from(v: f64) -> Self {
        Self::new(v)
    }
}

impl From<InterpolationCoefficient> for f64 {
    fn from(c: InterpolationCoefficient) -> f64 {
        c.0
    }
}

/// `(1 - alpha) * a + alpha * b`; exact at both endpoints.
pub fn interpolate(a: &ParamVector, b: &ParamVector, alpha: f64) -> Result<ParamVector> {
    a.check_same_layout(b)?;
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
        .collect();
    Ok(a.with_values(values))
}

/// WiSE-FT: interpolate from the initial model toward the fine-tuned one.
pub fn wise_ft(
    theta_init: &ParamVector,
    theta_ft: &ParamVector,
    alpha: InterpolationCoefficient,
) -> Result<ParamVector> {
    interpolate(theta_init, theta_ft, alpha.get())
}

/// Mean of the per-model softmax probabilities; each row sums to one.
pub fn ensemble_predict<P: Borrow<ParamVector>>(models: &[P], inputs: &Matrix) -> Result<Matrix> {
    let first = models
        .first()
        .ok_or_else(|| Error::Empty("ensemble of no models".into()))?
        .borrow();
    let probs: Vec<Matrix> = models
        .iter()
        .map(|m| {
            first.check_same_layout(m.borrow())?;
            Ok(probabilities(&forward(m.borrow(), inputs, Mode::Eval)?))
        })
        .collect::<Result<_>>()?;
    let slices: Vec<&[f64]> = probs.iter().map(|p| p.data.as_slice()).collect();
    Matrix::new(probs[0].rows, probs[0].cols, exact_mean(&slices)?)
}

/// Mean cross-entropy and accuracy of a model in eval mode.
pub fn evaluate(params: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    let logits = forward(params, &data.inputs, Mode::Eval)?;
    Ok((
        nn::cross_entropy(&logits, &data.labels)?,
        accuracy(&logits, &data.labels)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierScan {
    pub points: Vec<ScanPoint>,
    /// `max_alpha loss(alpha) - max(loss(0), loss(1))`.
    pub barrier: f64,
}

/// Scans `(1 - alpha) a + alpha b` at `alpha = j / (m - 1)` with a custom
/// evaluator returning `(loss, accuracy)`.
pub fn barrier_scan_with(
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    num_points: usize,
    mut eval: impl FnMut(&ParamVector) -> Result<(f64, f64)>,
) -> Result<BarrierScan> {
    if num_points < 2 {
        return Err(Error::InvalidConfig(format!(
            "barrier scan needs at least 2 points, got {num_points}"
        )));
    }
    let mut points = Vec::with_capacity(num_points);
    for j in 0..num_points {
        let alpha = if j + 1 == num_points {
            1.0
        } else {
            j as f64 / (num_points - 1) as f64
        };
        let (loss, acc) = eval(&interpolate(theta_a, theta_b, alpha)?)?;
        points.push(ScanPoint {
            alpha,
            loss,
            accuracy: acc,
        });
    }
    let peak = points.iter().map(|p| p.loss).fold(f64::NEG_INFINITY, f64::max);
    let ends = points[0].loss.max(points[num_points - 1].loss);
    Ok(BarrierScan {
        points,
        barrier: peak - ends,
    })
}

/// Loss barrier along the straight line between two models on `eval_set`.
pub fn barrier_scan(
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    num_points: usize,
    eval_set: &Dataset,
) -> Result<BarrierScan> {
    barrier_scan_with(theta_a, theta_b, num_points, |p| evaluate(p, eval_set))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains only the classifier head, with the body frozen, by minibatch SGD
/// in eval mode. Body coordinates are returned bit-for-bit unchanged.
pub fn linear_probe(theta: &ParamVector, data: &Dataset, probe: &ProbeConfig) -> Result<ParamVector> {
    let head = theta
        .layout()
        .head_range()
        .ok_or_else(|| Error::LayoutMismatch("no head segment in layout".into()))?;
    if probe.steps == 0 {
        return Ok(theta.clone());
    }
    if probe.batch_size == 0 || probe.batch_size > data.len() {
        return Err(Error::InvalidConfig(format!(
            "probe batch size {} invalid for {} examples",
            probe.batch_size,
            data.len()
        )));
    }
    let mut params = theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut order: Vec<u64> = (0..data.len() as u64).collect();
    let mut cursor = order.len();
    for _ in 0..probe.steps {
        if cursor + probe.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.batch(&order[cursor..cursor + probe.batch_size]);
        cursor += probe.batch_size;
        let (_, grad) = nn::loss_and_grad(&params, &batch, Mode::Eval)?;
        let g = grad.values();
        for i in head.clone() {
            params.values_mut()[i] -= probe.lr * g[i];
        }
    }
    Ok(params)
}

/// Replaces a pretrained head with the rows selected by `class_map`, so
/// fine-tuning class `j` starts from pretraining class `class_map[j]`.
pub fn map_head(pretrained: &ParamVector, class_map: &[usize]) -> Result<ParamVector> {
    let shape = pretrained.shape()?;
    if let Some(&bad) = class_map.iter().find(|&&k| k >= shape.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: shape.num_classes,
        });
    }
    let mut new_shape = shape;
    new_shape.num_classes = class_map.len();
    let layout = std::sync::Arc::new(crate::nn::Layout::for_network(new_shape));
    let head = layout.head_range().expect("network layout");
    let mut values = pretrained.values()[..head.start].to_vec();
    let w = pretrained.segment("head.weight").expect("network layout");
    let b = pretrained.segment("head.bias").expect("network layout");
    let h = shape.hidden_dim;
    for &k in class_map {
        values.extend_from_slice(&w[k * h..(k + 1) * h]);
    }
    for &k in class_map {
        values.push(b[k]);
    }
    ParamVector::new(layout, values)
}

/// Keeps the body and attaches an all-zero head with `num_classes` outputs.
pub fn zero_head(pretrained: &ParamVector, num_classes: usize) -> Result<ParamVector> {
    let mut shape = pretrained.shape()?;
    shape.num_classes = num_classes;
    let layout = std::sync::Arc::new(crate::nn::Layout::for_network(shape));
    let head = layout.head_range().expect("network layout");
    let mut values = pretrained.values()[..head.start].to_vec();
    values.resize(layout.len(), 0.0);
    ParamVector::new(layout, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Keep the pretrained head, rows selected through the class map.
    MappedHead,
    /// Zero head trained by a linear probe before end-to-end fine-tuning.
    LinearProbe,
    /// Zero head, no probe.
    ZeroInit,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetworkConfig};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(v.to_vec())
    }

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_dim: 2,
            hidden_dim: 3,
            num_blocks: 1,
            num_classes: 4,
            drop_prob: 0.0,
        }
    }

    #[test]
    fn average_examples() {
        assert_eq!(
            uniform_average(&[pv(&[1.0, 3.0]), pv(&[3.0, 5.0])]).unwrap(),
            pv(&[2.0, 4.0])
        );
        let m = init_params(&cfg(), 1, false).unwrap();
        assert_eq!(uniform_average(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
        assert!(uniform_average::<ParamVector>(&[]).is_err());
        assert!(uniform_average(&[pv(&[1.0]), pv(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn average_of_group_averages() {
        let models: Vec<ParamVector> = (0..8).map(|s| init_params(&cfg(), s, false).unwrap()).collect();
        let global = uniform_average(&models).unwrap();
        let g1 = uniform_average(&models[..4]).unwrap();
        let g2 = uniform_average(&models[4..]).unwrap();
        let nested = uniform_average(&[g1, g2]).unwrap();
        for (a, b) in global.values().iter().zip(nested.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn ema_scalar_example() {
        let mut s = EmaState::new(0.9, &pv(&[0.0])).unwrap();
        s.update(&pv(&[1.0])).unwrap();
        s.update(&pv(&[2.0])).unwrap();
        assert!((s.accum.values()[0] - 0.29).abs() < 1e-12);
        let d = ema_debias(&s).unwrap().values()[0];
        assert!((d - 0.29 / 0.19).abs() < 1e-12);
        assert!((d - 1.526_315_789_473_684).abs() < 1e-12);
    }

    #[test]
    fn ema_first_step_and_small_beta() {
        let v = pv(&[0.3, -7.1, 1e-9]);
        let s = ema_update(EmaState::new(0.999, &v).unwrap(), &v).unwrap();
        assert_eq!(ema_debias(&s).unwrap(), v);

        let mut s = EmaState::new(1e-12, &v).unwrap();
        s.update(&pv(&[5.0, 5.0, 5.0])).unwrap();
        s.update(&v).unwrap();
        for (a, b) in s.accum.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ema_constant_stream() {
        let v = pv(&[0.1, 2.5, -3.3]);
        let mut s = EmaState::new(0.99, &v).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            s.update(&v).unwrap();
            assert_eq!(ema_debias(&s).unwrap(), v);
            let gap = (s.accum.values()[1] - 2.5).abs();
            assert!(gap <= prev);
            prev = gap;
        }
    }

    #[test]
    fn ema_errors() {
        assert!(EmaState::new(1.0, &pv(&[0.0])).is_err());
        assert!(EmaState::new(0.0, &pv(&[0.0])).is_err());
        let s = EmaState::new(0.5, &pv(&[0.0])).unwrap();
        assert!(ema_debias(&s).is_err());
        let mut s = s;
        assert!(s.update(&pv(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn wise_ft_examples() {
        let a = pv(&[0.0, 2.0]);
        let b = pv(&[2.0, 4.0]);
        assert_eq!(wise_ft(&a, &b, 0.0.into()).unwrap(), a);
        assert_eq!(wise_ft(&a, &b, 1.0.into()).unwrap(), b);
        assert_eq!(wise_ft(&a, &b, 0.5.into()).unwrap(), pv(&[1.0, 3.0]));
        assert_eq!(InterpolationCoefficient::new(1.7).get(), 1.0);
        assert_eq!(InterpolationCoefficient::new(-0.2).get(), 0.0);
    }

    #[test]
    fn ensemble_of_one_and_copies() {
        let m = init_params(&cfg(), 4, false).unwrap();
        let x = Matrix::new(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3]).unwrap();
        let own = probabilities(&forward(&m, &x, Mode::Eval).unwrap());
        assert_eq!(ensemble_predict(std::slice::from_ref(&m), &x).unwrap(), own);
        assert_eq!(ensemble_predict(&[m.clone(), m.clone(), m.clone()], &x).unwrap(), own);
        let other = init_params(&cfg(), 5, false).unwrap();
        let mixed = ensemble_predict(&[m, other], &x).unwrap();
        for i in 0..3 {
            assert!((mixed.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_argmax_matches_enumeration() {
        // Two 3-class models built from a head-only network on a constant
        // input, so their probabilities are set directly by the head bias.
        let shape = crate::nn::NetworkShape {
            input_dim: 1,
            hidden_dim: 1,
            num_blocks: 1,
            num_classes: 3,
        };
        let layout = std::sync::Arc::new(crate::nn::Layout::for_network(shape));
        let make = |bias: [f64; 3]| {
            let mut v = vec![0.0; layout.len()];
            let head_b = layout.segment("head.bias").unwrap().offset;
            v[head_b..head_b + 3].copy_from_slice(&bias);
            ParamVector::new(layout.clone(), v).unwrap()
        };
        // model a prefers class 0 weakly, model b prefers class 1 strongly
        let a = make([1.0, 0.8, -2.0]);
        let b = make([0.0, 2.0, -1.0]);
        let x = Matrix::new(1, 1, vec![0.0]).unwrap();
        let ens = ensemble_predict(&[a.clone(), b.clone()], &x).unwrap();
        let pa = nn::softmax(&[1.0, 0.8, -2.0]);
        let pb = nn::softmax(&[0.0, 2.0, -1.0]);
        let mean: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| (x + y) / 2.0).collect();
        let brute = (0..3).max_by(|&i, &j| mean[i].partial_cmp(&mean[j]).unwrap()).unwrap();
        let got = (0..3)
            .max_by(|&i, &j| ens.row(0)[i].partial_cmp(&ens.row(0)[j]).unwrap())
            .unwrap();
        assert_eq!(brute, 1);
        assert_eq!(got, brute);
        assert_ne!(
            (0..3).max_by(|&i, &j| pa[i].partial_cmp(&pa[j]).unwrap()).unwrap(),
            got
        );
    }

    #[test]
    fn barrier_trivial_cases() {
        let a = pv(&[1.0, -2.0]);
        let quad = |p: &ParamVector| -> Result<(f64, f64)> {
            Ok((p.values().iter().map(|v| v * v).sum(), 0.0))
        };
        let same = barrier_scan_with(&a, &a, 5, quad).unwrap();
        assert_eq!(same.barrier, 0.0);
        assert!(same.points.iter().all(|p| p.loss == 5.0));
        assert!(barrier_scan_with(&a, &a, 1, quad).is_err());
    }

    #[test]
    fn convex_loss_has_no_barrier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand_distr::{Distribution, StandardNormal};
        for _ in 0..50 {
            let mut draw = || -> Vec<f64> { (0..4).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let (a, b, center) = (pv(&draw()), pv(&draw()), draw());
            let quad = |p: &ParamVector| -> Result<(f64, f64)> {
                Ok((
                    p.values()
                        .iter()
                        .zip(&center)
                        .enumerate()
                        .map(|(i, (v, c))| (i as f64 + 1.0) * (v - c) * (v - c))
                        .sum(),
                    0.0,
                ))
            };
            let scan = barrier_scan_with(&a, &b, 21, quad).unwrap();
            assert!(scan.barrier <= 1e-12, "barrier {}", scan.barrier);
        }
    }

    #[test]
    fn barrier_endpoints_match_direct_evaluation() {
        let data = crate::data::generate_task(&crate::data::TaskSpec {
            num_classes: 2,
            input_dim: 2,
            cluster_spread: 0.5,
            pretrain_size: 8,
            finetune_size: 8,
            test_size: 10,
            shift: crate::data::ShiftSpec::none(),
            seed: 1,
            domain_gap: 0.1,
        })
        .unwrap()
        .test_id;
        let mut c = cfg();
        c.num_classes = 2;
        let a = init_params(&c, 1, false).unwrap();
        let b = init_params(&c, 2, false).unwrap();
        let scan = barrier_scan(&a, &b, 21, &data).unwrap();
        assert_eq!(scan.points.len(), 21);
        let (la, aa) = evaluate(&a, &data).unwrap();
        let (lb, ab) = evaluate(&b, &data).unwrap();
        assert_eq!((scan.points[0].loss, scan.points[0].accuracy), (la, aa));
        assert_eq!((scan.points[20].loss, scan.points[20].accuracy), (lb, ab));
        assert_eq!(scan.points[10].alpha, 0.5);
    }

    #[test]
    fn linear_probe_freezes_body_and_descends() {
        let task = crate::data::generate_task(&crate::data::TaskSpec {
            num_classes: 3,
            input_dim: 2,
            cluster_spread: 0.4,
            pretrain_size: 12,
            finetune_size: 60,
            test_size: 6,
            shift: crate::data::ShiftSpec::none(),
            seed: 4,
            domain_gap: 0.1,
        })
        .unwrap();
        let mut c = cfg();
        c.num_classes = 3;
        let theta = init_params(&c, 9, true).unwrap();
        let probe = ProbeConfig {
            steps: 0,
            lr: 0.5,
            batch_size: 10,
            seed: 1,
        };
        assert_eq!(linear_probe(&theta, &task.finetune_train, &probe).unwrap(), theta);

        let trained = linear_probe(
            &theta,
            &task.finetune_train,
            &ProbeConfig {
                steps: 100,
                ..probe
            },
        )
        .unwrap();
        let head = theta.layout().head_range().unwrap();
        assert_eq!(&trained.values()[..head.start], &theta.values()[..head.start]);
        assert_ne!(&trained.values()[head.clone()], &theta.values()[head]);
        let (before, _) = evaluate(&theta, &task.finetune_train).unwrap();
        let (after, _) = evaluate(&trained, &task.finetune_train).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn mapped_head_selects_rows() {
        let pre = init_params(&cfg(), 3, false).unwrap();
        let mapped = map_head(&pre, &[2, 0]).unwrap();
        let shape = mapped.shape().unwrap();
        assert_eq!(shape.num_classes, 2);
        let w_pre = pre.segment("head.weight").unwrap();
        let w = mapped.segment("head.weight").unwrap();
        assert_eq!(&w[..3], &w_pre[6..9]);
        assert_eq!(&w[3..], &w_pre[..3]);
        assert_eq!(mapped.segment("embed.weight"), pre.segment("embed.weight"));
        assert!(map_head(&pre, &[4]).is_err());

        let z = zero_head(&pre, 2).unwrap();
        assert!(z.segment("head.weight").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(z.segment("block0.weight"), pre.segment("block0.weight"));
    }
}
