//! Identity cross-entropy, batch-hard triplet loss and their weighted sum.
//!
//! Every loss has a `_grad` companion returning the partial derivatives the
//! model backward pass consumes.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_id: f64,
    pub lambda_tri: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_tri: 1.0,
            margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_tri", self.lambda_tri),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values for one batch, as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::Argument(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.nrows()
        )));
    }
    let c = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean negative log-softmax of the true class.
pub fn id_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    id_loss_grad(logits, labels).map(|(l, _)| l)
}

pub fn id_loss_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - log_z).exp() / b;
        }
        grad[[i, labels[i]]] -= 1.0 / b;
    }
    Ok((total / b, grad))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, margin + |a - p|^2 - |a - n|^2)`.
pub fn triplet_loss(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> f64 {
    (margin + sq_dist(a, p) - sq_dist(a, n)).max(0.0)
}

/// Hardest positive and hardest negative per anchor. Ties keep the lowest
/// index.
pub fn mine_batch_hard(features: &Array2<f64>, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = features.nrows();
    if labels.len() != b {
        return Err(Error::Argument(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Mining(id));
    }
    if counts.len() < 2 {
        return Err(Error::Argument("batch-hard mining needs at least two identities".into()));
    }
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = sq_dist(features.row(a), features.row(j));
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        out.push((pos.expect("counted").0, neg.expect("counted").0));
    }
    Ok(out)
}

/// Mean over anchors of the triplet loss with batch-hard mining.
pub fn batch_hard_triplet(features: &Array2<f64>, labels: &[usize], margin: f64) -> Result<f64> {
    batch_hard_triplet_grad(features, labels, margin).map(|(l, _)| l)
}

pub fn batch_hard_triplet_grad(
    features: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    let pairs = mine_batch_hard(features, labels)?;
    let b = features.nrows() as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut total = 0.0;
    for (a, &(p, n)) in pairs.iter().enumerate() {
        let (fa, fp, fn_) = (features.row(a), features.row(p), features.row(n));
        let l = triplet_loss(fa, fp, fn_, margin);
        total += l;
        if l > 0.0 {
            // d/da = 2(a - p) - 2(a - n) = 2(n - p)
            let da = (&fn_ - &fp) * (2.0 / b);
            let dp = (&fp - &fa) * (2.0 / b);
            let dn = (&fa - &fn_) * (2.0 / b);
            let mut row = grad.row_mut(a);
            row += &da;
            let mut row = grad.row_mut(p);
            row += &dp;
            let mut row = grad.row_mut(n);
            row += &dn;
        }
    }
    Ok((total / b, grad))
}

pub fn total_loss(
    logits: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_grad(logits, features, labels, cfg).map(|(l, _, _)| l)
}

/// Weighted loss with gradients w.r.t. logits and features.
pub fn total_loss_grad(
    logits: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let (id, mut dlogits) = id_loss_grad(logits, labels)?;
    let (triplet, mut dfeat) = batch_hard_triplet_grad(features, labels, cfg.margin)?;
    dlogits *= cfg.lambda_id;
    dfeat *= cfg.lambda_tri;
    let total = cfg.lambda_id * id + cfg.lambda_tri * triplet;
    Ok((LossBreakdown { id, triplet, total }, dlogits, dfeat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, "loss", &[]);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = id_loss(&Array2::zeros((3, 5)), &[0, 2, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logit_goes_to_zero() {
        let l = id_loss(&array![[200.0, 0.0, 0.0]], &[0]).unwrap();
        assert!(l < 1e-80);
    }

    #[test]
    fn id_loss_matches_direct_sum_and_is_shift_invariant() {
        let logits = random(8, 6, 1);
        let labels = [0, 1, 2, 3, 4, 5, 0, 1];
        let mut direct = 0.0;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct -= (row[labels[i]].exp() / z).ln();
        }
        direct /= 8.0;
        let l = id_loss(&logits, &labels).unwrap();
        assert!((l - direct).abs() < 1e-10);
        let shifted = &logits + 7.5;
        assert!((id_loss(&shifted, &labels).unwrap() - l).abs() < 1e-10);
    }

    #[test]
    fn id_loss_rejects_bad_labels() {
        assert!(matches!(id_loss(&Array2::zeros((1, 3)), &[3]), Err(Error::Argument(_))));
        assert!(id_loss(&Array2::zeros((0, 3)), &[]).is_err());
    }

    #[test]
    fn triplet_special_cases() {
        let a = array![0.0, 0.0];
        let n = array![(1.3f64).sqrt(), 0.0];
        assert_eq!(triplet_loss(a.view(), a.view(), n.view(), 0.3), 0.0);
        assert_eq!(triplet_loss(a.view(), a.view(), a.view(), 0.3), 0.3);
    }

    #[test]
    fn triplet_is_rotation_invariant() {
        let t = 0.7f64;
        let rot = array![[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        let pts = random(3, 2, 4);
        let r = pts.dot(&rot.t());
        let before = triplet_loss(pts.row(0), pts.row(1), pts.row(2), 0.5);
        let after = triplet_loss(r.row(0), r.row(1), r.row(2), 0.5);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn batch_hard_special_cases() {
        let same = Array2::from_elem((4, 3), 0.5);
        assert_eq!(batch_hard_triplet(&same, &[0, 0, 1, 1], 0.3).unwrap(), 0.3);
        let clusters = array![[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]];
        assert_eq!(batch_hard_triplet(&clusters, &[0, 0, 1, 1], 0.3).unwrap(), 0.0);
        assert!(matches!(
            batch_hard_triplet(&random(3, 2, 0), &[0, 0, 7], 0.3),
            Err(Error::Mining(7))
        ));
    }

    fn numeric<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let logits = random(8, 4, 11);
        let feats = random(8, 5, 12);
        let labels = [0, 0, 0, 0, 3, 3, 3, 3];
        let (_, g) = id_loss_grad(&logits, &labels).unwrap();
        let n = numeric(|x| id_loss(x, &labels).unwrap(), &logits);
        for (a, b) in g.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        let (_, g) = batch_hard_triplet_grad(&feats, &labels, 2.0).unwrap();
        let n = numeric(|x| batch_hard_triplet(x, &labels, 2.0).unwrap(), &feats);
        for (a, b) in g.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn total_loss_weights() {
        let logits = random(4, 3, 2);
        let feats = random(4, 3, 3);
        let labels = [0, 0, 1, 1];
        let id = id_loss(&logits, &labels).unwrap();
        let tri = batch_hard_triplet(&feats, &labels, 0.3).unwrap();
        let only_id = LossConfig {
            lambda_tri: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&logits, &feats, &labels, &only_id).unwrap().total, id);
        let both = total_loss(&logits, &feats, &labels, &LossConfig::default()).unwrap();
        assert_eq!(both.total, id + tri);
        let none = LossConfig {
            lambda_id: 0.0,
            lambda_tri: 0.0,
            margin: 0.3,
        };
        let (l, dl, df) = total_loss_grad(&logits, &feats, &labels, &none).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(dl.iter().chain(df.iter()).all(|&v| v == 0.0));
    }
}
