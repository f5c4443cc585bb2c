//! Prediction quality: explained variance and RMSE for steering, accuracy
//! and F1 for collision.

use crate::{Error, Result};

/// Collision probabilities at or above this count as positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub eva: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// One row per frame: steering angle and collision probability or label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Records {
    pub steering: Vec<f64>,
    pub collision: Vec<f64>,
}

impl Records {
    pub fn len(&self) -> usize {
        self.steering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steering.is_empty()
    }

    pub fn push(&mut self, steering: f64, collision: f64) {
        self.steering.push(steering);
        self.collision.push(collision);
    }

    /// CSV with a `steering,collision` header.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut r = Records::default();
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(h) if h.replace(' ', "") == "steering,collision" => {}
            Some(h) => return Err(Error::Domain(format!("expected header steering,collision, found {h:?}"))),
            None => return Err(Error::EmptyInput),
        }
        for (i, line) in lines.enumerate() {
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Domain(format!("row {}: {e}", i + 1)))?;
            if f.len() != 2 || f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("row {}: expected two finite numbers", i + 1)));
            }
            r.push(f[0], f[1]);
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("steering,collision\n");
        for (a, b) in self.steering.iter().zip(&self.collision) {
            s.push_str(&format!("{a},{b}\n"));
        }
        s
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn check(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Explained variance `1 - Var[y - y_hat] / Var[y]`.
pub fn explained_variance(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth.len(), pred.len())?;
    let vt = variance(truth);
    if vt == 0.0 {
        return Err(Error::Domain("ground truth has zero variance".into()));
    }
    let resid: Vec<f64> = truth.iter().zip(pred).map(|(t, p)| t - p).collect();
    Ok(1.0 - variance(&resid) / vt)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth.len(), pred.len())?;
    Ok((truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / truth.len() as f64).sqrt())
}

fn classes(labels: &[f64], probs: &[f64]) -> Result<(usize, usize, usize, usize)> {
    check(labels.len(), probs.len())?;
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for (&l, &p) in labels.iter().zip(probs) {
        let truth = match l {
            x if x == 1.0 => true,
            x if x == 0.0 => false,
            x => return Err(Error::Domain(format!("label {x} is not 0 or 1"))),
        };
        match (truth, p >= THRESHOLD) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
        }
    }
    Ok((tp, tn, fp, fneg))
}

pub fn accuracy(labels: &[f64], probs: &[f64]) -> Result<f64> {
    let (tp, tn, _, _) = classes(labels, probs)?;
    Ok((tp + tn) as f64 / labels.len() as f64)
}

/// `2 P R / (P + R)`; 1 when there are no positives at all, 0 when nothing
/// positive is found.
pub fn f1(labels: &[f64], probs: &[f64]) -> Result<f64> {
    let (tp, _, fp, fneg) = classes(labels, probs)?;
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn evaluate(pred: &Records, labels: &Records) -> Result<Metrics> {
    check(labels.len(), pred.len())?;
    Ok(Metrics {
        eva: explained_variance(&labels.steering, &pred.steering)?,
        rmse: rmse(&labels.steering, &pred.steering)?,
        accuracy: accuracy(&labels.collision, &pred.collision)?,
        f1: f1(&labels.collision, &pred.collision)?,
    })
}
