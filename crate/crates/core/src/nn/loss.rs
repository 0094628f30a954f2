//! Fused scalar losses. Each computes its value and input gradient directly.

use ndarray::{Array2, Axis};

use super::graph::{Graph, Mat, Var};

/// Mean squared error over the selected rows (all elements of those rows).
/// An empty row set yields 0 with zero gradient.
pub fn mse_rows(g: &mut Graph, pred: Var, target: &Mat, rows: &[usize]) -> Var {
    let p = g.value(pred);
    assert_eq!(p.dim(), target.dim(), "mse_rows shape mismatch");
    let mut grad = Mat::zeros(p.dim());
    let n = (rows.len() * p.ncols()) as f64;
    let mut total = 0.0;
    for &r in rows {
        for c in 0..p.ncols() {
            let d = p[[r, c]] - target[[r, c]];
            total += d * d;
            grad[[r, c]] = 2.0 * d / n;
        }
    }
    let value = if rows.is_empty() { 0.0 } else { total / n };
    g.loss_node(value, vec![(pred, grad)])
}

pub fn mse(g: &mut Graph, pred: Var, target: &Mat) -> Var {
    let rows: Vec<usize> = (0..target.nrows()).collect();
    mse_rows(g, pred, target, &rows)
}

/// Element-mean Huber/smooth-L1 with transition at `beta`.
pub fn smooth_l1(g: &mut Graph, pred: Var, target: &Mat, beta: f64) -> Var {
    let p = g.value(pred);
    assert_eq!(p.dim(), target.dim());
    let n = p.len() as f64;
    let mut grad = Mat::zeros(p.dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad).and(p).and(target).for_each(|gr, &a, &b| {
        let d = a - b;
        if d.abs() < beta {
            total += 0.5 * d * d / beta;
            *gr = d / beta / n;
        } else {
            total += d.abs() - 0.5 * beta;
            *gr = d.signum() / n;
        }
    });
    g.loss_node(total / n, vec![(pred, grad)])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Element-mean weighted binary cross-entropy on logits.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &Mat, weights: &Mat) -> Var {
    let x = g.value(logits);
    assert_eq!(x.dim(), targets.dim());
    assert_eq!(x.dim(), weights.dim());
    let n = x.len() as f64;
    let mut grad = Mat::zeros(x.dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad).and(x).and(targets).and(weights).for_each(|gr, &z, &y, &w| {
        total += w * (softplus(z) - y * z);
        *gr = w * (sigmoid(z) - y) / n;
    });
    g.loss_node(total / n, vec![(logits, grad)])
}

pub fn softmax(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

pub const DICE_SMOOTH: f64 = 1e-5;

/// Soft Dice loss `1 - mean_c dice_c` over foreground classes 1..K of
/// probabilities `p` against one-hot labels, plus d/dp.
pub fn soft_dice(p: &Mat, labels: &[u8]) -> (f64, Mat) {
    let k = p.ncols();
    let fg = (k - 1) as f64;
    let mut grad = Mat::zeros(p.dim());
    let mut dice_sum = 0.0;
    for c in 1..k {
        let mut inter = 0.0;
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let gt = (l as usize == c) as u8 as f64;
            inter += p[[r, c]] * gt;
            total += p[[r, c]] + gt;
        }
        let den = total + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        dice_sum += num / den;
        for (r, &l) in labels.iter().enumerate() {
            let gt = (l as usize == c) as u8 as f64;
            grad[[r, c]] = -((2.0 * gt * den - num) / (den * den)) / fg;
        }
    }
    (1.0 - dice_sum / fg, grad)
}

/// Mean of pixel-mean cross-entropy and foreground soft-Dice on softmax(logits).
pub fn segmentation_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let z = g.value(logits);
    assert_eq!(z.nrows(), labels.len());
    let n = z.nrows() as f64;
    let p = softmax(z);
    let mut ce = 0.0;
    let mut d_ce = p.clone();
    for (r, &l) in labels.iter().enumerate() {
        ce -= p[[r, l as usize]].max(1e-300).ln();
        d_ce[[r, l as usize]] -= 1.0;
    }
    ce /= n;
    d_ce /= n;
    let (dice, dp) = soft_dice(&p, labels);
    // softmax backward for the Dice term
    let inner = (&dp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_dice = &p * &(&dp - &inner);
    let grad: Array2<f64> = (d_ce + d_dice) * 0.5;
    g.loss_node(0.5 * (ce + dice), vec![(logits, grad)])
}
