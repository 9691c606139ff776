//! LCC, SROCC, MAE and the root-mean-square "MSE".

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("series lengths differ: {0} ground-truth values, {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("degenerate input: {0} has zero variance")]
    Degenerate(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check(truth: &[f64], pred: &[f64], need: usize) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.len() < need {
        return Err(MetricsError::TooShort {
            need,
            got: truth.len(),
        });
    }
    if truth.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("ground truth"));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("predictions"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson(truth: &[f64], pred: &[f64]) -> Result<f64> {
    let my = mean(truth);
    let mp = mean(pred);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (y, p) in truth.iter().zip(pred) {
        let dy = y - my;
        let dp = p - mp;
        sxy += dy * dp;
        sxx += dy * dy;
        syy += dp * dp;
    }
    if sxx == 0.0 {
        return Err(MetricsError::Degenerate("ground truth"));
    }
    if syy == 0.0 {
        return Err(MetricsError::Degenerate("predictions"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation coefficient.
pub fn lcc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth, pred, 2)?;
    pearson(truth, pred)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut seen = vec![false; ranks.len()];
        ranks.iter().any(|&r| std::mem::replace(&mut seen[r as usize - 1], true))
    }
}

/// Spearman rank-order correlation. Without ties this is the closed form
/// `1 − 6Σd²/(N(N²−1))`; with ties it is the Pearson correlation of the
/// averaged ranks.
pub fn srocc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth, pred, 2)?;
    let v = average_ranks(truth);
    let p = average_ranks(pred);
    if has_ties(&v) || has_ties(&p) {
        return pearson(&v, &p);
    }
    let n = truth.len() as f64;
    let d2: f64 = v.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Mean absolute error and root-mean-square error, in that order. The
/// second value keeps the customary counting-literature name "MSE".
pub fn mae_mse(truth: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    check(truth, pred, 1)?;
    let n = truth.len() as f64;
    let mae = truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let ms = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / n;
    Ok((mae, ms.sqrt()))
}

/// All four measures for one evaluation. Correlations are `None` when the
/// series is too short or degenerate (e.g. a constant predictor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub mae: f64,
    pub mse: f64,
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
}

pub fn report(truth: &[f64], pred: &[f64]) -> Result<Report> {
    let (mae, mse) = mae_mse(truth, pred)?;
    let soft = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::Degenerate(_) | MetricsError::TooShort { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(Report {
        mae,
        mse,
        lcc: soft(lcc(truth, pred))?,
        srocc: soft(srocc(truth, pred))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn correlation_examples() {
        let y = [1.0, 2.0, 3.0, 7.0];
        let affine: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert_eq!(lcc(&y, &affine).unwrap(), 1.0);
        assert_eq!(lcc(&y, &neg).unwrap(), -1.0);
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn error_examples() {
        assert_eq!(mae_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_mse(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), (1.0, 1.0));
        let (mae, mse) = mae_mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(mae, 3.5);
        assert!((mse - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert_eq!(lcc(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::Degenerate("ground truth")));
        assert_eq!(lcc(&[1.0, 2.0], &[5.0, 5.0]), Err(MetricsError::Degenerate("predictions")));
        assert!(matches!(srocc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(MetricsError::Degenerate(_))));
        assert!(matches!(lcc(&[1.0], &[1.0]), Err(MetricsError::TooShort { .. })));
        assert!(matches!(mae_mse(&[], &[]), Err(MetricsError::TooShort { .. })));
        assert!(matches!(mae_mse(&[1.0], &[1.0, 2.0]), Err(MetricsError::LengthMismatch(1, 2))));
        assert!(matches!(mae_mse(&[f64::NAN], &[1.0]), Err(MetricsError::NonFinite(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 5.0]), vec![3.0, 1.0, 3.0, 3.0]);
        assert_eq!(average_ranks(&[2.0, 2.0]), vec![1.5, 1.5]);
    }

    #[test]
    fn tied_srocc_is_pearson_of_ranks() {
        let y = [1.0, 2.0, 2.0, 4.0, 5.0];
        let p = [0.3, 0.1, 0.4, 0.4, 0.9];
        let expected = pearson(&average_ranks(&y), &average_ranks(&p)).unwrap();
        assert_eq!(srocc(&y, &p).unwrap(), expected);
    }

    #[test]
    fn report_tolerates_constant_predictor() {
        let r = report(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.lcc, None);
        assert_eq!(r.srocc, None);
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-15);
    }

    fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0..100.0f64, n),
                prop::collection::vec(-100.0..100.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse((y, p) in series()) {
            let (mae, mse) = mae_mse(&y, &p).unwrap();
            prop_assert!(mae <= mse * (1.0 + 1e-12));
        }

        #[test]
        fn srocc_invariant_under_increasing_maps((y, p) in series()) {
            let a = srocc(&y, &p).unwrap();
            let p2: Vec<f64> = p.iter().map(|v| v.exp().min(1e300) + 3.0 * v).collect();
            let y2: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            prop_assert!((a - srocc(&y2, &p2).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn lcc_invariant_under_positive_affine((y, p) in series(), s in 0.1..10.0f64, t in -5.0..5.0f64) {
            let a = lcc(&y, &p).unwrap();
            let p2: Vec<f64> = p.iter().map(|v| s * v + t).collect();
            prop_assert!((a - lcc(&y, &p2).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
