//! Counting error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when some ground-truth count is not positive.
    pub nae: Option<f64>,
    pub sre: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<(f64, f64)>>,
}

impl MetricsReport {
    /// True when NAE and SRE could not be computed.
    pub fn relative_undefined(&self) -> bool {
        self.nae.is_none()
    }

    pub const CSV_HEADER: &'static str = "mae,rmse,nae,sre,n";

    /// `mae,rmse,nae,sre,n`; undefined relative metrics are written as `NA`.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!("{},{},{},{},{}", self.mae, self.rmse, opt(self.nae), opt(self.sre), self.n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn with_per_image(mut self, gts: &[f64], preds: &[f64]) -> Self {
        self.per_image = Some(gts.iter().copied().zip(preds.iter().copied()).collect());
        self
    }
}

/// MAE, RMSE, NAE and SRE of `preds` against `gts`.
pub fn evaluate(gts: &[f64], preds: &[f64]) -> Result<MetricsReport> {
    ensure(gts.len() == preds.len(), || {
        format!("{} ground truths but {} predictions", gts.len(), preds.len())
    })?;
    ensure(!gts.is_empty(), || "cannot evaluate an empty set".into())?;
    ensure(gts.iter().chain(preds).all(|v| v.is_finite()), || "non-finite count".into())?;
    let n = gts.len() as f64;
    let (mut abs, mut sq, mut rel_abs, mut rel_sq) = (0.0, 0.0, 0.0, 0.0);
    let defined = gts.iter().all(|&y| y > 0.0);
    for (&y, &p) in gts.iter().zip(preds) {
        let e = y - p;
        abs += e.abs();
        sq += e * e;
        if defined {
            rel_abs += e.abs() / y;
            rel_sq += e * e / y;
        }
    }
    Ok(MetricsReport {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        nae: defined.then(|| rel_abs / n),
        sre: defined.then(|| (rel_sq / n).sqrt()),
        n: gts.len(),
        per_image: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_zero() {
        let r = evaluate(&[3.0, 5.0], &[3.0, 5.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.nae, r.sre), (0.0, 0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn hand_computed_example() {
        let r = evaluate(&[1.0, 4.0], &[2.0, 2.0]).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((r.nae.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.sre.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.n, 2);
    }

    #[test]
    fn zero_ground_truth_flags_relative_metrics() {
        let r = evaluate(&[0.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(r.relative_undefined());
        assert_eq!(r.mae, 0.5);
        assert_eq!(r.csv_row(), "0.5,0.7071067811865476,NA,NA,2");
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(evaluate(&[1.0], &[1.0, 2.0]).is_err());
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = evaluate(&[1.0, 4.0], &[2.0, 2.0]).unwrap().with_per_image(&[1.0, 4.0], &[2.0, 2.0]);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((0.5f64..100.0, 0.0f64..120.0), 1..40)
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in pairs()) {
            let (g, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let r = evaluate(&g, &p).unwrap();
            prop_assert!(r.rmse + 1e-12 >= r.mae);
        }

        #[test]
        fn permutation_invariant(v in pairs(), rot in 0usize..40) {
            let (g, p): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            let mut w = v.clone();
            let k = rot % w.len();
            w.rotate_left(k);
            w.reverse();
            let (g2, p2): (Vec<f64>, Vec<f64>) = w.into_iter().unzip();
            let a = evaluate(&g, &p).unwrap();
            let b = evaluate(&g2, &p2).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-9);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
            prop_assert!((a.nae.unwrap() - b.nae.unwrap()).abs() < 1e-9);
            prop_assert!((a.sre.unwrap() - b.sre.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn scaling_behaviour(v in pairs(), alpha in 0.1f64..10.0) {
            let (g, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let gs: Vec<f64> = g.iter().map(|x| x * alpha).collect();
            let ps: Vec<f64> = p.iter().map(|x| x * alpha).collect();
            let a = evaluate(&g, &p).unwrap();
            let b = evaluate(&gs, &ps).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
            prop_assert!(close(b.mae, alpha * a.mae));
            prop_assert!(close(b.rmse, alpha * a.rmse));
            prop_assert!(close(b.nae.unwrap(), a.nae.unwrap()));
            prop_assert!(close(b.sre.unwrap(), alpha.sqrt() * a.sre.unwrap()));
        }
    }
}
