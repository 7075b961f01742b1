//! Counting metrics on a handful of predictions.

use zsc::metrics::{evaluate, MetricsReport};

fn main() -> zsc::Result<()> {
    let gts = [12.0, 7.0, 30.0, 4.0];
    let preds = [10.5, 8.0, 24.0, 4.2];
    let report = evaluate(&gts, &preds)?.with_per_image(&gts, &preds);
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    println!("{}", report.to_json());

    // a zero ground truth leaves NAE and SRE undefined
    let r = evaluate(&[0.0, 3.0], &[1.0, 3.0])?;
    println!("with a zero count: {}", r.csv_row());
    Ok(())
}
