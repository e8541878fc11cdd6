//! Confusion matrix, per-class metrics and the report files.
//!
//! `cargo run --example metrics_report -- [out_dir]`

use pava::dataset::SubDataset;
use pava::eval::{report_emit, ConfusionMatrix, MetricsReport};

fn main() -> pava::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("pava-metrics"));
    let mut cm = ConfusionMatrix::new(3);
    for (truth, predicted, n) in [(0, 0, 2), (0, 1, 1), (1, 1, 3), (2, 0, 1), (2, 2, 3)] {
        for _ in 0..n {
            cm.record(truth, predicted);
        }
    }
    let report = MetricsReport::from_confusion(&cm, "example", SubDataset::Original);
    println!("accuracy {:.2}%", report.accuracy_percent);
    for m in &report.per_class {
        println!("{:<24} p {:.3} r {:.3} f1 {:.3} n {}", m.label, m.precision, m.recall, m.f1, m.support);
    }
    println!(
        "macro f1 {:.3} ± {:.3}",
        report.macro_avg.f1.mean, report.macro_avg.f1.std
    );
    for path in report_emit(&report, &cm, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
