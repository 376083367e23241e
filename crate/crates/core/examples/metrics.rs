//! Overall accuracy, average accuracy and Cohen's kappa from confusion
//! matrices, including a class that never occurs.
//!
//! cargo run --example metrics

use wcnet::train::ConfusionMatrix;

fn main() -> wcnet::Result<()> {
    for (name, rows) in [
        ("perfect", vec![vec![50, 0], vec![0, 50]]),
        ("chance", vec![vec![25, 25], vec![25, 25]]),
        ("mixed", vec![vec![40, 10], vec![20, 30]]),
        ("absent class", vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]),
    ] {
        let cm = ConfusionMatrix::from_rows(&rows)?;
        println!(
            "{name:<13} OA {:.4}  AA {:.4}  kappa {:.4}  per class {:?}",
            cm.overall_accuracy(),
            cm.average_accuracy(),
            cm.kappa(),
            cm.per_class_accuracy()
        );
    }
    print!("\nCSV of the mixed case:\n{}", ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]])?.to_csv());
    Ok(())
}
