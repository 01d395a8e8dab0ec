//! CSV and JSON writers for reports, histograms, and run records.

use std::path::Path;

use kurtq_core::kure::KurtosisReport;
use kurtq_core::pipeline::HistBin;
use serde::Serialize;

use crate::CliError;

/// FP32 with 9 significant digits, the report's stated precision.
pub fn sig9(v: f32) -> String {
    format!("{v:.8e}")
}

/// CSV body of a kurtosis report: one row per tensor.
pub fn report_csv(report: &KurtosisReport) -> String {
    let mut out = String::from("name,numel,min,max,mean,std,kurtosis,included\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.name,
            e.numel,
            sig9(e.min),
            sig9(e.max),
            sig9(e.mean),
            sig9(e.std),
            sig9(e.kurtosis),
            e.included
        ));
    }
    out
}

/// CSV body of a 64-bin histogram.
pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count\n");
    for b in bins {
        out.push_str(&format!("{},{},{}\n", sig9(b.left), sig9(b.right), b.count));
    }
    out
}

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, body)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_has_nine_significant_digits() {
        assert_eq!(sig9(1.64), "1.63999999e0"); // f32 1.64 rounded to 9 digits
        assert_eq!(sig9(0.01), "9.99999978e-3");
        assert_eq!(sig9(-254.0), "-2.54000000e2");
    }

    #[test]
    fn histogram_csv_shape() {
        let bins = vec![
            HistBin { left: -1.0, right: 0.0, count: 3 },
            HistBin { left: 0.0, right: 1.0, count: 5 },
        ];
        let csv = histogram_csv(&bins);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,count");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",3"));
    }
}
