//! History CSV and plain-text metric tables.

use std::path::Path;

use super::metrics::{Metrics, MetricsReport};
use super::trainer::EpochRecord;
use crate::error::{Error, Result};

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for rec in history {
        w.serialize(rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn mape(m: &Metrics) -> String {
    m.mape.map_or_else(|| "-".to_string(), |v| format!("{v:.2}%"))
}

/// Aligned table with one row per named report: MAE, RMSE and MAPE for
/// each horizon, then the averages.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let q = rows.iter().map(|(_, r)| r.horizons.len()).max().unwrap_or(0);
    let mut header = vec!["Model".to_string()];
    for h in 1..=q {
        header.extend([format!("{h}h MAE"), format!("{h}h RMSE"), format!("{h}h MAPE")]);
    }
    header.extend(["Avg. MAE".into(), "Avg. RMSE".into(), "Avg. MAPE".into()]);
    let mut cells = vec![header];
    for (name, r) in rows {
        let mut line = vec![name.clone()];
        for h in 0..q {
            match r.horizons.get(h) {
                Some(m) => line.extend([format!("{:.3}", m.mae), format!("{:.3}", m.rmse), mape(m)]),
                None => line.extend(["-".into(), "-".into(), "-".into()]),
            }
        }
        let a = &r.average;
        line.extend([format!("{:.3}", a.mae), format!("{:.3}", a.rmse), mape(a)]);
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in cells.iter().enumerate() {
        let parts: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Per-epoch table of a training history.
pub fn render_history(history: &[EpochRecord]) -> String {
    let mut out = format!("{:>5}  {:>10}  {:>10}\n", "epoch", "train_mae", "val_mae");
    for r in history {
        out.push_str(&format!("{:>5}  {:>10.5}  {:>10.5}\n", r.epoch, r.train_mae, r.val_mae));
    }
    out
}
