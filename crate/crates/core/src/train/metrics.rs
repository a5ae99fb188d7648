use std::fmt::Write as _;

/// One row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    /// Mean training-batch loss over the epoch (train mode).
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Per dense layer; `None` on epochs without instrumentation.
    pub tracking_error: Vec<Option<f64>>,
    pub wall_seconds: f64,
}

/// Header and rows as CSV with LF line endings. Floats use the shortest
/// decimal that reads back to the same value; missing tracking values are
/// empty fields. Dense layers are named `fc1`, `fc2`, … in forward order.
pub fn metrics_csv(rows: &[MetricsRow], dense_layers: usize) -> String {
    let mut out = String::from("epoch,train_loss,test_loss,test_accuracy");
    for j in 1..=dense_layers {
        let _ = write!(out, ",tracking_error_fc{j}");
    }
    out.push_str(",wall_seconds\n");
    for r in rows {
        let _ = write!(out, "{},{:?},{:?},{:?}", r.epoch, r.train_loss, r.test_loss, r.test_accuracy);
        for j in 0..dense_layers {
            out.push(',');
            if let Some(Some(v)) = r.tracking_error.get(j) {
                let _ = write!(out, "{v:?}");
            }
        }
        let _ = writeln!(out, ",{:?}", r.wall_seconds);
    }
    out
}

/// Parses [`metrics_csv`] output back into rows.
pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let dense = header.iter().filter(|h| h.starts_with("tracking_error_")).count();
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 + dense {
            return None;
        }
        let tracking = f[4..4 + dense]
            .iter()
            .map(|v| if v.is_empty() { Some(None) } else { v.parse().ok().map(Some) })
            .collect::<Option<Vec<_>>>()?;
        rows.push(MetricsRow {
            epoch: f[0].parse().ok()?,
            train_loss: f[1].parse().ok()?,
            test_loss: f[2].parse().ok()?,
            test_accuracy: f[3].parse().ok()?,
            tracking_error: tracking,
            wall_seconds: f[4 + dense].parse().ok()?,
        });
    }
    Some(rows)
}

pub const ETC_WINDOW: usize = 5;
/// Half a percentage point, in accuracy units.
pub const ETC_TOLERANCE: f64 = 0.005;

/// Epochs to converge with the default window and tolerance.
pub fn epochs_to_converge(accuracy: &[f64]) -> usize {
    epochs_to_converge_with(accuracy, ETC_WINDOW, ETC_TOLERANCE)
}

/// The first (1-based) epoch whose trailing mean accuracy is within
/// `tolerance` of the best trailing mean of the run. Windows are clipped at
/// the start, so epoch `e < window` averages epochs `1..=e`. Returns
/// `len + 1` when the series contains non-finite values, meaning the run
/// failed to converge.
pub fn epochs_to_converge_with(accuracy: &[f64], window: usize, tolerance: f64) -> usize {
    let window = window.max(1);
    if accuracy.is_empty() || accuracy.iter().any(|a| !a.is_finite()) {
        return accuracy.len() + 1;
    }
    let trailing: Vec<f64> = (0..accuracy.len())
        .map(|e| {
            let start = (e + 1).saturating_sub(window);
            accuracy[start..=e].iter().sum::<f64>() / (e + 1 - start) as f64
        })
        .collect();
    let best = trailing.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    trailing
        .iter()
        .position(|&t| t >= best - tolerance)
        .map_or(accuracy.len() + 1, |e| e + 1)
}
