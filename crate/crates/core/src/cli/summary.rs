use std::fmt::Write as _;

use crate::train::Method;

pub const SUMMARY_HEADER: &str = "run,variant,rank,batch_size,block_size,alpha_fc,seed,status,epochs,final_accuracy,\
best_accuracy,etc,aux_floats,mbgd_aux_floats,memory_ratio,update_flops_per_batch,mbgd_flops_per_batch";

/// One line of `summary.csv`. Measured fields are `None` for failed runs;
/// `rank` and `block_size` are `None` for MBGD.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub variant: Method,
    pub rank: Option<usize>,
    pub batch_size: usize,
    pub block_size: Option<usize>,
    pub alpha_fc: f64,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    /// Epochs to converge; `epochs + 1` when the run never settled.
    pub etc: Option<usize>,
    /// Modelled auxiliary memory of this run.
    pub aux_floats: u64,
    /// The same for MBGD at this batch size.
    pub mbgd_aux_floats: u64,
    pub memory_ratio: f64,
    /// Counted dense-update FLOPs per batch (gradient, or stream + QR +
    /// recompose).
    pub update_flops_per_batch: Option<u64>,
    /// `Σ 2Bmn` over dense layers.
    pub mbgd_flops_per_batch: u64,
}

impl SummaryRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn opt_f(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

/// Status text with separators a CSV reader would split on removed.
pub fn clean_status(text: &str) -> String {
    text.replace([',', '\n', '\r'], ";")
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:?},{},{},{},{},{},{},{},{},{:?},{},{}",
            r.run,
            r.variant,
            opt(r.rank),
            r.batch_size,
            opt(r.block_size),
            r.alpha_fc,
            r.seed,
            clean_status(&r.status),
            r.epochs,
            opt_f(r.final_accuracy),
            opt_f(r.best_accuracy),
            opt(r.etc),
            r.aux_floats,
            r.mbgd_aux_floats,
            r.memory_ratio,
            opt(r.update_flops_per_batch),
            r.mbgd_flops_per_batch,
        );
    }
    out
}

/// Parses [`summary_csv`] output; the error names the first bad line.
pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err("unexpected header".into());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| format!("line {}: bad {what}", i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(bad("field count"));
        }
        fn req<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        fn optional<T: std::str::FromStr>(s: &str) -> Option<Option<T>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        }
        rows.push(SummaryRow {
            run: f[0].to_string(),
            variant: f[1].parse().map_err(|_| bad("variant"))?,
            rank: optional(f[2]).ok_or_else(|| bad("rank"))?,
            batch_size: req(f[3]).ok_or_else(|| bad("batch_size"))?,
            block_size: optional(f[4]).ok_or_else(|| bad("block_size"))?,
            alpha_fc: req(f[5]).ok_or_else(|| bad("alpha_fc"))?,
            seed: req(f[6]).ok_or_else(|| bad("seed"))?,
            status: f[7].to_string(),
            epochs: req(f[8]).ok_or_else(|| bad("epochs"))?,
            final_accuracy: optional(f[9]).ok_or_else(|| bad("final_accuracy"))?,
            best_accuracy: optional(f[10]).ok_or_else(|| bad("best_accuracy"))?,
            etc: optional(f[11]).ok_or_else(|| bad("etc"))?,
            aux_floats: req(f[12]).ok_or_else(|| bad("aux_floats"))?,
            mbgd_aux_floats: req(f[13]).ok_or_else(|| bad("mbgd_aux_floats"))?,
            memory_ratio: req(f[14]).ok_or_else(|| bad("memory_ratio"))?,
            update_flops_per_batch: optional(f[15]).ok_or_else(|| bad("update_flops_per_batch"))?,
            mbgd_flops_per_batch: req(f[16]).ok_or_else(|| bad("mbgd_flops_per_batch"))?,
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table.
pub fn report_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<32} {:<7} {:>5} {:>9} {:>5} {:>12} {:>16} {:>9}",
        "run", "variant", "rank", "final_acc", "etc", "aux_floats", "flops_per_batch", "mem_ratio"
    );
    for r in rows {
        let acc = r.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let etc = r.etc.map_or("-".to_string(), |e| {
            if e > r.epochs {
                "never".to_string()
            } else {
                e.to_string()
            }
        });
        let flops = r.update_flops_per_batch.map_or("-".to_string(), |f| f.to_string());
        let rank = r.rank.map_or("full".to_string(), |k| k.to_string());
        let _ = write!(
            out,
            "{:<32} {:<7} {:>5} {:>9} {:>5} {:>12} {:>16} {:>9.4}",
            r.run, r.variant, rank, acc, etc, r.aux_floats, flops, r.memory_ratio
        );
        if !r.ok() {
            let _ = write!(out, "  {}", r.status);
        }
        out.push('\n');
    }
    out
}
