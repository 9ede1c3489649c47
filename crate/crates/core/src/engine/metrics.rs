//! Per-epoch metrics and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::select::csv_err;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch (or batch, in online mode); 0 is the pre-adaptation row.
    pub epoch: usize,
    /// Mean objective over the epoch's mini-batches, at the pre-step point.
    pub objective: Option<f64>,
    pub accuracy: Option<f64>,
    /// Queries spent on adaptation during this epoch.
    pub queries: u64,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

/// Writes `run_id,epoch,objective,accuracy,queries,seconds` rows for each
/// run in turn. Without `timing` the seconds column stays empty so repeated
/// runs are byte-identical.
pub fn write_metrics_csv<W: Write>(
    runs: &[(&str, &[EpochMetrics])],
    timing: bool,
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "run_id",
        "epoch",
        "objective",
        "accuracy",
        "queries",
        "seconds",
    ])
    .map_err(csv_err)?;
    for (run_id, m) in runs
        .iter()
        .flat_map(|(id, rows)| rows.iter().map(move |m| (id, m)))
    {
        let seconds = if timing {
            format!("{:.6}", m.seconds)
        } else {
            String::new()
        };
        out.write_record([
            run_id.to_string(),
            m.epoch.to_string(),
            opt(m.objective),
            opt(m.accuracy),
            m.queries.to_string(),
            seconds,
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            EpochMetrics {
                epoch: 0,
                objective: None,
                accuracy: Some(0.5),
                queries: 10,
                seconds: 1.25,
            },
            EpochMetrics {
                epoch: 1,
                objective: Some(-0.25),
                accuracy: None,
                queries: 60,
                seconds: 0.5,
            },
        ];
        let mut a = Vec::new();
        write_metrics_csv(&[("r", &rows)], false, &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert_eq!(
            text,
            "run_id,epoch,objective,accuracy,queries,seconds\n\
             r,0,,5.00000000000000000e-1,10,\n\
             r,1,-2.50000000000000000e-1,,60,\n"
        );
        let mut b = Vec::new();
        write_metrics_csv(&[("r", &rows[..1]), ("s", &rows[1..])], true, &mut b).unwrap();
        let text = String::from_utf8(b).unwrap();
        assert!(text.contains("r,0,,5.00000000000000000e-1,10,1.250000\n"));
        assert!(text.ends_with("s,1,-2.50000000000000000e-1,,60,0.500000\n"));
    }
}
