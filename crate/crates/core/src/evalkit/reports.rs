//! Report serialization: harness tables as CSV/JSON, projections as CSV/SVG.
//!
//! Output is deterministic byte for byte: fixed column order, shortest
//! round-trip float formatting, and no timestamps.

use super::{HarnessResult, RunRow};
use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};
use std::fmt::Write as _;

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Harness rows as RFC-4180 CSV with a fixed header.
pub fn rows_to_csv(rows: &[RunRow]) -> String {
    let mut out = String::from(
        "variant,seed,shots,accuracy,paa,entropy,entropy_fixed_noise,align,comp,sep,total,kl,train_accuracy,error\n",
    );
    for r in rows {
        let fields = [
            csv_escape(&r.variant),
            r.seed.to_string(),
            r.shots.to_string(),
            opt(r.accuracy),
            opt(r.paa),
            opt(r.entropy),
            opt(r.entropy_fixed_noise),
            opt(r.align),
            opt(r.comp),
            opt(r.sep),
            opt(r.total),
            opt(r.kl),
            opt(r.train_accuracy),
            csv_escape(r.error.as_deref().unwrap_or("")),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Whole harness result (rows plus summaries) as pretty JSON.
pub fn result_to_json(result: &HarnessResult) -> Result<String> {
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    Ok(json)
}

fn check_projection_inputs(
    coords: &DenseMatrix,
    labels: &[u16],
    phases: &[String],
) -> Result<()> {
    if coords.cols != 2 {
        return Err(Error::DimensionMismatch(format!(
            "projection has {} columns, expected 2",
            coords.cols
        )));
    }
    if labels.len() != coords.rows || phases.len() != coords.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} points, {} labels, {} phases",
            coords.rows,
            labels.len(),
            phases.len()
        )));
    }
    Ok(())
}

/// Projected points as `id,x,y,label,phase` CSV.
pub fn projection_csv(
    coords: &DenseMatrix,
    labels: &[u16],
    phases: &[String],
) -> Result<String> {
    check_projection_inputs(coords, labels, phases)?;
    let mut out = String::from("id,x,y,label,phase\n");
    for i in 0..coords.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i,
            coords.get(i, 0),
            coords.get(i, 1),
            labels[i],
            csv_escape(&phases[i])
        );
    }
    Ok(out)
}

/// Scatter plot of projected points. Color tracks the label, marker style
/// tracks the phase: "init" rows become hollow rings, everything else a
/// filled dot.
pub fn projection_svg(
    coords: &DenseMatrix,
    labels: &[u16],
    phases: &[String],
) -> Result<String> {
    check_projection_inputs(coords, labels, phases)?;
    const SIZE: f64 = 640.0;
    const PAD: f64 = 48.0;
    let n = coords.rows;
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for i in 0..n {
        for c in 0..2 {
            min[c] = min[c].min(coords.get(i, c));
            max[c] = max[c].max(coords.get(i, c));
        }
    }
    let span = |c: usize| -> f64 {
        let s = max[c] - min[c];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let place = |i: usize, c: usize| -> f64 {
        let t = (coords.get(i, c) - min[c]) / span(c);
        // SVG y grows downward.
        if c == 0 {
            PAD + t * (SIZE - 2.0 * PAD)
        } else {
            SIZE - PAD - t * (SIZE - 2.0 * PAD)
        }
    };
    let hue = |label: u16| -> u32 { (u32::from(label) * 47) % 360 };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(
        out,
        "  <rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\" stroke=\"#ccc\"/>"
    );
    for i in 0..n {
        let x = place(i, 0);
        let y = place(i, 1);
        let color = format!("hsl({},70%,45%)", hue(labels[i]));
        if phases[i] == "init" {
            let _ = writeln!(
                out,
                "  <circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"6\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"><title>{} label={} phase={}</title></circle>",
                i, labels[i], phases[i]
            );
        } else {
            let _ = writeln!(
                out,
                "  <circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"4\" fill=\"{color}\"><title>{} label={} phase={}</title></circle>",
                i, labels[i], phases[i]
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}
