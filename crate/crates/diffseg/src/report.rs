//! Pass/fail checks of the directional desk-scale experiment, read from the
//! `lap_mode`, `input_scale` and `best_of_n` sweep tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::{csv_path, read_rows, SweepKind, SweepRow};

pub const MIN_SIMILAR_ARI: f64 = 0.5;
pub const MIN_LAP_GAIN: f64 = 0.05;
pub const MIN_SCALE_GAIN: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn find<'a>(rows: &'a [SweepRow], value: &str, parse: bool) -> Option<&'a SweepRow> {
    rows.iter().find(|r| if parse { r.value.parse::<f64>().ok() == value.parse::<f64>().ok() } else { r.value == value })
}

fn need<'a>(rows: &'a [SweepRow], value: &str, parse: bool, table: &Path) -> Result<&'a SweepRow> {
    find(rows, value, parse).ok_or_else(|| Error::format(table, format!("no row for {value}")))
}

/// Checks (a) to (d) of the LAP and input-scale directions.
pub fn directional(dir: &Path) -> Result<Vec<Check>> {
    let lap_path = csv_path(dir, SweepKind::LapMode);
    let scale_path = csv_path(dir, SweepKind::InputScale);
    let lap = read_rows(&lap_path)?;
    let scale = read_rows(&scale_path)?;
    let similar = need(&lap, "similar", false, &lap_path)?.ari;
    let random = need(&lap, "random", false, &lap_path)?.ari;
    let none = need(&lap, "none", false, &lap_path)?.ari;
    let b01 = need(&scale, "0.1", true, &scale_path)?.ari;
    let b1 = need(&scale, "1", true, &scale_path)?.ari;
    Ok(vec![
        Check {
            name: "similar LAP, b=0.1 reaches ARI 0.5",
            pass: b01 >= MIN_SIMILAR_ARI && similar >= MIN_SIMILAR_ARI,
            detail: format!("median ARI {similar:.4} (lap sweep), {b01:.4} (scale sweep), need >= {MIN_SIMILAR_ARI}"),
        },
        Check {
            name: "similar LAP beats no LAP by 0.05",
            pass: similar - none >= MIN_LAP_GAIN,
            detail: format!("{similar:.4} - {none:.4} = {:.4}, need >= {MIN_LAP_GAIN}", similar - none),
        },
        Check {
            name: "b=0.1 beats b=1.0 by 0.10",
            pass: b01 - b1 >= MIN_SCALE_GAIN,
            detail: format!("{b01:.4} - {b1:.4} = {:.4}, need >= {MIN_SCALE_GAIN}", b01 - b1),
        },
        Check {
            name: "ARI ordering similar >= random >= none",
            pass: similar >= random && random >= none,
            detail: format!("similar {similar:.4}, random {random:.4}, none {none:.4}"),
        },
    ])
}

/// Best-of-8 against best-of-1 on the same draws.
pub fn best_of_n(dir: &Path) -> Result<Check> {
    let path = csv_path(dir, SweepKind::BestOfN);
    let rows = read_rows(&path)?;
    let one = need(&rows, "1", true, &path)?.ari;
    let eight = need(&rows, "8", true, &path)?.ari;
    Ok(Check {
        name: "best-of-8 ARI >= best-of-1 ARI",
        pass: eight >= one,
        detail: format!("best-of-8 {eight:.4}, best-of-1 {one:.4}, gain {:.4}", eight - one),
    })
}
