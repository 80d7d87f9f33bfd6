//! CSV serialization of epoch traces.
//!
//! One row per epoch, fixed column order, header always present. Oracle
//! columns stay in the schema when the oracle is off; only their cells
//! are blank. Floats are written in scientific notation with 17
//! significant digits, enough for `parse(write(x)) == x` bit for bit.

use std::fs;
use std::path::Path;

use powertrack_core::EpochTrace;

use crate::CliError;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Header for an m-agent trace. Column count is 4m + 14.
pub fn csv_header(agents: usize) -> String {
    let mut cols = Vec::with_capacity(4 * agents + 14);
    cols.push("epoch".to_string());
    for i in 1..=agents {
        cols.push(format!("mu_{i}"));
    }
    cols.push("mu_tilde".to_string());
    for i in 1..=agents {
        cols.push(format!("mu_star_{i}"));
    }
    cols.push("mu_star_tilde".to_string());
    cols.extend(
        [
            "subopt",
            "grad_norm",
            "decrement",
            "J_sum",
            "J_opt",
            "power_violation",
            "y_violation",
            "n_used",
            "M_used",
            "backtracks",
            "unconverged",
        ]
        .map(str::to_string),
    );
    for i in 1..=agents {
        cols.push(format!("success_rate_{i}"));
    }
    for i in 1..=agents {
        cols.push(format!("state_m2_{i}"));
    }
    cols.join(",")
}

/// One epoch as a CSV row matching `csv_header(agents)`.
pub fn csv_row(t: &EpochTrace, agents: usize) -> Result<String, CliError> {
    if t.mu.len() != agents + 1 || t.success_rate.len() != agents || t.state_m2.len() != agents {
        return Err(CliError::Runtime(format!(
            "epoch {} trace does not match {} agents",
            t.epoch, agents
        )));
    }
    if t.mu_star.as_ref().is_some_and(|s| s.len() != agents + 1) {
        return Err(CliError::Runtime(format!("epoch {} oracle point has wrong length", t.epoch)));
    }
    let mut cells = Vec::with_capacity(4 * agents + 14);
    cells.push(t.epoch.to_string());
    cells.extend(t.mu.iter().copied().map(fmt));
    match &t.mu_star {
        Some(star) => cells.extend(star.iter().copied().map(fmt)),
        None => cells.extend(std::iter::repeat_n(String::new(), agents + 1)),
    }
    cells.push(fmt_opt(t.reg_risk_subopt));
    cells.push(fmt(t.grad_norm));
    cells.push(fmt(t.decrement));
    cells.push(fmt(t.j_sum));
    cells.push(fmt_opt(t.j_opt));
    cells.push(fmt(t.power_violation));
    cells.push(fmt(t.y_violation_norm));
    cells.push(t.n_used.to_string());
    cells.push(t.m_used.to_string());
    cells.push(t.backtracks.to_string());
    cells.push(if t.unconverged { "1" } else { "0" }.to_string());
    cells.extend(t.success_rate.iter().copied().map(fmt));
    cells.extend(t.state_m2.iter().copied().map(fmt));
    Ok(cells.join(","))
}

/// Render a whole run, header included, one line per epoch.
pub fn render_trace_csv(traces: &[EpochTrace], agents: usize) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(&csv_header(agents));
    out.push('\n');
    for t in traces {
        out.push_str(&csv_row(t, agents)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_trace_csv(path: &Path, traces: &[EpochTrace], agents: usize) -> Result<(), CliError> {
    let text = render_trace_csv(traces, agents)?;
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn parse_f(cell: &str, what: &str, line: usize) -> Result<f64, CliError> {
    cell.parse()
        .map_err(|_| CliError::Runtime(format!("line {line}: bad {what} value {cell:?}")))
}

fn parse_opt_f(cell: &str, what: &str, line: usize) -> Result<Option<f64>, CliError> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_f(cell, what, line).map(Some)
    }
}

/// Parse a file produced by [`render_trace_csv`] back into traces. The
/// agent count is inferred from the header.
pub fn parse_trace_csv(text: &str) -> Result<Vec<EpochTrace>, CliError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::Runtime("trace file is empty".into()))?;
    let cols = header.split(',').count();
    if cols < 14 || (cols - 14) % 4 != 0 {
        return Err(CliError::Runtime(format!("unrecognized trace header ({cols} columns)")));
    }
    let agents = (cols - 14) / 4;
    if header != csv_header(agents) {
        return Err(CliError::Runtime("unrecognized trace header".into()));
    }
    let mut traces = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(CliError::Runtime(format!(
                "line {lineno}: {} cells, expected {cols}",
                cells.len()
            )));
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &cells[at..at + n];
            at += n;
            s
        };
        let epoch: u64 = take(1)[0]
            .parse()
            .map_err(|_| CliError::Runtime(format!("line {lineno}: bad epoch")))?;
        let mu = take(agents + 1)
            .iter()
            .map(|c| parse_f(c, "mu", lineno))
            .collect::<Result<Vec<_>, _>>()?;
        let star_cells = take(agents + 1);
        let mu_star = if star_cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            Some(
                star_cells
                    .iter()
                    .map(|c| parse_f(c, "mu_star", lineno))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        let reg_risk_subopt = parse_opt_f(take(1)[0], "subopt", lineno)?;
        let grad_norm = parse_f(take(1)[0], "grad_norm", lineno)?;
        let decrement = parse_f(take(1)[0], "decrement", lineno)?;
        let j_sum = parse_f(take(1)[0], "J_sum", lineno)?;
        let j_opt = parse_opt_f(take(1)[0], "J_opt", lineno)?;
        let power_violation = parse_f(take(1)[0], "power_violation", lineno)?;
        let y_violation_norm = parse_f(take(1)[0], "y_violation", lineno)?;
        let n_used: usize = take(1)[0]
            .parse()
            .map_err(|_| CliError::Runtime(format!("line {lineno}: bad n_used")))?;
        let m_used: usize = take(1)[0]
            .parse()
            .map_err(|_| CliError::Runtime(format!("line {lineno}: bad M_used")))?;
        let backtracks: usize = take(1)[0]
            .parse()
            .map_err(|_| CliError::Runtime(format!("line {lineno}: bad backtracks")))?;
        let unconverged = match take(1)[0] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CliError::Runtime(format!(
                    "line {lineno}: unconverged must be 0 or 1, got {other:?}"
                )))
            }
        };
        let success_rate = take(agents)
            .iter()
            .map(|c| parse_f(c, "success_rate", lineno))
            .collect::<Result<Vec<_>, _>>()?;
        let state_m2 = take(agents)
            .iter()
            .map(|c| parse_f(c, "state_m2", lineno))
            .collect::<Result<Vec<_>, _>>()?;
        traces.push(EpochTrace {
            epoch,
            mu,
            mu_star,
            reg_risk_subopt,
            grad_norm,
            decrement,
            j_sum,
            j_opt,
            power_violation,
            y_violation_norm,
            n_used,
            m_used,
            backtracks,
            unconverged,
            success_rate,
            state_m2,
        });
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace(epoch: u64, oracle: bool) -> EpochTrace {
        EpochTrace {
            epoch,
            mu: vec![0.1 + 0.2, 1.0 / 3.0, 2.0_f64.sqrt()],
            mu_star: oracle.then(|| vec![1e-300, 7.23e17, -0.0]),
            reg_risk_subopt: oracle.then_some(3.5e-4),
            grad_norm: 0.007,
            decrement: 0.012,
            j_sum: -11.5,
            j_opt: oracle.then_some(-11.2),
            power_violation: -0.25,
            y_violation_norm: 0.031,
            n_used: 200,
            m_used: 5,
            backtracks: 1,
            unconverged: false,
            success_rate: vec![0.91, 0.72],
            state_m2: vec![1.5, 2.25],
        }
    }

    #[test]
    fn header_has_the_documented_column_count() {
        for agents in [1, 2, 4] {
            let header = csv_header(agents);
            assert_eq!(header.split(',').count(), 4 * agents + 14);
        }
        assert!(csv_header(2).starts_with("epoch,mu_1,mu_2,mu_tilde,mu_star_1"));
        assert!(csv_header(2).ends_with("success_rate_1,success_rate_2,state_m2_1,state_m2_2"));
    }

    #[test]
    fn round_trip_recovers_every_bit() {
        let traces = vec![sample_trace(0, true), sample_trace(1, false)];
        let text = render_trace_csv(&traces, 2).unwrap();
        let back = parse_trace_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in traces.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            for (x, y) in a.mu.iter().zip(&b.mu) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.mu_star.is_some(), b.mu_star.is_some());
            if let (Some(xs), Some(ys)) = (&a.mu_star, &b.mu_star) {
                for (x, y) in xs.iter().zip(ys) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(a.reg_risk_subopt, b.reg_risk_subopt);
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
            assert_eq!(a.j_sum.to_bits(), b.j_sum.to_bits());
            assert_eq!(a.j_opt, b.j_opt);
            assert_eq!(a.power_violation.to_bits(), b.power_violation.to_bits());
            assert_eq!(a.y_violation_norm.to_bits(), b.y_violation_norm.to_bits());
            assert_eq!(
                (a.n_used, a.m_used, a.backtracks, a.unconverged),
                (b.n_used, b.m_used, b.backtracks, b.unconverged)
            );
            assert_eq!(a.success_rate, b.success_rate);
            assert_eq!(a.state_m2, b.state_m2);
        }
    }

    #[test]
    fn oracle_off_blanks_cells_but_keeps_columns() {
        let on = render_trace_csv(&[sample_trace(0, true)], 2).unwrap();
        let off = render_trace_csv(&[sample_trace(0, false)], 2).unwrap();
        let header_on = on.lines().next().unwrap();
        let header_off = off.lines().next().unwrap();
        assert_eq!(header_on, header_off);
        let row_off = off.lines().nth(1).unwrap();
        assert_eq!(row_off.split(',').count(), header_off.split(',').count());
        // mu_star_1..mu_star_tilde, subopt, and J_opt are the blank cells.
        let cells: Vec<&str> = row_off.split(',').collect();
        assert!(cells[4..=6].iter().all(|c| c.is_empty()));
        assert!(cells[7].is_empty());
        assert!(!cells[8].is_empty());
        assert!(cells[11].is_empty());
    }

    #[test]
    fn mismatched_rows_are_refused() {
        let t = sample_trace(0, true);
        assert!(csv_row(&t, 3).is_err());
        let text = "epoch,mu_1,bogus\n";
        assert!(parse_trace_csv(text).is_err());
        let mut broken = render_trace_csv(&[sample_trace(0, true)], 2).unwrap();
        broken = broken.replace(",200,5,", ",200,,");
        assert!(parse_trace_csv(&broken).is_err());
    }
}
