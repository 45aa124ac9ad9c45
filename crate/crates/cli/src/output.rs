//! CSV writers. Floats are written as `{:.16e}` (17 significant digits), so
//! every value reparses to the same f64.

use std::fmt::Write as _;
use std::path::Path;

use fkdv_core::experiments::ExperimentReport;
use fkdv_core::{DiagnosticsRecord, Field};

use crate::error::CliError;

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Weight-order column name: `w_1`, `w_2.5`, …
pub fn weight_column(r: f64) -> String {
    format!("w_{r}")
}

pub fn diagnostics_header(weight_orders: &[f64]) -> String {
    let mut h = String::from("t,i1,i2,i3,mean,moment_x,max_u,min_ux,tail_frac");
    for &r in weight_orders {
        h.push(',');
        h.push_str(&weight_column(r));
    }
    h
}

/// One row per record; an absent I₃ is an empty cell.
pub fn diagnostics_csv(records: &[DiagnosticsRecord], weight_orders: &[f64]) -> String {
    let mut s = diagnostics_header(weight_orders);
    s.push('\n');
    for d in records {
        let i3 = d.i3.map(float).unwrap_or_default();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            float(d.t),
            float(d.i1),
            float(d.i2),
            i3,
            float(d.mean),
            float(d.moment_x),
            float(d.max_u),
            float(d.min_ux),
            float(d.tail_frac)
        );
        for (_, w) in &d.wnorms {
            s.push(',');
            s.push_str(&float(*w));
        }
        s.push('\n');
    }
    s
}

pub fn field_csv(f: &Field) -> String {
    let mut s = String::from("x,u\n");
    for (x, u) in f.grid().nodes().iter().zip(f.samples()) {
        let _ = writeln!(s, "{},{}", float(*x), float(*u));
    }
    s
}

pub fn report_header() -> &'static str {
    "experiment,metric,measured,expected,tolerance,check,pass"
}

pub fn report_csv(reports: &[ExperimentReport]) -> String {
    let mut s = String::from(report_header());
    s.push('\n');
    for r in reports {
        for m in &r.metrics {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name,
                m.name,
                float(m.measured),
                float(m.expected),
                float(m.tolerance),
                m.check,
                m.pass()
            );
        }
    }
    s
}

pub fn notes_text(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    for r in reports {
        for n in &r.notes {
            let _ = writeln!(s, "{}: {n}", r.name);
        }
    }
    s
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fkdv_core::diagnostics::record;
    use fkdv_core::solver::read_field_csv;
    use fkdv_core::Grid;
    use proptest::prelude::*;

    #[test]
    fn nine_columns_without_weights_and_named_weight_columns() {
        let g = Grid::new(64, 20.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let csv = diagnostics_csv(&[record(&f, 0.0, 0.5, &[])], &[]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,i1,i2,i3,mean,moment_x,max_u,min_ux,tail_frac");
        assert_eq!(lines[1].split(',').count(), 9);
        let csv = diagnostics_csv(&[record(&f, 0.0, 0.5, &[1.0, 2.0])], &[1.0, 2.0]);
        assert!(csv.starts_with("t,i1,i2,i3,mean,moment_x,max_u,min_ux,tail_frac,w_1,w_2\n"));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 11);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn floats_carry_seventeen_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(-2.0), "-2.0000000000000000e0");
    }

    proptest! {
        #[test]
        fn field_round_trip_is_exact(seed in 0u64..1000, amp in -1e3f64..1e3) {
            let g = Grid::new(128, 50.0).unwrap();
            let f = Field::from_fn(&g, |x| amp * ((x + seed as f64).sin() * 1e-3 + (x * 1.7).cos() / 3.0));
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.csv");
            write(&p, &field_csv(&f)).unwrap();
            let back = read_field_csv(&g, &p).unwrap();
            prop_assert!(back.samples().iter().zip(f.samples()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn floats_reparse_exactly(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
