//! Attention matrices as CSV (full precision) and as a plain SVG grid.

use std::fmt::Write as _;

use mtplab::Matrix;

const CELL: usize = 24;

/// One row per line, values in shortest round-trip form.
pub fn to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Cells shaded from white (0) to dark blue (1).
pub fn to_svg(m: &Matrix, title: &str) -> String {
    let (h, w) = (m.rows() * CELL + 30, m.cols() * CELL + 10);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(out, r#"<text x="5" y="16" font-family="monospace" font-size="12">{title}</text>"#).unwrap();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m[(i, j)].clamp(0.0, 1.0);
            let shade = |c: f64| (255.0 - v * (255.0 - c)).round() as u8;
            writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{:02x}{:02x}{:02x}" stroke="#cccccc"><title>{i},{j}: {:?}</title></rect>"##,
                5 + j * CELL,
                25 + i * CELL,
                shade(8.0),
                shade(48.0),
                shade(107.0),
                m[(i, j)]
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::{bail, Result};

    fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| anyhow::anyhow!("line {}: {e}", no + 1))?;
            rows.push(row);
        }
        if rows.is_empty() {
            bail!("empty matrix");
        }
        Ok(Matrix::from_rows(&rows)?)
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Matrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 / 7.0).exp() * 1e-3);
        assert_eq!(from_csv(&to_csv(&m)).unwrap(), m);
    }

    #[test]
    fn svg_has_one_rect_per_cell() {
        let svg = to_svg(&Matrix::identity(4), "S1");
        assert_eq!(svg.matches("<rect").count(), 16);
        assert!(svg.contains("#0830"));
    }
}
