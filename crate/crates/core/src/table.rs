//! CSV rendering: `#` metadata lines, a header row, 17 significant digits.

use crate::scalar::Real;

/// Formats a number with 17 significant digits (round-trips `f64`).
pub fn fmt_num<T: Real>(x: T) -> String {
    format!("{:.16e}", x.f64())
}

#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    meta: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            meta: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(&mut self, line: &str) -> &mut Self {
        self.meta.push(line.replace('\n', " "));
        self
    }

    pub fn row(&mut self, cells: Vec<String>) -> &mut Self {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
        self
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.meta {
            out.push_str("# ");
            out.push_str(m);
            out.push('\n');
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        let x = 0.1f64 + 0.2;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
        let mut t = CsvTable::new(&["a", "b"]);
        t.meta("k=v").row(vec!["1".into(), "2".into()]);
        assert_eq!(t.render(), "# k=v\na,b\n1,2\n");
    }
}
