use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::CliResult;

/// A CSV result: header, rows and a trailing `# key=value` metadata line.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub seed: Option<u64>,
    /// Printed as `name:value` pairs joined by `;`.
    pub tolerances: Vec<(String, f64)>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), seed: None, tolerances: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Cell of row `r` under column `name`.
    pub fn get(&self, r: usize, name: &str) -> Option<&str> {
        let c = self.column(name)?;
        self.rows.get(r).map(|row| row[c].as_str())
    }

    pub fn metadata_line(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let tol = if self.tolerances.is_empty() {
            "none".to_string()
        } else {
            self.tolerances.iter().map(|(k, v)| format!("{k}:{v:e}")).collect::<Vec<_>>().join(";")
        };
        format!("# version={} seed={seed} tolerances={tol}", env!("CARGO_PKG_VERSION"))
    }

    pub fn write_to<W: Write>(&self, w: W) -> CliResult<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&self.header)?;
        for r in &self.rows {
            csv.write_record(r)?;
        }
        csv.flush()?;
        let mut w = csv.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        writeln!(w, "{}", self.metadata_line())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Writes to `out`, or to stdout when it is `None`.
    pub fn emit(&self, out: Option<&Path>) -> CliResult<()> {
        match out {
            Some(p) => self.write_to(BufWriter::new(File::create(p)?)),
            None => self.write_to(io::stdout().lock()),
        }
    }
}

/// Shortest round-trip formatting, so reruns print identical bytes.
/// Very small and very large magnitudes use exponent notation.
pub fn num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() || (1e-3..1e6).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn flag(b: bool) -> String {
    b.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        t.seed = Some(4);
        t.tolerances = vec![("cut".into(), 1e-3)];
        let s = t.to_csv_string();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "a,b");
        assert_eq!(lines[1], "1,\"x,y\"");
        assert!(lines[2].starts_with("# version="));
        assert!(lines[2].ends_with("seed=4 tolerances=cut:1e-3"));
        assert_eq!(t.get(0, "b"), Some("x,y"));
        assert_eq!(t.get(0, "c"), None);
        assert_eq!(num(0.01), "0.01");
        assert_eq!(num(2.5e-11), "2.5e-11");
        assert_eq!(num(3.0), "3");
    }
}
