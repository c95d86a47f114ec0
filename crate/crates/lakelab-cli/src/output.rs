//! CSV files with a `#`-prefixed reproducibility header.
//!
//! Headers carry only what the configuration determines, so two runs of the
//! same config produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Resolved;

pub struct Csv {
    header: Vec<String>,
    columns: Vec<&'static str>,
    body: String,
}

impl Csv {
    pub fn new(command: &str, resolved: &Resolved, columns: &[&'static str]) -> Self {
        let mut header = vec![
            format!("lakelab {}", env!("CARGO_PKG_VERSION")),
            format!("command: {command}"),
            format!("config_sha256: {}", resolved.hash()),
            "config:".to_string(),
        ];
        header.extend(
            resolved
                .echo()
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| format!("  {l}")),
        );
        Csv {
            header,
            columns: columns.to_vec(),
            body: String::new(),
        }
    }

    pub fn meta(&mut self, key: &str, value: impl Cell) -> &mut Self {
        self.header.push(format!("{key}: {}", value.cell()));
        self
    }

    pub fn row(&mut self, fields: &[&dyn Cell]) {
        debug_assert_eq!(fields.len(), self.columns.len());
        let line: Vec<String> = fields.iter().map(|f| f.cell()).collect();
        self.body.push_str(&line.join(","));
        self.body.push('\n');
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            out.push_str("# ");
            out.push_str(h);
            out.push('\n');
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        out.push_str(&self.body);
        out
    }

    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, self.render())?;
        Ok(path)
    }
}

/// Text of one CSV field or header value.
pub trait Cell {
    fn cell(&self) -> String;
}

/// Shortest round-trip form; scientific outside `[1e-4, 1e15)`.
pub fn number(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl Cell for f64 {
    fn cell(&self) -> String {
        number(*self)
    }
}

impl<T: Cell + ?Sized> Cell for &T {
    fn cell(&self) -> String {
        (**self).cell()
    }
}

macro_rules! display_cell {
    ($($t:ty),*) => {
        $(impl Cell for $t {
            fn cell(&self) -> String {
                self.to_string()
            }
        })*
    };
}

display_cell!(
    usize,
    bool,
    str,
    String,
    lakelab::pontryagin::EquilibriumKind
);

impl Cell for [f64] {
    fn cell(&self) -> String {
        let parts: Vec<String> = self.iter().map(|v| number(*v)).collect();
        format!("[{}]", parts.join(", "))
    }
}

impl Cell for Vec<f64> {
    fn cell(&self) -> String {
        self.as_slice().cell()
    }
}

/// `Some(x)` as the number, `None` as an empty field.
pub struct Opt(pub Option<f64>);

impl Cell for Opt {
    fn cell(&self) -> String {
        self.0.map(number).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [
            0.0,
            1.0,
            -0.25,
            6.027983958750347e-14,
            1e-4,
            9.9e-5,
            3e20,
            0.9311459564823634,
        ] {
            assert_eq!(number(v).parse::<f64>().unwrap(), v, "{}", number(v));
        }
        assert_eq!(number(6.0e-14), "6e-14");
        assert_eq!(number(0.5), "0.5");
    }
}
