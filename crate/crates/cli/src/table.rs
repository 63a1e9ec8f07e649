//! Score tables consumed by `correlate`.

use std::path::Path;

use crate::error::CliError;

/// CSV `item_id,metric1,metric2,..`; every metric cell must be a finite number.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub item_ids: Vec<String>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::io_error(path, e))?;
        Self::parse(&text).map_err(|e| CliError::input(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| CliError::input(e.to_string()))?.clone();
        if header.get(0) != Some("item_id") {
            return Err(CliError::input("first column must be `item_id`"));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        if names.is_empty() {
            return Err(CliError::input("no metric columns"));
        }
        let mut item_ids = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::input(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            item_ids.push(rec[0].to_string());
            for (j, col) in columns.iter_mut().enumerate() {
                let raw = &rec[j + 1];
                let v: f64 = raw
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| CliError::input(format!("line {line}, column {}: not a finite number: {raw:?}", names[j])))?;
                col.push(v);
            }
        }
        Ok(Self {
            item_ids,
            names,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn metrics(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(String::as_str).zip(self.columns.iter().map(Vec::as_slice))
    }
}
