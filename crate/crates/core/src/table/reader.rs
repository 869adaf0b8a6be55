use std::io::Read;
use std::path::Path;

use super::{InferenceConfig, RawTable, TableError};

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub inference: InferenceConfig,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { delimiter: b',', inference: InferenceConfig::default() }
    }
}

/// Reads an RFC-4180 CSV file with a header row. Cells matching a missing
/// marker become `None`.
pub fn read_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawTable, TableError> {
    let file = std::fs::File::open(path)?;
    read_from(file, opts)
}

pub fn read_csv_str(data: &str, opts: &CsvOptions) -> Result<RawTable, TableError> {
    read_from(data.as_bytes(), opts)
}

fn read_from<R: Read>(reader: R, opts: &CsvOptions) -> Result<RawTable, TableError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push(
            record
                .iter()
                .map(|v| if opts.inference.is_missing(v) { None } else { Some(v.to_string()) })
                .collect(),
        );
    }
    RawTable::new(headers, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_quoted_and_missing() {
        let data = "name,price,note\n\"Smith, J\",3.5,NA\nLee,,\"multi\nline\"\n";
        let t = read_csv_str(data, &CsvOptions::default()).unwrap();
        assert_eq!(t.headers, ["name", "price", "note"]);
        assert_eq!(t.rows[0], vec![Some("Smith, J".into()), Some("3.5".into()), None]);
        assert_eq!(t.rows[1], vec![Some("Lee".into()), None, Some("multi\nline".into())]);
    }

    #[test]
    fn custom_delimiter() {
        let opts = CsvOptions { delimiter: b';', ..Default::default() };
        let t = read_csv_str("a;b\n1;2\n", &opts).unwrap();
        assert_eq!(t.rows[0], vec![Some("1".into()), Some("2".into())]);
    }

    #[test]
    fn ragged_rows_error() {
        assert!(read_csv_str("a,b\n1\n", &CsvOptions::default()).is_err());
    }
}
