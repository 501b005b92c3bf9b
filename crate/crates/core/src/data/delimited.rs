use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::{Example, Label};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

/// Column layout of a delimited text file with one labelled sentence per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelimitedSpec {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
    pub text_column: usize,
    pub label_column: usize,
    /// Allowed label strings; the class index is the position in this list.
    pub labels: Vec<String>,
}

fn default_delimiter() -> char {
    '\t'
}

fn default_true() -> bool {
    true
}

/// One parsed row: raw text and class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub line: u64,
    pub text: String,
    pub label: usize,
}

pub fn read_rows(spec: &DelimitedSpec) -> Result<Vec<Row>> {
    read_rows_from(&spec.path, spec)
}

fn read_rows_from(path: &Path, spec: &DelimitedSpec) -> Result<Vec<Row>> {
    if !spec.delimiter.is_ascii() {
        return Err(Error::InvalidConfig(format!(
            "delimiter {:?} is not ASCII",
            spec.delimiter
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(spec.has_header)
        .flexible(true)
        .from_path(path)?;
    let needed = spec.text_column.max(spec.label_column) + 1;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::MalformedRow {
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < needed {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected at least {needed} columns, found {}", record.len()),
            });
        }
        let raw_label = record[spec.label_column].trim();
        let label = spec
            .labels
            .iter()
            .position(|l| l == raw_label)
            .ok_or_else(|| Error::UnknownLabel {
                line,
                label: raw_label.to_string(),
            })?;
        rows.push(Row {
            line,
            text: record[spec.text_column].to_string(),
            label,
        });
    }
    Ok(rows)
}

/// Reads, tokenizes and truncates every row of the file.
pub fn load_delimited(
    spec: &DelimitedSpec,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<Vec<Example>> {
    Ok(read_rows(spec)?
        .into_iter()
        .map(|row| Example {
            ids: tokenizer.encode_truncated(&row.text, max_len),
            label: Label::Class(row.label),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::data::tokenizer::SEP_ID;

    fn spec_for(file: &tempfile::NamedTempFile) -> DelimitedSpec {
        DelimitedSpec {
            path: file.path().to_path_buf(),
            delimiter: '\t',
            has_header: true,
            text_column: 0,
            label_column: 1,
            labels: vec!["neg".into(), "pos".into()],
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_rows_preserve_labels() {
        let f = write("text\tlabel\ngood film\tpos\nbad film\tneg\n");
        let spec = spec_for(&f);
        let rows = read_rows(&spec).unwrap();
        let tok = Tokenizer::from_corpus(rows.iter().map(|r| r.text.as_str()), false).unwrap();
        let ex = load_delimited(&spec, &tok, 16).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].label, Label::Class(1));
        assert_eq!(ex[1].label, Label::Class(0));
    }

    #[test]
    fn long_row_truncated_with_sep_last() {
        let f = write("text\tlabel\na b c d e f g\tpos\n");
        let spec = spec_for(&f);
        let tok = Tokenizer::from_tokens(["a", "b", "c"], false);
        let ex = load_delimited(&spec, &tok, 5).unwrap();
        assert_eq!(ex[0].ids.len(), 5);
        assert_eq!(*ex[0].ids.last().unwrap(), SEP_ID);
    }

    #[test]
    fn count_is_lines_minus_header() {
        let body: String = (0..37)
            .map(|i| format!("w{i} x\t{}\n", ["neg", "pos"][i % 2]))
            .collect();
        let content = format!("text\tlabel\n{body}");
        let f = write(&content);
        let lines = content.lines().count();
        assert_eq!(read_rows(&spec_for(&f)).unwrap().len(), lines - 1);
    }

    #[test]
    fn unknown_label_reports_line() {
        let f = write("text\tlabel\nfine\tpos\nodd\tmaybe\n");
        match read_rows(&spec_for(&f)) {
            Err(Error::UnknownLabel { line, label }) => {
                assert_eq!(line, 3);
                assert_eq!(label, "maybe");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_row_reports_line() {
        let f = write("text\tlabel\nfine\tpos\nlonely\n");
        assert!(matches!(
            read_rows(&spec_for(&f)),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn comma_delimiter() {
        let f = write("good,pos\nbad,neg\n");
        let spec = DelimitedSpec {
            delimiter: ',',
            has_header: false,
            ..spec_for(&f)
        };
        assert_eq!(read_rows(&spec).unwrap().len(), 2);
    }
}
