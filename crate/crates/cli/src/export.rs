//! Dumps a binary perturbation vocabulary as JSON or CSV.

use std::io::Write;

use anyhow::Result;
use clap::ValueEnum;
use serde_json::json;
use tavat::data::Tokenizer;
use tavat::vocab::PerturbationVocabulary;

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Writes one entry per vocabulary row. Token strings are included when a tokenizer is given.
pub fn write_vocab(
    vocab: &PerturbationVocabulary,
    tokenizer: Option<&Tokenizer>,
    format: Format,
    out: impl Write,
) -> Result<()> {
    if let Some(t) = tokenizer {
        vocab.ensure_matches(t.len(), vocab.dim(), &t.fingerprint())?;
    }
    let token = |id: usize| tokenizer.and_then(|t| t.token(id)).map(str::to_owned);
    match format {
        Format::Json => {
            let rows: Vec<_> = (0..vocab.rows())
                .map(|id| json!({ "id": id, "token": token(id), "norm": norm(vocab.row(id)), "values": vocab.row(id) }))
                .collect();
            let doc = json!({ "meta": vocab.meta, "rows": vocab.rows(), "dim": vocab.dim(), "table": rows });
            serde_json::to_writer_pretty(out, &doc)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["id".to_string(), "token".into(), "norm".into()];
            header.extend((0..vocab.dim()).map(|k| format!("v{k}")));
            w.write_record(&header)?;
            for id in 0..vocab.rows() {
                let mut rec = vec![
                    id.to_string(),
                    token(id).unwrap_or_default(),
                    norm(vocab.row(id)).to_string(),
                ];
                rec.extend(vocab.row(id).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
