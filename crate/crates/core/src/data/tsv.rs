use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five-point sentiment scale, most negative first.
pub const SENTIMENT_LABELS: [&str; 5] = ["very_negative", "negative", "neutral", "positive", "very_positive"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsExample {
    pub id: String,
    pub text: String,
    pub label: usize,
}

/// Reads `text<TAB>label` rows.
///
/// An optional `text<TAB>label` header line is skipped. A line
/// `# labels: a, b, c` declares label names, after which labels may be given
/// by name (mapped to their position) as well as by index. Every row must
/// have exactly two columns, so tabs inside the text are rejected.
pub fn read_tsv_classification(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<ClsExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, num_classes, path)
}

pub(crate) fn parse_tsv(text: &str, num_classes: usize, path: &Path) -> Result<Vec<ClsExample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut names: Vec<String> = Vec::new();
    let mut out = Vec::new();
    let mut seen_row = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(decl) = line.strip_prefix('#') {
            if let Some(list) = decl.trim().strip_prefix("labels:") {
                names = list.split(',').map(|s| s.trim().to_string()).collect();
                if names.len() != num_classes {
                    return Err(err(
                        lineno,
                        format!("{} label names declared for {num_classes} classes", names.len()),
                    ));
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(err(lineno, format!("expected 2 tab-separated columns, found {}", cols.len())));
        }
        if !seen_row && cols[0] == "text" && cols[1] == "label" {
            seen_row = true;
            continue;
        }
        seen_row = true;
        let raw = cols[1].trim();
        let label = match raw.parse::<usize>() {
            Ok(l) => l,
            Err(_) => names
                .iter()
                .position(|n| n == raw)
                .ok_or_else(|| err(lineno, format!("unknown label `{raw}`")))?,
        };
        if label >= num_classes {
            return Err(err(lineno, format!("label {label} out of range for {num_classes} classes")));
        }
        out.push(ClsExample {
            id: format!("{}", out.len()),
            text: cols[0].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn write_tsv_classification(path: impl AsRef<Path>, examples: &[ClsExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::from("text\tlabel\n");
    for ex in examples {
        if ex.text.contains(['\t', '\n', '\r']) {
            return Err(Error::Invalid(format!("example {}: text contains a tab or newline", ex.id)));
        }
        buf.push_str(&format!("{}\t{}\n", ex.text, ex.label));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reduces an ArSenTD-Lev style CSV (columns include `Tweet` and `Sentiment`,
/// matched case-insensitively) to classification examples. Sentiment strings
/// map onto [`SENTIMENT_LABELS`]; tabs and line breaks in tweets become
/// spaces. Topic and target annotations are discarded.
pub fn convert_arsentd(path: impl AsRef<Path>) -> Result<Vec<ClsExample>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("missing `{name}` column"),
            })
    };
    let (tweet, sentiment) = (col("tweet")?, col("sentiment")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let raw = rec.get(sentiment).unwrap_or("").trim().to_ascii_lowercase().replace([' ', '-'], "_");
        let label = SENTIMENT_LABELS.iter().position(|&s| s == raw).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("unknown sentiment `{raw}`"),
        })?;
        let text: String = rec
            .get(tweet)
            .unwrap_or("")
            .chars()
            .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
            .collect();
        out.push(ClsExample {
            id: format!("{}", out.len()),
            text: text.trim().to_string(),
            label,
        });
    }
    Ok(out)
}
