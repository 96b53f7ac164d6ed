//! Parsers for the two bulk-ingest text formats: the raw edge array
//! ("src dst" per line, '#' comments) and the embedding table (line i =
//! the feature floats of vid i).

use thiserror::Error;

use super::Vid;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("edge array line {line}: {msg}")]
    BadEdgeLine { line: usize, msg: String },
    #[error("embedding line {line}: {msg}")]
    BadEmbedLine { line: usize, msg: String },
    #[error("embedding text is empty")]
    EmptyEmbeddings,
}

/// Parses the raw edge array. Directed duplicates are kept; callers
/// symmetrize and deduplicate.
pub fn parse_edge_array(text: &str) -> Result<Vec<(Vid, Vid)>, TextError> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let src = parse_vid(it.next(), i + 1)?;
        let dst = parse_vid(it.next(), i + 1)?;
        if it.next().is_some() {
            return Err(TextError::BadEdgeLine {
                line: i + 1,
                msg: "expected exactly two vids".into(),
            });
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

fn parse_vid(tok: Option<&str>, line: usize) -> Result<Vid, TextError> {
    let tok = tok.ok_or_else(|| TextError::BadEdgeLine {
        line,
        msg: "expected exactly two vids".into(),
    })?;
    let v: Vid = tok.parse().map_err(|_| TextError::BadEdgeLine {
        line,
        msg: format!("bad vid {tok:?}"),
    })?;
    if v == Vid::MAX {
        return Err(TextError::BadEdgeLine {
            line,
            msg: "vid 2^32-1 is reserved".into(),
        });
    }
    Ok(v)
}

/// Cheap pre-scan: feature length from the first data line and the
/// number of data lines, without materializing the floats. The full
/// parse streams rows later, overlapped with page writes.
pub fn scan_embeddings(text: &str) -> Result<(usize, usize), TextError> {
    let mut feature_len = None;
    let mut rows = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols = line.split_whitespace().count();
        match feature_len {
            None => feature_len = Some(cols),
            Some(f) if f != cols => {
                return Err(TextError::BadEmbedLine {
                    line: i + 1,
                    msg: format!("expected {f} floats, found {cols}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    match feature_len {
        Some(f) if f > 0 => Ok((f, rows)),
        _ => Err(TextError::EmptyEmbeddings),
    }
}

/// Streams embedding rows in vid order, invoking `sink` once per row.
pub fn stream_embeddings(
    text: &str,
    feature_len: usize,
    mut sink: impl FnMut(Vid, &[f32]),
) -> Result<(), TextError> {
    let mut row = vec![0f32; feature_len];
    let mut vid: Vid = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0usize;
        for tok in line.split_whitespace() {
            if n >= feature_len {
                return Err(TextError::BadEmbedLine {
                    line: i + 1,
                    msg: format!("expected {feature_len} floats"),
                });
            }
            row[n] = tok.parse().map_err(|_| TextError::BadEmbedLine {
                line: i + 1,
                msg: format!("bad float {tok:?}"),
            })?;
            n += 1;
        }
        if n != feature_len {
            return Err(TextError::BadEmbedLine {
                line: i + 1,
                msg: format!("expected {feature_len} floats, found {n}"),
            });
        }
        sink(vid, &row);
        vid += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_edges_skipping_comments() {
        let text = "# snap style\n0 1\n\n 2   3 \n";
        assert_eq!(parse_edge_array(text).unwrap(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn rejects_malformed_edge_lines() {
        assert!(parse_edge_array("0\n").is_err());
        assert!(parse_edge_array("0 1 2\n").is_err());
        assert!(parse_edge_array("a b\n").is_err());
    }

    #[test]
    fn scans_and_streams_embeddings() {
        let text = "1.0 2.0\n3.0 4.0\n";
        assert_eq!(scan_embeddings(text).unwrap(), (2, 2));
        let mut rows = Vec::new();
        stream_embeddings(text, 2, |v, r| rows.push((v, r.to_vec()))).unwrap();
        assert_eq!(rows, vec![(0, vec![1.0, 2.0]), (1, vec![3.0, 4.0])]);
    }

    #[test]
    fn rejects_ragged_embeddings() {
        assert!(scan_embeddings("1.0 2.0\n3.0\n").is_err());
        assert!(scan_embeddings("").is_err());
    }
}
