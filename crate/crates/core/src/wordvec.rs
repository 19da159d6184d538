//! Pretrained word-vector table: loading, tokenizing, title averaging.
//!
//! The table is frozen input; titles are encoded once at prepare time.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// token -> fixed-dimension vector, first occurrence wins.
#[derive(Debug, Clone)]
pub struct WordVecTable {
    dim: usize,
    vecs: HashMap<String, Vec<f32>>,
}

impl WordVecTable {
    pub fn empty() -> WordVecTable {
        WordVecTable {
            dim: 0,
            vecs: HashMap::new(),
        }
    }

    /// Load the plain-text format: `token v1 v2 ... vD`, one per line.
    /// Every line must carry the same dimension.
    pub fn load(path: &Path) -> Result<WordVecTable> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut table = WordVecTable::empty();
        let mut first_dim: Option<usize> = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    msg: "missing token".into(),
                })?
                .to_string();
            let mut vec = Vec::new();
            for p in parts {
                let v: f32 = p.parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    msg: format!("unparsable float '{p}'"),
                })?;
                vec.push(v);
            }
            match first_dim {
                None => {
                    first_dim = Some(vec.len());
                    table.dim = vec.len();
                }
                Some(d) if d != vec.len() => {
                    return Err(Error::Parse {
                        path: display,
                        line: lineno,
                        msg: format!("ragged dimension: expected {d}, got {}", vec.len()),
                    });
                }
                _ => {}
            }
            if table.vecs.contains_key(&token) {
                log::warn!("{display}:{lineno}: duplicate token '{token}', keeping first");
            } else {
                table.vecs.insert(token, vec);
            }
        }
        if table.vecs.is_empty() {
            log::warn!("{display}: empty word-vector table; titles will encode to zero vectors");
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vecs.is_empty()
    }

    /// A miss is a miss, not a zero vector.
    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        self.vecs.get(token).map(Vec::as_slice)
    }
}

/// Lowercase, then split on every maximal run of non-alphanumeric
/// characters; empty tokens are discarded.
pub fn tokenize(title: &str) -> Vec<String> {
    title
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Mean of the vectors of tokens found in the table; misses are skipped.
/// No hits at all gives the zero vector with hit count 0.
pub fn encode_title(title: &str, table: &WordVecTable) -> (Vec<f32>, usize) {
    let mut acc = vec![0.0f64; table.dim()];
    let mut hits = 0usize;
    for token in tokenize(title) {
        if let Some(v) = table.lookup(&token) {
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += f64::from(*x);
            }
            hits += 1;
        }
    }
    if hits > 0 {
        let inv = 1.0 / hits as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    (acc.into_iter().map(|a| a as f32).collect(), hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_table(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_tokens() {
        let f = write_table("a 1.0 0.0\nb 0.0 1.0\n");
        let t = WordVecTable::load(f.path()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.lookup("a").unwrap(), &[1.0, 0.0]);
        assert!(t.lookup("zzz").is_none());
    }

    #[test]
    fn ragged_dimension_errors_with_line() {
        let f = write_table("a 1.0\nb 1.0 2.0\n");
        let err = WordVecTable::load(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn unparsable_float_errors() {
        let f = write_table("a 1.0 oops\n");
        assert!(matches!(
            WordVecTable::load(f.path()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn empty_file_gives_empty_table() {
        let f = write_table("");
        let t = WordVecTable::load(f.path()).unwrap();
        assert!(t.is_empty());
        let (v, hits) = encode_title("anything", &t);
        assert!(v.is_empty());
        assert_eq!(hits, 0);
    }

    #[test]
    fn duplicate_token_keeps_first() {
        let f = write_table("a 1.0 0.0\na 9.0 9.0\n");
        let t = WordVecTable::load(f.path()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lookup("a").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize("Fendi Nylon Back-Pack!"),
            vec!["fendi", "nylon", "back", "pack"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  B"), vec!["a", "b"]);
    }

    #[test]
    fn title_encoding_examples() {
        let f = write_table("a 1.0 0.0\nb 0.0 1.0\n");
        let t = WordVecTable::load(f.path()).unwrap();
        let (v, hits) = encode_title("a b", &t);
        assert_eq!(v, vec![0.5, 0.5]);
        assert_eq!(hits, 2);
        let (v, hits) = encode_title("zzz", &t);
        assert_eq!(v, vec![0.0, 0.0]);
        assert_eq!(hits, 0);
        let (v, hits) = encode_title("a a", &t);
        assert_eq!(v, vec![1.0, 0.0]);
        assert_eq!(hits, 2);
    }
}
