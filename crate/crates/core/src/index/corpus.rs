use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use serde::Deserialize;

use super::{Document, IndexError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// JSON-lines when the first non-blank line starts with `{`, else plain text.
    #[default]
    Auto,
    JsonLines,
    /// One document per non-blank line; ids assigned 0, 1, 2, ... in order.
    PlainText,
}

#[derive(Deserialize)]
struct JsonDoc {
    doc_id: u64,
    text: String,
}

/// Streaming reader over a corpus file.
pub struct CorpusReader<R: BufRead> {
    lines: Lines<R>,
    format: CorpusFormat,
    line_no: usize,
    next_id: u64,
    peeked: Option<(usize, String)>,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, format: CorpusFormat) -> Result<Self, IndexError> {
        let mut this = Self {
            lines: reader.lines(),
            format,
            line_no: 0,
            next_id: 0,
            peeked: None,
        };
        if format == CorpusFormat::Auto {
            this.peeked = this.next_nonblank()?;
            this.format = match &this.peeked {
                Some((_, l)) if l.trim_start().starts_with('{') => CorpusFormat::JsonLines,
                _ => CorpusFormat::PlainText,
            };
        }
        Ok(this)
    }

    pub fn format(&self) -> CorpusFormat {
        self.format
    }

    fn next_nonblank(&mut self) -> Result<Option<(usize, String)>, IndexError> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            let line = line.map_err(|e| IndexError::CorpusParse {
                line: self.line_no,
                message: e.to_string(),
            })?;
            if !line.trim().is_empty() {
                return Ok(Some((self.line_no, line)));
            }
        }
        Ok(None)
    }

    fn parse(&mut self, line_no: usize, line: String) -> Result<Document, IndexError> {
        match self.format {
            CorpusFormat::JsonLines => {
                let doc: JsonDoc =
                    serde_json::from_str(&line).map_err(|e| IndexError::CorpusParse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                Ok(Document::new(doc.doc_id, doc.text))
            }
            _ => {
                let id = self.next_id;
                self.next_id += 1;
                Ok(Document::new(id, line.trim().to_string()))
            }
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Document, IndexError>;

    fn next(&mut self) -> Option<Self::Item> {
        let next = match self.peeked.take() {
            Some(p) => Some(p),
            None => match self.next_nonblank() {
                Ok(p) => p,
                Err(e) => return Some(Err(e)),
            },
        };
        next.map(|(line_no, line)| self.parse(line_no, line))
    }
}

pub fn read_corpus(
    path: impl AsRef<Path>,
    format: CorpusFormat,
) -> Result<CorpusReader<BufReader<File>>, IndexError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CorpusReader::new(BufReader::new(file), format)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect(text: &str, format: CorpusFormat) -> Result<Vec<Document>, IndexError> {
        CorpusReader::new(text.as_bytes(), format)?.collect()
    }

    #[test]
    fn auto_detects_json_lines() {
        let text = "\n{\"doc_id\": 10, \"text\": \"alpha\"}\n{\"doc_id\": 3, \"text\": \"beta\"}\n";
        let docs = collect(text, CorpusFormat::Auto).unwrap();
        assert_eq!(docs, vec![Document::new(10, "alpha"), Document::new(3, "beta")]);
    }

    #[test]
    fn plain_text_assigns_ids() {
        let docs = collect("first doc\n\nsecond doc\n", CorpusFormat::Auto).unwrap();
        assert_eq!(
            docs,
            vec![Document::new(0, "first doc"), Document::new(1, "second doc")]
        );
    }

    #[test]
    fn json_error_reports_line() {
        let text = "{\"doc_id\": 1, \"text\": \"a\"}\n{\"doc_id\": \"x\"}\n";
        match collect(text, CorpusFormat::JsonLines) {
            Err(IndexError::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
