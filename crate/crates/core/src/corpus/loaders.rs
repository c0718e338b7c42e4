use std::fs;
use std::path::Path;

use super::{CorpusError, Document, PreprocessConfig};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Reads a 3-column `class,title,description` CSV (the AG News layout).
///
/// Title and description are joined with a space. A leading header row whose
/// first field starts with "class" is skipped. Document ids are
/// `<file stem>:<row>` with 0-based data rows.
pub fn load_ag_news_csv(path: &Path, rules: &PreprocessConfig) -> Result<Vec<Document>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("doc").to_string();
    let mut docs = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: line + 1,
            message: e.to_string(),
        })?;
        if line == 0 && rec.get(0).is_some_and(|f| f.trim().to_lowercase().starts_with("class")) {
            continue;
        }
        if rec.len() < 2 {
            return Err(CorpusError::Parse {
                path: path.display().to_string(),
                line: line + 1,
                message: format!("expected class,title,description; found {} field(s)", rec.len()),
            });
        }
        let class = rec.get(0).unwrap_or_default().trim();
        let title = rec.get(1).unwrap_or_default();
        let description = rec.get(2).unwrap_or_default();
        let text = match (title.is_empty(), description.is_empty()) {
            (true, _) => description.to_string(),
            (_, true) => title.to_string(),
            _ => format!("{title} {description}"),
        };
        docs.push(Document::new(format!("{stem}:{}", docs.len()), class, text, rules));
    }
    Ok(docs)
}

/// Drops a mail/news header block: leading `Key: value` lines up to the
/// first blank line. Text without such a header is returned unchanged.
pub fn strip_headers(text: &str) -> &str {
    let first = text.lines().next().unwrap_or_default();
    let looks_like_header = first
        .split_once(':')
        .is_some_and(|(k, _)| !k.is_empty() && !k.contains(char::is_whitespace));
    if !looks_like_header {
        return text;
    }
    for sep in ["\r\n\r\n", "\n\n"] {
        if let Some(i) = text.find(sep) {
            return &text[i + sep.len()..];
        }
    }
    ""
}

/// Reads a `root/<class>/<file>` tree (the 20 Newsgroups layout), one
/// document per file, headers stripped. Classes and files are visited in
/// lexicographic order.
pub fn load_class_dirs(root: &Path, rules: &PreprocessConfig) -> Result<Vec<Document>, CorpusError> {
    let mut classes: Vec<_> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .collect();
    classes.sort_by_key(|e| e.file_name());
    let mut docs = Vec::new();
    for class_dir in classes {
        let class = class_dir.file_name().to_string_lossy().to_string();
        let mut files: Vec<_> = fs::read_dir(class_dir.path())
            .map_err(|e| io_err(&class_dir.path(), e))?
            .filter_map(Result::ok)
            .filter(|e| e.path().is_file())
            .collect();
        files.sort_by_key(|e| e.file_name());
        for f in files {
            let bytes = fs::read(f.path()).map_err(|e| io_err(&f.path(), e))?;
            let text = String::from_utf8_lossy(&bytes);
            let body = strip_headers(&text);
            let id = format!("{class}/{}", f.file_name().to_string_lossy());
            docs.push(Document::new(id, class.clone(), body, rules));
        }
    }
    Ok(docs)
}

/// Writes documents as headerless `class,title,description` rows with an
/// empty title, readable by [`load_ag_news_csv`].
pub fn write_csv(docs: &[Document], path: &Path) -> Result<(), CorpusError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| io_err(path, e))?;
    for d in docs {
        w.write_record([d.label.as_str(), "", d.raw_text.as_str()]).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
