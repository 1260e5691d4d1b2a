//! Caption corpora: UTF-8 lines of `class_id<TAB>caption`.

use std::path::Path;

use xmodal_core::text_ae::tokenize;

use crate::error::{Result, XmodalError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub class_id: usize,
    pub caption: String,
    pub tokens: Vec<String>,
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<CaptionRecord>> {
    let err = |line: usize, detail: String| XmodalError::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "missing tab between class id and caption".into()))?;
        let class_id = id.trim().parse().map_err(|_| {
            err(
                i + 1,
                format!("class id '{id}' is not a non-negative integer"),
            )
        })?;
        out.push(CaptionRecord {
            class_id,
            caption: caption.to_string(),
            tokens: tokenize(caption),
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<CaptionRecord>> {
    let bytes = crate::fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        XmodalError::format(path, e.utf8_error().valid_up_to() as u64, "invalid UTF-8")
    })?;
    parse(&text, path)
}

pub fn render(records: &[(usize, &str)]) -> String {
    records.iter().map(|(c, s)| format!("{c}\t{s}\n")).collect()
}
