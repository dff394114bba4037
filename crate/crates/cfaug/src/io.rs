//! Line-delimited JSON review and pair files, TOML prompt files, and
//! annotation files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cfaug_core::corpus::{CorpusError, CounterfactualPair, PairOrigin, Review, ReviewSet};
use cfaug_core::prompt::PromptState;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Os {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    fn os(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Self::Missing(path.to_path_buf())
        } else {
            Self::Os {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// On-disk review record. The rating is read as a plain integer so that
/// out-of-range values are reported rather than failing to parse.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReviewRecord {
    review_id: String,
    product_id: String,
    text: String,
    rating: i64,
}

impl ReviewRecord {
    fn into_review(self) -> Result<Review, CorpusError> {
        Review::new(self.review_id, self.product_id, self.text, self.rating)
    }
}

impl From<&Review> for ReviewRecord {
    fn from(r: &Review) -> Self {
        Self {
            review_id: r.review_id.clone(),
            product_id: r.product_id.clone(),
            text: r.text.clone(),
            rating: r.rating.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    positive: ReviewRecord,
    negative: ReviewRecord,
    origin: PairOrigin,
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::os(path, e))
}

/// Parses every non-blank line of `path` with `parse`, reporting 1-based
/// line numbers on failure.
fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| IoError::os(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|message| IoError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::os(dir, e))?;
    }
    let f = File::create(path).map_err(|e| IoError::os(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(&item).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| IoError::os(path, e))?;
    }
    w.flush().map_err(|e| IoError::os(path, e))
}

pub fn load_reviews(path: &Path) -> Result<ReviewSet, IoError> {
    let reviews = read_lines(path, |line| {
        let rec: ReviewRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        rec.into_review().map_err(|e| e.to_string())
    })?;
    ReviewSet::new(reviews).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_reviews<'a>(path: &Path, reviews: impl IntoIterator<Item = &'a Review>) -> Result<(), IoError> {
    write_lines(path, reviews.into_iter().map(ReviewRecord::from))
}

pub fn load_pairs(path: &Path) -> Result<Vec<CounterfactualPair>, IoError> {
    read_lines(path, |line| {
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let positive = rec.positive.into_review().map_err(|e| e.to_string())?;
        let negative = rec.negative.into_review().map_err(|e| e.to_string())?;
        CounterfactualPair::new(positive, negative, rec.origin).map_err(|e| e.to_string())
    })
}

pub fn write_pairs<'a>(
    path: &Path,
    pairs: impl IntoIterator<Item = &'a CounterfactualPair>,
) -> Result<(), IoError> {
    write_lines(
        path,
        pairs.into_iter().map(|p| PairRecord {
            positive: (&p.positive).into(),
            negative: (&p.negative).into(),
            origin: p.origin,
        }),
    )
}

/// Any serializable records, one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    write_lines(path, items)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::os(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| IoError::os(path, e))
}

pub fn load_prompt(path: &Path) -> Result<PromptState, IoError> {
    let s = std::fs::read_to_string(path).map_err(|e| IoError::os(path, e))?;
    let state: PromptState = toml::from_str(&s).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    state.validate().map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(state)
}

pub fn write_prompt(path: &Path, state: &PromptState) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::os(dir, e))?;
    }
    let s = toml::to_string(state).expect("prompt state serializes");
    std::fs::write(path, s).map_err(|e| IoError::os(path, e))
}

/// A manually written counterfactual for one review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub review_id: String,
    pub counterfactual: String,
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, IoError> {
    read_lines(path, |line| serde_json::from_str(line).map_err(|e| e.to_string()))
}
