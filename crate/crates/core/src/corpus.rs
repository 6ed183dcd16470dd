//! Book corpus ingestion: line-delimited book and review records, merging,
//! default filling, sentence splitting and shelf-derived genre labels.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shelf {
    pub name: String,
    pub count: u64,
}

/// One book with its merged reviews.
///
/// `description`, `language_code` and `average_rating` are nullable in the
/// raw dumps; [`fill_defaults`] replaces every `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BookRecord {
    pub book_id: String,
    pub title: String,
    pub description: Option<String>,
    pub authors: Vec<String>,
    pub language_code: Option<String>,
    pub is_ebook: bool,
    pub average_rating: Option<f64>,
    pub ratings_count: u64,
    #[serde(rename = "popular_shelves")]
    pub shelves: Vec<Shelf>,
    pub reviews: Vec<String>,
    pub genres: BTreeSet<String>,
}

impl BookRecord {
    pub fn new(book_id: impl Into<String>) -> Self {
        BookRecord {
            book_id: book_id.into(),
            title: String::new(),
            description: Some(String::new()),
            authors: Vec::new(),
            language_code: Some(String::new()),
            is_ebook: false,
            average_rating: Some(0.0),
            ratings_count: 0,
            shelves: Vec::new(),
            reviews: Vec::new(),
            genres: BTreeSet::new(),
        }
    }

    pub fn description_text(&self) -> &str {
        self.description.as_deref().unwrap_or("")
    }

    /// Text that enters the embedding path: the description, optionally
    /// followed by every review.
    pub fn document_text(&self, include_reviews: bool) -> String {
        let mut text = self.description_text().to_string();
        if include_reviews {
            for review in &self.reviews {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(review);
            }
        }
        text
    }

    /// Text fed to the TF-IDF baseline: title plus the embedded text.
    pub fn retrieval_text(&self, include_reviews: bool) -> String {
        let body = self.document_text(include_reviews);
        if self.title.is_empty() {
            body
        } else if body.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, body)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub book_id: String,
    pub review_text: String,
    pub rating: f64,
    pub n_votes: u64,
}

/// A book split into sentences, ready for sentence embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub book_id: String,
    pub sentences: Vec<String>,
}

impl Document {
    /// Returns `None` for books whose text yields no sentences; those books
    /// stay in the corpus but are excluded from embedding.
    pub fn from_record(record: &BookRecord, include_reviews: bool) -> Option<Document> {
        let sentences = split_sentences(&record.document_text(include_reviews));
        if sentences.is_empty() {
            None
        } else {
            Some(Document {
                book_id: record.book_id.clone(),
                sentences,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<R> {
    pub records: Vec<R>,
    /// Lines that failed to parse or violated a record invariant.
    pub skipped: usize,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines())
}

/// Reads line-delimited book records, skipping (and counting) malformed lines
/// and repeated book ids.
pub fn load_books(path: impl AsRef<Path>) -> Result<Loaded<BookRecord>> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for line in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_book_line(&line) {
            Some(book) if seen.insert(book.book_id.clone()) => records.push(book),
            _ => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} has no well-formed book records ({skipped} skipped)",
            path.display()
        )));
    }
    Ok(Loaded { records, skipped })
}

/// Reads line-delimited review records. An empty file is a valid, empty
/// review set.
pub fn load_reviews(path: impl AsRef<Path>) -> Result<Loaded<Review>> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_review_line(&line) {
            Some(review) => records.push(review),
            None => skipped += 1,
        }
    }
    Ok(Loaded { records, skipped })
}

pub fn parse_book_line(line: &str) -> Option<BookRecord> {
    let value: Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;

    let book_id = as_string(obj.get("book_id")?)?;
    if book_id.is_empty() {
        return None;
    }
    let title = optional(obj, "title", as_string)?.unwrap_or_default();
    let description = optional(obj, "description", as_string)?;
    let authors = optional(obj, "authors", as_author_list)?.unwrap_or_default();
    let language_code = optional(obj, "language_code", as_string)?;
    let is_ebook = optional(obj, "is_ebook", as_bool)?.unwrap_or(false);
    let average_rating = optional(obj, "average_rating", as_f64)?;
    if let Some(r) = average_rating {
        if !(0.0..=5.0).contains(&r) {
            return None;
        }
    }
    let ratings_count = optional(obj, "ratings_count", as_u64)?.unwrap_or(0);
    let shelves = optional(obj, "popular_shelves", as_shelves)?.unwrap_or_default();
    let reviews = optional(obj, "reviews", as_string_list)?.unwrap_or_default();
    let genres = optional(obj, "genres", as_string_list)?
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.to_lowercase())
        .collect();

    Some(BookRecord {
        book_id,
        title,
        description,
        authors,
        language_code,
        is_ebook,
        average_rating,
        ratings_count,
        shelves,
        reviews,
        genres,
    })
}

pub fn parse_review_line(line: &str) -> Option<Review> {
    let value: Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    let book_id = as_string(obj.get("book_id")?)?;
    let review_text = optional(obj, "review_text", as_string)?.unwrap_or_default();
    let rating = optional(obj, "rating", as_f64)?.unwrap_or(0.0);
    let n_votes = optional(obj, "n_votes", as_u64)?.unwrap_or(0);
    Some(Review {
        book_id,
        review_text,
        rating,
        n_votes,
    })
}

/// `Some(None)` for an absent or null field, `None` for a present field of the
/// wrong shape.
fn optional<T>(obj: &Map<String, Value>, key: &str, f: impl Fn(&Value) -> Option<T>) -> Option<Option<T>> {
    match obj.get(key) {
        None | Some(Value::Null) => Some(None),
        Some(v) => f(v).map(Some),
    }
}

fn as_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

// The Goodreads dumps store most numbers and booleans as strings.
fn as_f64(v: &Value) -> Option<f64> {
    let x = match v {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    };
    x.is_finite().then_some(x)
}

fn as_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" | "" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn as_string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(as_string).collect()
}

fn as_author_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|a| match a {
            Value::Object(o) => o.get("name").or_else(|| o.get("author_id")).and_then(as_string),
            other => as_string(other),
        })
        .collect()
}

fn as_shelves(v: &Value) -> Option<Vec<Shelf>> {
    v.as_array()?
        .iter()
        .map(|s| {
            let o = s.as_object()?;
            Some(Shelf {
                name: as_string(o.get("name")?)?,
                count: as_u64(o.get("count")?)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub books: Vec<BookRecord>,
    /// Reviews whose book id matched no book.
    pub orphans: usize,
}

/// Attaches review texts to their books. Each book's review list is replaced
/// by the matching reviews in input order, so merging is idempotent.
pub fn merge_reviews(mut books: Vec<BookRecord>, reviews: &[Review]) -> Merged {
    let index: HashMap<&str, usize> = books
        .iter()
        .enumerate()
        .map(|(i, b)| (b.book_id.as_str(), i))
        .collect();
    let mut grouped: Vec<Vec<String>> = vec![Vec::new(); books.len()];
    let mut orphans = 0;
    for review in reviews {
        match index.get(review.book_id.as_str()) {
            Some(&i) => grouped[i].push(review.review_text.clone()),
            None => orphans += 1,
        }
    }
    for (book, texts) in books.iter_mut().zip(grouped) {
        book.reviews = texts;
    }
    Merged { books, orphans }
}

/// Replacement values for the nullable book fields. A `None` here means "no
/// default configured", which is an error only if a null is encountered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Defaults {
    pub description: Option<String>,
    pub language_code: Option<String>,
    pub average_rating: Option<f64>,
}

impl Defaults {
    pub fn standard() -> Self {
        Defaults {
            description: Some(String::new()),
            language_code: Some("unknown".to_string()),
            average_rating: Some(0.0),
        }
    }
}

pub fn fill_defaults(mut records: Vec<BookRecord>, defaults: &Defaults) -> Result<Vec<BookRecord>> {
    fn fill<T: Clone>(slot: &mut Option<T>, default: &Option<T>, field: &str, id: &str) -> Result<()> {
        if slot.is_none() {
            let value = default.clone().ok_or_else(|| {
                Error::Config(format!("no default configured for null field `{field}` (book {id})"))
            })?;
            *slot = Some(value);
        }
        Ok(())
    }
    for r in &mut records {
        fill(&mut r.description, &defaults.description, "description", &r.book_id)?;
        fill(&mut r.language_code, &defaults.language_code, "language_code", &r.book_id)?;
        fill(&mut r.average_rating, &defaults.average_rating, "average_rating", &r.book_id)?;
    }
    Ok(records)
}

const ABBREVIATIONS: [&str; 5] = ["Mr.", "Mrs.", "Dr.", "St.", "vs."];

/// Splits text after `.`, `!` or `?` when the mark is followed by whitespace
/// and then an uppercase letter or the end of the text. A `.` closing one of
/// [`ABBREVIATIONS`] never ends a sentence. Sentences are trimmed; whitespace
/// inside a sentence is kept as written.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0;

    for (pos, &(byte, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let end = byte + c.len_utf8();
        let rest = &chars[pos + 1..];
        if !rest.first().is_some_and(|(_, n)| n.is_whitespace()) {
            continue;
        }
        let next_visible = rest.iter().map(|&(_, n)| n).find(|n| !n.is_whitespace());
        if next_visible.is_some_and(|n| !n.is_uppercase()) {
            continue;
        }
        if c == '.' && ends_with_abbreviation(&text[start..end]) {
            continue;
        }
        push_trimmed(&mut sentences, &text[start..end]);
        start = end;
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn ends_with_abbreviation(segment: &str) -> bool {
    let word = segment.rsplit(char::is_whitespace).next().unwrap_or("");
    ABBREVIATIONS.contains(&word)
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreConfig {
    pub vocabulary: Vec<String>,
    pub min_count: u64,
}

impl GenreConfig {
    pub fn new(vocabulary: impl IntoIterator<Item = impl Into<String>>, min_count: u64) -> Self {
        GenreConfig {
            vocabulary: vocabulary.into_iter().map(|g| g.into().to_lowercase()).collect(),
            min_count,
        }
    }
}

/// Lowercased shelf names that appear in the genre vocabulary with at least
/// `min_count` placements.
pub fn derive_genres(record: &BookRecord, config: &GenreConfig) -> Result<BTreeSet<String>> {
    if config.vocabulary.is_empty() {
        return Err(Error::Config("genre vocabulary is empty".into()));
    }
    let vocab: HashSet<String> = config.vocabulary.iter().map(|g| g.to_lowercase()).collect();
    Ok(record
        .shelves
        .iter()
        .filter(|s| s.count >= config.min_count)
        .map(|s| s.name.to_lowercase())
        .filter(|name| vocab.contains(name))
        .collect())
}

/// Writes records in the line-delimited corpus format, one JSON object per
/// line, with reviews and derived genres embedded.
pub fn write_corpus(path: impl AsRef<Path>, records: &[BookRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_reviews(path: impl AsRef<Path>, reviews: &[Review]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in reviews {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
