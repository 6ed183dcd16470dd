use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use multibert::corpus::{
    derive_genres, fill_defaults, load_books, load_reviews, merge_reviews, split_sentences, Defaults, Document,
    GenreConfig,
};
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct Manifest {
    book_ids: Vec<String>,
    skipped_lines: usize,
    reviews: usize,
    orphan_reviews: usize,
    reviews_per_book: BTreeMap<String, usize>,
    genre_vocabulary: Vec<String>,
    genres: BTreeMap<String, BTreeSet<String>>,
    description_sentences: BTreeMap<String, usize>,
}

fn manifest() -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(fixture("manifest.json")).unwrap()).unwrap()
}

#[test]
fn books_match_manifest() {
    let m = manifest();
    let loaded = load_books(fixture("books.jsonl")).unwrap();
    let ids: Vec<_> = loaded.records.iter().map(|b| b.book_id.clone()).collect();
    assert_eq!(ids, m.book_ids);
    assert_eq!(loaded.skipped, m.skipped_lines);
}

#[test]
fn reviews_merge_per_manifest() {
    let m = manifest();
    let books = load_books(fixture("books.jsonl")).unwrap().records;
    let reviews = load_reviews(fixture("reviews.jsonl")).unwrap();
    assert_eq!(reviews.records.len(), m.reviews);
    let merged = merge_reviews(books, &reviews.records);
    assert_eq!(merged.orphans, m.orphan_reviews);
    for b in &merged.books {
        assert_eq!(b.reviews.len(), m.reviews_per_book.get(&b.book_id).copied().unwrap_or(0), "{}", b.book_id);
    }
    let c001 = &merged.books[0];
    assert_eq!(c001.reviews[1], "A little scary for toddlers.");
}

#[test]
fn defaults_genres_and_sentences() {
    let m = manifest();
    let books = load_books(fixture("books.jsonl")).unwrap().records;
    assert!(books[3].description.is_none());
    assert!(books[4].average_rating.is_none());
    let filled = fill_defaults(books.clone(), &Defaults::standard()).unwrap();
    assert_eq!(filled[3].description.as_deref(), Some(""));
    assert_eq!(filled[3].language_code.as_deref(), Some("unknown"));
    assert_eq!(filled[4].average_rating, Some(0.0));
    assert_eq!(filled[0], books[0]);

    let cfg = GenreConfig::new(m.genre_vocabulary.clone(), 1);
    for b in &filled {
        assert_eq!(derive_genres(b, &cfg).unwrap(), m.genres[&b.book_id], "{}", b.book_id);
        let n = split_sentences(b.description_text()).len();
        assert_eq!(n, m.description_sentences[&b.book_id], "{}", b.book_id);
        assert_eq!(Document::from_record(b, false).is_none(), n == 0);
    }
}

#[test]
fn pipeline_prefix_is_idempotent() {
    let books = load_books(fixture("books.jsonl")).unwrap().records;
    let reviews = load_reviews(fixture("reviews.jsonl")).unwrap().records;
    let once = fill_defaults(merge_reviews(books, &reviews).books, &Defaults::standard()).unwrap();
    let twice = fill_defaults(merge_reviews(once.clone(), &reviews).books, &Defaults::standard()).unwrap();
    assert_eq!(once, twice);
}

#[derive(Deserialize)]
struct SplitCase {
    text: String,
    sentences: Vec<String>,
}

#[test]
fn splitter_matches_hand_labels() {
    let cases: Vec<SplitCase> =
        serde_json::from_str(&std::fs::read_to_string(fixture("splitter_cases.json")).unwrap()).unwrap();
    assert_eq!(cases.iter().map(|c| c.sentences.len()).sum::<usize>(), 50);
    for c in &cases {
        assert_eq!(split_sentences(&c.text), c.sentences, "{:?}", c.text);
    }
}
