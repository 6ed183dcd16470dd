//! Seeded generator for a genre-structured book corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BookRecord, Review, Shelf};
use crate::error::{Error, Result};

const GENRE_WORDS: [(&str, [&str; 10]); 5] = [
    ("fantasy", ["dragon", "wizard", "sword", "castle", "spell", "elf", "quest", "kingdom", "sorcerer", "rune"]),
    ("mystery", ["detective", "clue", "murder", "alibi", "suspect", "inspector", "motive", "witness", "corpse", "culprit"]),
    ("romance", ["lover", "kiss", "heart", "wedding", "courtship", "passion", "suitor", "bride", "longing", "romance"]),
    ("science-fiction", ["starship", "android", "galaxy", "laser", "planet", "robot", "orbit", "alien", "cyborg", "wormhole"]),
    ("history", ["empire", "treaty", "revolution", "dynasty", "battle", "monarch", "archive", "century", "colony", "parliament"]),
];

const SHARED_WORDS: [&str; 12] = [
    "journey", "family", "secret", "friend", "city", "night", "letter", "river", "promise", "stranger", "winter", "house",
];

const VERBS: [&str; 8] = ["finds", "follows", "hides", "remembers", "loses", "guards", "seeks", "meets"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub books: usize,
    /// Number of genres, at most 5; books are dealt round-robin.
    pub genres: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub reviews_per_book: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            books: 500,
            genres: 5,
            min_sentences: 3,
            max_sentences: 8,
            reviews_per_book: 1,
            seed: 7,
        }
    }
}

/// Genre names used by [`generate`], in order.
pub fn genre_names(n: usize) -> Vec<String> {
    GENRE_WORDS.iter().take(n).map(|g| g.0.to_string()).collect()
}

fn sentence(rng: &mut ChaCha8Rng, words: &[&str], serial: usize) -> String {
    let a = words.choose(rng).unwrap();
    let b = if rng.random_bool(0.3) {
        SHARED_WORDS.choose(rng).unwrap()
    } else {
        words.choose(rng).unwrap()
    };
    let verb = VERBS.choose(rng).unwrap();
    let mut s = format!("The {a} {verb} the {b}");
    if rng.random_bool(0.5) {
        s.push_str(&format!(" near the {}", SHARED_WORDS.choose(rng).unwrap()));
    }
    // serial keeps every sentence distinct
    s.push_str(&format!(" in chapter {serial}."));
    s
}

/// Books dealt round-robin over the genres, each with a description in its
/// genre's vocabulary, a genre shelf plus a generic one, and reviews.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<BookRecord>, Vec<Review>)> {
    if cfg.genres == 0 || cfg.genres > GENRE_WORDS.len() {
        return Err(Error::Config(format!("genres must be in 1..={}", GENRE_WORDS.len())));
    }
    if cfg.min_sentences == 0 || cfg.min_sentences > cfg.max_sentences {
        return Err(Error::Config("sentence range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut books = Vec::with_capacity(cfg.books);
    let mut reviews = Vec::new();
    let mut serial = 0usize;
    for i in 0..cfg.books {
        let (genre, words) = GENRE_WORDS[i % cfg.genres];
        let n = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
        let sentences: Vec<String> = (0..n)
            .map(|_| {
                serial += 1;
                sentence(&mut rng, &words, serial)
            })
            .collect();
        let mut b = BookRecord::new(format!("syn{i:04}"));
        b.title = format!("The {} of {}", words.choose(&mut rng).unwrap(), SHARED_WORDS.choose(&mut rng).unwrap());
        b.description = Some(sentences.join(" "));
        b.authors = vec![format!("Author {}", i % 37)];
        b.language_code = Some("eng".into());
        b.average_rating = Some(f64::from(rng.random_range(20..=50u32)) / 10.0);
        b.ratings_count = rng.random_range(0..5000);
        b.shelves = vec![
            Shelf { name: "to-read".into(), count: rng.random_range(100..1000) },
            Shelf { name: genre.into(), count: rng.random_range(5..200) },
        ];
        for r in 0..cfg.reviews_per_book {
            serial += 1;
            reviews.push(Review {
                book_id: b.book_id.clone(),
                review_text: format!("Review {r}: {}", sentence(&mut rng, &words, serial)),
                rating: f64::from(rng.random_range(1..=5u32)),
                n_votes: rng.random_range(0..50),
            });
        }
        books.push(b);
    }
    Ok((books, reviews))
}
