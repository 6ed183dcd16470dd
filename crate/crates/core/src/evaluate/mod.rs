//! Genre-relevance precision@k over several rankers, plus the TF-IDF and
//! sentence-mean baselines.

mod benchmark;
mod relevance;
mod tfidf;

pub use benchmark::{
    baseline_sentence_mean, expected_random_precision, group_random_expectation, run_benchmark, CorpusSummary,
    DetailRow, EvalReport, IndexRanker, ModelScores, RandomRanker, Ranker, DEFAULT_KS,
};
pub use relevance::{is_relevant, one_hot_genres, precision_at_k, relevance_ratio, RatioRule, RelevanceConfig};
pub use tfidf::{tfidf_vectorize, tokenize, TfidfIndex, TfidfMatrix};
