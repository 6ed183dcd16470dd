//! Acceptance run: one `PASS`/`FAIL` line per criterion.
//!
//! The process exits 0 even when a criterion fails so that the rest of the
//! workspace suite still runs; set `ACCEPTANCE_STRICT=1` to turn any failure
//! into a nonzero exit.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use multibert::codebook::{kmeans_fit, size_weighted_variance, within_cluster_sse, KMeansParams};
use multibert::encoder::gradcheck::{default_batch, gradient_check_model, tiny_config, Difference};
use multibert::encoder::{
    forward, forward_row, gradient_check, reconstruction_loss, train, EncoderConfig, EncoderModel, TrainConfig,
};
use multibert::evaluate::{
    expected_random_precision, group_random_expectation, is_relevant, run_benchmark, RandomRanker, Ranker,
    RelevanceConfig,
};
use multibert::retrieval::EmbeddingIndex;
use multibert::sequencer::{pad_batch, pad_to_longest, TokenSequence, TokenVocabulary};
use multibert::synth::{genre_names, SynthConfig};
use multibert::Error;
use multibert_cli::{config, pipeline, tools};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn kmeans_recovery() -> Outcome {
    let start = Instant::now();
    let sigma = 1.0;
    let centers = [[0.0, 0.0], [12.0, 0.0], [0.0, 12.0]];
    let make = |seed: u64| -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..300)
            .map(|i| {
                let c = centers[i % 3];
                vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
            })
            .collect()
    };
    let points = make(2024);
    let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let fit = match kmeans_fit(&refs, KMeansParams { k: 3, seed: 0, ..KMeansParams::default() }) {
        Ok(f) => f,
        Err(e) => return outcome(false, e.to_string()),
    };
    // each true center is matched by its nearest centroid
    let mut worst: f64 = 0.0;
    let mut matched = BTreeSet::new();
    for c in &centers {
        let (j, d) = (0..3)
            .map(|j| {
                let m = fit.codebook.centroid(j);
                (j, ((m[0] - c[0]).powi(2) + (m[1] - c[1]).powi(2)).sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        matched.insert(j);
        worst = worst.max(d);
    }
    let mut monotone = 0;
    for seed in 0..50 {
        let pts = make(seed);
        let r: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let f = kmeans_fit(&r, KMeansParams { k: 3, seed: seed as i64, ..KMeansParams::default() }).unwrap();
        if f.inertia_trace.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 0.3 && matched.len() == 3 && monotone == 50 && within(t, 5),
        format!("max center error {worst:.4} (< 0.3), monotone inertia {monotone}/50 seeds, {t:.2?} (< 5 s)"),
    )
}

fn kmeans_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(k..=40);
        let dim = rng.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        // oracle: left side from explicit means, right side from per-cluster
        // population variance summed over coordinates
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            let m = members.len() as f64;
            let mean: Vec<f64> = (0..dim).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / m).collect();
            lhs += members.iter().map(|p| (0..dim).map(|j| (p[j] - mean[j]).powi(2)).sum::<f64>()).sum::<f64>();
            let var: f64 = (0..dim)
                .map(|j| members.iter().map(|p| p[j] * p[j]).sum::<f64>() / m - mean[j] * mean[j])
                .sum();
            rhs += m * var;
        }
        let sse = within_cluster_sse(&refs, &labels, k);
        let wv = size_weighted_variance(&refs, &labels, k);
        for (a, b) in [(sse, wv), (sse, lhs), (wv, rhs), (lhs, rhs)] {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
        }
    }
    outcome(worst <= 1e-9, format!("max relative gap {worst:.3e} over 100 cases (<= 1e-9)"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let batch = default_batch(cfg.vocab_size, cfg.max_positions).unwrap();
    let central = gradient_check(&cfg, &batch, 1e-3).unwrap();
    let t = start.elapsed();
    let model = EncoderModel::<f64>::init(&cfg).unwrap();
    let rich = gradient_check_model(model, &batch, 2e-3, Difference::Richardson).unwrap();
    outcome(
        central.max_relative_error < 1e-4 && within(t, 60),
        format!(
            "central step 1e-3: {:.3e} at {}[{}] (< 1e-4), {} params, {t:.2?}; for reference Richardson step 2e-3: {:.3e}",
            central.max_relative_error, central.worst.0, central.worst.1, central.parameters, rich.max_relative_error
        ),
    )
}

fn random_sequences(n: usize, vocab: TokenVocabulary, max_len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=max_len);
            let tokens = std::iter::once(vocab.bos())
                .chain((0..len).map(|_| rng.random_range(0..vocab.k as u32)))
                .chain([vocab.eos()])
                .collect();
            TokenSequence { book_id: format!("s{i:03}"), tokens }
        })
        .collect()
}

fn training_progress() -> Outcome {
    let start = Instant::now();
    let ecfg = EncoderConfig::toy(24);
    let vocab = TokenVocabulary::from_size(24).unwrap();
    let seqs = random_sequences(200, vocab, 8, 5);
    let tcfg = TrainConfig { batch_size: 16, learning_rate: 1e-4, epochs: 50, ..TrainConfig::default() };
    let model = EncoderModel::<f32>::init(&ecfg).unwrap();

    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = pad_to_longest(&refs, vocab).unwrap();
    let uniform = vec![0.0f64; batch.tokens.len() * 24];
    let uniform_loss = reconstruction_loss(&uniform, 24, &batch.tokens, &batch.mask).unwrap();
    let init = forward(&model, &batch).unwrap();
    let init_loss = reconstruction_loss(&init.logits, 24, &batch.tokens, &batch.mask).unwrap();

    let one_core = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let trained = match one_core.install(|| train(model, &seqs, &tcfg, 1)) {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    let first = trained.history.first().unwrap();
    let last = trained.history.last().unwrap();
    let t = start.elapsed();
    let ln24 = 24f64.ln();
    outcome(
        last <= 0.5 * first && (uniform_loss - ln24).abs() <= 0.1 && within(t, 600),
        format!(
            "epoch 1 {first:.4} -> epoch 50 {last:.4} (ratio {:.3} <= 0.5); uniform-logit loss {uniform_loss:.4} vs ln 24 = {ln24:.4}; initial model loss {init_loss:.4}; {t:.2?} on one thread",
            last / first
        ),
    )
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

fn retrieval_oracle() -> Outcome {
    let (n, dim, k) = (1000, 6, 25);
    let mut mismatches = 0;
    let mut tied_queries = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small integer coordinates make exact ties common; a tenth of the
        // rows are scaled copies of earlier rows
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let row = if i > 0 && rng.random_bool(0.1) {
                let src = rng.random_range(0..i);
                rows[src].iter().map(|x| 2.0 * x).collect()
            } else {
                (0..dim).map(|_| f64::from(rng.random_range(-2..=2))).collect()
            };
            rows.push(row);
        }
        // ids deliberately not in row order
        let ids: Vec<String> = (0..n).map(|i| format!("d{:04}", (i * 7919) % n)).collect();
        let index =
            EmbeddingIndex::<f64>::new(ids.clone(), dim, rows.iter().flatten().copied().collect()).unwrap();
        for q in 0..n {
            let got = index.top_k(&ids[q], k);
            if rows[q].iter().all(|&x| x == 0.0) {
                if !matches!(got, Err(Error::UndefinedSimilarity(_))) {
                    mismatches += 1;
                }
                continue;
            }
            let mut all: Vec<(f64, &str)> = (0..n)
                .filter(|&j| j != q && rows[j].iter().any(|&x| x != 0.0))
                .map(|j| (cosine_oracle(&rows[q], &rows[j]), ids[j].as_str()))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            all.truncate(k);
            if all.windows(2).any(|w| w[0].0 == w[1].0) {
                tied_queries += 1;
            }
            let got = got.unwrap();
            let same = got.len() == all.len()
                && got.iter().zip(&all).all(|(g, o)| g.book_id == o.1 && g.score == o.0);
            if !same {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatching queries of 10000 across 10 seeds; {tied_queries} queries had ties in the top {k}"),
    )
}

fn softmax_padding() -> Outcome {
    let mut cfg = EncoderConfig::toy(24);
    cfg.max_positions = 24;
    let model = EncoderModel::<f32>::init(&cfg).unwrap();
    let vocab = TokenVocabulary::from_size(24).unwrap();
    let seqs = random_sequences(16, vocab, 10, 21);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let short = pad_to_longest(&refs, vocab).unwrap();
    let long = pad_batch(&refs, cfg.max_positions, vocab).unwrap();
    let a = forward(&model, &short).unwrap();
    let b = forward(&model, &long).unwrap();

    let mut worst_sum: f32 = 0.0;
    for r in 0..long.rows {
        let mask = long.mask_row(r);
        let trace = forward_row(&model, long.row(r), mask).unwrap();
        for l in 0..cfg.n_layers {
            // heads * len query rows
            for (i, row) in trace.attention(l).chunks(long.len).enumerate() {
                if mask[i % long.len] == 0 {
                    continue;
                }
                let s: f32 = row.iter().zip(mask).filter(|(_, &m)| m == 1).map(|(p, _)| *p).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
    }
    let mut worst_shift: f32 = 0.0;
    for (r, seq) in seqs.iter().enumerate() {
        for p in 0..seq.tokens.len() {
            for (x, y) in a.hidden_at(r, p).iter().zip(b.hidden_at(r, p)) {
                worst_shift = worst_shift.max((x - y).abs());
            }
            let v = cfg.vocab_size;
            let la = &a.logits[(r * a.len + p) * v..(r * a.len + p + 1) * v];
            let lb = &b.logits[(r * b.len + p) * v..(r * b.len + p + 1) * v];
            for (x, y) in la.iter().zip(lb) {
                worst_shift = worst_shift.max((x - y).abs());
            }
        }
    }
    outcome(
        worst_sum <= 1e-5 && worst_shift <= 1e-5,
        format!(
            "attention row sums off by at most {worst_sum:.2e}; padding {} -> {} moves outputs by at most {worst_shift:.2e} (both <= 1e-5)",
            short.len, long.len
        ),
    )
}

const E2E_CONFIG: &str = r#"
[paths]
books = "data/books.jsonl"
reviews = "data/reviews.jsonl"
run_dir = "run"

[corpus]
genre_vocabulary = ["fantasy", "mystery", "romance", "science-fiction", "history"]

[synthetic]
mode = "genre-correlated"
dim = 32

[codebook]
k = 20

[encoder]
hidden_size = 32
n_layers = 2
n_heads = 2
max_positions = 16

[train]
epochs = 50
"#;

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { books: 500, genres: 5, ..SynthConfig::default() };
    tools::synth_corpus(&dir.path().join("data"), &synth).unwrap();
    let cfg_path = dir.path().join("multibert.toml");
    fs::write(&cfg_path, E2E_CONFIG).unwrap();
    let loaded = config::load(&cfg_path, &[]).unwrap();
    if let Err(e) = pipeline::run_all(&loaded) {
        return outcome(false, format!("pipeline failed: {e:#}"));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(loaded.artifact(pipeline::REPORT_JSON)).unwrap()).unwrap();
    let p5 = |m: &str| report["precision"][m]["P@5"].as_f64().unwrap();

    let books = pipeline::read_corpus(&loaded.artifact(pipeline::CORPUS)).unwrap();
    let rel = RelevanceConfig::new(genre_names(5));
    let genres: Vec<&BTreeSet<String>> = books.iter().map(|b| &b.genres).collect();
    let analytic = group_random_expectation(&[100; 5]);
    let from_genres = expected_random_precision(&genres, &rel).unwrap();
    let ids: Vec<String> = books.iter().map(|b| b.book_id.clone()).collect();
    let mut worst_sim: f64 = 0.0;
    for seed in 0..20 {
        let ranker = RandomRanker::new(ids.clone(), seed);
        let models: [(&str, &dyn Ranker); 1] = [("random", &ranker)];
        let r = run_benchmark(&books, &models, &rel, &[5]).unwrap();
        worst_sim = worst_sim.max((r.precision("random", 5).unwrap() - analytic).abs());
    }
    let (multi, sbert, tfidf) = (p5("multi-bert"), p5("sbert-baseline"), p5("tfidf"));
    let t = start.elapsed();
    let pass = (from_genres - analytic).abs() < 1e-12
        && worst_sim <= 0.05
        && multi >= 2.0 * analytic
        && sbert > analytic
        && tfidf > analytic
        && within(t, 900);
    outcome(
        pass,
        format!(
            "P@5 multi-bert {multi:.4} (>= {:.4}), sbert-baseline {sbert:.4}, tfidf {tfidf:.4} (> {analytic:.4} = 99/499); 20-seed random max deviation {worst_sim:.4} (<= 0.05); {t:.2?}",
            2.0 * analytic
        ),
    )
}

fn relevance_boundary() -> Outcome {
    let genres = |n: usize| -> BTreeSet<String> { (0..n).map(|i| format!("g{i:03}")).collect() };
    let query = genres(100);
    let rel = RelevanceConfig::new(query.iter().cloned().collect());
    let at = is_relevant(&query, &genres(40), &rel).unwrap();
    let above = is_relevant(&query, &genres(41), &rel).unwrap();
    let five = RelevanceConfig::new(genres(5).into_iter().collect());
    let small = is_relevant(&genres(5), &genres(2), &five).unwrap();
    outcome(
        !at && above && !small,
        format!("ratio 40/100 -> {at}, 2/5 -> {small} (want false); ratio 41/100 -> {above} (want true)"),
    )
}

fn copy_fixture(to: &Path) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    fs::create_dir_all(to.join("data")).unwrap();
    for f in ["books.jsonl", "reviews.jsonl"] {
        fs::copy(src.join(f), to.join("data").join(f)).unwrap();
    }
    fs::write(
        to.join("multibert.toml"),
        r#"
[paths]
books = "data/books.jsonl"
reviews = "data/reviews.jsonl"
run_dir = "run"

[corpus]
include_reviews = true
genre_vocabulary = ["picture-books", "fantasy", "animals", "classics", "adventure"]

[synthetic]
mode = "genre-correlated"
dim = 16

[codebook]
k = 6

[encoder]
hidden_size = 8
n_layers = 1
n_heads = 2
max_positions = 16

[train]
epochs = 5
learning_rate = 0.001

[retrieval]
mode = "cluster"

[evaluate]
ks = [1, 3, 5]
"#,
    )
    .unwrap();
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        copy_fixture(d.path());
        let loaded = config::load(&d.path().join("multibert.toml"), &[]).unwrap();
        if let Err(e) = pipeline::run_all(&loaded) {
            return outcome(false, format!("pipeline failed: {e:#}"));
        }
    }
    let list = |d: &Path| -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(d.join("run"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let names = list(dirs[0].path());
    if names != list(dirs[1].path()) {
        return outcome(false, "run directories hold different files");
    }
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(dirs[0].path().join("run").join(n)).unwrap() != fs::read(dirs[1].path().join("run").join(n)).unwrap())
        .collect();
    outcome(
        differing.is_empty() && names.len() == 11,
        format!("{} artifacts compared, differing: {differing:?}", names.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kmeans-recovery", kmeans_recovery),
        ("kmeans-identity", kmeans_identity),
        ("gradient-correctness", gradient_correctness),
        ("training-progress", training_progress),
        ("retrieval-oracle", retrieval_oracle),
        ("softmax-padding", softmax_padding),
        ("end-to-end-signal", end_to_end),
        ("relevance-boundary", relevance_boundary),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
