//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use errcorr::cli::{cmd_aggregate, cmd_run, cmd_score, Overrides, RunConfig};
use errcorr::consensus::{ensemble, self_consistency, VoteBundle};
use errcorr::corpus::{dataset_stats, load_dataset_auto, AnnotatedNote, GroundTruth};
use errcorr::ledger::{LedgerRecord, LedgerWriter};
use errcorr::outparse::{normalize, parse_output, Finding, Prediction, Provenance};
use errcorr::prompting::ErrorCategory;
use errcorr::providers::ProviderConfig;
use errcorr::scoring::{rouge1_f, Backends, ScoreReport};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay40")
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn replay_config(out: &Path) -> Result<RunConfig, String> {
    let mut config = RunConfig::load(&fixture_dir().join("config.toml")).map_err(err)?;
    config.apply(&Overrides {
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    });
    Ok(config)
}

// ---- 1: end-to-end replay -------------------------------------------------

fn replay_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let started = Instant::now();
    let config = replay_config(tmp.path())?;
    let summary = cmd_run(&config).map_err(err)?;
    let scored = cmd_score(&summary.predictions_path, &config.dataset, &Backends::rouge_only(), None)
        .map_err(err)?;
    let elapsed = started.elapsed();

    let expected: ScoreReport =
        serde_json::from_str(&fs::read_to_string(fixture_dir().join("expected_report.json")).map_err(err)?)
            .map_err(err)?;
    ensure(summary.notes_total == 40, format!("{} notes", summary.notes_total))?;
    ensure(summary.failed_notes.is_empty(), format!("failed notes {:?}", summary.failed_notes))?;
    let want: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(fixture_dir().join("expected_predictions.json")).map_err(err)?)
            .map_err(err)?;
    let got = errcorr::consensus::read_predictions(&summary.predictions_path).map_err(err)?;
    for (g, w) in got.iter().zip(&want) {
        ensure(
            g.text_id == w["text_id"].as_str().unwrap_or_default()
                && g.error_sentence_id() == w["error_sentence_id"].as_i64().unwrap_or(-2)
                && g.corrected_sentence() == w["corrected_sentence"].as_str(),
            format!("prediction {g:?} != expected {w}"),
        )?;
    }
    ensure(got.len() == want.len(), "prediction count differs")?;
    ensure(
        scored.report == expected,
        format!("report {:?} != expected {:?}", scored.report, expected),
    )?;
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!(
        "task1 {} task2 {} task3 {} in {:.0?}",
        expected.task1_accuracy, expected.task2_accuracy, expected.task3_aggregate, elapsed
    ))
}

// ---- 2: ROUGE-1 F1 against a brute-force counter --------------------------

fn oracle_tokens(text: &str) -> Vec<String> {
    const EXTRA: &str = "“”‘’–—…«»";
    let strip = |c: char| c.is_ascii_punctuation() || EXTRA.contains(c);
    let mut tokens = Vec::new();
    for word in text.split(char::is_whitespace) {
        let chars: Vec<char> = word.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && strip(chars[lo]) {
            lo += 1;
        }
        while hi > lo && strip(chars[hi - 1]) {
            hi -= 1;
        }
        if lo < hi {
            tokens.push(chars[lo..hi].iter().collect::<String>().to_lowercase());
        }
    }
    tokens
}

fn oracle_rouge(candidate: &str, reference: &str) -> f64 {
    let c = oracle_tokens(candidate);
    let r = oracle_tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let count = |v: &[String]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for t in v {
            *m.entry(t.clone()).or_default() += 1;
        }
        m
    };
    let (cc, rc) = (count(&c), count(&r));
    let overlap: usize = cc.iter().map(|(t, n)| (*n).min(rc.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rec = overlap as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    const WORDS: &[&str] = &[
        "the", "The", "patient", "Patient,", "drain", "catheter.", "(stent)", "120/80", "mg", "5", "was",
        "placed", "“placed”", "—", "...", "re-evaluated", "BP:", "x-ray", "sepsis;", "SEPSIS", "and", "of",
    ];
    let n = rng.random_range(0..14);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(if rng.random_bool(0.2) { "  " } else { " " })
}

fn rouge_oracle() -> Outcome {
    let example = rouge1_f("a b c d e", "a b c d f");
    ensure((example - 0.8).abs() < 1e-12, format!("4-of-5 example gave {example}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (c, r) = (random_sentence(&mut rng), random_sentence(&mut rng));
        let (got, want) = (rouge1_f(&c, &r), oracle_rouge(&c, &r));
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() < 1e-12,
            format!("pair {i}: {c:?} vs {r:?}: {got} != {want}"),
        )?;
    }
    Ok(format!("100 pairs, max deviation {worst:e}; example F1 {example}"))
}

// ---- 3: exhaustive voting -------------------------------------------------

fn vote(text_id: &str, key: i64, idx: usize) -> Prediction {
    let p = if key < 0 {
        Prediction::no_error()
    } else {
        Prediction::error(key as u32, Some(ErrorCategory::Medications), Some("r"), format!("fix {key} {idx}"))
    };
    p.with_provenance(Provenance {
        text_id: text_id.into(),
        provider_name: "m".into(),
        sample_index: idx as u32,
    })
}

/// Decided flag and winning key by explicit counting.
fn oracle_vote(keys: &[i64], m: usize) -> (bool, i64, usize) {
    let mut best_key = i64::MAX;
    let mut best_count = 0;
    for candidate in [-1i64, 0, 1, 2] {
        let n = keys.iter().filter(|k| **k == candidate).count();
        if n > best_count {
            best_count = n;
            best_key = candidate;
        }
    }
    if best_count >= m {
        (true, best_key, best_count)
    } else {
        (false, -1, 0)
    }
}

fn voting_bruteforce() -> Outcome {
    let started = Instant::now();
    let domain = [-1i64, 0, 1, 2];
    let mut multisets = 0;
    let mut checks = 0;
    for a in 0..4 {
        for b in a..4 {
            for c in b..4 {
                for d in c..4 {
                    multisets += 1;
                    let keys = [domain[a], domain[b], domain[c], domain[d]];
                    // every distinct ordering of the multiset must agree
                    let mut orders = Vec::new();
                    for p in permutations(4) {
                        let o: Vec<i64> = p.iter().map(|&i| keys[i]).collect();
                        if !orders.contains(&o) {
                            orders.push(o);
                        }
                    }
                    for m in 1..=4 {
                        let (decided, key, support) = oracle_vote(&keys, m);
                        for order in &orders {
                            let votes = order.iter().enumerate().map(|(i, &k)| vote("n", k, i)).collect();
                            let bundle = VoteBundle::new("n", votes, m).map_err(err)?;
                            let got = self_consistency(&bundle);
                            ensure(
                                got.decided == decided
                                    && got.error_sentence_id() == key
                                    && got.supporting_votes.len() == support,
                                format!(
                                    "votes {order:?} m={m}: got ({}, {}, {}) want ({decided}, {key}, {support})",
                                    got.decided,
                                    got.error_sentence_id(),
                                    got.supporting_votes.len()
                                ),
                            )?;
                            checks += 1;
                        }
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(multisets == 35, format!("{multisets} multisets"))?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("35 multisets x 4 thresholds, {checks} orderings, {elapsed:.0?}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

// ---- 4: ensemble fallback -------------------------------------------------

fn ensemble_note() -> AnnotatedNote {
    AnnotatedNote::from_texts(
        "n",
        ["Sentence zero here.", "He has a surgical drain.", "Start metoprolol daily.", "Follow up soon."],
        None,
    )
    .expect("valid note")
}

fn random_key(rng: &mut ChaCha8Rng) -> i64 {
    rng.random_range(-1..4)
}

fn ensemble_fallback() -> Outcome {
    let note = ensemble_note();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fallback_cases = 0;
    let mut violations = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=5);
        let m = rng.random_range(1..=k);
        let votes = (0..k).map(|i| vote("n", random_key(&mut rng), i)).collect();
        let consensus = self_consistency(&VoteBundle::new("n", votes, m).map_err(err)?);
        let partner = vote("n", random_key(&mut rng), 9);
        let result = ensemble(&consensus, &partner, &note).map_err(err)?;
        if !consensus.decided || consensus.error_sentence != partner.sentence_id() {
            fallback_cases += 1;
            if result.error_flag() != 0 || result.error_sentence_id() != -1 || result.corrected_sentence().is_some() {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, format!("{violations} violations in {fallback_cases} fallback cases"))?;
    ensure(fallback_cases > 100, format!("only {fallback_cases} fallback cases exercised"))?;
    Ok(format!("1000 pairs, {fallback_cases} fallback cases, 0 violations"))
}

// ---- 5: normalization fuzz ------------------------------------------------

fn fuzz_note() -> AnnotatedNote {
    AnnotatedNote::from_texts(
        "fz",
        ["A 45 year old woman presents.", "He has a surgical drain.", "Plan to follow up."],
        None,
    )
    .expect("valid note")
}

fn random_raw(rng: &mut ChaCha8Rng) -> String {
    const IDS: &[&str] = &["-1", "0", "1", "2", "3", "7", "-3", "\"1\"", "\"None\"", "\"-1\"", "null", "1.0", "\"x\"", "[1]"];
    const CATS: &[&str] = &[
        "\"Medications\"",
        "\"Medical Devices\"",
        "\"Others including clarity/improper usage of terminology\"",
        "\"others\"",
        "\"OTHERS: clarity\"",
        "\"Diet\"",
        "\"\"",
        "3",
    ];
    const CORR: &[&str] = &[
        "\"He has a surgical catheter.\"",
        "\"He has a surgical drain.\"",
        "\"  He has a  surgical   drain. \"",
        "\"\"",
        "\"   \"",
        "\"A 45 year old man presents.\"",
        "\"Plan {to} follow up.\"",
        "42",
    ];
    const KEYS: &[&str] = &["Error Sentence ID", "error sentence id", " ERROR SENTENCE ID ", "Sentence"];
    const PROSE: &[&str] = &["", "Sure! ", "```json\n", "Output:\n", "Here {is} my answer: ", "}{ "];
    const JUNK: &[&str] = &["", " Hope this helps.", "\n```", " {", " }", " {\"a\": 1}"];
    match rng.random_range(0..10) {
        0 => {
            let alphabet: Vec<char> = "{}\":,- abcNOE1234\n\\".chars().collect();
            (0..rng.random_range(0..40))
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect()
        }
        1 => ["NO ERROR", "No errors found.", "no error!", "nothing"][rng.random_range(0..4)].to_owned(),
        _ => {
            let mut fields = vec![format!("\"{}\": {}", pick(rng, KEYS), pick(rng, IDS))];
            if rng.random_bool(0.8) {
                fields.push(format!("\"Error Category\": {}", pick(rng, CATS)));
            }
            if rng.random_bool(0.5) {
                fields.push("\"Reason\": \"wrong device\"".to_owned());
            }
            if rng.random_bool(0.85) {
                fields.push(format!("\"Corrected Sentence\": {}", pick(rng, CORR)));
            }
            let body = format!("{{{}}}", fields.join(", "));
            let body = if rng.random_bool(0.05) { body[..body.len() - 1].to_owned() } else { body };
            format!("{}{}{}", pick(rng, PROSE), body, pick(rng, JUNK))
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn check_invariants(p: &Prediction, note: &AnnotatedNote) -> Result<(), String> {
    match &p.finding {
        Finding::NoError => ensure(
            p.error_flag() == 0 && p.error_sentence_id() == -1 && p.corrected_sentence().is_none(),
            "inconsistent no-error",
        ),
        Finding::Error(e) => {
            let original = note.sentence(e.sentence_id).ok_or("id out of range")?;
            ensure(p.error_flag() == 1, "flag")?;
            ensure(!e.corrected_sentence.trim().is_empty(), "empty correction")?;
            ensure(e.corrected_sentence == e.corrected_sentence.trim(), "untrimmed correction")?;
            ensure(squash(&e.corrected_sentence) != squash(original), "correction equals original")?;
            ensure(!e.category.is_some_and(|c| c == ErrorCategory::Others), "Others survived")
        }
    }
}

fn normalization_fuzz() -> Outcome {
    let note = fuzz_note();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut parsed, mut errors, mut others) = (0, 0, 0);
    for i in 0..10_000 {
        let raw = random_raw(&mut rng);
        let Ok(pred) = parse_output(&raw) else { continue };
        parsed += 1;
        let once = normalize(&pred, &note);
        check_invariants(&once, &note).map_err(|e| format!("case {i} {raw:?}: {e}"))?;
        ensure(normalize(&once, &note) == once, format!("case {i} {raw:?}: not idempotent"))?;
        if pred.category() == Some(ErrorCategory::Others) {
            others += 1;
            ensure(once.error_flag() == 0, format!("case {i} {raw:?}: Others kept"))?;
        }
        errors += usize::from(once.error_flag() == 1);
    }
    ensure(parsed > 3000 && errors > 300 && others > 300, format!("weak coverage: {parsed} parsed, {errors} errors, {others} others"))?;
    Ok(format!("10000 strings, {parsed} parsed, {errors} errors kept, {others} Others discarded"))
}

// ---- 6: ledger determinism ------------------------------------------------

fn run_then_aggregate() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let config = replay_config(tmp.path())?;
    let summary = cmd_run(&config).map_err(err)?;
    let again = tmp.path().join("again.csv");
    cmd_aggregate(&summary.ledger_path, &config, &again).map_err(err)?;
    let a = fs::read(&summary.predictions_path).map_err(err)?;
    let b = fs::read(&again).map_err(err)?;
    ensure(a == b, "re-aggregated predictions differ from the run's")?;
    Ok(format!("{} bytes identical", a.len()))
}

fn threshold_sweep() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let sentences = ["Patient admitted overnight.", "He has a surgical drain.", "Continue heparin drip.", "Discharge tomorrow."];
    let dissent: [usize; 3] = [2, 5, 7];
    let mut notes = Vec::new();
    let mut records = Vec::new();
    for n in 0..10usize {
        let id = format!("s{n:02}");
        notes.push(AnnotatedNote::from_texts(&id, sentences, Some(GroundTruth::no_error())).map_err(err)?);
        let agreed = match n % 3 {
            0 => r#"{"Error Sentence ID": -1}"#.to_owned(),
            _ => format!(
                r#"{{"Error Sentence ID": {}, "Error Category": "Medical Devices", "Corrected Sentence": "Fixed sentence {n}."}}"#,
                n % 4
            ),
        };
        let needs_error = dissent.contains(&n) && agreed.contains("-1");
        let agreed = if needs_error {
            r#"{"Error Sentence ID": 1, "Error Category": "Medical Devices", "Corrected Sentence": "He has a surgical catheter."}"#.to_owned()
        } else {
            agreed
        };
        for i in 0..4u32 {
            let raw = if i == 3 && dissent.contains(&n) {
                r#"{"Error Sentence ID": -1}"#.to_owned()
            } else {
                agreed.clone()
            };
            records.push(LedgerRecord {
                text_id: id.clone(),
                provider_name: "solo".into(),
                sample_index: i,
                prompt_hash: format!("h{n}"),
                raw_text: raw,
                latency_ms: 1,
                timestamp: "2024-01-01T00:00:00Z".into(),
                error: None,
            });
        }
    }
    let dataset = tmp.path().join("notes.jsonl");
    errcorr::corpus::write_dataset(&notes, &dataset, errcorr::corpus::DatasetFormat::JsonLines).map_err(err)?;
    let ledger = tmp.path().join("ledger.jsonl");
    LedgerWriter::open(&ledger).map_err(err)?.append(&records).map_err(err)?;

    let mut config = RunConfig {
        dataset,
        exemplars: None,
        template: None,
        providers: vec![ProviderConfig::mock("solo", tmp.path().join("unused.json"))],
        consistency_provider: None,
        samples_per_note: 4,
        majority_threshold: 3,
        ensemble_partner: None,
        parallelism: 2,
        output_dir: tmp.path().to_path_buf(),
        run_seed: 0,
        scorer_url: None,
    };
    let m3 = tmp.path().join("m3.csv");
    cmd_aggregate(&ledger, &config, &m3).map_err(err)?;
    config.majority_threshold = 4;
    let m4 = tmp.path().join("m4.csv");
    cmd_aggregate(&ledger, &config, &m4).map_err(err)?;

    let a = fs::read_to_string(&m3).map_err(err)?;
    let b = fs::read_to_string(&m4).map_err(err)?;
    let changed: Vec<String> = a
        .lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.split(',').next().unwrap_or_default().to_owned())
        .collect();
    let want: Vec<String> = dissent.iter().map(|n| format!("s{n:02}")).collect();
    ensure(a.lines().count() == b.lines().count(), "row counts differ")?;
    ensure(changed == want, format!("changed rows {changed:?}, expected {want:?}"))?;
    Ok(format!("m=3 vs m=4 differ exactly on {changed:?}"))
}

fn ledger_determinism() -> Outcome {
    let a = run_then_aggregate()?;
    let b = threshold_sweep()?;
    Ok(format!("{a}; {b}"))
}

// ---- 7: dataset statistics ------------------------------------------------

fn dataset_statistics() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let splits = [
        ("train", 2189usize, 1219usize, 55.69f64),
        ("valid", 574, 319, 55.57),
        ("test_a", 160, 80, 50.00),
        ("test_b", 925, 475, 51.35),
    ];
    let mut lines = Vec::new();
    for (name, count, errors, percent) in splits {
        let path = tmp.path().join(format!("{name}.jsonl"));
        let mut body = String::new();
        for i in 0..count {
            let row = if i < errors {
                serde_json::json!({"text_id": format!("{name}-{i}"), "sentences": ["One.", "Two."],
                    "error_flag": 1, "error_sentence_id": 1, "corrected_sentence": "Three."})
            } else {
                serde_json::json!({"text_id": format!("{name}-{i}"), "sentences": ["One.", "Two."],
                    "error_flag": 0, "error_sentence_id": -1})
            };
            body.push_str(&row.to_string());
            body.push('\n');
        }
        fs::write(&path, body).map_err(err)?;
        let stats = dataset_stats(&load_dataset_auto(&path).map_err(err)?).map_err(err)?;
        ensure(
            stats.count == count && stats.error_count == errors && stats.error_percent == percent,
            format!("{name}: {stats} (want {percent:.2}%)"),
        )?;
        lines.push(format!("{name} {:.2}%", stats.error_percent));
    }
    Ok(lines.join(", "))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("replay pipeline reproduces the precomputed report", replay_pipeline),
        ("ROUGE-1 F1 matches brute-force unigram counting", rouge_oracle),
        ("self-consistency voting matches exhaustive counting", voting_bruteforce),
        ("ensemble falls back to no-error on disagreement", ensemble_fallback),
        ("parse + normalize fuzz invariants", normalization_fuzz),
        ("ledger aggregation is deterministic", ledger_determinism),
        ("dataset error shares", dataset_statistics),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {}  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
