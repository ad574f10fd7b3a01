use std::time::Duration;

use proptest::prelude::*;

use errcorr::consensus::{ensemble, select_correction, self_consistency, VoteBundle};
use errcorr::corpus::{load_dataset, write_dataset, AnnotatedNote, DatasetFormat, GroundTruth};
use errcorr::ledger::{read_ledger, LedgerRecord, LedgerWriter};
use errcorr::outparse::{normalize, parse_output, Prediction, Provenance};
use errcorr::providers::limit::{Clock, RateLimiter, VirtualClock};
use errcorr::scoring::{rouge1_f, tokenize};

fn sentence_text() -> impl Strategy<Value = String> {
    // commas, quotes, tabs and newlines all need quoting in delimited files
    "[A-Za-z0-9 ,.\"'\t/\n-]{0,30}[A-Za-z0-9.]"
}

fn note_strategy(idx: usize) -> impl Strategy<Value = AnnotatedNote> {
    (prop::collection::vec(sentence_text(), 1..6), any::<bool>(), any::<prop::sample::Index>(), sentence_text())
        .prop_map(move |(texts, has_error, pick, fix)| {
            let truth = if has_error {
                GroundTruth::with_error(pick.index(texts.len()) as u32, fix)
            } else {
                GroundTruth::no_error()
            };
            let text = texts.join(" ");
            let mut note = AnnotatedNote::from_texts(format!("n{idx}"), texts, Some(truth)).unwrap();
            note.text = text;
            note
        })
}

fn dataset_strategy() -> impl Strategy<Value = Vec<AnnotatedNote>> {
    (1usize..6).prop_flat_map(|n| (0..n).map(note_strategy).collect::<Vec<_>>())
}

fn key_vote(key: i64, idx: usize) -> Prediction {
    let p = if key < 0 {
        Prediction::no_error()
    } else {
        Prediction::error(key as u32, None, None, format!("Fixed sentence {key} variant {}", idx % 3))
    };
    p.with_provenance(Provenance {
        text_id: "v".into(),
        provider_name: "p".into(),
        sample_index: idx as u32,
    })
}

fn votes_strategy() -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-1i64..4, 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips(notes in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        for (format, name) in [(DatasetFormat::Csv, "d.csv"), (DatasetFormat::Tsv, "d.tsv"), (DatasetFormat::JsonLines, "d.jsonl")] {
            let path = dir.path().join(name);
            write_dataset(&notes, &path, format).unwrap();
            prop_assert_eq!(&load_dataset(&path, format).unwrap(), &notes);
        }
    }

    #[test]
    fn rouge_is_bounded_and_symmetric(a in "[a-c ,.!]{0,20}", b in "[a-c ,.!]{0,20}") {
        let ab = rouge1_f(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, rouge1_f(&b, &a));
        prop_assert_eq!(rouge1_f(&a, &a), 1.0);
    }

    #[test]
    fn tokens_carry_no_edge_punctuation(text in "\\PC{0,40}") {
        for t in tokenize(&text).tokens {
            let first = t.chars().next().unwrap();
            let last = t.chars().last().unwrap();
            prop_assert!(!first.is_ascii_punctuation() && !last.is_ascii_punctuation(), "{:?}", t);
            prop_assert!(!t.chars().any(char::is_whitespace));
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }

    #[test]
    fn voting_ignores_order(keys in votes_strategy(), seed in any::<u64>(), m_pick in any::<prop::sample::Index>()) {
        let m = m_pick.index(keys.len()) + 1;
        let mut shuffled: Vec<(usize, i64)> = keys.iter().copied().enumerate().collect();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = self_consistency(&VoteBundle::new("v", keys.iter().enumerate().map(|(i, &k)| key_vote(k, i)).collect(), m).unwrap());
        let b = self_consistency(&VoteBundle::new("v", shuffled.iter().map(|&(i, k)| key_vote(k, i)).collect(), m).unwrap());
        prop_assert_eq!(a.decided, b.decided);
        prop_assert_eq!(a.error_sentence, b.error_sentence);
        prop_assert_eq!(a.supporting_votes.len(), b.supporting_votes.len());
    }

    #[test]
    fn raising_the_threshold_never_decides_more(keys in votes_strategy()) {
        let mut previous: Option<(bool, Option<u32>)> = None;
        for m in 1..=keys.len() {
            let bundle = VoteBundle::new("v", keys.iter().enumerate().map(|(i, &k)| key_vote(k, i)).collect(), m).unwrap();
            let r = self_consistency(&bundle);
            if let Some((was_decided, was_key)) = previous {
                prop_assert!(was_decided || !r.decided);
                if r.decided {
                    prop_assert_eq!(r.error_sentence, was_key);
                }
            }
            previous = Some((r.decided, r.error_sentence));
        }
    }

    #[test]
    fn ensemble_output_is_agreed_or_empty(keys in votes_strategy(), partner in -1i64..4) {
        let note = AnnotatedNote::from_texts("v", ["Zero one.", "He has a drain.", "Two three.", "Four five."], None).unwrap();
        let consensus = self_consistency(&VoteBundle::new("v", keys.iter().enumerate().map(|(i, &k)| key_vote(k, i)).collect(), 1).unwrap());
        let partner = key_vote(partner, 99);
        let result = ensemble(&consensus, &partner, &note).unwrap();
        if let Some(correction) = result.corrected_sentence() {
            prop_assert_eq!(Some(result.error_sentence_id()), consensus.error_sentence.map(i64::from));
            prop_assert_eq!(partner.sentence_id(), consensus.error_sentence);
            let in_votes = consensus.candidate_corrections.iter().any(|c| c == correction);
            prop_assert!(in_votes || partner.corrected_sentence() == Some(correction));
        } else {
            prop_assert_eq!(result.error_sentence_id(), -1);
        }
    }

    #[test]
    fn selected_correction_is_a_candidate(cands in prop::collection::vec("[a-d ]{1,12}", 1..6), original in "[a-d ]{1,12}") {
        let chosen = select_correction(&cands, &original).unwrap();
        prop_assert!(cands.iter().any(|c| c == chosen));
        let best = cands.iter().map(|c| rouge1_f(c, &original)).fold(f64::MIN, f64::max);
        prop_assert_eq!(rouge1_f(chosen, &original), best);
    }

    #[test]
    fn limiter_never_exceeds_rate(rpm in 1u32..8, gaps in prop::collection::vec(0u64..30_000, 1..40)) {
        let clock = VirtualClock::default();
        let limiter = RateLimiter::new(rpm);
        let mut admitted = Vec::new();
        for gap in gaps {
            clock.advance(Duration::from_millis(gap));
            admitted.push(limiter.acquire(&clock));
        }
        prop_assert!(admitted.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(admitted.last() == Some(&clock.now()));
        for (i, start) in admitted.iter().enumerate() {
            let in_window = admitted[i..].iter().take_while(|t| **t < *start + Duration::from_secs(60)).count();
            prop_assert!(in_window <= rpm as usize, "{} requests within a minute of {:?}", in_window, start);
        }
    }

    #[test]
    fn prose_around_json_is_ignored(prefix in "[A-Za-z .!:\n]{0,30}", suffix in "[A-Za-z .!\n]{0,30}", id in 0u32..5) {
        let body = format!(r#"{{"Error Sentence ID": {id}, "Error Category": "Medications", "Corrected Sentence": "Take aspirin."}}"#);
        let bare = parse_output(&body).unwrap();
        let wrapped = parse_output(&format!("{prefix}{body}{suffix}")).unwrap();
        prop_assert_eq!(bare, wrapped);
    }

    #[test]
    fn normalize_is_idempotent(id in 0u32..6, fix in "[a-z ]{0,20}") {
        let note = AnnotatedNote::from_texts("v", ["one two", "three four", "five six"], None).unwrap();
        let once = normalize(&Prediction::error(id, None, None, fix), &note);
        prop_assert_eq!(normalize(&once, &note), once);
    }

    #[test]
    fn ledger_round_trips(texts in prop::collection::vec("\\PC{0,40}", 1..10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let records: Vec<LedgerRecord> = texts.iter().enumerate().map(|(i, t)| LedgerRecord {
            text_id: format!("n{i}"),
            provider_name: "p".into(),
            sample_index: i as u32,
            prompt_hash: "h".into(),
            raw_text: t.clone(),
            latency_ms: i as u64,
            timestamp: "2024-01-01T00:00:00Z".into(),
            error: (i % 3 == 2).then(|| "boom".to_owned()),
        }).collect();
        let writer = LedgerWriter::open(&path).unwrap();
        let (a, b) = records.split_at(records.len() / 2);
        writer.append(a).unwrap();
        writer.append(b).unwrap();
        prop_assert_eq!(read_ledger(&path).unwrap(), records);
    }
}
