use lstn::corpus::*;
use lstn::synth::{generate_corpus, OracleMachine};
use lstn::LstnError;
use proptest::prelude::*;

#[test]
fn generated_corpus_round_trips_through_the_file_format() {
    let syn = generate_corpus(&OracleMachine::weather(), 60, 5, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.jsonl");
    write_corpus(&syn.corpus, &path).unwrap();
    let back = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
    assert_eq!(back, syn.corpus);

    let all: Vec<Dialog> = back.iter().map(|(_, d)| d.clone()).collect();
    let v1 = build_vocab(&all, 1).unwrap();
    let v2 = build_vocab(&all, 1).unwrap();
    assert_eq!(v1, v2);
    for d in &all {
        for t in &d.turns {
            assert_eq!(v1.decode(&v1.encode(&t.user)).unwrap(), t.user);
            assert_eq!(v1.decode_response(&v1.encode_response(&t.agent)).unwrap(), t.agent);
        }
    }
}

#[test]
fn missing_file_names_the_path() {
    let err = load_corpus(std::path::Path::new("/no/such/corpus.jsonl"), CorpusFormat::Jsonl).unwrap_err();
    assert!(matches!(err, LstnError::Io { .. }));
    assert!(err.to_string().contains("/no/such/corpus.jsonl"));
}

#[test]
fn unknown_words_decode_to_unk() {
    let d = Dialog::new("d", vec![Turn::from_text("a b", "c").unwrap()]).unwrap();
    let v = build_vocab(&[d], 1).unwrap();
    let ids = v.encode(&tokenize("a zzz"));
    assert_eq!(ids[1], UNK);
    assert_eq!(v.decode(&ids).unwrap()[0], "a");
    assert!(v.encode::<&str>(&[]).is_empty());
}

fn lexicon() -> EntityLexicon {
    EntityLexicon::new(&[
        ("cuisine", vec!["japanese".into(), "korean".into(), "thai".into()]),
        ("city", vec!["paris".into(), "new york".into()]),
    ])
    .unwrap()
}

proptest! {
    #[test]
    fn anonymization_is_idempotent(words in prop::collection::vec(prop::sample::select(vec!["japanese", "korean", "thai", "paris", "new", "york", "food", "in", "cuisine_0", "the"]), 1..12)) {
        let text = words.join(" ");
        let d = Dialog::new("d", vec![Turn::from_text(&text, &text).unwrap()]).unwrap();
        let once = anonymize(&d, &lexicon());
        prop_assert_eq!(anonymize(&once, &lexicon()), once);
    }
}
