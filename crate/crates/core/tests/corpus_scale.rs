use std::collections::HashSet;

use msdp_core::corpus::{convert_wow, load_corpus, topic_overlap};
use msdp_core::{Corpus, CorpusFormat, DialogueSample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[test]
fn wow_fixture_with_70k_records_round_trips() {
    // 10,000 dialogues, apprentice first, 14 turns: 7 wizard replies each.
    let dialogues: Vec<_> = (0..10_000)
        .map(|d| {
            let turns: Vec<_> = (0..14)
                .map(|t| {
                    if t % 2 == 0 {
                        json!({"speaker": "1_Apprentice", "text": format!("question {d} {t}")})
                    } else {
                        json!({
                            "speaker": "0_Wizard",
                            "text": format!("answer {d} {t}"),
                            "checked_sentence": {format!("chosen_{d}"): format!("fact {d} {t}")}
                        })
                    }
                })
                .collect();
            json!({"chosen_topic": format!("topic {}", d % 997), "dialog": turns})
        })
        .collect();
    let generated = dialogues.len() * 7;
    let samples = convert_wow(&serde_json::to_string(&dialogues).unwrap()).unwrap();
    assert_eq!(samples.len(), generated);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wow_train.jsonl");
    Corpus::new("wow_train", samples).unwrap().save(&path).unwrap();
    let loaded = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
    assert_eq!(loaded.len(), 70_000);
    assert_eq!(loaded.name(), "wow_train");
    assert_eq!(loaded.samples()[8].history.len(), 3);
}

fn topic_corpus(name: &str, topics: &[String]) -> Corpus {
    let samples = topics
        .iter()
        .enumerate()
        .map(|(i, t)| DialogueSample {
            id: format!("{name}{i}"),
            topic: t.clone(),
            history: vec!["hi".into()],
            knowledge: "k".into(),
            response: "r".into(),
        })
        .collect();
    Corpus::new(name, samples).unwrap()
}

#[test]
fn topic_overlap_matches_set_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let mut db_topics: Vec<String> = (0..5_000).map(|i| format!("Database Topic {i}")).collect();
    db_topics.shuffle(&mut rng);
    let mut test_topics: Vec<String> = (0..943).map(|i| format!("unseen topic {i}")).collect();
    // 57 present, spelled with different case and punctuation
    test_topics.extend(db_topics[..57].iter().map(|t| format!("{}!", t.to_uppercase())));
    test_topics.shuffle(&mut rng);

    let db = topic_corpus("db", &db_topics);
    let test = topic_corpus("test", &test_topics);
    let got = topic_overlap(&test, &db).unwrap();

    let key = |t: &str| msdp_core::metrics::normalize(t).tokens().join(" ");
    let db_keys: HashSet<String> = db_topics.iter().map(|t| key(t)).collect();
    let test_keys: HashSet<String> = test_topics.iter().map(|t| key(t)).collect();
    let oracle = test_keys.intersection(&db_keys).count() as f64 / test_keys.len() as f64;
    assert_eq!(got, oracle);
    assert_eq!(got, 0.057);
}
