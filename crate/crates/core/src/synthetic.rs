//! Seeded synthetic dialogue records for tests, demos and benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialogueSample;

const TOPICS: &[&str] = &[
    "Pizza", "Kyoto", "Jazz", "Hiking", "Chess", "Volcanoes", "Tea", "Bicycles", "Sushi", "Opera", "Coral reefs",
    "Basketball", "Origami", "Penguins", "Online shopping", "Lighthouses",
];

const WORDS: &[&str] = &[
    "history", "city", "music", "famous", "people", "water", "mountain", "style", "team", "game", "island", "culture",
    "river", "small", "large", "ancient", "modern", "popular", "made", "known", "built", "played", "grown", "found",
    "first", "many", "often", "usually", "region", "century", "world", "local", "green", "black", "white", "red",
    "festival", "market", "school", "garden",
];

const FACTS_PER_TOPIC: usize = 4;
const FACT_LEN: usize = 9;

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect()
}

/// Fact `j` of topic `t`. Fixed across seeds, so separately generated
/// databases and test sets share knowledge.
fn fact(t: usize, j: usize) -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + (t * FACTS_PER_TOPIC + j) as u64);
    words(&mut rng, FACT_LEN)
}

/// `n` records with ids `<prefix>-<i>`. Each record is grounded on one of a
/// few fixed facts per topic, and earlier user turns mention some of its
/// words. Responses reuse a random share of the fact, so overlap ratios
/// spread over roughly [0.2, 1].
pub fn samples(prefix: &str, n: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = rng.random_range(0..TOPICS.len());
            let topic = TOPICS[t];
            let knowledge_words = fact(t, rng.random_range(0..FACTS_PER_TOPIC));
            let turns = rng.random_range(1..=4);
            let history = (0..turns)
                .map(|k| {
                    let len = rng.random_range(3..7);
                    let mut w = words(&mut rng, len);
                    if k + 1 < turns || turns == 1 {
                        for _ in 0..2 {
                            w.push(knowledge_words[rng.random_range(0..FACT_LEN)]);
                        }
                    }
                    w.insert(rng.random_range(0..=w.len()), topic);
                    w.join(" ")
                })
                .collect();
            let rlen = rng.random_range(5..12);
            let copied = rng.random_range(1..=rlen);
            let mut response: Vec<&str> = knowledge_words.iter().copied().cycle().take(copied).collect();
            response.extend((copied..rlen).map(|j| if j % 2 == 0 { "indeed" } else { "really" }));
            DialogueSample {
                id: format!("{prefix}-{i}"),
                topic: topic.to_owned(),
                history,
                knowledge: format!("{} {}.", topic, knowledge_words.join(" ")),
                response: format!("{}.", response.join(" ")),
            }
        })
        .collect()
}
