//! Dialogue records, corpora, and corpus-level overlap analysis.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::normalize;

/// One database or test record: topic, history (oldest first), knowledge and
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub id: String,
    pub topic: String,
    pub history: Vec<String>,
    pub knowledge: String,
    pub response: String,
}

impl DialogueSample {
    pub fn last_turn(&self) -> &str {
        self.history.last().map(String::as_str).unwrap_or("")
    }

    /// Usable inside a prompt: has both knowledge and a response.
    pub fn is_exemplar(&self) -> bool {
        !self.knowledge.trim().is_empty() && !self.response.trim().is_empty()
    }

    pub fn query(&self) -> QueryContext {
        QueryContext {
            topic: self.topic.clone(),
            history: self.history.clone(),
        }
    }

    fn check(&self) -> std::result::Result<(), (&'static str, &'static str)> {
        if self.id.is_empty() {
            return Err(("id", "must be non-empty"));
        }
        if self.topic.trim().is_empty() {
            return Err(("topic", "must be non-empty"));
        }
        if self.history.is_empty() {
            return Err(("history", "must contain at least one turn"));
        }
        Ok(())
    }
}

/// The live dialogue input. The last history element is the turn to answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryContext {
    pub topic: String,
    pub history: Vec<String>,
}

impl QueryContext {
    pub fn new(topic: impl Into<String>, history: Vec<String>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::Validation("query history must be non-empty".into()));
        }
        Ok(QueryContext {
            topic: topic.into(),
            history,
        })
    }

    pub fn last_turn(&self) -> &str {
        self.history.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// Canonical JSON Lines.
    Jsonl,
    /// Wizard of Wikipedia native JSON.
    Wow,
    /// Wizard of Internet native JSON Lines.
    Woi,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "wow" => Ok(CorpusFormat::Wow),
            "woi" => Ok(CorpusFormat::Woi),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// An ordered, immutable collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    name: String,
    samples: Vec<DialogueSample>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, samples: Vec<DialogueSample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::EmptyCorpus(name));
        }
        let mut by_id = HashMap::with_capacity(samples.len());
        for (pos, s) in samples.iter().enumerate() {
            if let Err((field, msg)) = s.check() {
                return Err(Error::Record {
                    path: name.clone().into(),
                    line: pos + 1,
                    message: format!("field {field:?} {msg}"),
                });
            }
            if by_id.insert(s.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId {
                    path: name.clone().into(),
                    line: pos + 1,
                    id: s.id.clone(),
                });
            }
        }
        Ok(Corpus { name, samples, by_id })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[DialogueSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DialogueSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Samples usable as prompt exemplars, in corpus order.
    pub fn exemplars(&self) -> impl Iterator<Item = &DialogueSample> {
        self.samples.iter().filter(|s| s.is_exemplar())
    }

    /// Canonical JSON Lines serialization (one record per line, trailing newline).
    /// The samples usable as exemplars, under the same name. Selection, the
    /// index and perplexity scoring all operate on this view.
    pub fn exemplar_view(&self) -> Result<Corpus> {
        let kept: Vec<DialogueSample> = self.exemplars().cloned().collect();
        if kept.len() == self.samples.len() {
            return Ok(self.clone());
        }
        Corpus::new(self.name.clone(), kept)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        crate::sha256_hex(self.to_jsonl())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

const REQUIRED_FIELDS: [&str; 5] = ["id", "topic", "history", "knowledge", "response"];

fn parse_jsonl_record(path: &Path, line_no: usize, line: &str) -> Result<DialogueSample> {
    let rec_err = |message: String| Error::Record {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| rec_err(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| rec_err("record is not a JSON object".into()))?;
    for field in REQUIRED_FIELDS {
        match obj.get(field) {
            None => return Err(rec_err(format!("missing field {field:?}"))),
            Some(v) if field == "history" => {
                let ok = v.as_array().is_some_and(|a| a.iter().all(Value::is_string));
                if !ok {
                    return Err(rec_err("field \"history\" must be an array of strings".into()));
                }
            }
            Some(v) if !v.is_string() => return Err(rec_err(format!("field {field:?} must be a string"))),
            _ => {}
        }
    }
    if let Some(extra) = obj.keys().find(|k| !REQUIRED_FIELDS.contains(&k.as_str())) {
        return Err(rec_err(format!("unknown field {extra:?}")));
    }
    let sample: DialogueSample = serde_json::from_value(value).map_err(|e| rec_err(e.to_string()))?;
    sample
        .check()
        .map_err(|(field, msg)| rec_err(format!("field {field:?} {msg}")))?;
    Ok(sample)
}

fn corpus_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Load and validate a corpus file.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
        CorpusFormat::Wow => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Corpus::new(corpus_name(path), convert_wow(&text)?)
        }
        CorpusFormat::Woi => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Corpus::new(corpus_name(path), convert_woi(&text)?)
        }
    }
}

fn load_jsonl(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_jsonl_record(path, i + 1, &line)?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: i + 1,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Corpus::new(corpus_name(path), samples)
}

/// Convert Wizard of Wikipedia dialogues. Every wizard turn that has at least
/// one preceding turn becomes a record; the chosen sentence is the knowledge
/// (empty when the wizard used no passage).
pub fn convert_wow(json: &str) -> Result<Vec<DialogueSample>> {
    let dialogues: Vec<Value> = serde_json::from_str(json).map_err(|e| Error::json("wow dialogues", e))?;
    let mut out = Vec::new();
    for (d_idx, dialogue) in dialogues.iter().enumerate() {
        let topic = dialogue.get("chosen_topic").and_then(Value::as_str).unwrap_or("").trim();
        let Some(turns) = dialogue.get("dialog").and_then(Value::as_array) else {
            continue;
        };
        let mut history: Vec<String> = Vec::new();
        for (t_idx, turn) in turns.iter().enumerate() {
            let text = turn.get("text").and_then(Value::as_str).unwrap_or("").trim().to_owned();
            let is_wizard = turn
                .get("speaker")
                .and_then(Value::as_str)
                .is_some_and(|s| s.ends_with("Wizard"));
            if is_wizard && !history.is_empty() && !topic.is_empty() {
                let knowledge = turn
                    .get("checked_sentence")
                    .and_then(Value::as_object)
                    .and_then(|m| m.values().next())
                    .and_then(Value::as_str)
                    .filter(|s| *s != "no_passages_used")
                    .unwrap_or("")
                    .trim()
                    .to_owned();
                out.push(DialogueSample {
                    id: format!("wow-{d_idx}-{t_idx}"),
                    topic: topic.to_owned(),
                    history: history.clone(),
                    knowledge,
                    response: text.clone(),
                });
            }
            history.push(text);
        }
    }
    Ok(out)
}

/// Convert Wizard of Internet dialogues (one JSON object per line, keyed by
/// dialogue id). The topic of a wizard reply is the most recent search query,
/// falling back to the apprentice persona; the knowledge is the selected
/// sentences joined by spaces.
pub fn convert_woi(jsonl: &str) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (line_no, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let outer: Value = serde_json::from_str(line).map_err(|e| Error::json(format!("woi line {}", line_no + 1), e))?;
        let Some(map) = outer.as_object() else { continue };
        for (dialog_id, dialog) in map {
            let persona = dialog
                .get("apprentice_persona")
                .and_then(Value::as_str)
                .and_then(|p| p.lines().next())
                .unwrap_or("")
                .trim()
                .to_owned();
            let Some(turns) = dialog.get("dialog_history").and_then(Value::as_array) else {
                continue;
            };
            let mut history: Vec<String> = Vec::new();
            let mut search = String::new();
            for (t_idx, turn) in turns.iter().enumerate() {
                let action = turn.get("action").and_then(Value::as_str).unwrap_or("");
                let text = turn.get("text").and_then(Value::as_str).unwrap_or("").trim().to_owned();
                match action {
                    "Wizard => SearchAgent" => search = text,
                    "Apprentice => Wizard" => history.push(text),
                    "Wizard => Apprentice" => {
                        let topic = if search.is_empty() { persona.clone() } else { search.clone() };
                        if !history.is_empty() && !topic.is_empty() {
                            out.push(DialogueSample {
                                id: format!("woi-{dialog_id}-{t_idx}"),
                                topic,
                                history: history.clone(),
                                knowledge: woi_selected_knowledge(turn),
                                response: text.clone(),
                            });
                        }
                        history.push(text);
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}

fn woi_selected_knowledge(turn: &Value) -> String {
    let Some(ctx) = turn.get("context") else {
        return String::new();
    };
    let contents = ctx.get("contents").and_then(Value::as_array);
    let selected = ctx.get("selected_contents").and_then(Value::as_array);
    let (Some(contents), Some(selected)) = (contents, selected) else {
        return String::new();
    };
    // selected_contents[0] is the "no knowledge" flag; doc i is at i + 1
    let mut parts = Vec::new();
    for (doc_idx, doc) in contents.iter().enumerate() {
        let Some(flags) = selected.get(doc_idx + 1).and_then(Value::as_array) else {
            continue;
        };
        let Some(sentences) = doc.get("content").and_then(Value::as_array) else {
            continue;
        };
        for (flag, sentence) in flags.iter().zip(sentences) {
            if flag.as_bool() == Some(true) {
                if let Some(s) = sentence.as_str() {
                    parts.push(s.trim().to_owned());
                }
            }
        }
    }
    parts.join(" ")
}

fn topic_key(topic: &str) -> String {
    normalize(topic).tokens().join(" ")
}

/// Fraction of distinct test topics that also occur among the database topics,
/// comparing normalized token sequences.
pub fn topic_overlap(test: &Corpus, database: &Corpus) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus(test.name().into()));
    }
    if database.is_empty() {
        return Err(Error::EmptyCorpus(database.name().into()));
    }
    let db: HashSet<String> = database.samples().iter().map(|s| topic_key(&s.topic)).collect();
    let test_topics: HashSet<String> = test.samples().iter().map(|s| topic_key(&s.topic)).collect();
    let present = test_topics.iter().filter(|t| db.contains(*t)).count();
    Ok(present as f64 / test_topics.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    pub n: usize,
    /// Share of distinct test strings with an n-gram found in the database
    /// knowledge. Strings shorter than `n` count as clean.
    pub fraction: f64,
    /// Distinct test strings considered.
    pub test_strings: usize,
    /// Distinct test strings with at least one shared n-gram.
    pub contaminated_strings: usize,
    /// Fraction of distinct test n-gram types present in the database.
    pub ngram_type_fraction: f64,
    pub test_ngrams: usize,
    pub shared_ngrams: usize,
    /// Set when no test string has `n` tokens, so nothing could be compared.
    pub too_short: bool,
}

fn ngram_set(tokens: &[String], n: usize) -> HashSet<Vec<String>> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(<[String]>::to_vec).collect()
}

/// n-gram contamination of test knowledge against database knowledge.
///
/// A distinct test string is contaminated when any of its n-grams (over
/// normalized tokens) appears in any database knowledge string. The headline
/// `fraction` is contaminated strings over distinct test strings, which is
/// non-increasing in `n`. The share of distinct n-gram types is reported
/// alongside.
pub fn ngram_contamination(test_knowledge: &[String], database: &Corpus, n: usize) -> Result<Contamination> {
    if n == 0 {
        return Err(Error::Validation("n-gram order must be >= 1".into()));
    }
    let db: HashSet<Vec<String>> = database
        .samples()
        .iter()
        .flat_map(|s| ngram_set(normalize(&s.knowledge).tokens(), n))
        .collect();

    let distinct: HashSet<&str> = test_knowledge.iter().map(String::as_str).collect();
    let mut test_grams: HashSet<Vec<String>> = HashSet::new();
    let mut contaminated = 0usize;
    let mut any_long_enough = false;
    for text in &distinct {
        let grams = ngram_set(normalize(text).tokens(), n);
        any_long_enough |= !grams.is_empty();
        if grams.iter().any(|g| db.contains(g)) {
            contaminated += 1;
        }
        test_grams.extend(grams);
    }
    let shared = test_grams.iter().filter(|g| db.contains(*g)).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    if !any_long_enough {
        tracing::warn!(n, "no test string is long enough for the requested n-gram order");
    }
    Ok(Contamination {
        n,
        fraction: if any_long_enough { ratio(contaminated, distinct.len()) } else { 0.0 },
        test_strings: distinct.len(),
        contaminated_strings: contaminated,
        ngram_type_fraction: ratio(shared, test_grams.len()),
        test_ngrams: test_grams.len(),
        shared_ngrams: shared,
        too_short: !any_long_enough,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, topic: &str, knowledge: &str) -> DialogueSample {
        DialogueSample {
            id: id.into(),
            topic: topic.into(),
            history: vec!["hello".into()],
            knowledge: knowledge.into(),
            response: "resp".into(),
        }
    }

    fn corpus(samples: Vec<DialogueSample>) -> Corpus {
        Corpus::new("t", samples).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = (0..3)
            .map(|i| format!(r#"{{"id":"s{i}","topic":"T","history":["h"],"knowledge":"k","response":"r"}}"#))
            .collect::<Vec<_>>()
            .join("\n");
        let c = load_corpus(&write(&dir, "c.jsonl", &body), CorpusFormat::Jsonl).unwrap();
        let ids: Vec<_> = c.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2"]);
        assert_eq!(c.name(), "c");
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\":\"a\",\"topic\":\"T\",\"history\":[\"h\"],\"knowledge\":\"k\",\"response\":\"r\"}\n{\"id\":\"b\",\"topic\":\"T\",\"history\":[\"h\"],\"response\":\"r\"}\n";
        let err = load_corpus(&write(&dir, "c.jsonl", body), CorpusFormat::Jsonl).unwrap_err();
        match err {
            Error::Record { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("knowledge"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_empty_and_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"id":"a","topic":"T","history":["h"],"knowledge":"k","response":"r"}"#;
        let dup = load_corpus(&write(&dir, "d.jsonl", &format!("{rec}\n{rec}\n")), CorpusFormat::Jsonl);
        assert!(matches!(dup, Err(Error::DuplicateId { line: 2, .. })));
        let empty = load_corpus(&write(&dir, "e.jsonl", "\n"), CorpusFormat::Jsonl);
        assert!(matches!(empty, Err(Error::EmptyCorpus(_))));
        let no_hist = r#"{"id":"a","topic":"T","history":[],"knowledge":"k","response":"r"}"#;
        assert!(matches!(
            load_corpus(&write(&dir, "h.jsonl", no_hist), CorpusFormat::Jsonl),
            Err(Error::Record { line: 1, .. })
        ));
        let blank_topic = r#"{"id":"a","topic":"  ","history":["x"],"knowledge":"k","response":"r"}"#;
        assert!(load_corpus(&write(&dir, "t.jsonl", blank_topic), CorpusFormat::Jsonl).is_err());
        let extra = r#"{"id":"a","topic":"T","history":["x"],"knowledge":"k","response":"r","x":1}"#;
        assert!(load_corpus(&write(&dir, "x.jsonl", extra), CorpusFormat::Jsonl).is_err());
    }

    #[test]
    fn empty_knowledge_allowed_but_not_exemplar() {
        let c = corpus(vec![sample("a", "T", ""), sample("b", "T", "k")]);
        let ex: Vec<_> = c.exemplars().map(|s| s.id.as_str()).collect();
        assert_eq!(ex, ["b"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::new(
            "rt",
            vec![DialogueSample {
                id: "x".into(),
                topic: "Ünï \"quoted\"".into(),
                history: vec!["a\nb".into(), "c".into()],
                knowledge: "k".into(),
                response: "r".into(),
            }],
        )
        .unwrap();
        let p = dir.path().join("rt.jsonl");
        c.save(&p).unwrap();
        assert_eq!(load_corpus(&p, CorpusFormat::Jsonl).unwrap(), c);
    }

    #[test]
    fn topic_overlap_examples() {
        let test = corpus(vec![sample("1", "a", "k"), sample("2", "b", "k")]);
        let db = corpus(vec![sample("1", "B", "k"), sample("2", "c", "k")]);
        assert_eq!(topic_overlap(&test, &db).unwrap(), 0.5);
        assert_eq!(topic_overlap(&test, &test).unwrap(), 1.0);
    }

    #[test]
    fn contamination_examples() {
        let db = corpus(vec![sample("1", "t", "x a b c y")]);
        let c = ngram_contamination(&["a b c".into()], &db, 3).unwrap();
        assert_eq!(c.fraction, 1.0);
        assert_eq!(c.ngram_type_fraction, 1.0);
        let d = ngram_contamination(&["p q r".into()], &db, 2).unwrap();
        assert_eq!(d.fraction, 0.0);
        let short = ngram_contamination(&["a b".into()], &db, 5).unwrap();
        assert!(short.too_short);
        assert_eq!(short.fraction, 0.0);
        assert!(ngram_contamination(&["a".into()], &db, 0).is_err());
    }

    #[test]
    fn converts_wow() {
        let wow = r#"[{"chosen_topic":"Pizza","dialog":[
            {"speaker":"0_Wizard","text":"Hi there","checked_sentence":{"no_passages_used":"no_passages_used"}},
            {"speaker":"1_Apprentice","text":"I love pizza"},
            {"speaker":"0_Wizard","text":"Me too! It is Italian.","checked_sentence":{"chosen_Pizza_0":"Pizza is a traditional Italian dish."}},
            {"speaker":"1_Apprentice","text":"Cool"},
            {"speaker":"0_Wizard","text":"Yes","checked_sentence":{"no_passages_used":"no_passages_used"}}
        ]}]"#;
        let s = convert_wow(wow).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].history, ["Hi there", "I love pizza"]);
        assert_eq!(s[0].knowledge, "Pizza is a traditional Italian dish.");
        assert_eq!(s[0].response, "Me too! It is Italian.");
        assert_eq!(s[1].knowledge, "");
        assert_eq!(s[1].history.len(), 4);
    }

    #[test]
    fn converts_woi() {
        let woi = r#"{"d1":{"apprentice_persona":"I like hiking.\nI live in Oslo.","dialog_history":[
            {"action":"Apprentice => Wizard","text":"Any trails near Oslo?"},
            {"action":"Wizard => SearchAgent","text":"oslo hiking trails"},
            {"action":"SearchAgent => Wizard","text":""},
            {"action":"Wizard => Apprentice","text":"Try Vettakollen.","context":{"contents":[{"content":["Vettakollen is a hill.","It is in Oslo."]}],"selected_contents":[[false],[true,false]]}},
            {"action":"Apprentice => Wizard","text":"Thanks"},
            {"action":"Wizard => Apprentice","text":"Enjoy"}
        ]}}"#
            .replace('\n', "");
        let s = convert_woi(&woi).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].topic, "oslo hiking trails");
        assert_eq!(s[0].knowledge, "Vettakollen is a hill.");
        assert_eq!(s[1].history, ["Any trails near Oslo?", "Try Vettakollen.", "Thanks"]);
        assert_eq!(s[1].knowledge, "");
    }
}
