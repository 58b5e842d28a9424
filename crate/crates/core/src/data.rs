//! Instructed contrastive tuples: vocabulary, JSONL ingestion and a seeded
//! synthetic generator.
//!
//! The synthetic corpus places `n_topics` topics on overlapping windows of the
//! content vocabulary. Neighbouring topics share about a quarter of their
//! tokens, which is what makes the adjacent-topic negatives "hard".

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pooling::InstructedSeq;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Ids `2..2 + INSTRUCTION_WORDS` are reserved for instruction vocabulary in
/// synthetic vocabularies.
pub const INSTRUCTION_WORDS: usize = 16;
const CONTENT_START: usize = 2 + INSTRUCTION_WORDS;

/// Token list where line number (0-based) is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vocabulary token {t:?} is empty or contains whitespace"),
                });
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate vocabulary token {t:?}"),
                });
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::Data(format!("vocabulary has no {UNK_TOKEN} entry")))?;
        Ok(Vocab { tokens, index, unk })
    }

    /// `<pad>`, `<unk>`, instruction words `i0..`, then content words `w0..`.
    pub fn synthetic(vocab_size: usize) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend((0..INSTRUCTION_WORDS).map(|i| format!("i{i}")));
        let content = vocab_size.saturating_sub(tokens.len());
        tokens.extend((0..content).map(|i| format!("w{i}")));
        Vocab::from_tokens(tokens).expect("synthetic vocabulary is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(|l| l.trim().to_string()).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Vocab::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(self.unk))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i as usize).map_or(UNK_TOKEN, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One (instruction, query, positive, hard negative) training record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTuple {
    pub instruction: Vec<u32>,
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    pub hard_negative: Vec<u32>,
    pub task_id: String,
    pub symmetric: bool,
}

impl ContrastiveTuple {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.query.is_empty() || self.positive.is_empty() {
            return Err(Error::Data("query and positive must be non-empty".into()));
        }
        let all = [&self.instruction, &self.query, &self.positive, &self.hard_negative];
        if let Some(&id) = all.iter().flat_map(|v| v.iter()).find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        Ok(())
    }

    /// Instruction followed by the query; the instruction is excluded from pooling.
    pub fn query_seq(&self) -> InstructedSeq {
        InstructedSeq::new(&self.instruction, &self.query)
    }

    /// Documents carry the instruction only for symmetric tasks.
    pub fn document_seq(&self, doc: &[u32]) -> InstructedSeq {
        if self.symmetric {
            InstructedSeq::new(&self.instruction, doc)
        } else {
            InstructedSeq::plain(doc)
        }
    }
}

#[derive(Serialize)]
struct JsonTuple<'a> {
    instruction: String,
    query: String,
    positive: String,
    negative: String,
    task: &'a str,
    symmetric: bool,
}

pub fn parse_jsonl(text: &str, vocab: &Vocab) -> Result<Vec<ContrastiveTuple>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line, msg };
        let value: Value = serde_json::from_str(raw).map_err(|e| perr(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| perr("expected a JSON object".into()))?;
        let text_field = |name: &str| -> Result<&str> {
            obj.get(name)
                .ok_or_else(|| perr(format!("missing field {name}")))?
                .as_str()
                .ok_or_else(|| perr(format!("field {name} must be a string")))
        };
        let tuple = ContrastiveTuple {
            instruction: vocab.encode(text_field("instruction")?),
            query: vocab.encode(text_field("query")?),
            positive: vocab.encode(text_field("positive")?),
            hard_negative: vocab.encode(text_field("negative")?),
            task_id: text_field("task")?.to_string(),
            symmetric: obj
                .get("symmetric")
                .ok_or_else(|| perr("missing field symmetric".into()))?
                .as_bool()
                .ok_or_else(|| perr("field symmetric must be a boolean".into()))?,
        };
        tuple
            .validate(vocab.len())
            .map_err(|e| perr(e.to_string()))?;
        out.push(tuple);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<ContrastiveTuple>> {
    let path = path.as_ref();
    parse_jsonl(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?, vocab)
}

pub fn to_jsonl(tuples: &[ContrastiveTuple], vocab: &Vocab) -> String {
    let mut out = String::new();
    for t in tuples {
        let row = JsonTuple {
            instruction: vocab.decode(&t.instruction),
            query: vocab.decode(&t.query),
            positive: vocab.decode(&t.positive),
            negative: vocab.decode(&t.hard_negative),
            task: &t.task_id,
            symmetric: t.symmetric,
        };
        out.push_str(&serde_json::to_string(&row).expect("tuple serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, tuples: &[ContrastiveTuple], vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(tuples, vocab)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub name: String,
    pub instruction: Vec<u32>,
    pub symmetric: bool,
    /// Relative share of generated tuples.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub tuple_count: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub query_len: usize,
    pub doc_len: usize,
    pub tasks: Vec<SynthTask>,
}

impl SynthSpec {
    /// Two training tasks: asymmetric retrieval and symmetric similarity.
    pub fn new(vocab_size: usize, n_topics: usize, tuple_count: usize, noise_rate: f64, seed: u64) -> Self {
        SynthSpec {
            vocab_size,
            n_topics,
            tuple_count,
            noise_rate,
            seed,
            query_len: 6,
            doc_len: 10,
            tasks: vec![
                SynthTask {
                    name: "retrieve".into(),
                    instruction: vec![2, 3, 4],
                    symmetric: false,
                    weight: 2.0,
                },
                SynthTask {
                    name: "similar".into(),
                    instruction: vec![5, 6],
                    symmetric: true,
                    weight: 1.0,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(Error::Config("n_topics must be at least 2".into()));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 0.5)", self.noise_rate)));
        }
        if self.query_len == 0 || self.doc_len == 0 {
            return Err(Error::Config("query_len and doc_len must be positive".into()));
        }
        if self.tasks.is_empty() || self.tasks.iter().any(|t| !(t.weight > 0.0)) {
            return Err(Error::Config("need at least one task with positive weight".into()));
        }
        if let Some(&id) = self
            .tasks
            .iter()
            .flat_map(|t| &t.instruction)
            .find(|&&id| id < 2 || id as usize >= CONTENT_START)
        {
            return Err(Error::Config(format!("instruction token {id} outside the instruction range")));
        }
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<TopicLayout> {
        TopicLayout::new(self.vocab_size, self.n_topics)
    }
}

/// Placement of topics on the content vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopicLayout {
    pub content_start: usize,
    pub content_end: usize,
    pub width: usize,
    pub stride: usize,
    pub n_topics: usize,
}

impl TopicLayout {
    pub fn new(vocab_size: usize, n_topics: usize) -> Result<Self> {
        let content = vocab_size.saturating_sub(CONTENT_START);
        // n topics of width w at stride 3w/4 span (3(n-1)/4 + 1)·w tokens
        let width = 4 * content / (3 * (n_topics.max(1) - 1) + 4);
        let stride = 3 * width / 4;
        if n_topics < 2 || width < 4 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is too small for {n_topics} topics"
            )));
        }
        Ok(TopicLayout {
            content_start: CONTENT_START,
            content_end: vocab_size,
            width,
            stride,
            n_topics,
        })
    }

    pub fn range(&self, topic: usize) -> std::ops::Range<u32> {
        let start = self.content_start + topic * self.stride;
        start as u32..(start + self.width) as u32
    }

    pub fn sample<R: Rng>(&self, topic: usize, len: usize, rng: &mut R) -> Vec<u32> {
        let r = self.range(topic);
        (0..len).map(|_| rng.random_range(r.clone())).collect()
    }

    /// Replaces each token by a uniform content token with probability `rate`.
    pub fn corrupt<R: Rng>(&self, tokens: &mut [u32], rate: f64, rng: &mut R) {
        for t in tokens {
            if rng.random::<f64>() < rate {
                *t = rng.random_range(self.content_start as u32..self.content_end as u32);
            }
        }
    }

    /// A neighbouring topic, chosen at random when both sides exist.
    pub fn adjacent<R: Rng>(&self, topic: usize, rng: &mut R) -> usize {
        if topic == 0 {
            1
        } else if topic + 1 == self.n_topics || rng.random::<bool>() {
            topic - 1
        } else {
            topic + 1
        }
    }
}

fn pick_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Seeded synthetic tuples: query = instruction + noisy topic sample, positive = fresh
/// sample of the same topic, hard negative = sample of an adjacent topic.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<ContrastiveTuple>> {
    spec.validate()?;
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = spec.tasks.iter().map(|t| t.weight).collect();
    let mut out = Vec::with_capacity(spec.tuple_count);
    for _ in 0..spec.tuple_count {
        let task = &spec.tasks[pick_weighted(&weights, &mut rng)];
        let topic = rng.random_range(0..spec.n_topics);
        let mut query = layout.sample(topic, spec.query_len, &mut rng);
        layout.corrupt(&mut query, spec.noise_rate, &mut rng);
        let positive = layout.sample(topic, spec.doc_len, &mut rng);
        let neighbour = layout.adjacent(topic, &mut rng);
        let hard_negative = layout.sample(neighbour, spec.doc_len, &mut rng);
        out.push(ContrastiveTuple {
            instruction: task.instruction.clone(),
            query,
            positive,
            hard_negative,
            task_id: task.name.clone(),
            symmetric: task.symmetric,
        });
    }
    Ok(out)
}

/// Draws tuple indices without replacement, reshuffling after each full epoch.
/// With task weights, each draw first picks a task by weight and then takes the
/// next unused tuple of that task.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    groups: Vec<Vec<usize>>,
    weights: Vec<f64>,
    queues: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        Ok(EpochSampler {
            groups: vec![(0..len).collect()],
            weights: vec![1.0],
            queues: vec![Vec::new()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn weighted(tuples: &[ContrastiveTuple], task_weights: &BTreeMap<String, f64>, seed: u64) -> Result<Self> {
        let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in tuples.iter().enumerate() {
            by_task.entry(&t.task_id).or_default().push(i);
        }
        if by_task.is_empty() {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        let weights: Vec<f64> = by_task
            .keys()
            .map(|k| task_weights.get(*k).copied().unwrap_or(1.0))
            .collect();
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("task weights must be non-negative and not all zero".into()));
        }
        let n = by_task.len();
        Ok(EpochSampler {
            groups: by_task.into_values().collect(),
            weights,
            queues: vec![Vec::new(); n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_index(&mut self) -> usize {
        let g = if self.groups.len() == 1 {
            0
        } else {
            pick_weighted(&self.weights, &mut self.rng)
        };
        if self.queues[g].is_empty() {
            let mut order = self.groups[g].clone();
            order.shuffle(&mut self.rng);
            order.reverse();
            self.queues[g] = order;
        }
        self.queues[g].pop().unwrap()
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec() -> SynthSpec {
        SynthSpec::new(256, 12, 200, 0.1, 99)
    }

    #[test]
    fn synthetic_vocab_layout() {
        let v = Vocab::synthetic(64);
        assert_eq!(v.len(), 64);
        assert_eq!(v.encode("<pad> <unk> i0 w0 nope"), vec![0, 1, 2, 18, 1]);
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("<unk>\na\na\n").is_err());
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_jsonl("", &Vocab::synthetic(40)).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let v = Vocab::synthetic(40);
        let good = r#"{"instruction":"i0","query":"w1","positive":"w2","negative":"w3","task":"t","symmetric":false}"#;
        let bad = r#"{"instruction":"i0","query":"w1","negative":"w3","task":"t","symmetric":false}"#;
        let text = format!("{good}\n{good}\n{bad}\n");
        let err = parse_jsonl(&text, &v).unwrap_err();
        assert_eq!(err.to_string(), "line 3: missing field positive");
        let err = parse_jsonl("{not json\n", &v).unwrap_err();
        assert!(err.to_string().starts_with("line 1: malformed JSON"), "{err}");
        let empty_query = r#"{"instruction":"","query":"","positive":"w2","negative":"w3","task":"t","symmetric":true}"#;
        assert!(parse_jsonl(empty_query, &v).is_err());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::synthetic(40);
        let line = r#"{"instruction":"i0 i1","query":"w1 zebra","positive":"w2","negative":"w3","task":"t","symmetric":true}"#;
        let t = &parse_jsonl(line, &v).unwrap()[0];
        assert_eq!(t.query, vec![19, v.unk_id()]);
        assert_eq!(t.instruction, vec![2, 3]);
        assert!(t.symmetric);
    }

    #[test]
    fn jsonl_round_trip() {
        let s = spec();
        let v = Vocab::synthetic(s.vocab_size);
        let tuples = synth_generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &tuples, &v).unwrap();
        assert_eq!(load_jsonl(&path, &v).unwrap(), tuples);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = synth_generate(&spec()).unwrap();
        let b = synth_generate(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        for t in &a {
            t.validate(256).unwrap();
        }
        assert!(a.iter().any(|t| t.symmetric) && a.iter().any(|t| !t.symmetric));
    }

    #[test]
    fn clean_queries_stay_in_topic() {
        let mut s = spec();
        s.noise_rate = 0.0;
        let layout = s.layout().unwrap();
        for t in synth_generate(&s).unwrap() {
            // the topic whose window holds the whole query must also hold the positive
            let topic = (0..s.n_topics)
                .find(|&k| t.query.iter().chain(&t.positive).all(|id| layout.range(k).contains(id)));
            assert!(topic.is_some(), "{t:?}");
        }
    }

    #[test]
    fn adjacent_topics_overlap_distant_ones_do_not() {
        let layout = spec().layout().unwrap();
        let set = |k: usize| layout.range(k).collect::<HashSet<_>>();
        let shared = set(3).intersection(&set(4)).count();
        assert!(shared > 0 && shared < layout.width / 2);
        assert_eq!(set(3).intersection(&set(5)).count(), 0);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec();
        s.n_topics = 1;
        assert!(synth_generate(&s).is_err());
        let mut s = spec();
        s.noise_rate = 0.5;
        assert!(synth_generate(&s).is_err());
        let mut s = spec();
        s.vocab_size = 30;
        assert!(synth_generate(&s).is_err());
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut sampler = EpochSampler::new(37, 1).unwrap();
        for _ in 0..3 {
            let epoch: HashSet<usize> = sampler.take(37).into_iter().collect();
            assert_eq!(epoch.len(), 37);
        }
        assert!(EpochSampler::new(0, 1).is_err());
    }

    #[test]
    fn weighted_sampler_follows_weights() {
        let tuples = synth_generate(&spec()).unwrap();
        let weights = BTreeMap::from([("retrieve".to_string(), 1.0), ("similar".to_string(), 0.0)]);
        let mut sampler = EpochSampler::weighted(&tuples, &weights, 3).unwrap();
        for i in sampler.take(100) {
            assert_eq!(tuples[i].task_id, "retrieve");
        }
    }

    /// Frozen random token vectors, mean-pooled, nearest neighbour over the 2B candidates.
    #[test]
    fn bag_of_embeddings_baseline_beats_chance() {
        let s = spec();
        let tuples = synth_generate(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dim = 32;
        let table: Vec<Vec<f64>> = (0..s.vocab_size)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let bag = |ids: &[u32]| {
            let mut v = vec![0.0; dim];
            for &id in ids {
                for (a, b) in v.iter_mut().zip(&table[id as usize]) {
                    *a += b;
                }
            }
            v
        };
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let batch = 16;
        let (mut hits, mut total) = (0, 0);
        for chunk in tuples.chunks(batch) {
            let docs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|t| bag(&t.positive))
                .chain(chunk.iter().map(|t| bag(&t.hard_negative)))
                .collect();
            for (i, t) in chunk.iter().enumerate() {
                let q = bag(&t.query);
                let best = (0..docs.len())
                    .max_by(|&a, &b| cos(&q, &docs[a]).total_cmp(&cos(&q, &docs[b])))
                    .unwrap();
                hits += usize::from(best == i);
                total += 1;
            }
        }
        let recall = hits as f64 / total as f64;
        assert!(recall > 1.0 / (2 * batch) as f64 * 3.0, "recall@1 {recall}");
    }
}
