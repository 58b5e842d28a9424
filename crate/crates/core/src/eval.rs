//! Synthetic evaluation suite standing in for the benchmark categories:
//! retrieval, reranking, semantic similarity and pair classification.
//!
//! Every metric lies in `[0, 1]`; reports multiply by 100 for display.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TopicLayout;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::numeric::Tensor;
use crate::pooling::{embed, InstructedSeq};

/// Sequences embedded per forward pass.
const EMBED_CHUNK: usize = 64;

fn unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::ZeroNorm)
            } else {
                Ok(r.iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of every query row with every document row.
pub fn cosine_matrix(queries: &Tensor, docs: &Tensor) -> Result<Vec<Vec<f64>>> {
    if queries.last_dim() != docs.last_dim() {
        return Err(Error::Shape {
            op: "cosine_matrix",
            lhs: queries.shape().to_vec(),
            rhs: docs.shape().to_vec(),
        });
    }
    let q = unit_rows(queries)?;
    let d = unit_rows(docs)?;
    Ok(q.iter().map(|qi| d.iter().map(|dj| dot(qi, dj)).collect()).collect())
}

/// 0-based rank of `gold` among `scores`; ties go to the lower index.
fn rank_of(scores: &[f64], gold: usize) -> usize {
    let s = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < gold))
        .count()
}

fn gold_ranks(queries: &Tensor, docs: &Tensor, gold: &[usize], k: usize) -> Result<Vec<usize>> {
    let n_docs = docs.shape()[0];
    if k == 0 || k > n_docs {
        return Err(Error::Metric(format!("k = {k} outside 1..={n_docs}")));
    }
    if gold.len() != queries.shape()[0] {
        return Err(Error::Metric(format!(
            "{} gold ids for {} queries",
            gold.len(),
            queries.shape()[0]
        )));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= n_docs) {
        return Err(Error::Metric(format!("gold doc {g} outside corpus of {n_docs}")));
    }
    let sims = cosine_matrix(queries, docs)?;
    Ok(sims.iter().zip(gold).map(|(row, &g)| rank_of(row, g)).collect())
}

/// Fraction of queries whose gold document is among the `k` most similar.
pub fn recall_at_k(queries: &Tensor, docs: &Tensor, gold: &[usize], k: usize) -> Result<f64> {
    let ranks = gold_ranks(queries, docs, gold, k)?;
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// nDCG@k with one relevant document per query and `1/log2(rank + 2)` discount.
pub fn ndcg_at_k(queries: &Tensor, docs: &Tensor, gold: &[usize], k: usize) -> Result<f64> {
    let ranks = gold_ranks(queries, docs, gold, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r < k)
        .map(|&r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

/// Mean reciprocal rank of the relevant candidate in each score list.
pub fn mean_reciprocal_rank(scores: &[Vec<f64>], relevant: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != relevant.len() {
        return Err(Error::Metric("need one relevant index per non-empty score list".into()));
    }
    let mut total = 0.0;
    for (s, &r) in scores.iter().zip(relevant) {
        if r >= s.len() {
            return Err(Error::Metric(format!("relevant index {r} outside {} candidates", s.len())));
        }
        total += 1.0 / (rank_of(s, r) + 1) as f64;
    }
    Ok(total / scores.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation.
pub fn spearman_sts(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::Metric(format!(
            "spearman needs two equal-length lists of at least 2, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    let (rp, rg) = (average_ranks(pred), average_ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::Metric("correlation undefined for a constant input".into()));
    }
    Ok(cov / (vp * vg).sqrt())
}

/// Best accuracy of the rule `score ≥ θ ⇒ positive` over all thresholds.
pub fn best_threshold_accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric("need one label per score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // θ above every score: all predicted negative
    let mut correct = labels.iter().filter(|&&l| !l).count();
    let mut best = correct;
    let mut i = order.len();
    // lower θ one distinct score at a time
    while i > 0 {
        let v = scores[order[i - 1]];
        while i > 0 && scores[order[i - 1]] == v {
            i -= 1;
            if labels[order[i]] {
                correct += 1;
            } else {
                correct -= 1;
            }
        }
        best = best.max(correct);
    }
    Ok(best as f64 / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RecallAt1,
    NdcgAt10,
    Mrr,
    Spearman,
    ThresholdAccuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RecallAt1 => "recall@1",
            Metric::NdcgAt10 => "ndcg@10",
            Metric::Mrr => "mrr",
            Metric::Spearman => "spearman",
            Metric::ThresholdAccuracy => "accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub metric: Metric,
    pub instruction: Vec<u32>,
    /// Symmetric tasks put the instruction on both sides.
    pub symmetric: bool,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub seed: u64,
    pub noise_rate: f64,
    pub query_len: usize,
    pub doc_len: usize,
    pub tasks: Vec<EvalTask>,
}

/// Distractor candidates per reranking query besides the positive and the hard negative.
const RERANK_DISTRACTORS: usize = 3;

impl EvalSuite {
    /// Two retrieval tasks, one reranking, one similarity and one pair classification,
    /// reusing the instructions of the synthetic training tasks.
    pub fn synthetic(vocab_size: usize, n_topics: usize, seed: u64) -> Self {
        let task = |name: &str, metric, instruction: &[u32], symmetric, n_queries| EvalTask {
            name: name.into(),
            metric,
            instruction: instruction.to_vec(),
            symmetric,
            n_queries,
        };
        EvalSuite {
            vocab_size,
            n_topics,
            seed,
            noise_rate: 0.1,
            query_len: 6,
            doc_len: 10,
            tasks: vec![
                task("retrieval-topic", Metric::RecallAt1, &[2, 3, 4], false, 96),
                task("retrieval-ranked", Metric::NdcgAt10, &[2, 3, 4], false, 96),
                task("rerank", Metric::Mrr, &[2, 3, 4], false, 64),
                task("sts", Metric::Spearman, &[5, 6], true, 96),
                task("pair-class", Metric::ThresholdAccuracy, &[5, 6], true, 96),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("evaluation suite has no tasks".into()));
        }
        if self.query_len == 0 || self.doc_len == 0 {
            return Err(Error::Config("query_len and doc_len must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task name {:?}", t.name)));
            }
            if t.n_queries < 2 {
                return Err(Error::Config(format!("task {:?} needs at least 2 queries", t.name)));
            }
            if let Some(&id) = t.instruction.iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            match t.metric {
                Metric::NdcgAt10 if layout.n_topics < 10 => {
                    return Err(Error::Config("ndcg@10 needs at least 10 topics".into()));
                }
                Metric::Mrr if layout.n_topics < RERANK_DISTRACTORS + 3 => {
                    return Err(Error::Config(format!(
                        "reranking needs at least {} topics",
                        RERANK_DISTRACTORS + 3
                    )));
                }
                Metric::Spearman if layout.n_topics < 4 => {
                    return Err(Error::Config("similarity needs at least 4 topics".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<TopicLayout> {
        TopicLayout::new(self.vocab_size, self.n_topics)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let suite: EvalSuite = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn embed_chunked(model: &Transformer, seqs: &[InstructedSeq]) -> Result<Tensor> {
    let mut data = Vec::new();
    for chunk in seqs.chunks(EMBED_CHUNK) {
        data.extend_from_slice(embed(model, chunk, None)?.data());
    }
    Tensor::new(&[seqs.len(), model.config.d_model], data)
}

struct TaskGen<'a> {
    layout: TopicLayout,
    suite: &'a EvalSuite,
    rng: ChaCha8Rng,
}

impl TaskGen<'_> {
    fn query(&mut self, topic: usize) -> Vec<u32> {
        let mut q = self.layout.sample(topic, self.suite.query_len, &mut self.rng);
        self.layout.corrupt(&mut q, self.suite.noise_rate, &mut self.rng);
        q
    }

    fn doc(&mut self, topic: usize) -> Vec<u32> {
        self.layout.sample(topic, self.suite.doc_len, &mut self.rng)
    }

    fn topic(&mut self) -> usize {
        self.rng.random_range(0..self.layout.n_topics)
    }

    /// Topic at distance ≥ 2 from `t`, so the two share no tokens.
    fn far_topic(&mut self, t: usize) -> usize {
        let far: Vec<usize> = (0..self.layout.n_topics).filter(|&u| u.abs_diff(t) >= 2).collect();
        *far.choose(&mut self.rng).expect("at least 4 topics")
    }
}

fn run_task(model: &Transformer, suite: &EvalSuite, index: usize) -> Result<f64> {
    let task = &suite.tasks[index];
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    rng.set_stream(index as u64);
    let mut gen = TaskGen {
        layout: suite.layout()?,
        suite,
        rng,
    };
    let doc_instruction: &[u32] = if task.symmetric { &task.instruction } else { &[] };
    let with_doc_instruction = |d: &[u32]| InstructedSeq::new(doc_instruction, d);
    let with_instruction = |q: &[u32]| InstructedSeq::new(&task.instruction, q);
    let n = task.n_queries;
    match task.metric {
        Metric::RecallAt1 | Metric::NdcgAt10 => {
            let n_topics = gen.layout.n_topics;
            let corpus: Vec<InstructedSeq> = (0..n_topics).map(|t| with_doc_instruction(&gen.doc(t))).collect();
            let gold: Vec<usize> = (0..n).map(|_| gen.topic()).collect();
            let queries: Vec<InstructedSeq> = gold.iter().map(|&t| with_instruction(&gen.query(t))).collect();
            let q = embed_chunked(model, &queries)?;
            let d = embed_chunked(model, &corpus)?;
            if task.metric == Metric::RecallAt1 {
                recall_at_k(&q, &d, &gold, 1)
            } else {
                ndcg_at_k(&q, &d, &gold, 10)
            }
        }
        Metric::Mrr => {
            let per_query = RERANK_DISTRACTORS + 2;
            let mut queries = Vec::with_capacity(n);
            let mut candidates = Vec::with_capacity(n * per_query);
            let mut relevant = Vec::with_capacity(n);
            for _ in 0..n {
                let t = gen.topic();
                queries.push(with_instruction(&gen.query(t)));
                let neighbour = gen.layout.adjacent(t, &mut gen.rng);
                let mut docs = vec![gen.doc(t), gen.doc(neighbour)];
                let others: Vec<usize> = (0..gen.layout.n_topics).filter(|&u| u != t && u != neighbour).collect();
                for &u in others.choose_multiple(&mut gen.rng, RERANK_DISTRACTORS) {
                    docs.push(gen.doc(u));
                }
                // place the positive at a random slot so ties do not favour it
                let slot = gen.rng.random_range(0..per_query);
                docs.swap(0, slot);
                relevant.push(slot);
                candidates.extend(docs.iter().map(|d| with_doc_instruction(d)));
            }
            let q = unit_rows(&embed_chunked(model, &queries)?)?;
            let c = unit_rows(&embed_chunked(model, &candidates)?)?;
            let scores: Vec<Vec<f64>> = q
                .iter()
                .enumerate()
                .map(|(i, qi)| c[i * per_query..(i + 1) * per_query].iter().map(|cj| dot(qi, cj)).collect())
                .collect();
            mean_reciprocal_rank(&scores, &relevant)
        }
        Metric::Spearman => {
            let len = suite.doc_len;
            let mut left = Vec::with_capacity(n);
            let mut right = Vec::with_capacity(n);
            let mut gold = Vec::with_capacity(n);
            for _ in 0..n {
                let t = gen.topic();
                let far = gen.far_topic(t);
                let shared = gen.rng.random_range(0..=len);
                let mut b = gen.layout.sample(t, shared, &mut gen.rng);
                b.extend(gen.layout.sample(far, len - shared, &mut gen.rng));
                b.shuffle(&mut gen.rng);
                left.push(with_instruction(&gen.doc(t)));
                right.push(with_instruction(&b));
                gold.push(shared as f64 / len as f64);
            }
            let a = unit_rows(&embed_chunked(model, &left)?)?;
            let b = unit_rows(&embed_chunked(model, &right)?)?;
            let pred: Vec<f64> = a.iter().zip(&b).map(|(x, y)| dot(x, y)).collect();
            // anti-correlation scores as no skill, keeping every metric in [0, 1]
            spearman_sts(&pred, &gold).map(|r| r.max(0.0))
        }
        Metric::ThresholdAccuracy => {
            let mut left = Vec::with_capacity(n);
            let mut right = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let t = gen.topic();
                let same = i % 2 == 0;
                let u = if same { t } else { gen.layout.adjacent(t, &mut gen.rng) };
                left.push(with_instruction(&gen.doc(t)));
                right.push(with_instruction(&gen.doc(u)));
                labels.push(same);
            }
            let a = unit_rows(&embed_chunked(model, &left)?)?;
            let b = unit_rows(&embed_chunked(model, &right)?)?;
            let scores: Vec<f64> = a.iter().zip(&b).map(|(x, y)| dot(x, y)).collect();
            best_threshold_accuracy(&scores, &labels)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, f64>,
    pub aggregate: f64,
    pub model_params: usize,
    pub layers: usize,
}

impl EvalReport {
    pub fn new(per_task: BTreeMap<String, f64>, model_params: usize, layers: usize) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::Metric("report has no tasks".into()));
        }
        let aggregate = per_task.values().sum::<f64>() / per_task.len() as f64;
        Ok(EvalReport {
            per_task,
            aggregate,
            model_params,
            layers,
        })
    }

    /// Aggregate on the ×100 scale.
    pub fn score(&self) -> f64 {
        100.0 * self.aggregate
    }

    /// Header `layers,params,aggregate,<task>...` and one data row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layers,params,aggregate");
        for name in self.per_task.keys() {
            s.push(',');
            s.push_str(name);
        }
        let _ = write!(s, "\n{},{},{:.6}", self.layers, self.model_params, self.aggregate);
        for v in self.per_task.values() {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or(Error::Parse {
                line: 1,
                msg: "empty eval report".into(),
            })?
            .split(',')
            .collect();
        if header.len() < 4 || header[..3] != ["layers", "params", "aggregate"] {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header layers,params,aggregate,<tasks>".into(),
            });
        }
        let row: Vec<&str> = lines
            .next()
            .ok_or(Error::Parse {
                line: 2,
                msg: "missing data row".into(),
            })?
            .split(',')
            .collect();
        if row.len() != header.len() {
            return Err(Error::Parse {
                line: 2,
                msg: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line: 2,
            msg: format!("invalid {what} {v:?}"),
        };
        let layers = row[0].trim().parse().map_err(|_| bad("layers", row[0]))?;
        let params = row[1].trim().parse().map_err(|_| bad("params", row[1]))?;
        let mut per_task = BTreeMap::new();
        for (name, v) in header[3..].iter().zip(&row[3..]) {
            let x: f64 = v.trim().parse().map_err(|_| bad("score", v))?;
            per_task.insert(name.to_string(), x);
        }
        Self::new(per_task, params, layers)
    }
}

/// Embeds every task of the suite and scores it.
pub fn evaluate(model: &Transformer, suite: &EvalSuite) -> Result<EvalReport> {
    suite.validate()?;
    if suite.vocab_size != model.config.vocab_size {
        return Err(Error::Data(format!(
            "suite vocabulary has {} tokens, model has {}",
            suite.vocab_size, model.config.vocab_size
        )));
    }
    let mut per_task = BTreeMap::new();
    for (i, task) in suite.tasks.iter().enumerate() {
        per_task.insert(task.name.clone(), run_task(model, suite, i)?);
    }
    EvalReport::new(per_task, model.count_params(), model.n_layers())
}

/// One column of a variants table.
#[derive(Clone, Debug)]
pub struct TableColumn<'a> {
    pub name: String,
    pub report: &'a EvalReport,
    pub train_ms: Option<f64>,
}

fn signed(x: f64, decimals: usize) -> String {
    if x >= 0.0 {
        format!("+{x:.decimals$}")
    } else {
        format!("{x:.decimals$}")
    }
}

fn human_count(n: usize) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.2}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.2}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

/// Layers / Params / Score rows, one column per model, compared against the column
/// named `baseline` in parentheses: layer and score deltas (`25 (-7)`, `63.5 (-1.5)`)
/// and the share of parameters kept (`5.90B (78%)`).
pub fn variants_table(columns: &[TableColumn<'_>], baseline: &str) -> Result<String> {
    let base = columns
        .iter()
        .find(|c| c.name == baseline)
        .ok_or_else(|| Error::Metric(format!("baseline {baseline:?} not among the columns")))?
        .report;
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("".into(), columns.iter().map(|c| c.name.clone()).collect()),
        ("Layers".into(), Vec::new()),
        ("Params".into(), Vec::new()),
        ("Score".into(), Vec::new()),
    ];
    for c in columns {
        let r = c.report;
        let is_base = c.name == baseline;
        let cell = |value: String, delta: String| if is_base { value } else { format!("{value} ({delta})") };
        rows[1].1.push(cell(
            r.layers.to_string(),
            format!("{}", r.layers as i64 - base.layers as i64),
        ));
        let kept = 100.0 * r.model_params as f64 / base.model_params as f64;
        rows[2].1.push(cell(human_count(r.model_params), format!("{kept:.0}%")));
        rows[3].1.push(cell(format!("{:.1}", r.score()), signed(r.score() - base.score(), 1)));
    }
    if columns.iter().any(|c| c.train_ms.is_some()) {
        let cells = columns
            .iter()
            .map(|c| c.train_ms.map_or("-".to_string(), |ms| format!("{:.1}s", ms / 1000.0)))
            .collect();
        rows.push(("Train time".into(), cells));
    }
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns.len())
        .map(|j| rows.iter().map(|(_, cells)| cells[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (label, cells) in &rows {
        let _ = write!(out, "{label:<label_w$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let docs = Tensor::randn(&[20, 8], 1.0, &mut rng);
        let gold: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_k(&docs, &docs, &gold, 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&docs, &docs, &gold, 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&docs, &docs, &gold, 20).unwrap(), 1.0);
        assert!(recall_at_k(&docs, &docs, &gold, 21).is_err());
        assert!(recall_at_k(&docs, &docs, &gold, 0).is_err());
    }

    #[test]
    fn random_retrieval_recall_is_k_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n_docs, n_q, k) = (50, 2000, 5);
        let docs = Tensor::randn(&[n_docs, 64], 1.0, &mut rng);
        let queries = Tensor::randn(&[n_q, 64], 1.0, &mut rng);
        let gold: Vec<usize> = (0..n_q).map(|_| rng.random_range(0..n_docs)).collect();
        let r = recall_at_k(&queries, &docs, &gold, k).unwrap();
        // binomial standard error at p = 0.1, n = 2000 is about 0.0067
        assert!((r - k as f64 / n_docs as f64).abs() < 0.03, "{r}");
    }

    #[test]
    fn ndcg_discount() {
        // gold doc ranked second: gain 1/log2(3)
        let q = t(&[1, 2], &[1.0, 0.0]);
        let d = t(&[3, 2], &[1.0, 0.0, 1.0, 0.1, 0.0, 1.0]);
        let v = ndcg_at_k(&q, &d, &[1], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&q, &d, &[2], 2).unwrap(), 0.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_sts(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_sts(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // d = [0, 1, 1, 0]: 1 − 6·2/(4·15)
        assert!((spearman_sts(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman_sts(&a, &[2.0; 4]).is_err());
        assert!(spearman_sts(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn mrr_and_threshold_accuracy() {
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.3, 0.8, 0.5]];
        let v = mean_reciprocal_rank(&scores, &[0, 2]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
        assert_eq!(best_threshold_accuracy(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(best_threshold_accuracy(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.5);
        assert_eq!(best_threshold_accuracy(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(best_threshold_accuracy(&[0.1, 0.7, 0.4], &[false, true, false]).unwrap(), 1.0);
    }

    fn model(n_layers: usize) -> Transformer {
        Transformer::init(ModelConfig {
            vocab_size: 128,
            d_model: 16,
            n_layers,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let m = model(2);
        let suite = EvalSuite::synthetic(128, 12, 7);
        let a = evaluate(&m, &suite).unwrap();
        let b = evaluate(&m, &suite).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_task.len(), 5);
        assert!(a.per_task.values().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.layers, 2);
        assert_eq!(a.model_params, m.count_params());
    }

    #[test]
    fn layers_follow_pruning() {
        let m = model(4);
        let (p, _) = crate::prune::prune_layers(&m, &crate::prune::PruneSpec::layers(1)).unwrap();
        let r = evaluate(&p, &EvalSuite::synthetic(128, 12, 7)).unwrap();
        assert_eq!(r.layers, 1);
    }

    #[test]
    fn vocab_mismatch_errors() {
        assert!(matches!(
            evaluate(&model(1), &EvalSuite::synthetic(256, 12, 7)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn suite_json_round_trip() {
        let s = EvalSuite::synthetic(128, 12, 3);
        assert_eq!(EvalSuite::from_json(&s.to_json()).unwrap(), s);
        let mut bad = s.clone();
        bad.n_topics = 6;
        assert!(EvalSuite::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn aggregate_is_task_order_invariant() {
        let names = ["a", "b", "c", "d"];
        let vals = [0.1, 0.7, 0.35, 0.9];
        let fwd: BTreeMap<String, f64> = names.iter().zip(vals).map(|(n, v)| (n.to_string(), v)).collect();
        let rev: BTreeMap<String, f64> = names.iter().rev().zip(vals.iter().rev()).map(|(n, v)| (n.to_string(), *v)).collect();
        let a = EvalReport::new(fwd, 10, 2).unwrap();
        let b = EvalReport::new(rev, 10, 2).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
        assert!((a.aggregate - 0.5125).abs() < 1e-15);
    }

    #[test]
    fn report_csv_round_trip() {
        let per_task = [("x".to_string(), 0.25), ("y".to_string(), 0.5)].into_iter().collect();
        let r = EvalReport::new(per_task, 1234, 3).unwrap();
        assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(EvalReport::from_csv("layers,params\n1,2\n").is_err());
    }

    #[test]
    fn table_shows_deltas() {
        let mk = |layers, params, agg: f64| {
            EvalReport::new([("t".to_string(), agg)].into_iter().collect(), params, layers).unwrap()
        };
        let full = mk(32, 7_000_000_000, 0.649);
        let small = mk(25, 5_460_000_000, 0.646);
        let table = variants_table(
            &[
                TableColumn {
                    name: "full".into(),
                    report: &full,
                    train_ms: None,
                },
                TableColumn {
                    name: "large".into(),
                    report: &small,
                    train_ms: Some(1500.0),
                },
            ],
            "full",
        )
        .unwrap();
        assert!(table.contains("25 (-7)"), "{table}");
        assert!(table.contains("64.6 (-0.3)"), "{table}");
        assert!(table.contains("7.00B"));
        assert!(table.contains("5.46B (78%)"), "{table}");
        assert!(table.contains("1.5s"));
        assert!(variants_table(&[], "full").is_err());
    }
}
