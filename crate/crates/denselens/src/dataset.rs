//! Retrieval-corpus ingestion and probe-instance construction.
//!
//! Input corpora pair each query with positive passages and pre-mined hard
//! negative passages. This module normalizes them into `ProbeInstance`s
//! holding exactly four hard negatives (sampling without replacement when
//! enough negatives exist, oversampling with replacement when 1..=3 exist,
//! dropping queries with none), splits instance sets deterministically, and
//! derives N-way probe variants with a randomized positive position.
//!
//! All sampling is keyed per record so results do not depend on processing
//! order, only on `(inputs, seed)`.

use crate::error::{Error, Result};
use crate::sub_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Number of hard negatives every probe instance carries.
pub const NEGATIVES_PER_INSTANCE: usize = 4;

/// Input corpus formats understood by [`parse_retrieval_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// JSON array of records with `question`, `positive_ctxs` and
    /// `hard_negative_ctxs` fields (passage objects carry a `text` field).
    DprJson,
    /// One `query \t positive \t negative` triple per line; lines sharing a
    /// query text are merged into one record.
    TsvTriples,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpr_json" => Ok(Self::DprJson),
            "tsv_triples" => Ok(Self::TsvTriples),
            other => Err(Error::Argument(format!(
                "unknown corpus format {other:?} (expected dpr_json or tsv_triples)"
            ))),
        }
    }
}

/// One raw query as read from the corpus, before negative-count control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQueryRecord {
    pub query_text: String,
    pub positive_passages: Vec<String>,
    pub hard_negative_passages: Vec<String>,
    pub source_id: String,
}

impl RawQueryRecord {
    pub fn new(
        query_text: impl Into<String>,
        positive_passages: Vec<String>,
        hard_negative_passages: Vec<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let query_text = query_text.into();
        if query_text.trim().is_empty() {
            return Err(Error::Argument("query_text is empty".into()));
        }
        if positive_passages.is_empty() {
            return Err(Error::Argument(
                "positive_passages must have at least one element".into(),
            ));
        }
        Ok(Self {
            query_text,
            positive_passages,
            hard_negative_passages,
            source_id: source_id.into(),
        })
    }
}

/// One probe instance: a query, its positive passage and exactly four hard
/// negatives (duplicates permitted when the source record had fewer than
/// four distinct negatives).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub instance_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    #[serde(rename = "positive")]
    pub positive_passage: String,
    #[serde(rename = "negatives")]
    pub hard_negatives: Vec<String>,
}

impl ProbeInstance {
    pub fn new(
        instance_id: impl Into<String>,
        query_text: impl Into<String>,
        positive_passage: impl Into<String>,
        hard_negatives: Vec<String>,
    ) -> Result<Self> {
        let positive_passage = positive_passage.into();
        if hard_negatives.len() != NEGATIVES_PER_INSTANCE {
            return Err(Error::Argument(format!(
                "expected exactly {NEGATIVES_PER_INSTANCE} hard negatives, got {}",
                hard_negatives.len()
            )));
        }
        if hard_negatives.iter().any(|n| *n == positive_passage) {
            return Err(Error::Argument(
                "positive passage must not appear among the hard negatives".into(),
            ));
        }
        Ok(Self {
            instance_id: instance_id.into(),
            query_text: query_text.into(),
            positive_passage,
            hard_negatives,
        })
    }
}

/// An N-way classification variant of a probe instance: N passages with the
/// positive at a recorded index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeVariant {
    pub instance_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    pub passages: Vec<String>,
    pub label: usize,
    pub n: usize,
}

/// A deterministic train/validation split; the test set is supplied
/// separately (from the dev corpus) via [`DatasetSplit::with_test`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ProbeInstance>,
    pub validation: Vec<ProbeInstance>,
    pub test: Vec<ProbeInstance>,
    pub seed: u64,
    pub ratio: f64,
}

impl DatasetSplit {
    pub fn with_test(mut self, test: Vec<ProbeInstance>) -> Self {
        self.test = test;
        self
    }
}

/// Parse a retrieval corpus file into raw query records, preserving passage
/// order from the file.
pub fn parse_retrieval_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<RawQueryRecord>> {
    let records = match format {
        CorpusFormat::DprJson => parse_dpr_json(path)?,
        CorpusFormat::TsvTriples => parse_tsv_triples(path)?,
    };
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(records)
}

fn parse_dpr_json(path: &Path) -> Result<Vec<RawQueryRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let raw: serde_json::Value = serde_json::from_reader(reader)?;
    let array = raw.as_array().ok_or_else(|| Error::MalformedRecord {
        index: 0,
        reason: "top-level value is not a JSON array".into(),
    })?;

    let mut records = Vec::with_capacity(array.len());
    for (index, value) in array.iter().enumerate() {
        records.push(parse_dpr_record(index, value)?);
    }
    Ok(records)
}

fn parse_dpr_record(index: usize, value: &serde_json::Value) -> Result<RawQueryRecord> {
    let obj = value.as_object().ok_or_else(|| Error::MalformedRecord {
        index,
        reason: "record is not a JSON object".into(),
    })?;

    let question = obj
        .get("question")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::MalformedRecord {
            index,
            reason: "missing field `question`".into(),
        })?;
    if question.trim().is_empty() {
        return Err(Error::MalformedRecord {
            index,
            reason: "field `question` is empty".into(),
        });
    }

    let positives = parse_ctx_list(index, obj, "positive_ctxs")?;
    if positives.is_empty() {
        return Err(Error::MalformedRecord {
            index,
            reason: "field `positive_ctxs` has no passages".into(),
        });
    }
    // Hard negatives are optional; an absent key means zero negatives.
    let negatives = if obj.contains_key("hard_negative_ctxs") {
        parse_ctx_list(index, obj, "hard_negative_ctxs")?
    } else {
        Vec::new()
    };

    RawQueryRecord::new(question, positives, negatives, format!("r{index:06}"))
}

fn parse_ctx_list(
    index: usize,
    obj: &serde_json::Map<String, serde_json::Value>,
    field: &str,
) -> Result<Vec<String>> {
    let list = obj
        .get(field)
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::MalformedRecord {
            index,
            reason: format!("missing field `{field}`"),
        })?;
    let mut out = Vec::with_capacity(list.len());
    for ctx in list {
        // Passages may be bare strings or objects carrying a `text` field.
        let text = if let Some(s) = ctx.as_str() {
            s
        } else {
            ctx.get("text")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::MalformedRecord {
                    index,
                    reason: format!("passage in `{field}` has no `text` field"),
                })?
        };
        out.push(text.to_string());
    }
    Ok(out)
}

fn parse_tsv_triples(path: &Path) -> Result<Vec<RawQueryRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);

    // Merge triples that share a query, keeping first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut by_query: std::collections::HashMap<String, (Vec<String>, Vec<String>)> =
        std::collections::HashMap::new();

    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedRecord {
                index,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (query, positive, negative) = (fields[0], fields[1], fields[2]);
        if query.trim().is_empty() {
            return Err(Error::MalformedRecord {
                index,
                reason: "empty query field".into(),
            });
        }
        let entry = by_query.entry(query.to_string()).or_insert_with(|| {
            order.push(query.to_string());
            (Vec::new(), Vec::new())
        });
        if !entry.0.iter().any(|p| p == positive) {
            entry.0.push(positive.to_string());
        }
        entry.1.push(negative.to_string());
    }

    let mut records = Vec::with_capacity(order.len());
    for (index, query) in order.iter().enumerate() {
        let (positives, negatives) = by_query.remove(query).expect("query collected above");
        records.push(RawQueryRecord::new(
            query.clone(),
            positives,
            negatives,
            format!("r{index:06}"),
        )?);
    }
    Ok(records)
}

/// Build probe instances with exactly four hard negatives per query.
///
/// Records with at least four usable negatives contribute a four-element
/// subset sampled without replacement; records with one to three negatives
/// are oversampled with replacement; records with no usable negatives are
/// dropped and counted in `removed_count`. Negatives whose text equals the
/// positive passage are never usable.
pub fn build_probe_instances(
    records: &[RawQueryRecord],
    seed: u64,
) -> (Vec<ProbeInstance>, usize) {
    let mut instances = Vec::with_capacity(records.len());
    let mut removed_count = 0usize;

    for record in records {
        let positive = &record.positive_passages[0];
        let pool: Vec<&String> = record
            .hard_negative_passages
            .iter()
            .filter(|n| *n != positive)
            .collect();
        if pool.is_empty() {
            removed_count += 1;
            continue;
        }

        let mut rng = sub_rng("instances", seed, &record.source_id);
        let negatives: Vec<String> = if pool.len() >= NEGATIVES_PER_INSTANCE {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            idx[..NEGATIVES_PER_INSTANCE]
                .iter()
                .map(|&i| pool[i].clone())
                .collect()
        } else {
            (0..NEGATIVES_PER_INSTANCE)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect()
        };

        let instance = ProbeInstance::new(
            record.source_id.clone(),
            record.query_text.clone(),
            positive.clone(),
            negatives,
        )
        .expect("instance invariants hold by construction");
        instances.push(instance);
    }

    (instances, removed_count)
}

/// Deterministically shuffle instances under `seed` and split the first
/// `floor(ratio * n)` into train, the remainder into validation.
pub fn split_train_validation(
    instances: &[ProbeInstance],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut shuffled = instances.to_vec();
    let mut rng = sub_rng("split", seed, "train-validation");
    shuffled.shuffle(&mut rng);

    let cut = (ratio * shuffled.len() as f64).floor() as usize;
    let validation = shuffled.split_off(cut);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test: Vec::new(),
        seed,
        ratio,
    })
}

/// Derive an N-way variant: the first N-1 negatives after a seeded shuffle
/// of the four, with the positive inserted at a seeded uniform position.
pub fn derive_probe_variant(
    instance: &ProbeInstance,
    n: usize,
    seed: u64,
) -> Result<ProbeVariant> {
    if !(2..=5).contains(&n) {
        return Err(Error::Argument(format!(
            "N must lie in 2..=5, got {n}"
        )));
    }
    let mut rng = sub_rng("variant", seed, &format!("{}/{}", instance.instance_id, n));
    let mut negatives = instance.hard_negatives.clone();
    negatives.shuffle(&mut rng);
    negatives.truncate(n - 1);

    let label = rng.random_range(0..n);
    let mut passages = negatives;
    passages.insert(label, instance.positive_passage.clone());

    Ok(ProbeVariant {
        instance_id: instance.instance_id.clone(),
        query_text: instance.query_text.clone(),
        passages,
        label,
        n,
    })
}

/// Write probe instances as JSONL (one instance per line, UTF-8).
pub fn write_instances_jsonl(path: &Path, instances: &[ProbeInstance]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for instance in instances {
        serde_json::to_writer(&mut writer, instance)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read probe instances from JSONL.
pub fn read_instances_jsonl(path: &Path) -> Result<Vec<ProbeInstance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: ProbeInstance =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                index,
                reason: e.to_string(),
            })?;
        if instance.hard_negatives.len() != NEGATIVES_PER_INSTANCE {
            return Err(Error::MalformedRecord {
                index,
                reason: format!(
                    "instance {} has {} negatives, expected {NEGATIVES_PER_INSTANCE}",
                    instance.instance_id,
                    instance.hard_negatives.len()
                ),
            });
        }
        out.push(instance);
    }
    Ok(out)
}

/// Write probe variants as JSONL.
pub fn write_variants_jsonl(path: &Path, variants: &[ProbeVariant]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for variant in variants {
        serde_json::to_writer(&mut writer, variant)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read probe variants from JSONL.
pub fn read_variants_jsonl(path: &Path) -> Result<Vec<ProbeVariant>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let variant: ProbeVariant =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                index,
                reason: e.to_string(),
            })?;
        if variant.label >= variant.n || variant.passages.len() != variant.n {
            return Err(Error::MalformedRecord {
                index,
                reason: format!(
                    "variant {} is inconsistent (n={}, {} passages, label {})",
                    variant.instance_id,
                    variant.n,
                    variant.passages.len(),
                    variant.label
                ),
            });
        }
        out.push(variant);
    }
    Ok(out)
}
