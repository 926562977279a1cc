//! Labeled token-grid datasets, the retain/forget/learn partition, and
//! deterministic batching.
//!
//! On disk a split is a headerless CSV (`label, v₀, …, v_{T·D−1}`, values
//! printed with 17 significant digits) plus a JSON header describing the grid
//! and the classes it contains.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `seq_len × input_dim` values, row-major.
    pub tokens: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrain,
    Retain,
    Forget,
    Learn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub seq_len: usize,
    pub input_dim: usize,
    pub role: Role,
    pub partition: Partition,
    /// Class id to display name; every example's label is a key.
    pub classes: BTreeMap<usize, String>,
    pub examples: Vec<LabeledExample>,
}

/// A batch of examples stacked as `[B, seq_len, input_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.examples.iter().filter(|e| e.label == class).count()
    }

    /// Examples whose label is in `classes`, relabelled with a new role.
    pub fn filter(&self, classes: &BTreeSet<usize>, role: Role) -> DatasetSplit {
        DatasetSplit {
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            role,
            partition: self.partition,
            classes: self
                .classes
                .iter()
                .filter(|(id, _)| classes.contains(id))
                .map(|(id, n)| (*id, n.clone()))
                .collect(),
            examples: self
                .examples
                .iter()
                .filter(|e| classes.contains(&e.label))
                .cloned()
                .collect(),
        }
    }

    /// Union of two splits over the same grid, `self` first.
    pub fn concat(&self, other: &DatasetSplit, role: Role) -> Result<DatasetSplit> {
        if (self.seq_len, self.input_dim) != (other.seq_len, other.input_dim) {
            return Err(Error::Validation("cannot join splits with different grids".into()));
        }
        let mut classes = self.classes.clone();
        classes.extend(other.classes.iter().map(|(k, v)| (*k, v.clone())));
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(DatasetSplit {
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            role,
            partition: self.partition,
            classes,
            examples,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.seq_len * self.input_dim;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.examples[i].tokens);
            labels.push(self.examples[i].label);
        }
        Batch {
            inputs: Tensor::new(vec![indices.len(), self.seq_len, self.input_dim], data)
                .expect("example grids match the split header"),
            labels,
        }
    }

    fn validate(&self) -> Result<()> {
        let per = self.seq_len * self.input_dim;
        for (i, e) in self.examples.iter().enumerate() {
            if e.tokens.len() != per {
                return Err(Error::Validation(format!(
                    "example {i} has {} values, grid needs {per}",
                    e.tokens.len()
                )));
            }
            if !self.classes.contains_key(&e.label) {
                return Err(Error::Validation(format!(
                    "example {i} has undeclared label {}",
                    e.label
                )));
            }
        }
        Ok(())
    }
}

/// Train and test partitions of the same classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl TrainTest {
    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.train.class_ids()
    }

    fn filter(&self, classes: &BTreeSet<usize>, role: Role) -> TrainTest {
        TrainTest {
            train: self.train.filter(classes, role),
            test: self.test.filter(classes, role),
        }
    }
}

/// Parameters of the prototype-plus-noise generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Id of the first generated class; ids are consecutive from here.
    #[serde(default)]
    pub first_class: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Each class gets a Gaussian prototype grid; examples add Gaussian noise of
/// standard deviation `noise_std`. Prototypes, train noise and test noise use
/// separate streams of the seeded generator.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TrainTest> {
    if cfg.num_classes < 2 {
        return Err(Error::config("data generator needs at least 2 classes"));
    }
    if cfg.per_class_train == 0 || cfg.per_class_test == 0 || cfg.seq_len == 0 || cfg.input_dim == 0
    {
        return Err(Error::config("data generator counts and dimensions must be positive"));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::config("data generator noise_std must be non-negative"));
    }
    let per = cfg.seq_len * cfg.input_dim;
    let ids: Vec<usize> = (cfg.first_class..cfg.first_class + cfg.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Tensor> = ids
        .iter()
        .map(|_| Tensor::randn(&[per], 1.0, &mut rng))
        .collect();
    let classes: BTreeMap<usize, String> =
        ids.iter().map(|&id| (id, format!("class_{id}"))).collect();

    let sample = |stream: u64, count: usize, partition: Partition| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut examples = Vec::with_capacity(ids.len() * count);
        for (&label, proto) in ids.iter().zip(&prototypes) {
            for _ in 0..count {
                let noise = Tensor::randn(&[per], cfg.noise_std, &mut rng);
                let tokens = proto
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(p, n)| p + n)
                    .collect();
                examples.push(LabeledExample { tokens, label });
            }
        }
        DatasetSplit {
            seq_len: cfg.seq_len,
            input_dim: cfg.input_dim,
            role: Role::Pretrain,
            partition,
            classes: classes.clone(),
            examples,
        }
    };
    Ok(TrainTest {
        train: sample(1, cfg.per_class_train, Partition::Train),
        test: sample(2, cfg.per_class_test, Partition::Test),
    })
}

/// The retain / forget / learn partition of a swap task.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapTaskSpec {
    pub retain: TrainTest,
    pub forget: TrainTest,
    pub learn: TrainTest,
    /// Width of the classifier head: one past the largest class id.
    pub class_universe: usize,
}

impl SwapTaskSpec {
    /// Retain and forget training examples: the pretraining data.
    pub fn pretrain_train(&self) -> Result<DatasetSplit> {
        self.retain.train.concat(&self.forget.train, Role::Pretrain)
    }

    pub fn retain_classes(&self) -> BTreeSet<usize> {
        self.retain.class_ids()
    }

    pub fn forget_classes(&self) -> BTreeSet<usize> {
        self.forget.class_ids()
    }

    pub fn learn_classes(&self) -> BTreeSet<usize> {
        self.learn.class_ids()
    }
}

fn overlap_error(a: &str, b: &str, common: BTreeSet<usize>) -> Error {
    Error::Validation(format!(
        "classes {:?} appear in both {a} and {b}",
        common.into_iter().collect::<Vec<_>>()
    ))
}

/// Splits pretraining data into retain and forget sets and takes the learn
/// set from `new_data`, enforcing the partition invariants.
pub fn make_swap_split(
    pretrain_data: &TrainTest,
    new_data: &TrainTest,
    retain_classes: &[usize],
    forget_classes: &[usize],
    learn_classes: &[usize],
) -> Result<SwapTaskSpec> {
    let retain: BTreeSet<usize> = retain_classes.iter().copied().collect();
    let forget: BTreeSet<usize> = forget_classes.iter().copied().collect();
    let learn: BTreeSet<usize> = learn_classes.iter().copied().collect();
    for (name, set) in [("retain", &retain), ("forget", &forget), ("learn", &learn)] {
        if set.is_empty() {
            return Err(Error::Validation(format!("{name} class list is empty")));
        }
    }
    for ((na, a), (nb, b)) in [
        (("retain", &retain), ("forget", &forget)),
        (("retain", &retain), ("learn", &learn)),
        (("forget", &forget), ("learn", &learn)),
    ] {
        let common: BTreeSet<usize> = a.intersection(b).copied().collect();
        if !common.is_empty() {
            return Err(overlap_error(na, nb, common));
        }
    }
    let pretrain_ids = pretrain_data.class_ids();
    let missing: Vec<usize> = retain
        .union(&forget)
        .filter(|c| !pretrain_ids.contains(c))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "retain/forget classes {missing:?} are not pretraining classes"
        )));
    }
    let common: BTreeSet<usize> = learn.intersection(&pretrain_ids).copied().collect();
    if !common.is_empty() {
        return Err(overlap_error("learn", "pretraining data", common));
    }
    let new_ids = new_data.class_ids();
    let absent: Vec<usize> = learn.difference(&new_ids).copied().collect();
    if !absent.is_empty() {
        return Err(Error::Validation(format!(
            "learn classes {absent:?} are missing from the new data"
        )));
    }
    if (pretrain_data.train.seq_len, pretrain_data.train.input_dim)
        != (new_data.train.seq_len, new_data.train.input_dim)
    {
        return Err(Error::Validation(
            "pretraining and new data use different token grids".into(),
        ));
    }
    let class_universe = pretrain_ids.iter().chain(&new_ids).max().copied().unwrap_or(0) + 1;
    Ok(SwapTaskSpec {
        retain: pretrain_data.filter(&retain, Role::Retain),
        forget: pretrain_data.filter(&forget, Role::Forget),
        learn: new_data.filter(&learn, Role::Learn),
        class_universe,
    })
}

/// Seeded permutation of `0..len` cut into batches; the last may be short.
pub fn batch_order(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batch_iter(
    split: &DatasetSplit,
    batch_size: usize,
    epoch_seed: u64,
) -> impl Iterator<Item = Batch> + '_ {
    batch_order(split.len(), batch_size, epoch_seed)
        .into_iter()
        .map(move |idx| split.batch(&idx))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    seq_len: usize,
    input_dim: usize,
    role: Role,
    partition: Partition,
    classes: Vec<HeaderClass>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderClass {
    id: usize,
    name: String,
    count: usize,
}

pub fn save_dataset(split: &DatasetSplit, data_path: &Path, header_path: &Path) -> Result<()> {
    split.validate()?;
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        seq_len: split.seq_len,
        input_dim: split.input_dim,
        role: split.role,
        partition: split.partition,
        classes: split
            .classes
            .iter()
            .map(|(&id, name)| HeaderClass {
                id,
                name: name.clone(),
                count: split.count_of(id),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    fs::write(header_path, json)?;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(data_path)
        .map_err(csv_io)?;
    let mut record = Vec::with_capacity(1 + split.seq_len * split.input_dim);
    for e in &split.examples {
        record.clear();
        record.push(e.label.to_string());
        record.extend(e.tokens.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn load_dataset(data_path: &Path, header_path: &Path) -> Result<DatasetSplit> {
    let header: Header = serde_json::from_slice(&fs::read(header_path)?).map_err(|e| {
        Error::Parse {
            path: header_path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: data_path.to_path_buf(),
        line,
        message,
    };
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(parse_err(
            0,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let per = header.seq_len * header.input_dim;
    let classes: BTreeMap<usize, String> = header
        .classes
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(data_path)
        .map_err(csv_io)?;
    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != per + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", per + 1, record.len()),
            ));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[0])))?;
        if !classes.contains_key(&label) {
            return Err(parse_err(line, format!("label {label} not declared in header")));
        }
        let tokens = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        examples.push(LabeledExample { tokens, label });
    }
    let split = DatasetSplit {
        seq_len: header.seq_len,
        input_dim: header.input_dim,
        role: header.role,
        partition: header.partition,
        classes,
        examples,
    };
    for c in &header.classes {
        let found = split.count_of(c.id);
        if found != c.count {
            return Err(parse_err(
                0,
                format!("class {} declares {} examples, file has {found}", c.id, c.count),
            ));
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests;
