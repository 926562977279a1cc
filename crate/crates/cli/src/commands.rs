use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kswap::data::{
    generate_synthetic, load_dataset, make_swap_split, save_dataset, DatasetSplit, Role, SwapTaskSpec,
    SyntheticConfig, TrainTest,
};
use kswap::diagnostics::{
    delta_file_name, depth_center_of_mass, export_reports, file_label, layer_l2_delta, run_diagnostics,
    write_delta_csv,
};
use kswap::lora::AdapterSet;
use kswap::model::{load_checkpoint, save_checkpoint, snapshot_weights, Checkpoint, ModelConfig, TransformerClassifier};
use kswap::phases::{
    derive_seed, evaluate, metrics_csv, metrics_row, pretrain, run_sequence, SequenceOptions, SequencePlan,
    StageKind, StageRecord, METRICS_HEADER,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::failure::Failure;

pub const SPLIT_FILES: [&str; 4] = ["pretrain_train", "pretrain_test", "new_train", "new_test"];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", path.display())))
}

fn generate(cfg: &ExperimentConfig) -> Result<(TrainTest, TrainTest), Failure> {
    let g = cfg
        .data
        .generator
        .ok_or_else(|| Failure::config("data.generator: not set"))?;
    let base = SyntheticConfig {
        num_classes: g.pretrain_classes,
        first_class: 0,
        per_class_train: g.per_class_train,
        per_class_test: g.per_class_test,
        seq_len: g.seq_len,
        input_dim: g.input_dim,
        noise_std: g.noise_std,
        seed: cfg.seeds.data,
    };
    let pre = generate_synthetic(&base).map_err(|e| Failure::config(format!("data.generator: {e}")))?;
    let mut new = generate_synthetic(&SyntheticConfig {
        num_classes: g.new_classes,
        first_class: g.pretrain_classes,
        seed: derive_seed(cfg.seeds.data, &[1]),
        ..base
    })
    .map_err(|e| Failure::config(format!("data.generator: {e}")))?;
    new.train.role = Role::Learn;
    new.test.role = Role::Learn;
    Ok((pre, new))
}

fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.csv")), dir.join(format!("{name}.json")))
}

fn load_split(dir: &Path, name: &str) -> Result<DatasetSplit, Failure> {
    let (data, header) = split_paths(dir, name);
    load_dataset(&data, &header).map_err(|e| match e {
        kswap::Error::Io(io) => Failure::input(format!("cannot read dataset {}: {io}", data.display())),
        other => Failure::input(other.to_string()),
    })
}

fn load_task(cfg: &ExperimentConfig) -> Result<SwapTaskSpec, Failure> {
    let (pre, new) = match &cfg.data.files {
        Some(dir) => (
            TrainTest {
                train: load_split(dir, SPLIT_FILES[0])?,
                test: load_split(dir, SPLIT_FILES[1])?,
            },
            TrainTest {
                train: load_split(dir, SPLIT_FILES[2])?,
                test: load_split(dir, SPLIT_FILES[3])?,
            },
        ),
        None => generate(cfg)?,
    };
    let d = &cfg.data;
    let task = make_swap_split(&pre, &new, &d.retain, &d.forget, &d.learn)
        .map_err(|e| Failure::config(format!("data: {e}")))?;
    check_grid(&cfg.model, &pre.train)?;
    Ok(task)
}

fn check_grid(model: &ModelConfig, split: &DatasetSplit) -> Result<(), Failure> {
    if (split.seq_len, split.input_dim) != (model.seq_len, model.input_dim) {
        return Err(Failure::config(format!(
            "model: token grid {}x{} does not match the data's {}x{}",
            model.seq_len, model.input_dim, split.seq_len, split.input_dim
        )));
    }
    Ok(())
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..*a } == ModelConfig { seed: 0, ..*b }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| match e {
        kswap::Error::Io(io) => Failure::input(format!("cannot read checkpoint {}: {io}", path.display())),
        other => Failure::input(other.to_string()),
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let (pre, new) = generate(cfg)?;
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    for (name, split) in SPLIT_FILES.iter().zip([&pre.train, &pre.test, &new.train, &new.test]) {
        let (data, header) = split_paths(&dir, name);
        save_dataset(split, &data, &header)?;
        let classes = split.class_ids();
        println!(
            "{name}: {} examples, {} classes ({}..={})",
            split.len(),
            classes.len(),
            classes.first().unwrap_or(&0),
            classes.last().unwrap_or(&0)
        );
    }
    Ok(())
}

pub fn pretrain_cmd(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let task = load_task(cfg)?;
    let model = TransformerClassifier::new(cfg.model)?;
    let m0 = pretrain(model, &task, &cfg.pretrain, cfg.seeds.epochs)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.base_checkpoint();
    save_checkpoint(&path, &m0, None, "Start")?;
    let stored = read_checkpoint(&path)?;
    let m = evaluate(&stored.model, None, &task)?;
    let csv = format!("{METRICS_HEADER}\n{}\n", metrics_row("Start", &m));
    write(&cfg.output_dir.join("start.csv"), &csv)?;
    print!("{csv}");
    let gate = cfg.pretrain.accuracy_gate;
    if m.acc_retain < gate || m.acc_forget < gate {
        return Err(Failure::gate(format!(
            "pretraining gate not met: acc_r {} and acc_f {} must both reach {gate}",
            m.acc_retain, m.acc_forget
        )));
    }
    Ok(())
}

/// Directory name of a plan's outputs, e.g. `L-F-L`.
pub fn plan_dir_name(plan: &SequencePlan) -> String {
    plan.stages
        .iter()
        .map(|s| s.kind.symbol().to_string())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Serialize)]
struct CenterOfMass {
    from: String,
    to: String,
    kind: Option<StageKind>,
    /// `None` when the stage left every layer unchanged.
    value: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Rebound {
    stage: String,
    acc_f_before: f64,
    acc_f_after: f64,
    delta: f64,
}

#[derive(Debug, Serialize)]
struct PlanSummary {
    plan: String,
    rows: Vec<String>,
    center_of_mass: Vec<CenterOfMass>,
    rebounds: Vec<Rebound>,
}

fn summarize(plan: &SequencePlan, records: &[StageRecord]) -> Result<PlanSummary, Failure> {
    let diag = run_diagnostics(records)?;
    let center_of_mass = diag
        .deltas
        .iter()
        .zip(&records[1..])
        .map(|(d, r)| CenterOfMass {
            from: d.from_stage.clone(),
            to: d.to_stage.clone(),
            kind: r.kind,
            value: depth_center_of_mass(d).ok(),
        })
        .collect();
    // acc_f change across each learning stage that directly follows a forgetting stage
    let rebounds = records
        .windows(2)
        .filter(|w| w[0].kind == Some(StageKind::Forget) && w[1].kind == Some(StageKind::Learn))
        .map(|w| Rebound {
            stage: w[1].label.clone(),
            acc_f_before: w[0].metrics.acc_forget,
            acc_f_after: w[1].metrics.acc_forget,
            delta: w[1].metrics.acc_forget - w[0].metrics.acc_forget,
        })
        .collect();
    Ok(PlanSummary {
        plan: plan.to_string(),
        rows: records.iter().map(|r| r.label.clone()).collect(),
        center_of_mass,
        rebounds,
    })
}

fn trace_csv(records: &[StageRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("stage,epoch,step,retain,learn,forget_ce,forget,regularizer,total\n");
    for r in records {
        for t in &r.trace {
            let m = &t.terms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                t.epoch,
                t.step,
                m.retain,
                opt(m.learn),
                opt(m.forget_ce),
                opt(m.forget),
                m.regularizer,
                m.total
            );
        }
    }
    out
}

pub fn run_cmd(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let plans = cfg.plans()?;
    let base = read_checkpoint(&cfg.base_checkpoint())?;
    if !same_architecture(base.model.config(), &cfg.model) {
        return Err(Failure::mismatch(format!(
            "{} was built for a different model config than this experiment",
            cfg.base_checkpoint().display()
        )));
    }
    let task = load_task(cfg)?;
    let mut m0 = base.model;
    if let Some(mut set) = base.adapters {
        set.merge(&mut m0)?;
    }
    create_dir(&cfg.output_dir)?;
    let mut table: Vec<StageRecord> = Vec::new();
    let mut summaries = Vec::new();
    for plan in &plans {
        let dir = cfg.output_dir.join(plan_dir_name(plan));
        eprintln!("running {plan} into {}", dir.display());
        let mut adapters = AdapterSet::attach(&m0, cfg.lora.rank, cfg.seeds.lora)?;
        adapters.train_biases = cfg.lora.train_biases;
        adapters.norm = cfg.lora.norm;
        let opts = SequenceOptions {
            epoch_seed: cfg.seeds.epochs,
            boundary: cfg.boundary,
            checkpoint_dir: Some(dir.clone()),
        };
        let out = run_sequence(&m0, adapters, plan, &task, &cfg.phases, &opts)?;
        write(&dir.join("metrics.csv"), metrics_csv(&out.records))?;
        write(&dir.join("trace.csv"), trace_csv(&out.records))?;
        export_reports(&out.records, &dir.join("diagnostics"))?;
        summaries.push(summarize(plan, &out.records)?);
        for r in out.records {
            if !table.iter().any(|t| t.label == r.label) {
                table.push(r);
            }
        }
    }
    let csv = metrics_csv(&table);
    write(&cfg.output_dir.join("metrics.csv"), &csv)?;
    let mut json = serde_json::to_string_pretty(&serde_json::json!({ "plans": summaries }))
        .map_err(|e| Failure::input(e.to_string()))?;
    json.push('\n');
    write(&cfg.output_dir.join("summary.json"), json)?;
    print!("{csv}");
    Ok(())
}

pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(), Failure> {
    let ck = read_checkpoint(checkpoint)?;
    let task = load_task(cfg)?;
    if task.class_universe > ck.model.config().num_classes {
        return Err(Failure::mismatch(format!(
            "{} has {} outputs but the task spans {} classes",
            checkpoint.display(),
            ck.model.config().num_classes,
            task.class_universe
        )));
    }
    let m = evaluate(&ck.model, ck.adapters.as_ref(), &task)?;
    let csv = format!("{METRICS_HEADER}\n{}\n", metrics_row(&ck.stage_label, &m));
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join(format!("eval_{}.csv", file_label(&ck.stage_label))), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn diagnose_cmd(a: &Path, b: &Path, out_dir: &Path) -> Result<(), Failure> {
    let ca = read_checkpoint(a)?;
    let cb = read_checkpoint(b)?;
    if !same_architecture(ca.model.config(), cb.model.config()) {
        return Err(Failure::mismatch(format!(
            "{} and {} use different model configs",
            a.display(),
            b.display()
        )));
    }
    let sa = snapshot_weights(&ca.model, ca.adapters.as_ref(), &ca.stage_label)?;
    let sb = snapshot_weights(&cb.model, cb.adapters.as_ref(), &cb.stage_label)?;
    let report = layer_l2_delta(&sa, &sb)?;
    create_dir(out_dir)?;
    let path = out_dir.join(delta_file_name(&report));
    write_delta_csv(&report, &path)?;
    print!("{}", fs::read_to_string(&path)?);
    if let Ok(com) = depth_center_of_mass(&report) {
        eprintln!("center of mass {com:.6}");
    }
    Ok(())
}
