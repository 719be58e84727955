use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde_json::json;

use steerlab::attribution::{
    mean_coefficients, neuron_extremes, write_accuracy_histogram, write_neuron_extremes, write_promotion_scatter,
    write_report_csv, ComponentReport, PromotionConfig,
};
use steerlab::engine::{TraceExport, Capture, ForwardOptions};
use steerlab::harness::{
    read_json, write_json, OverlapRow, OverlapTable, Report, RunRecord, ALPHA_FILE, F1_FILE, OVERLAP_FILE,
    STEERING_FILE, SWEEP_FILE,
};
use steerlab::pipeline::{
    arith_suite, attribute_arith, attribute_paren, f1_distribution, paren_suite, patch_task, rank_arith, rank_paren,
    select_components, steer as run_steer, task_sets, AlphaChoice, ComponentSelection,
};
use steerlab::ranking::{overlap as overlap_of, Metric, RankedList};
use steerlab::steering::{alpha_grid, search_alpha, sweep_k, SteeringOutcome, DEFAULT_K_GRID};
use steerlab::tasks::{gen_dataset, Dataset, Split, TaskId};
use steerlab::weights::{checksum_manifest, load_bundle, Manifest, MANIFEST_FILE};
use steerlab::{Error, Model, Result, Tokenizer};

use crate::Global;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Bundle { .. } | Error::Csv(_) => 4,
        Error::Dimension(_)
        | Error::Validation { .. }
        | Error::Token(_)
        | Error::Length { .. }
        | Error::Component(_)
        | Error::Index(_)
        | Error::Json(_) => 3,
    }
}

fn bundle_dir(g: &Global) -> Result<&Path> {
    g.bundle
        .as_deref()
        .ok_or_else(|| Error::Config("--bundle is required for this command".into()))
}

fn out_dir(g: &Global) -> Result<&Path> {
    fs::create_dir_all(&g.out)?;
    Ok(&g.out)
}

/// Loads the model and tokenizer, checking tensor hashes against the stored
/// manifest when one is present.
fn load(g: &Global) -> Result<(Model, Tokenizer, String)> {
    let dir = bundle_dir(g)?;
    let (_, weights) = load_bundle(dir)?;
    let tok = Tokenizer::from_bundle(dir)?;
    let computed = checksum_manifest(dir)?;
    let stored = dir.join(MANIFEST_FILE);
    if stored.exists() {
        let diff = Manifest::read(&stored)?.differences(&computed);
        if let Some(name) = diff.first() {
            return Err(Error::Validation {
                tensor: name.clone(),
                message: "checksum differs from manifest.json".into(),
            });
        }
    }
    Ok((Model::new(weights), tok, computed.bundle_hash()))
}

fn tokenizer(g: &Global) -> Result<Tokenizer> {
    Tokenizer::from_bundle(bundle_dir(g)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskFamily {
    Paren,
    Arith,
}

impl TaskFamily {
    fn name(self) -> &'static str {
        match self {
            TaskFamily::Paren => "paren",
            TaskFamily::Arith => "arith",
        }
    }
}

/// Generated datasets, or the JSON-lines files in `data` when given.
fn datasets(family: TaskFamily, data: Option<&Path>, seed: u64, tok: &Tokenizer) -> Result<Vec<Dataset>> {
    let tasks = match family {
        TaskFamily::Paren => TaskId::all_paren(),
        TaskFamily::Arith => TaskId::all_arith(),
    };
    match data {
        None => match family {
            TaskFamily::Paren => paren_suite(tok, seed),
            TaskFamily::Arith => arith_suite(tok, seed),
        },
        Some(dir) => tasks
            .iter()
            .map(|t| {
                let path = dir.join(format!("{t}.jsonl"));
                let file = File::open(&path)
                    .map_err(|_| Error::Config(format!("missing dataset file {}", path.display())))?;
                Dataset::read_jsonl(BufReader::new(file))
            })
            .collect(),
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn finish(dir: &Path, mut run: RunRecord, artifacts: &[&str]) -> Result<()> {
    for a in artifacts {
        run.add_artifact(*a);
    }
    run.save(dir)?;
    println!("run {} written to {}", run.run_id, dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// `all`, `paren`, `arith`, or one task name such as `two-paren`.
    #[arg(long, default_value = "all")]
    pub task: String,
}

pub fn gen_data(g: &Global, a: GenDataArgs) -> Result<()> {
    let tok = tokenizer(g)?;
    let tasks: Vec<TaskId> = match a.task.as_str() {
        "all" => TaskId::all_paren().into_iter().chain(TaskId::all_arith()).collect(),
        "paren" => TaskId::all_paren().to_vec(),
        "arith" => TaskId::all_arith().to_vec(),
        other => vec![other.parse()?],
    };
    let dir = out_dir(g)?;
    let mut names = Vec::new();
    for t in tasks {
        let d = gen_dataset(t, g.seed, &tok)?;
        let name = format!("{t}.jsonl");
        let mut w = writer(&dir.join(&name))?;
        d.write_jsonl(&mut w)?;
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| d.split(s).count()).collect();
        println!("{name}: train {} dev {} test {}", counts[0], counts[1], counts[2]);
        names.push(name);
    }
    let run = RunRecord::new("gen-data", None, json!({"seed": g.seed, "task": a.task}));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    finish(dir, run, &refs)
}

#[derive(Args, Debug)]
pub struct PromotionArgs {
    /// Promotion threshold τ.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f32,
    /// Accuracy a sub-task needs to count towards generalizability.
    #[arg(long, default_value_t = 0.7)]
    pub accuracy_threshold: f64,
    /// Top/bottom depth of the neuron prefilter.
    #[arg(long, default_value_t = 50)]
    pub prefilter_k: usize,
}

impl PromotionArgs {
    fn config(&self) -> PromotionConfig {
        PromotionConfig {
            tau: self.tau,
            accuracy_threshold: self.accuracy_threshold,
            prefilter_k: self.prefilter_k,
        }
    }
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long, value_enum, default_value = "paren")]
    pub tasks: TaskFamily,
    /// Directory of JSON-lines datasets from `gen-data`; generated from the
    /// seed when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score attention heads only.
    #[arg(long)]
    pub no_neurons: bool,
    /// Neurons listed in neuron_extremes.csv (top of the F1 ranking).
    #[arg(long, default_value_t = 10)]
    pub inspect: usize,
    #[command(flatten)]
    pub promotion: PromotionArgs,
}

fn attribution_reports(
    g: &Global,
    model: &Model,
    tok: &Tokenizer,
    family: TaskFamily,
    data: Option<&Path>,
    config: &PromotionConfig,
    with_neurons: bool,
) -> Result<Vec<ComponentReport>> {
    let sets = datasets(family, data, g.seed, tok)?;
    match family {
        TaskFamily::Paren => Ok(attribute_paren(model, tok, &sets, config, g.seed, with_neurons)?.0.reports),
        TaskFamily::Arith => attribute_arith(model, &sets, config),
    }
}

pub fn attribute(g: &Global, a: AttributeArgs) -> Result<()> {
    let (model, tok, hash) = load(g)?;
    let dir = out_dir(g)?;
    let config = a.promotion.config();
    let t0 = Instant::now();
    let sets = datasets(a.tasks, a.data.as_deref(), g.seed, &tok)?;
    let mut artifacts = vec!["reports.json", "components.csv", "promotion_scatter.csv"];
    let reports = match a.tasks {
        TaskFamily::Paren => {
            let (attr, acts) = attribute_paren(&model, &tok, &sets, &config, g.seed, !a.no_neurons)?;
            write_json(&dir.join("model_accuracy.json"), &attr.model_accuracy)?;
            write_accuracy_histogram(writer(&dir.join("accuracy_histogram.csv"))?, &attr.reports)?;
            artifacts.extend(["model_accuracy.json", "accuracy_histogram.csv"]);
            let (_, neurons) = rank_paren(&attr.reports, Metric::F1)?;
            let inspect = neurons.top(a.inspect.min(neurons.len()))?;
            let means = mean_coefficients(&acts, &inspect)?;
            let extremes = inspect
                .iter()
                .zip(means)
                .map(|(c, m)| neuron_extremes(&model.weights, c.layer(), c.index(), 20, m))
                .collect::<Result<Vec<_>>>()?;
            write_neuron_extremes(writer(&dir.join("neuron_extremes.csv"))?, &extremes, Some(&tok))?;
            artifacts.push("neuron_extremes.csv");
            println!(
                "{} heads, {} of {} neurons kept by the prefilter",
                model.config().n_attention_heads(),
                attr.prefiltered_neurons,
                attr.total_neurons
            );
            attr.reports
        }
        TaskFamily::Arith => attribute_arith(&model, &sets, &config)?,
    };
    write_json(&dir.join("reports.json"), &reports)?;
    write_report_csv(writer(&dir.join("components.csv"))?, &reports)?;
    write_promotion_scatter(writer(&dir.join("promotion_scatter.csv"))?, &reports)?;
    let mut run = RunRecord::new(
        "attribute",
        Some(hash),
        json!({"seed": g.seed, "tasks": a.tasks.name(), "promotion": config, "neurons": !a.no_neurons}),
    );
    run.time("attribute", t0.elapsed().as_secs_f64());
    finish(dir, run, &artifacts)
}

#[derive(Args, Debug)]
pub struct RankArgs {
    /// reports.json written by `attribute`.
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long, default_value = "f1")]
    pub metric: String,
    #[arg(long, value_enum, default_value = "paren")]
    pub tasks: TaskFamily,
    /// Top-k for the F1 distribution export.
    #[arg(long, default_value_t = 10)]
    pub f1_top: usize,
}

pub fn rank(g: &Global, a: RankArgs) -> Result<()> {
    let reports: Vec<ComponentReport> =
        read_json(&a.reports).map_err(|e| Error::Config(format!("cannot read {}: {e}", a.reports.display())))?;
    let dir = out_dir(g)?;
    let metric: Metric = a.metric.parse()?;
    let mut artifacts = vec!["ranking_heads.json"];
    match a.tasks {
        TaskFamily::Paren => {
            let (heads, neurons) = rank_paren(&reports, metric)?;
            heads.save(dir.join("ranking_heads.json"))?;
            neurons.save(dir.join("ranking_neurons.json"))?;
            let dist = f1_distribution(&reports, &heads, a.f1_top.min(heads.len()))?;
            write_json(&dir.join(F1_FILE), &dist)?;
            artifacts.extend(["ranking_neurons.json", F1_FILE]);
            print_top(&heads, 10);
        }
        TaskFamily::Arith => {
            let heads = rank_arith(&reports);
            heads.save(dir.join("ranking_heads.json"))?;
            print_top(&heads, 10);
        }
    }
    let run = RunRecord::new(
        "rank",
        None,
        json!({"reports": a.reports, "metric": metric.to_string(), "tasks": a.tasks.name()}),
    );
    finish(dir, run, &artifacts)
}

fn print_top(list: &RankedList, k: usize) {
    for e in list.entries.iter().take(k) {
        println!("{:<8} generalizability {} score {:.4}", e.component.to_string(), e.generalizability, e.score);
    }
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[arg(long, default_value = "f1")]
    pub rank_metric: String,
    #[arg(long, default_value = "heads")]
    pub component: String,
    #[arg(long, default_value_t = 60)]
    pub k: usize,
    /// A multiplier, or `search` to pick one on the dev splits.
    #[arg(long, default_value = "search")]
    pub alpha: String,
    #[arg(long, value_enum, default_value = "paren")]
    pub tasks: TaskFamily,
    /// Directory with ranking_heads.json / ranking_neurons.json; attribution
    /// is recomputed when omitted.
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub promotion: PromotionArgs,
}

struct Rankings {
    heads: RankedList,
    neurons: RankedList,
}

fn rankings(
    g: &Global,
    model: &Model,
    tok: &Tokenizer,
    family: TaskFamily,
    from: Option<&Path>,
    data: Option<&Path>,
    metric: Metric,
    selection: ComponentSelection,
    promotion: &PromotionConfig,
) -> Result<Rankings> {
    if let Some(dir) = from {
        let heads = RankedList::load(dir.join("ranking_heads.json"))
            .map_err(|e| Error::Config(format!("cannot read rankings in {}: {e}", dir.display())))?;
        let neurons_path = dir.join("ranking_neurons.json");
        let neurons = if neurons_path.exists() {
            RankedList::load(neurons_path)?
        } else {
            RankedList { criterion: heads.criterion, entries: Vec::new() }
        };
        return Ok(Rankings { heads, neurons });
    }
    let reports = attribution_reports(g, model, tok, family, data, promotion, selection.neurons())?;
    match family {
        TaskFamily::Paren => {
            let (heads, neurons) = rank_paren(&reports, metric)?;
            Ok(Rankings { heads, neurons })
        }
        TaskFamily::Arith => {
            let heads = rank_arith(&reports);
            Ok(Rankings { neurons: RankedList { criterion: heads.criterion, entries: Vec::new() }, heads })
        }
    }
}

fn write_accuracy_csv(path: &Path, k: usize, alpha: f32, outcome: &SteeringOutcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer(path)?);
    w.write_record(["task", "k", "alpha", "baseline_accuracy", "steered_accuracy", "steered_correct", "total"])?;
    for (b, s) in outcome.baseline.iter().zip(&outcome.steered) {
        w.write_record([
            b.task.to_string(),
            k.to_string(),
            format!("{alpha:.1}"),
            format!("{:.6}", b.accuracy),
            format!("{:.6}", s.accuracy),
            s.correct.to_string(),
            s.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn steer(g: &Global, a: SteerArgs) -> Result<()> {
    let (model, tok, hash) = load(g)?;
    let dir = out_dir(g)?;
    let metric: Metric = a.rank_metric.parse()?;
    let selection: ComponentSelection = a.component.parse()?;
    let alpha: AlphaChoice = a.alpha.parse()?;
    let promotion = a.promotion.config();
    let t0 = Instant::now();
    let r = rankings(g, &model, &tok, a.tasks, a.ranking.as_deref(), a.data.as_deref(), metric, selection, &promotion)?;
    let t_rank = t0.elapsed().as_secs_f64();
    let components = select_components(&r.heads, &r.neurons, selection, a.k)?;
    let sets = datasets(a.tasks, a.data.as_deref(), g.seed, &tok)?;
    let t1 = Instant::now();
    let result = run_steer(
        &model,
        &components,
        alpha,
        &alpha_grid(),
        &task_sets(&sets, Split::Dev),
        &task_sets(&sets, Split::Test),
    )?;
    write_json(&dir.join("plan.json"), &result.outcome.plan)?;
    write_json(&dir.join(STEERING_FILE), &result.outcome)?;
    let mut artifacts = vec!["plan.json", STEERING_FILE, "accuracy.csv"];
    if let Some(search) = &result.alpha_search {
        write_json(&dir.join(ALPHA_FILE), search)?;
        artifacts.push(ALPHA_FILE);
    } else if dir.join(ALPHA_FILE).exists() {
        fs::remove_file(dir.join(ALPHA_FILE))?;
    }
    write_accuracy_csv(&dir.join("accuracy.csv"), a.k, result.alpha, &result.outcome)?;
    for (b, s) in result.outcome.baseline.iter().zip(&result.outcome.steered) {
        println!(
            "{:<12} {:>7.2}% -> {:>7.2}%",
            b.task.to_string(),
            100.0 * b.accuracy,
            100.0 * s.accuracy
        );
    }
    println!("alpha {:.1}", result.alpha);
    let mut run = RunRecord::new(
        "steer",
        Some(hash),
        json!({
            "seed": g.seed, "metric": metric.to_string(), "component": selection.to_string(), "k": a.k,
            "alpha": a.alpha, "tasks": a.tasks.name(), "promotion": promotion, "ranking": a.ranking,
        }),
    );
    run.time("rank", t_rank);
    run.time("steer", t1.elapsed().as_secs_f64());
    finish(dir, run, &artifacts)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, default_value = "f1")]
    pub rank_metric: String,
    #[arg(long, default_value = "heads")]
    pub component: String,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_GRID.to_vec())]
    pub ks: Vec<usize>,
    /// A multiplier, or `search` to pick one on dev at the largest k.
    #[arg(long, default_value = "search")]
    pub alpha: String,
    #[arg(long, value_enum, default_value = "paren")]
    pub tasks: TaskFamily,
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub promotion: PromotionArgs,
}

pub fn sweep(g: &Global, a: SweepArgs) -> Result<()> {
    let (model, tok, hash) = load(g)?;
    let dir = out_dir(g)?;
    let metric: Metric = a.rank_metric.parse()?;
    let selection: ComponentSelection = a.component.parse()?;
    let promotion = a.promotion.config();
    let r = rankings(g, &model, &tok, a.tasks, a.ranking.as_deref(), a.data.as_deref(), metric, selection, &promotion)?;
    let sets = datasets(a.tasks, a.data.as_deref(), g.seed, &tok)?;
    let alpha = match a.alpha.parse::<AlphaChoice>()? {
        AlphaChoice::Fixed(x) => {
            if dir.join(ALPHA_FILE).exists() {
                fs::remove_file(dir.join(ALPHA_FILE))?;
            }
            x
        }
        AlphaChoice::Search => {
            let k_max = a.ks.iter().copied().max().unwrap_or(0);
            let comps = select_components(&r.heads, &r.neurons, selection, k_max)?;
            let res = search_alpha(&model, &comps, &task_sets(&sets, Split::Dev), &alpha_grid())?;
            write_json(&dir.join(ALPHA_FILE), &res)?;
            res.selected
        }
    };
    let points = sweep_k(&model, &a.ks, alpha, &task_sets(&sets, Split::Test), |k| {
        select_components(&r.heads, &r.neurons, selection, k)
    })?;
    write_json(&dir.join(SWEEP_FILE), &points)?;
    let mut w = csv::Writer::from_writer(writer(&dir.join("sweep.csv"))?);
    w.write_record(["k", "alpha", "task", "accuracy"])?;
    for p in &points {
        for t in &p.per_task {
            w.write_record([p.k.to_string(), format!("{:.1}", p.alpha), t.task.to_string(), format!("{:.6}", t.accuracy)])?;
        }
    }
    w.flush()?;
    let run = RunRecord::new(
        "sweep",
        Some(hash),
        json!({
            "seed": g.seed, "metric": metric.to_string(), "component": selection.to_string(), "ks": a.ks,
            "alpha": a.alpha, "tasks": a.tasks.name(), "promotion": promotion, "ranking": a.ranking,
        }),
    );
    finish(dir, run, &[SWEEP_FILE, "sweep.csv"])
}

#[derive(Args, Debug)]
pub struct PatchArgs {
    /// Sub-task name, e.g. `one-paren`.
    #[arg(long)]
    pub task: String,
    /// Pairs sampled for the effect table and for faithfulness.
    #[arg(long, default_value_t = 10)]
    pub max_pairs: usize,
    /// Faithfulness a circuit must reach.
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn patch(g: &Global, a: PatchArgs) -> Result<()> {
    let task: TaskId = a.task.parse()?;
    let TaskId::Paren(sub) = task else {
        return Err(Error::Config("patching is defined for the bracket sub-tasks only".into()));
    };
    let (model, tok, hash) = load(g)?;
    let dir = out_dir(g)?;
    let dataset = match a.data.as_deref() {
        Some(_) => datasets(TaskFamily::Paren, a.data.as_deref(), g.seed, &tok)?
            .into_iter()
            .find(|d| d.task == task)
            .ok_or_else(|| Error::Config(format!("no dataset for {task}")))?,
        None => gen_dataset(TaskId::Paren(sub), g.seed, &tok)?,
    };
    let t0 = Instant::now();
    let run_result = patch_task(&model, &tok, &dataset, a.max_pairs, a.threshold)?;
    run_result.table.write_csv(writer(&dir.join("effects.csv"))?)?;
    steerlab::patching::rank_heads_by_effect(std::slice::from_ref(&run_result.table))?.save(dir.join("ranking.json"))?;
    steerlab::patching::write_faithfulness_csv(writer(&dir.join("faithfulness.csv"))?, task, &run_result.searches)?;
    write_json(&dir.join("patch.json"), &run_result)?;
    for s in &run_result.searches {
        match s.smallest_faithful {
            Some(k) => println!("{}: faithful (>= {}) with K = {k}", s.granularity, a.threshold),
            None => println!("{}: no evaluated K reached {}", s.granularity, a.threshold),
        }
    }
    if run_result.train_relaxed || run_result.test_relaxed {
        println!("note: counterfactual logit filter relaxed (no pair satisfied it)");
    }
    let mut run = RunRecord::new(
        "patch",
        Some(hash),
        json!({"seed": g.seed, "task": task.to_string(), "max_pairs": a.max_pairs, "threshold": a.threshold}),
    );
    run.time("patch", t0.elapsed().as_secs_f64());
    finish(dir, run, &["effects.csv", "ranking.json", "faithfulness.csv", "patch.json"])
}

#[derive(Args, Debug)]
pub struct OverlapArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated k values used for both lists.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 20])]
    pub ks: Vec<usize>,
    /// Sub-task label stored with the table.
    #[arg(long, default_value = "")]
    pub task: String,
}

pub fn overlap(g: &Global, a: OverlapArgs) -> Result<()> {
    let load_list = |p: &Path| {
        RankedList::load(p).map_err(|e| Error::Config(format!("cannot read ranking {}: {e}", p.display())))
    };
    let la = load_list(&a.a)?;
    let lb = load_list(&a.b)?;
    let mut rows = Vec::new();
    for &k in &a.ks {
        let o = overlap_of(&la, k, &lb, k)?;
        println!("k={k:<3} overlap {o:.2}");
        rows.push(OverlapRow { k_a: k, k_b: k, overlap: o });
    }
    let dir = out_dir(g)?;
    let table = OverlapTable {
        task: a.task.clone(),
        list_a: a.a.display().to_string(),
        list_b: a.b.display().to_string(),
        rows,
    };
    let path = dir.join(OVERLAP_FILE);
    let mut tables: Vec<OverlapTable> = if path.exists() { read_json(&path)? } else { Vec::new() };
    tables.retain(|t| !(t.task == table.task && t.list_a == table.list_a && t.list_b == table.list_b));
    tables.push(table);
    write_json(&path, &tables)?;
    let mut run = match RunRecord::load(dir) {
        Ok(r) => r,
        Err(_) => RunRecord::new("overlap", None, json!({"a": a.a, "b": a.b, "ks": a.ks})),
    };
    run.add_artifact(OVERLAP_FILE);
    run.save(dir)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directory; defaults to --out.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

pub fn report(g: &Global, a: ReportArgs) -> Result<()> {
    let dir = a.run.unwrap_or_else(|| g.out.clone());
    let report = Report::collect(&dir)?;
    report.write(&dir)?;
    print!("{}", report.render());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

pub fn trace(g: &Global, a: TraceArgs) -> Result<()> {
    let (model, tok, _) = load(g)?;
    let tokens = tok.encode(&a.prompt);
    let t = model.forward(&tokens, &ForwardOptions::capture(Capture::Full))?;
    let text = tokens.iter().map(|&id| tok.token_text(id)).collect::<Result<Vec<_>>>()?;
    let export = TraceExport::from_trace(&t, text, a.top)?;
    let dir = out_dir(g)?;
    write_json(&dir.join("trace.json"), &export)?;
    for (id, logit) in &export.top_logits {
        println!("{:>8} {:>10.4} {:?}", id, logit, tok.token_text(*id)?);
    }
    Ok(())
}
