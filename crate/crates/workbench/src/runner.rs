//! Run orchestration: applies CLI overrides, content-addresses the output
//! directory by config hash, executes one stage, and persists checkpoints,
//! reports, and the manifest.
//!
//! Layout: `<out_dir>/<config-hash>/{manifest.json, results.csv,
//! results.jsonl, checkpoints/, plots/}`. A rerun of an unchanged config
//! rewrites byte-identical files. Independent ratio sweeps fan out across
//! `--jobs` worker threads; results are committed in task order by a single
//! writer, so parallel runs stay byte-identical too.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rst_core::{
    evaluate, feature_distance, finetune_ticket, r2s_evaluate, search_rst, search_rtt,
    train_dense, transfer_matrix, AdaptiveAttack, FinetuneMode, Network, Prng,
    R2sMode, R2sPolicy, SearchOutcome, TicketCheckpoint, TrainMode,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, Dataset, DATA_DIR_ENV};
use crate::error::{Result, WorkbenchError};
use crate::report::{eps_field, ratio_field, Row};
use crate::{candidates, ckpt_io, report, svg};

// Stream tags for stage-level PRNG derivation under the run seed.
const STREAM_SEARCH: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Search,
    Train,
    Finetune,
    Eval,
    Transfer,
    R2s,
    Distance,
    Plot,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Transfer => "transfer",
            Stage::R2s => "r2s",
            Stage::Distance => "distance",
            Stage::Plot => "plot",
        }
    }
}

/// Targeted command-line overrides, applied to the config before hashing so
/// the run directory reflects what actually ran.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub ratios: Vec<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub attack: Option<String>,
    pub data_root: Option<String>,
    pub out_dir: Option<String>,
    pub jobs: usize,
}

pub fn apply_overrides(config: &mut RunConfig, ov: &Overrides) -> Result<()> {
    if !ov.ratios.is_empty() {
        match &mut config.search {
            Some(s) => s.ratios = ov.ratios.clone(),
            None => {
                return Err(WorkbenchError::Config(
                    "--ratio override needs a [search] section".into(),
                ))
            }
        }
    }
    if let Some(eps) = ov.eps {
        config.attack.eps = eps;
        config.attack.alpha = None;
    }
    if let Some(seed) = ov.seed {
        config.run.seed = seed;
    }
    if let Some(name) = &ov.attack {
        let (norm, rest) = match name.strip_prefix("l2") {
            Some(rest) => ("l2", rest.trim_start_matches('-')),
            None => ("linf", name.as_str()),
        };
        config.attack.norm = norm.into();
        if rest == "fgsm" {
            config.attack.kind = "fgsm".into();
            config.attack.steps = 1;
        } else if rest == "fgsm_rs" {
            config.attack.kind = "fgsm_rs".into();
            config.attack.steps = 1;
        } else if let Some(steps) = rest.strip_prefix("pgd").and_then(|s| s.parse().ok()) {
            config.attack.kind = "pgd".into();
            config.attack.steps = steps;
        } else {
            return Err(WorkbenchError::Config(format!(
                "unknown --attack {name:?} (fgsm, fgsm_rs, pgdN, l2pgdN)"
            )));
        }
    }
    if let Some(root) = &ov.data_root {
        config.run.data_root = Some(root.clone());
    }
    if let Some(dir) = &ov.out_dir {
        config.run.out_dir = dir.clone();
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub hash: String,
    pub rows: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seed: u64,
    stage: &'a str,
    version: &'a str,
    config_toml: &'a str,
}

fn data_root(config: &RunConfig) -> PathBuf {
    if let Some(root) = &config.run.data_root {
        return PathBuf::from(root);
    }
    if let Ok(root) = std::env::var(DATA_DIR_ENV) {
        return PathBuf::from(root);
    }
    PathBuf::from("data")
}

/// Shared per-run context handed to stage implementations.
struct Ctx {
    config: RunConfig,
    hash: String,
    dir: PathBuf,
    dataset: Option<Dataset>,
}

impl Ctx {
    fn dataset(&self) -> Result<&Dataset> {
        self.dataset
            .as_ref()
            .ok_or_else(|| WorkbenchError::Config("stage needs a dataset".into()))
    }

    fn base_row(&self, stage: Stage) -> Row {
        Row {
            config_hash: self.hash.clone(),
            stage: stage.name().into(),
            dataset: self.config.dataset.name.clone(),
            split: String::new(),
            network: String::new(),
            init: self.config.network.init.clone(),
            seed: self.config.run.seed,
            provenance: String::new(),
            ratio: String::new(),
            pattern: String::new(),
            attack: String::new(),
            attacker: String::new(),
            defender: String::new(),
            adaptive: String::new(),
            estimator: String::new(),
            eps: String::new(),
            n: 0,
            metric: String::new(),
            value: 0.0,
        }
    }

    /// Natural + robust evaluation rows for one model on the test split.
    fn eval_rows(
        &self,
        stage: Stage,
        net: &Network,
        ckpt: &TicketCheckpoint,
        extra_metrics: &[(&str, f64)],
    ) -> Result<Vec<Row>> {
        let data = self.dataset()?;
        let attack = self.config.attack.to_attack().map_err(stage_err(stage))?;
        let report = evaluate(net, &data.test, &[attack], self.config.run.seed)
            .map_err(WorkbenchError::core("evaluate"))?;
        let mut rows = Vec::new();
        let mut base = self.base_row(stage);
        base.split = "test".into();
        base.network = net.id();
        base.provenance = ckpt.provenance.name().into();
        base.ratio = ratio_field(ckpt.ratio);
        base.pattern = ckpt.pattern.name().into();
        base.n = report.n;

        let mut nat = base.clone();
        nat.metric = "natural_acc".into();
        nat.value = report.natural_acc;
        rows.push(nat);

        let robust = &report.robust[0];
        let mut rob = base.clone();
        rob.attack = robust.attack.label();
        rob.eps = eps_field(robust.attack.epsilon as f64);
        rob.metric = "robust_acc".into();
        rob.value = robust.acc;
        rows.push(rob);

        for (metric, value) in extra_metrics {
            let mut row = base.clone();
            row.metric = (*metric).into();
            row.value = *value;
            rows.push(row);
        }
        Ok(rows)
    }

    fn save_checkpoint(&self, name: &str, ckpt: &TicketCheckpoint) -> Result<PathBuf> {
        let path = self.dir.join("checkpoints").join(name);
        ckpt_io::save(&path, ckpt)?;
        Ok(path)
    }
}

fn stage_err(stage: Stage) -> impl FnOnce(WorkbenchError) -> WorkbenchError {
    move |e| match e {
        WorkbenchError::Core { source, .. } => WorkbenchError::Core {
            stage: stage.name(),
            source,
        },
        other => other,
    }
}

/// Runs indexed tasks across up to `jobs` threads, committing results in
/// task order.
fn parallel<T: Send>(
    jobs: usize,
    n: usize,
    task: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(task).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = task(i);
                slots.lock().expect("slot lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|slot| slot.expect("task ran"))
        .collect()
}

pub fn run(mut config: RunConfig, stage: Stage, ov: &Overrides) -> Result<RunSummary> {
    apply_overrides(&mut config, ov)?;
    let hash = config.hash();
    let dir = PathBuf::from(&config.run.out_dir).join(&hash);
    std::fs::create_dir_all(&dir).map_err(|e| WorkbenchError::io(&dir, e))?;

    let dataset = if stage == Stage::Plot {
        None
    } else {
        Some(dataset::load(
            &data_root(&config),
            &config.dataset.name,
            config.dataset.train_limit,
            config.dataset.test_limit,
        )?)
    };

    let manifest = Manifest {
        config_hash: &hash,
        seed: config.run.seed,
        stage: stage.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_toml: &config.canonical_toml(),
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(|e| WorkbenchError::io(&manifest_path, e))?;

    let ctx = Ctx {
        config,
        hash: hash.clone(),
        dir: dir.clone(),
        dataset,
    };

    let rows = match stage {
        Stage::Search => run_search(&ctx, ov.jobs)?,
        Stage::Train => run_train(&ctx)?,
        Stage::Finetune => run_finetune(&ctx)?,
        Stage::Eval => run_eval(&ctx)?,
        Stage::Transfer => run_transfer(&ctx)?,
        Stage::R2s => run_r2s(&ctx)?,
        Stage::Distance => run_distance(&ctx)?,
        Stage::Plot => run_plot(&ctx)?,
    };

    if stage != Stage::Plot {
        report::write_all(&dir, &rows)?;
    }
    Ok(RunSummary {
        dir,
        hash,
        rows: rows.len(),
    })
}

fn run_search(ctx: &Ctx, jobs: usize) -> Result<Vec<Row>> {
    let config = &ctx.config;
    let section = config
        .search
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("search stage needs a [search] section".into()))?;
    let data = ctx.dataset()?;
    let spec = config.network_spec(data.input, data.classes)?;
    let init = rst_core::InitSpec::new(config.init_method()?, config.run.seed);
    let pattern = config.pattern()?;
    let adversary = config.search_adversary()?;
    let sched = section.to_schedule()?;
    let source = match &section.source {
        Some(path) => Some(ckpt_io::load(Path::new(path))?),
        None => None,
    };

    let outcomes: Vec<(SearchOutcome, Vec<Row>)> =
        parallel(jobs.max(1), section.ratios.len(), |i| {
            let ratio = section.ratios[i];
            // Streams keyed by the ratio's bits: the same (seed, ratio)
            // searches identically whatever the sweep composition.
            let prng = Prng::new(config.run.seed).split2(STREAM_SEARCH, ratio.to_bits());
            let outcome = match &source {
                Some(src) => search_rtt(
                    src,
                    &data.train,
                    ratio,
                    pattern,
                    &adversary,
                    &sched,
                    prng,
                    section.reinit_last,
                )
                .map_err(WorkbenchError::core("search"))?,
                None => search_rst(
                    &spec,
                    init,
                    &data.train,
                    ratio,
                    pattern,
                    &adversary,
                    &sched,
                    prng,
                )
                .map_err(WorkbenchError::core("search"))?,
            };
            let final_loss = outcome.history.last().map(|h| h.mean_loss).unwrap_or(0.0);
            let rows = ctx.eval_rows(
                Stage::Search,
                &outcome.net,
                &outcome.checkpoint,
                &[("final_train_loss", final_loss)],
            )?;
            Ok((outcome, rows))
        })?;

    let mut rows = Vec::new();
    for (outcome, mut task_rows) in outcomes {
        let name = format!(
            "{}_{}_r{}.ckpt",
            outcome.checkpoint.provenance.name(),
            outcome.checkpoint.pattern.name(),
            ratio_field(outcome.checkpoint.ratio)
        );
        ctx.save_checkpoint(&name, &outcome.checkpoint)?;
        rows.append(&mut task_rows);
    }
    Ok(rows)
}

fn run_train(ctx: &Ctx) -> Result<Vec<Row>> {
    let config = &ctx.config;
    let section = config
        .train
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("train stage needs a [train] section".into()))?;
    let data = ctx.dataset()?;
    let spec = config.network_spec(data.input, data.classes)?;
    let init = rst_core::InitSpec::new(config.init_method()?, config.run.seed);
    let mode = match section.mode.as_str() {
        "natural" => TrainMode::Natural,
        "adversarial" => TrainMode::Adversarial,
        other => {
            return Err(WorkbenchError::Config(format!(
                "unknown train mode {other:?} (natural, adversarial)"
            )))
        }
    };
    let attack = config.attack.to_attack()?;
    let attack_ref = matches!(mode, TrainMode::Adversarial).then_some(&attack);
    let outcome = train_dense(
        &spec,
        init,
        &data.train,
        mode,
        attack_ref,
        &section.to_schedule()?,
        Prng::new(config.run.seed).split2(STREAM_TRAIN, 0),
    )
    .map_err(WorkbenchError::core("train"))?;
    let final_loss = outcome.history.last().map(|h| h.mean_loss).unwrap_or(0.0);
    let rows = ctx.eval_rows(
        Stage::Train,
        &outcome.net,
        &outcome.checkpoint,
        &[("final_train_loss", final_loss)],
    )?;
    ctx.save_checkpoint(
        &format!("dense_{}.ckpt", section.mode),
        &outcome.checkpoint,
    )?;
    Ok(rows)
}

fn run_finetune(ctx: &Ctx) -> Result<Vec<Row>> {
    let config = &ctx.config;
    let section = config.finetune.as_ref().ok_or_else(|| {
        WorkbenchError::Config("finetune stage needs a [finetune] section".into())
    })?;
    let data = ctx.dataset()?;
    let ticket = ckpt_io::load(Path::new(&section.ticket))?;
    let mode = match section.mode.as_str() {
        "inherit" => FinetuneMode::Inherit,
        "reinit" => FinetuneMode::Reinit,
        other => {
            return Err(WorkbenchError::Config(format!(
                "unknown finetune mode {other:?} (inherit, reinit)"
            )))
        }
    };
    let attack = config.attack.to_attack()?;
    let outcome = finetune_ticket(
        &ticket,
        mode,
        &data.train,
        &attack,
        &section.to_schedule()?,
        Prng::new(config.run.seed).split2(STREAM_FINETUNE, 0),
    )
    .map_err(WorkbenchError::core("finetune"))?;
    let rows = ctx.eval_rows(Stage::Finetune, &outcome.net, &outcome.checkpoint, &[])?;
    ctx.save_checkpoint(
        &format!("finetuned_{}.ckpt", section.mode),
        &outcome.checkpoint,
    )?;
    Ok(rows)
}

fn load_ticket_nets(paths: &[String]) -> Result<Vec<(TicketCheckpoint, Network)>> {
    paths
        .iter()
        .map(|p| {
            let ckpt = ckpt_io::load(Path::new(p))?;
            let net = ckpt
                .instantiate()
                .map_err(WorkbenchError::core("checkpoint"))?;
            Ok((ckpt, net))
        })
        .collect()
}

fn ticket_label(ckpt: &TicketCheckpoint) -> String {
    format!("{}@{}", ckpt.provenance.name(), ratio_field(ckpt.ratio))
}

fn run_eval(ctx: &Ctx) -> Result<Vec<Row>> {
    let section = ctx
        .config
        .eval
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("eval stage needs an [eval] section".into()))?;
    let mut rows = Vec::new();
    for (ckpt, net) in load_ticket_nets(&section.checkpoints)? {
        rows.extend(ctx.eval_rows(Stage::Eval, &net, &ckpt, &[])?);
    }
    Ok(rows)
}

fn run_transfer(ctx: &Ctx) -> Result<Vec<Row>> {
    let section = ctx
        .config
        .eval
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("transfer stage needs an [eval] section".into()))?;
    let data = ctx.dataset()?;
    let loaded = load_ticket_nets(&section.checkpoints)?;
    let nets: Vec<&Network> = loaded.iter().map(|(_, n)| n).collect();
    let attack = ctx.config.attack.to_attack()?;
    let matrix = transfer_matrix(&nets, &data.test, &attack, ctx.config.run.seed)
        .map_err(WorkbenchError::core("transfer"))?;

    let mut rows = Vec::new();
    let mut base = ctx.base_row(Stage::Transfer);
    base.split = "test".into();
    base.network = nets[0].id();
    base.attack = attack.label();
    base.eps = eps_field(attack.epsilon as f64);
    base.n = data.test.len();
    for (i, (ci, _)) in loaded.iter().enumerate() {
        for (j, (cj, _)) in loaded.iter().enumerate() {
            let mut row = base.clone();
            row.attacker = ticket_label(ci);
            row.defender = ticket_label(cj);
            row.provenance = cj.provenance.name().into();
            row.ratio = ratio_field(cj.ratio);
            row.metric = "robust_acc".into();
            row.value = matrix.acc[i][j];
            rows.push(row);
        }
    }
    let mut diag = base.clone();
    diag.metric = "mean_diagonal".into();
    diag.value = matrix.mean_diagonal();
    rows.push(diag);
    let mut off = base;
    off.metric = "mean_off_diagonal".into();
    off.value = matrix.mean_off_diagonal();
    rows.push(off);
    Ok(rows)
}

fn run_r2s(ctx: &Ctx) -> Result<Vec<Row>> {
    let section = ctx
        .config
        .r2s
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("r2s stage needs an [r2s] section".into()))?;
    let data = ctx.dataset()?;
    let loaded = load_ticket_nets(&section.checkpoints)?;
    let nets: Vec<&Network> = loaded.iter().map(|(_, n)| n).collect();
    let mut policy = match &section.distribution {
        Some(probs) => R2sPolicy::weighted(probs.clone()),
        None => R2sPolicy::uniform(nets.len()),
    }
    .map_err(WorkbenchError::core("r2s"))?;
    policy.per_batch = section.per_batch;
    let mode = match section.estimator.as_str() {
        "exact" => R2sMode::Exact,
        "sampled" => R2sMode::Sampled,
        other => {
            return Err(WorkbenchError::Config(format!(
                "unknown r2s estimator {other:?} (exact, sampled)"
            )))
        }
    };
    let attack = ctx.config.attack.to_attack()?;

    let mut rows = Vec::new();
    let mut base = ctx.base_row(Stage::R2s);
    base.split = "test".into();
    base.network = nets[0].id();
    base.attack = attack.label();
    base.eps = eps_field(attack.epsilon as f64);
    base.estimator = mode.name().into();
    base.n = data.test.len();

    for adaptive_name in &section.adaptive {
        let adaptive = match adaptive_name.as_str() {
            "none" => AdaptiveAttack::None,
            "eot" => AdaptiveAttack::Eot,
            "ensemble" => AdaptiveAttack::Ensemble,
            other => {
                return Err(WorkbenchError::Config(format!(
                    "unknown adaptive attack {other:?} (none, eot, ensemble)"
                )))
            }
        };
        let report = r2s_evaluate(
            &nets,
            &policy,
            &data.test,
            &attack,
            adaptive,
            mode,
            ctx.config.run.seed,
        )
        .map_err(WorkbenchError::core("r2s"))?;
        let mut nat = base.clone();
        nat.adaptive = adaptive.name().into();
        nat.metric = "natural_acc".into();
        nat.value = report.natural_acc;
        rows.push(nat);
        let mut rob = base.clone();
        rob.adaptive = adaptive.name().into();
        rob.metric = "robust_acc".into();
        rob.value = report.robust_acc;
        rows.push(rob);
    }

    // Persist the candidate set compactly and report its storage overhead.
    let tickets: Vec<TicketCheckpoint> = loaded.iter().map(|(c, _)| c.clone()).collect();
    let stats = candidates::save(&ctx.dir.join("checkpoints/candidates.r2sc"), &tickets)?;
    for (metric, value) in [
        ("mask_bytes", stats.mask_bytes as f64),
        ("dense_weight_bytes", stats.dense_weight_bytes as f64),
        ("mask_overhead", stats.overhead_ratio()),
    ] {
        let mut row = base.clone();
        row.metric = metric.into();
        row.value = value;
        rows.push(row);
    }
    Ok(rows)
}

fn run_distance(ctx: &Ctx) -> Result<Vec<Row>> {
    let section = ctx.config.distance.as_ref().ok_or_else(|| {
        WorkbenchError::Config("distance stage needs a [distance] section".into())
    })?;
    let data = ctx.dataset()?;
    let mut rows = Vec::new();
    for (ckpt, net) in load_ticket_nets(&section.checkpoints)? {
        for &eps in &section.eps_list {
            let value = feature_distance(&net, &data.test, eps, ctx.config.run.seed)
                .map_err(WorkbenchError::core("distance"))?;
            let mut row = ctx.base_row(Stage::Distance);
            row.split = "test".into();
            row.network = net.id();
            row.provenance = ckpt.provenance.name().into();
            row.ratio = ratio_field(ckpt.ratio);
            row.eps = eps_field(eps);
            row.n = data.test.len();
            row.metric = "feature_distance".into();
            row.value = value;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn run_plot(ctx: &Ctx) -> Result<Vec<Row>> {
    let section = ctx
        .config
        .plot
        .as_ref()
        .ok_or_else(|| WorkbenchError::Config("plot stage needs a [plot] section".into()))?;
    let rows = report::read_csv(Path::new(&section.input))?;
    let title = &ctx.config.run.name;
    let svg_text = match section.kind.as_str() {
        "ratio_curve" => svg::ratio_curve(&rows, title)?,
        "transfer_heatmap" => svg::transfer_heatmap(&rows, title)?,
        "distance_bars" => svg::distance_bars(&rows, title)?,
        other => {
            return Err(WorkbenchError::Config(format!(
                "unknown plot kind {other:?} (ratio_curve, transfer_heatmap, distance_bars)"
            )))
        }
    };
    let out = match &section.output {
        Some(path) => PathBuf::from(path),
        None => ctx.dir.join("plots").join(format!("{}.svg", section.kind)),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| WorkbenchError::io(parent, e))?;
    }
    std::fs::write(&out, svg_text).map_err(|e| WorkbenchError::io(&out, e))?;
    Ok(Vec::new())
}
