use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::{json, Value};

use kgdiv_core::data::{Dataset, PrepareOptions, SplitRatios};
use kgdiv_core::eval::{self, DEFAULT_KS};
use kgdiv_core::trainer::{self, Checkpoint, Preset, TrainConfig};
use kgdiv_core::{kv, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kgdiv", version, about = "Knowledge-graph diversified recommendation")]
struct Cli {
    /// key=value settings file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "kgdiv-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, split and remap raw interaction and KG files.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Score a checkpoint on the test (or validation) split.
    Eval(EvalArgs),
    /// Top-k list for one user, optionally with KG explanations.
    Recommend(RecommendArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Interaction file: `user item item ...` per line.
    #[arg(long)]
    interactions: PathBuf,
    /// Triplet file: `head relation tail` per line.
    #[arg(long)]
    kg: PathBuf,
    #[arg(long, default_value_t = 10)]
    k_core: usize,
    /// Do not add inverse relations to the propagation graph.
    #[arg(long)]
    no_inverse: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    preset: Option<Preset>,
    /// Repeatable: no_kg, no_relation_encoding, no_del, no_cau.
    #[arg(long)]
    ablate: Vec<String>,
    /// Repeatable `key=value` override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    k: Vec<usize>,
    /// Evaluate on the validation lists instead of the test lists.
    #[arg(long)]
    valid: bool,
    /// Also write one metrics row per user.
    #[arg(long)]
    per_user: bool,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dense user id as written by `prepare`.
    #[arg(long)]
    user: u64,
    /// Interpret `--user` as the id used in the raw interaction file.
    #[arg(long)]
    original_id: bool,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// List each item's 1-hop (relation, entity) pairs and the list's coverage.
    #[arg(long)]
    explain: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_numeric() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => prepare(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => evaluate(cli, a),
        Command::Recommend(a) => recommend(cli, a),
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_config_file(cli: &Cli) -> Result<BTreeMap<String, String>> {
    let Some(path) = &cli.config else {
        return Ok(BTreeMap::new());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    kv::parse(&text).map_err(|m| Error::Config(format!("{}: {m}", path.display())))
}

/// Defaults ← config file ← preset ← ablations ← `--set` ← global flags.
fn resolve_config(cli: &Cli, model: &ModelArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    config.apply_map(&read_config_file(cli)?)?;
    if let Some(p) = model.preset {
        config.apply_preset(p);
    }
    for name in &model.ablate {
        for part in name.split(',').filter(|s| !s.is_empty()) {
            config.ablations.set(part.trim())?;
        }
    }
    for kv in &model.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    config.validate()?;
    Ok(config)
}

fn config_json(text: &str) -> Value {
    let map = kv::parse(text).unwrap_or_default();
    Value::Object(map.into_iter().map(|(k, v)| (k, Value::String(v))).collect())
}

fn commented(config_text: &str, body: &str) -> String {
    let mut out: String = config_text.lines().map(|l| format!("# {l}\n")).collect();
    out.push_str(body);
    out
}

fn prepare_settings(cli: &Cli, a: &PrepareArgs) -> Result<(PrepareOptions, String)> {
    let file = read_config_file(cli)?;
    let mut opts = PrepareOptions {
        k_core: a.k_core,
        add_inverse: !a.no_inverse,
        ..PrepareOptions::default()
    };
    if let Some(v) = file.get("split_seed").or(file.get("seed")) {
        opts.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("bad seed `{v}`")))?;
    }
    if let Some(seed) = cli.seed {
        opts.seed = seed;
    }
    let text = format!(
        "interactions={}\nkg={}\nk_core={}\nsplit_seed={}\nratios={},{},{}\nadd_inverse={}\ndeterministic={}\n",
        a.interactions.display(),
        a.kg.display(),
        opts.k_core,
        opts.seed,
        opts.ratios.train,
        opts.ratios.valid,
        opts.ratios.test,
        opts.add_inverse,
        cli.deterministic
    );
    debug_assert_eq!(opts.ratios, SplitRatios::default());
    Ok((opts, text))
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Result<()> {
    let (opts, settings) = prepare_settings(cli, a)?;
    let dataset = Dataset::prepare(&a.interactions, &a.kg, &opts)?;
    dataset.save(&cli.out)?;
    write(&cli.out.join("prepare.txt"), &settings)?;
    let stats = dataset.stats();
    info!("prepared dataset in {}", cli.out.display());
    print!("{}", stats.to_text());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let config = resolve_config(cli, &a.model)?;
    let dataset = load_dataset(&a.data)?;
    let config_text = config.to_kv_text();
    info!(
        "training on {} users / {} items; ablations: [{}]",
        dataset.n_users(),
        dataset.n_items(),
        config.ablations.active().join(",")
    );
    let outcome = trainer::train(&config, &dataset)?;
    outcome.checkpoint.save(cli.out.join("checkpoint"))?;
    write(&cli.out.join("config.txt"), &config_text)?;
    write(
        &cli.out.join("train_log.csv"),
        &commented(&config_text, &trainer::log_csv(&outcome.log, config.valid_k)),
    )?;
    let summary = json!({
        "config": config_json(&config_text),
        "best_epoch": outcome.checkpoint.epoch,
        "best_valid_recall": outcome.checkpoint.best_metric,
        "epochs_run": outcome.log.len(),
        "stopped_early": outcome.stopped_early,
        "diverged": outcome.diverged.as_ref().map(|(epoch, e)| json!({"epoch": epoch, "error": e.to_string()})),
    });
    write(
        &cli.out.join("train_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    if let Some((epoch, source)) = outcome.diverged {
        return Err(Error::Diverged { epoch, source });
    }
    info!(
        "best epoch {} with valid recall@{} = {:.5}",
        outcome.checkpoint.epoch, config.valid_k, outcome.checkpoint.best_metric
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_dir() {
        return Err(Error::Checkpoint(format!(
            "{}: no checkpoint directory",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

fn evaluate(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let targets = if a.valid {
        &dataset.split.valid
    } else {
        &dataset.split.test
    };
    let report = trainer::evaluate(&checkpoint, &dataset, targets, &a.k)?;
    let config_text = checkpoint.config.to_kv_text();
    let split = if a.valid { "valid" } else { "test" };
    let doc = json!({
        "config": config_json(&config_text),
        "checkpoint_epoch": checkpoint.epoch,
        "split": split,
        "users_evaluated": report.users_evaluated,
        "metrics": report.mean,
    });
    write(
        &cli.out.join("metrics.json"),
        &serde_json::to_string_pretty(&doc).expect("json"),
    )?;
    write(&cli.out.join("metrics.csv"), &commented(&config_text, &report.to_csv()))?;
    if a.per_user {
        write(
            &cli.out.join("per_user.csv"),
            &commented(&config_text, &report.per_user_csv()),
        )?;
    }
    for m in &report.mean {
        println!(
            "k={} recall={:.6} ndcg={:.6} ec={:.4} rc={:.4}",
            m.k, m.recall, m.ndcg, m.entity_coverage, m.relation_coverage
        );
    }
    Ok(())
}

fn recommend(cli: &Cli, a: &RecommendArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let n_users = dataset.n_users();
    let user = if a.original_id {
        dataset.maps.dense_user(a.user).ok_or_else(|| {
            Error::Config(format!("original user id {} was filtered out or unknown", a.user))
        })? as usize
    } else {
        a.user as usize
    };
    if user >= n_users {
        return Err(Error::Config(format!(
            "user {} out of range; valid dense ids are 0..={}",
            a.user,
            n_users.saturating_sub(1)
        )));
    }
    if a.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let (users, items) = trainer::checkpoint_embeddings(&checkpoint, &dataset)?;
    let ranked = eval::topk(users.row(user), &items, a.k, dataset.train.items_of(user));
    let kg = &dataset.kg;
    let maps = &dataset.maps;
    let mut entries = Vec::new();
    println!("user {user} (original {})", maps.users[user]);
    for (rank, (&item, &score)) in ranked.items.iter().zip(&ranked.scores).enumerate() {
        println!(
            "{:>3}. item {item} (original {}) score {score:.6}",
            rank + 1,
            maps.entities[item as usize]
        );
        let mut entry = json!({
            "rank": rank + 1,
            "item": item,
            "original_item": maps.entities[item as usize],
            "score": score,
        });
        if a.explain {
            let links: Vec<Value> = kg
                .item_links(item as usize)
                .iter()
                .map(|&(r, t)| {
                    println!(
                        "       relation {r} (original {}) -> entity {t} (original {})",
                        maps.relations[r as usize], maps.entities[t as usize]
                    );
                    json!({
                        "relation": r,
                        "original_relation": maps.relations[r as usize],
                        "entity": t,
                        "original_entity": maps.entities[t as usize],
                    })
                })
                .collect();
            entry["links"] = Value::Array(links);
        }
        entries.push(entry);
    }
    let mut doc = json!({
        "config": config_json(&checkpoint.config.to_kv_text()),
        "user": user,
        "original_user": maps.users[user],
        "k": a.k,
        "truncated": ranked.truncated,
        "items": entries,
    });
    if a.explain {
        let (ec, rc) = eval::coverage(&ranked.items, kg, ranked.items.len());
        println!("entity coverage {ec}, relation coverage {rc}");
        doc["entity_coverage"] = json!(ec);
        doc["relation_coverage"] = json!(rc);
    }
    write(
        &cli.out.join(format!("recommend_user{user}.json")),
        &serde_json::to_string_pretty(&doc).expect("json"),
    )?;
    Ok(())
}
