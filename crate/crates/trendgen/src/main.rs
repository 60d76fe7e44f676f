use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use trendgen::{router, train_selected, AppState, Registry, ServiceConfig, Store};
use trendgen_core::attribution::{evaluate, labeled_sets, load_labels, train_head, AttributionModel};
use trendgen_core::catalog::{load_catalog, parse_outfits, save_catalog, save_outfits};
use trendgen_core::compat::PairingKey;
use trendgen_core::evaluator::{synth_expert_outfits, synth_world, EvaluatorConfig, StandardRun};
use trendgen_core::nn::TrainConfig;
use trendgen_core::outfit::{all_pairings, Generator};
use trendgen_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trendgen", version, about = "Diversity-aware outfit recommendation")]
struct Cli {
    /// Data directory holding catalog, outfit log, table and models.
    #[arg(long, global = true, env = "TRENDGEN_DATA_DIR", default_value = "trendgen-data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Append catalog records (JSONL) and optionally outfit records.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        outfits: Option<PathBuf>,
    },
    /// Train compatibility models from approved outfits.
    Train {
        /// `anchor:target` (e.g. tops:bottoms) or `all`.
        #[arg(long, default_value = "all")]
        pairing: String,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long, env = "TRENDGEN_SEED", default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
    },
    /// Generate outfits for one product and record them as pending.
    Recommend {
        #[arg(long)]
        product: String,
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Lambda ablation on the synthetic evaluation world.
    Ablate {
        /// Comma-separated ascending lambda values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Evaluator config (TOML); defaults to the bundled one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `ablation.tsv` and `ablation.dat`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attribute classification heads.
    Attribution {
        #[command(subcommand)]
        action: AttributionAction,
    },
    /// Write a synthetic catalog and approved expert outfits.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, env = "TRENDGEN_SEED", default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Require `Authorization: Bearer <token>` on /v1 endpoints.
        #[arg(long, env = "TRENDGEN_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Subcommand)]
enum AttributionAction {
    /// Train one head per attribute found in the label file.
    Train {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, env = "TRENDGEN_SEED", default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
    /// Accuracy of the saved heads on a label file.
    Eval {
        #[arg(long)]
        labels: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let data_dir = cli.data_dir;
    match cli.command {
        Command::Ingest { file, outfits } => {
            let mut store = Store::open(&data_dir)?;
            let incoming = load_catalog(&file)?;
            let duplicates = store.duplicates(incoming.products());
            if let Some(id) = duplicates.first() {
                return Err(Error::DuplicateProduct(id.clone()));
            }
            let n = store.ingest(incoming.products().to_vec())?;
            println!("ingested {n} products ({} total)", store.catalog().len());
            if let Some(path) = outfits {
                let text = std::fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                let records = parse_outfits(text.as_slice())?;
                let m = store.add_outfits(records)?;
                println!("recorded {m} outfits");
            }
            store.audit(&format!("cli ingest products={n}"))
        }
        Command::Train {
            pairing,
            margin,
            seed,
            epochs,
            learning_rate,
        } => {
            let store = Store::open(&data_dir)?;
            let requested: Vec<PairingKey> = if pairing == "all" {
                all_pairings()
            } else {
                vec![pairing.parse()?]
            };
            let config = TrainConfig {
                learning_rate,
                epochs,
                seed,
                ..ServiceConfig::default().train
            };
            let outfits = store.approved_outfits();
            let (trained, skipped) = train_selected(
                store.catalog(),
                &outfits,
                &requested,
                &config,
                margin,
                ServiceConfig::default().negatives_per_pair,
            )?;
            store.save_models(trained.values().map(|(m, _)| m))?;
            for (p, (_, report)) in &trained {
                let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
                println!("{:<24} triplets {:>7}  final loss {last:.6}", p.slug(), report.triplets);
            }
            for p in skipped {
                println!("{:<24} skipped (no approved co-occurrences)", p.slug());
            }
            store.audit(&format!("cli train pairings={}", trained.len()))
        }
        Command::Recommend { product, count, lambda } => {
            let mut store = Store::open(&data_dir)?;
            let models = store.load_models()?;
            if models.is_empty() {
                return Err(Error::MissingModel("any (run `trendgen train` first)".into()));
            }
            let catalog = Arc::new(store.catalog().clone());
            let reg = Registry::build(1, catalog, models, None, ServiceConfig::default().space)?;
            let generator = Generator::new(&reg.catalog, &reg.index, &reg.templates);
            let mut table = store.table().clone();
            let mut stamper = store.stamper();
            let outfits = generator.generate_many(&product, count, &mut table, lambda, &mut stamper)?;
            store.commit_generated(&outfits, table)?;
            for o in &outfits {
                let flag = if o.duplicate { "  (duplicate)" } else { "" };
                println!("{}  anchor {}{flag}", o.outfit_id, o.anchor_id);
                for (division, id) in &o.selections {
                    println!("    {:<12} {id:<24} shown {}", division.as_str(), store.table().get(id));
                }
            }
            Ok(())
        }
        Command::Ablate { grid, config, out } => {
            let mut config = match config {
                Some(p) => EvaluatorConfig::load(p)?,
                None => EvaluatorConfig::frozen(),
            };
            if let Some(grid) = grid {
                config.ablation.lambda_grid = grid;
            }
            config.validate()?;
            let run = StandardRun::build(config)?;
            let report = run.ablate()?;
            print!("{}", report.summary());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                for (name, body) in [("ablation.tsv", report.to_table()), ("ablation.dat", report.plot_data())] {
                    let path = dir.join(name);
                    std::fs::write(&path, body).map_err(|e| Error::Io { path, source: e })?;
                }
            }
            Ok(())
        }
        Command::Attribution { action } => attribution(&data_dir, action),
        Command::Synth { n, seed, out } => {
            let frozen = EvaluatorConfig::frozen();
            let cfg = trendgen_core::evaluator::SynthConfig { n, seed, ..frozen.catalog };
            let world = synth_world(&cfg, &frozen.oracle)?;
            let outfits = synth_expert_outfits(&world, &frozen.experts, seed)?;
            save_catalog(&world.catalog, out.join("catalog.jsonl"))?;
            save_outfits(&outfits, out.join("outfits.jsonl"))?;
            println!("wrote {} products and {} outfits to {}", world.catalog.len(), outfits.len(), out.display());
            Ok(())
        }
        Command::Serve { port, host, token } => serve(data_dir, host, port, token),
    }
}

fn attribution(data_dir: &std::path::Path, action: AttributionAction) -> Result<()> {
    let store = Store::open(data_dir)?;
    let dir = store.attribution_dir().expect("opened from a directory");
    match action {
        AttributionAction::Train { labels, seed, epochs } => {
            let records = load_labels(labels)?;
            let sets = labeled_sets(store.catalog(), &records)?;
            let config = TrainConfig {
                seed,
                epochs,
                ..TrainConfig::default()
            };
            let mut model = AttributionModel::default();
            for (name, set) in sets {
                let (head, report) = train_head(&set.examples, &name, set.class_labels, &config)?;
                let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
                println!("{name:<20} {} classes, final loss {last:.4}", head.class_labels.len());
                model.insert(head)?;
            }
            model.save_dir(&dir)
        }
        AttributionAction::Eval { labels } => {
            let model = AttributionModel::load_dir(&dir)?;
            let records = load_labels(labels)?;
            let mut sets: BTreeMap<String, Vec<_>> = BTreeMap::new();
            for r in &records {
                let head = model
                    .heads
                    .get(&r.attribute_name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no head for `{}`", r.attribute_name)))?;
                let idx = head.class_labels.iter().position(|l| *l == r.label).ok_or_else(|| {
                    Error::InvalidArgument(format!("label `{}` unknown to head `{}`", r.label, r.attribute_name))
                })?;
                let p = store
                    .catalog()
                    .get(&r.product_id)
                    .ok_or_else(|| Error::UnknownProduct(r.product_id.clone()))?;
                sets.entry(r.attribute_name.clone()).or_default().push((p.multimodal(), idx));
            }
            let report = evaluate(&model, &sets)?;
            for (name, acc) in &report.per_attribute {
                println!("{name:<20} {:.2}%", 100.0 * acc);
            }
            println!("{:<20} {:.2}%", "macro average", 100.0 * report.macro_average);
            Ok(())
        }
    }
}

fn serve(data_dir: PathBuf, host: String, port: u16, token: Option<String>) -> Result<()> {
    let store = Store::open(&data_dir)?;
    let config = ServiceConfig {
        token,
        ..ServiceConfig::default()
    };
    let state = AppState::new(store, config)?;
    let addr = format!("{host}:{port}");
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: data_dir.clone(), source: e })?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::Io { path: addr.clone().into(), source: e })?;
        tracing::info!("listening on {addr}, data in {}", data_dir.display());
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Io { path: addr.into(), source: e })
    })
}
