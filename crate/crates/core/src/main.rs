use clap::{Args, Parser, Subcommand};
use dart_core::data::manifest::{export, import};
use dart_core::data::{make_splits, Split, SplitCounts, Splits};
use dart_core::downstream::anomaly::AnomalyModel;
use dart_core::downstream::embed::EmbeddingStore;
use dart_core::downstream::fewshot::SupportPolicy;
use dart_core::downstream::heads::HeadConfig;
use dart_core::downstream::report::{generate_report, GalleryItem, ReportContext};
use dart_core::downstream::tasks;
use dart_core::model::{Ablation, GateMode};
use dart_core::persist::Checkpoint;
use dart_core::tensor::GradCheckOptions;
use dart_core::train::ablate::{run_ablations, ABLATION_SEEDS};
use dart_core::train::gradcheck::objective_gradient_check;
use dart_core::train::{log_csv, run_curriculum, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

type CliResult<T> = Result<T, String>;

fn ctx<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{what}: {e}")
}

#[derive(Parser)]
#[command(name = "dart", version, about = "Rope damage representation learning at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed; falls back to DART_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        /// Multiply every class count.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Run the two-phase curriculum.
    Train {
        /// Dataset directory; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Embed every sample with a frozen checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "predicted")]
        gate_mode: String,
    },
    EvalClassify(EmbArgs),
    EvalSeverity(EmbArgs),
    EvalFewshot {
        #[command(flatten)]
        emb: EmbArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Fail instead of capping support for short classes.
        #[arg(long)]
        strict: bool,
    },
    EvalGeometry {
        #[command(flatten)]
        emb: EmbArgs,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = 12)]
        timeline: usize,
    },
    EvalRecommend(EmbArgs),
    EvalAnomaly {
        #[command(flatten)]
        emb: EmbArgs,
        /// Checkpoint used to embed the pure-noise images.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 120)]
        noise: usize,
    },
    /// Inspection reports for one split.
    Report {
        #[command(flatten)]
        emb: EmbArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train each configuration under each seed and tabulate test metrics.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "E1,E2,E3,E4,E5,E6")]
        ablations: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective on toy models.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        coords: usize,
    },
}

#[derive(Args)]
struct EmbArgs {
    /// Embedding store written by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Embed { .. } => "embed",
            Command::EvalClassify(_) => "eval-classify",
            Command::EvalSeverity(_) => "eval-severity",
            Command::EvalFewshot { .. } => "eval-fewshot",
            Command::EvalGeometry { .. } => "eval-geometry",
            Command::EvalRecommend(_) => "eval-recommend",
            Command::EvalAnomaly { .. } => "eval-anomaly",
            Command::Report { .. } => "report",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

#[derive(Serialize)]
struct Output {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    source_hash: &'static str,
    outputs: Vec<Output>,
}

struct Run {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Run {
    fn create(parent: &Path, cfg: &TrainConfig) -> CliResult<Self> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let base = format!("run-{secs}-{}", &cfg.hash()[..8]);
        let mut dir = parent.join(&base);
        let mut n = 1;
        while dir.exists() {
            dir = parent.join(format!("{base}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&dir).map_err(ctx(dir.display()))?;
        Ok(Run { dir, written: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(ctx(p.display()))?;
        self.written.push(p);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        self.write(name, serde_json::to_string_pretty(value).expect("serializable"))
    }

    fn finish(self, command: &str, cfg: &TrainConfig) -> CliResult<PathBuf> {
        let mut outputs = Vec::new();
        let mut files = self.written.clone();
        files.sort();
        files.dedup();
        for f in files {
            let bytes = fs::read(&f).map_err(ctx(f.display()))?;
            outputs.push(Output {
                path: f.strip_prefix(&self.dir).unwrap_or(&f).display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            source_hash: env!("DART_SOURCE_HASH"),
            outputs,
        };
        let p = self.dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(ctx(p.display()))?;
        Ok(self.dir)
    }
}

fn resolve_config(c: &Common) -> CliResult<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(ctx(p.display()))?;
            TrainConfig::from_kv(&text).map_err(ctx(p.display()))?
        }
        None => TrainConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set {kv}: expected KEY=VALUE"))?;
        cfg.set(k, v)?;
    }
    let env_seed = std::env::var("DART_SEED").ok();
    if let Some(s) = c.seed {
        cfg.seed = s;
    } else if let Some(s) = env_seed {
        cfg.seed = s.trim().parse().map_err(|_| format!("DART_SEED: not an integer: {s:?}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(format!("input not found: {}", p.display()))
    }
}

fn load_splits(data: Option<&Path>, cfg: &TrainConfig) -> CliResult<Splits> {
    match data {
        Some(p) => {
            require(p)?;
            import(p).map_err(|e| e.to_string())
        }
        None => make_splits(&SplitCounts::default(), cfg.seed),
    }
}

fn load_store(p: &Path) -> CliResult<EmbeddingStore> {
    require(p)?;
    EmbeddingStore::load(p).map_err(ctx(p.display()))
}

fn load_checkpoint(p: &Path) -> CliResult<Checkpoint> {
    require(p)?;
    Checkpoint::load(p).map_err(|e| e.to_string())
}

fn files_under(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(ctx(dir.display()))? {
        let p = entry.map_err(ctx(dir.display()))?.path();
        if p.is_dir() {
            out.extend(files_under(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn metrics_csv(rows: &[(&str, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    let cfg = resolve_config(&cli.common)?;
    let mut run = Run::create(&cli.common.out, &cfg)?;
    run.write("config.kv", cfg.to_kv())?;
    let head_seed = cfg.seed;
    match &cli.command {
        Command::GenData { scale } => {
            let splits = make_splits(&SplitCounts::default().scaled(*scale), cfg.seed)?;
            let root = run.path("data");
            export(&root, &splits).map_err(|e| e.to_string())?;
            run.written.extend(files_under(&root)?);
            println!("train {} val {} test {}", splits.train.len(), splits.val.len(), splits.test.len());
        }
        Command::Train { data } => {
            let splits = load_splits(data.as_deref(), &cfg)?;
            let cur = run_curriculum::<f64>(&cfg, &splits, |e| println!("{e}")).map_err(|e| e.to_string())?;
            let phase = if cfg.phase2_epochs > 0 { 2 } else { 1 };
            for (name, m) in [("best.ckpt", &cur.best), ("last.ckpt", &cur.last)] {
                let p = run.path(name);
                Checkpoint::of_model(m, &cfg, cur.norm, &splits.class_weights, phase, &cur.epochs)
                    .save(&p)
                    .map_err(|e| e.to_string())?;
                run.written.push(p);
            }
            run.write("train_log.csv", log_csv(&cur.log))?;
            run.json("epochs.json", &cur.epochs)?;
            println!("best epoch {} val macro-F1 {:.4}", cur.best_epoch, cur.best_val_f1);
        }
        Command::Embed { checkpoint, data, gate_mode } => {
            let mode = GateMode::parse(gate_mode).ok_or_else(|| format!("unknown gate mode {gate_mode:?}"))?;
            let ck = load_checkpoint(checkpoint)?;
            let model = ck.model::<f64>().map_err(|e| e.to_string())?;
            let splits = load_splits(data.as_deref(), &ck.config)?;
            let store = EmbeddingStore::extract(&model, &splits, mode, cfg.eval_batch).map_err(|e| e.to_string())?;
            let p = run.path("embeddings.jsonl");
            store.save(&p).map_err(ctx(p.display()))?;
            run.written.push(p);
            println!("{} embeddings of dim {}", store.records.len(), store.dim);
        }
        Command::EvalClassify(a) => {
            let store = load_store(&a.embeddings)?;
            let out = tasks::train_classifier_head(&store, &HeadConfig::classifier(head_seed)).map_err(|e| e.to_string())?;
            run.json("classify.json", &(&out.test, &out.breakdown))?;
            run.write(
                "classify.csv",
                metrics_csv(&[
                    ("accuracy", out.test.accuracy),
                    ("macro_f1", out.test.macro_f1),
                    ("weighted_f1", out.test.weighted_f1),
                    ("majority_accuracy", out.majority_accuracy),
                ]),
            )?;
            println!("accuracy {:.4} macro-F1 {:.4} weighted-F1 {:.4}", out.test.accuracy, out.test.macro_f1, out.test.weighted_f1);
        }
        Command::EvalSeverity(a) => {
            let store = load_store(&a.embeddings)?;
            let out = tasks::severity_regress(&store, &HeadConfig::regressor(head_seed)).map_err(|e| e.to_string())?;
            let m = &out.test;
            run.json("severity.json", m)?;
            run.write(
                "severity.csv",
                metrics_csv(&[("mae", m.mae), ("rmse", m.rmse), ("r2", m.r2), ("spearman", m.spearman), ("within_one", m.within_one)]),
            )?;
            println!("spearman {:.4} within-1 {:.4} mae {:.4}", m.spearman, m.within_one, m.mae);
        }
        Command::EvalFewshot { emb, k, episodes, strict } => {
            let store = load_store(&emb.embeddings)?;
            let policy = if *strict { SupportPolicy::Strict } else { SupportPolicy::Cap };
            let rows = tasks::fewshot(&store, k, *episodes, head_seed, policy).map_err(|e| e.to_string())?;
            let mut csv = String::from("k,episodes,mean_macro_f1,ci95,capped_classes\n");
            for r in &rows {
                let capped: Vec<String> = r.capped_classes.iter().map(|c| c.to_string()).collect();
                csv.push_str(&format!("{},{},{},{},{}\n", r.k, r.episodes, r.mean_macro_f1, r.ci95, capped.join(" ")));
                println!("k={:<3} macro-F1 {:.4} ± {:.4}", r.k, r.mean_macro_f1, r.ci95);
            }
            run.write("fewshot.csv", csv)?;
        }
        Command::EvalGeometry { emb, steps, timeline } => {
            let store = load_store(&emb.embeddings)?;
            let sev = tasks::severity_regress(&store, &HeadConfig::regressor(head_seed)).map_err(|e| e.to_string())?;
            let g = tasks::geometry(&store, &sev.head, *steps, *timeline).map_err(|e| e.to_string())?;
            run.json("geometry.json", &g)?;
            let mid = g.interpolations.iter().map(|i| i.midpoint_distance).sum::<f64>() / g.interpolations.len().max(1) as f64;
            run.write(
                "geometry.csv",
                metrics_csv(&[
                    ("monotone_rate", g.monotone_rate()),
                    ("cross_type_top3", g.cross_type_rate()),
                    ("self_transfer_top3", g.self_transfer.rate()),
                    ("midpoint_medium_cosine_distance", mid),
                ]),
            )?;
            println!(
                "monotone {:.3} cross-type top-3 {:.3} midpoint distance {:.4}",
                g.monotone_rate(),
                g.cross_type_rate(),
                mid
            );
        }
        Command::EvalRecommend(a) => {
            let store = load_store(&a.embeddings)?;
            let out = tasks::recommend(&store, &HeadConfig::linear(head_seed)).map_err(|e| e.to_string())?;
            let m = &out.test;
            run.json("recommend.json", m)?;
            run.write(
                "recommend.csv",
                metrics_csv(&[("accuracy", m.accuracy), ("macro_f1", m.macro_f1), ("urgency_mae", m.urgency_mae)]),
            )?;
            println!("accuracy {:.4} macro-F1 {:.4} urgency MAE {:.4}", m.accuracy, m.macro_f1, m.urgency_mae);
        }
        Command::EvalAnomaly { emb, checkpoint, noise } => {
            let store = load_store(&emb.embeddings)?;
            let ck = load_checkpoint(checkpoint)?;
            let model = ck.model::<f64>().map_err(|e| e.to_string())?;
            let noise = tasks::noise_embeddings(&model, &ck.norm, &store, *noise, head_seed, GateMode::Predicted).map_err(|e| e.to_string())?;
            let (_, m) = tasks::anomaly(&store, &noise).map_err(|e| e.to_string())?;
            run.json("anomaly.json", &m)?;
            run.write(
                "anomaly.csv",
                metrics_csv(&[
                    ("threshold", m.threshold),
                    ("train_flag_rate", m.train_flag_rate),
                    ("test_flag_rate", m.test_flag_rate),
                    ("noise_flag_rate", m.noise_flag_rate),
                    ("auroc", m.auroc),
                ]),
            )?;
            println!("train flag rate {:.4} AUROC {:.4}", m.train_flag_rate, m.auroc);
        }
        Command::Report { emb, checkpoint, data, split, limit } => {
            let which = Split::parse(split).ok_or_else(|| format!("unknown split {split:?}"))?;
            let store = load_store(&emb.embeddings)?;
            let ck = load_checkpoint(checkpoint)?;
            let model = ck.model::<f64>().map_err(|e| e.to_string())?;
            let splits = load_splits(data.as_deref(), &ck.config)?;
            let sev = tasks::severity_regress(&store, &HeadConfig::regressor(head_seed)).map_err(|e| e.to_string())?;
            let train = store.split(Split::Train);
            let anomaly = AnomalyModel::fit(&EmbeddingStore::matrix(&train), &EmbeddingStore::labels(&train)).map_err(|e| e.to_string())?;
            let gallery: Vec<GalleryItem> = train.iter().map(|r| (r.id, r.class_index, r.embedding.clone())).collect();
            let ctx_ = ReportContext {
                severity: &sev.head,
                anomaly: &anomaly,
                gallery: &gallery,
            };
            let data = splits.get(which);
            let n = limit.unwrap_or(data.len()).min(data.len());
            let refs: Vec<_> = data.samples[..n].iter().collect();
            let inf = model.infer_samples(&refs, &ck.norm, GateMode::Predicted, cfg.eval_batch).map_err(|e| e.to_string())?;
            let mut reports = Vec::with_capacity(n);
            let mut text = String::new();
            let mut correct = 0;
            for (i, s) in refs.iter().enumerate() {
                let r = generate_report(s.id, &inf.embeddings[i], &inf.logits[i], &ctx_).map_err(|e| e.to_string())?;
                correct += usize::from(r.class_index == s.label.class_index);
                text.push_str(&r.render());
                text.push('\n');
                reports.push(r);
            }
            run.json("reports.json", &reports)?;
            run.write("reports.txt", text)?;
            println!("{n} reports, damage field accuracy {:.4}", correct as f64 / n.max(1) as f64);
        }
        Command::Ablate { ablations, seeds, data } => {
            let tags: Vec<Ablation> = ablations
                .iter()
                .map(|t| Ablation::parse(t).ok_or_else(|| format!("unknown ablation {t:?}")))
                .collect::<CliResult<_>>()?;
            let seeds = seeds.clone().unwrap_or(ABLATION_SEEDS.to_vec());
            let splits = load_splits(data.as_deref(), &cfg)?;
            let table = run_ablations::<f64>(&cfg, &splits, &tags, &seeds, |r| {
                println!("{} seed {} accuracy {:.4} macro-F1 {:.4}", r.ablation, r.seed, r.accuracy, r.macro_f1)
            })
            .map_err(|e| e.to_string())?;
            run.json("ablation.json", &table)?;
            run.write("ablation.csv", table.csv())?;
            run.write("ablation.txt", table.render())?;
            print!("{}", table.render());
        }
        Command::Gradcheck { seeds, coords } => {
            let mut csv = String::from("seed,max_rel_error,max_abs_error,coords\n");
            let mut worst: f64 = 0.0;
            for s in 0..*seeds {
                let seed = cfg.seed.wrapping_add(s);
                let opts = GradCheckOptions {
                    max_coords: *coords,
                    seed,
                    ..GradCheckOptions::default()
                };
                let r = objective_gradient_check(seed, &opts).map_err(|e| e.to_string())?;
                println!("seed {seed} max rel error {:.3e} over {} coordinates", r.max_rel_error, r.coords_checked);
                csv.push_str(&format!("{seed},{},{},{}\n", r.max_rel_error, r.max_abs_error, r.coords_checked));
                worst = worst.max(r.max_rel_error);
            }
            run.write("gradcheck.csv", csv)?;
            if worst >= 1e-4 {
                return Err(format!("gradient check failed: max relative error {worst:.3e}"));
            }
        }
    }
    run.finish(cli.command.name(), &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("run directory {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
