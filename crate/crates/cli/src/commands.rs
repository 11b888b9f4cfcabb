//! Subcommand drivers.

use std::io::Write;
use std::path::{Path, PathBuf};

use efsa::encoder::{load_encoder, save_encoder};
use efsa::eval::{
    ablate_epochs, ablate_lora_vs_full, ablate_loss, ablate_topk, containment_holds,
    run_single_domain, run_suite, Ablation, MethodRun, RecallReport, SuiteInput,
};
use efsa::pipeline::index_pool;
use efsa::pool::{
    load_store, read_features, read_manifest, save_store, storage_report, store_paths, PoolStore,
};
use efsa::synth::{generate, load_queries, load_train_data, save_benchmark, BenchPaths, GenQuery};
use efsa::train::train_base;
use efsa::DualEncoder;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Setting, Settings};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Topk,
    Epochs,
    Loss,
    Lora,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Topk => "topk",
            AblationKind::Epochs => "epochs",
            AblationKind::Loss => "loss",
            AblationKind::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    TrainBase,
    Index,
    Eval,
    Ablate(AblationKind),
    ReportStorage,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::Gen => "gen".into(),
            Command::TrainBase => "train-base".into(),
            Command::Index => "index".into(),
            Command::Eval => "eval".into(),
            Command::Ablate(k) => format!("ablate-{}", k.name()),
            Command::ReportStorage => "report-storage".into(),
        }
    }
}

/// Hex SHA-256 of the concatenated contents of `paths`.
pub fn digest(paths: &[&Path]) -> CliResult<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn require(path: &Path, hint: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, hint))
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn model_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("vision.enc"), dir.join("text.enc"))
}

fn index_stem(dir: &Path) -> PathBuf {
    dir.join("pool")
}

fn load_model(cfg: &RunConfig) -> CliResult<DualEncoder> {
    let (vision, text) = model_paths(&cfg.paths.model_dir);
    require(&vision, "run `efsa train-base` first")?;
    require(&text, "run `efsa train-base` first")?;
    Ok(DualEncoder {
        vision: load_encoder(&vision, cfg.base.activation)?,
        text: load_encoder(&text, cfg.base.activation)?,
    })
}

fn load_index(cfg: &RunConfig) -> CliResult<PoolStore> {
    let stem = index_stem(&cfg.paths.index_dir);
    let (pool, manifest, _) = store_paths(&stem);
    require(&pool, "run `efsa index` first")?;
    require(&manifest, "run `efsa index` first")?;
    Ok(load_store(&stem)?)
}

fn load_eval_queries(cfg: &RunConfig) -> CliResult<Vec<GenQuery>> {
    let path = BenchPaths::in_dir(&cfg.paths.data_dir).queries;
    require(&path, "run `efsa gen` first")?;
    Ok(load_queries(&path)?)
}

/// Runs one command. Returns the lines to print on success.
pub fn run(command: Command, settings: &Settings) -> CliResult<Vec<String>> {
    let cfg = RunConfig::from_settings(settings)?;
    let out_dir = match command {
        Command::Gen => cfg.paths.data_dir.clone(),
        Command::TrainBase => cfg.paths.model_dir.clone(),
        Command::Index => cfg.paths.index_dir.clone(),
        _ => cfg.paths.out_dir.clone(),
    };
    let mut lines = match command {
        Command::Gen => gen(&cfg)?,
        Command::TrainBase => train(&cfg)?,
        Command::Index => index(&cfg)?,
        Command::Eval => eval(&cfg)?,
        Command::Ablate(kind) => ablate(&cfg, kind)?,
        Command::ReportStorage => storage(&cfg)?,
    };
    let resolved = out_dir.join(format!("{}.resolved.conf", command.name()));
    write_file(&resolved, &settings.render())?;
    lines.push(format!("resolved config: {}", resolved.display()));
    Ok(lines)
}

fn listing(paths: &[&Path]) -> CliResult<Vec<String>> {
    let mut lines: Vec<String> = paths
        .iter()
        .map(|p| format!("wrote {}", p.display()))
        .collect();
    lines.push(format!("sha256 {}", digest(paths)?));
    Ok(lines)
}

fn gen(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let bench = generate(&cfg.bench)?;
    let paths = save_benchmark(&bench, &cfg.paths.data_dir)?;
    listing(&paths.all())
}

fn train(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let paths = BenchPaths::in_dir(&cfg.paths.data_dir);
    require(&paths.train_texts, "run `efsa gen` first")?;
    require(&paths.train_features, "run `efsa gen` first")?;
    let data = load_train_data(&paths)?;
    if data.features.dim() != cfg.base.dims.d_in {
        return Err(CliError::config(format!(
            "training features have dimension {} but d_in = {}",
            data.features.dim(),
            cfg.base.dims.d_in
        )));
    }
    let trained = train_base(&data, &cfg.base)?;
    std::fs::create_dir_all(&cfg.paths.model_dir)?;
    let (vision, text) = model_paths(&cfg.paths.model_dir);
    save_encoder(&trained.encoders.vision, &vision)?;
    save_encoder(&trained.encoders.text, &text)?;
    let trace = cfg.paths.model_dir.join("base-loss.txt");
    let body: String = trained
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l:.6}\n", i + 1))
        .collect();
    write_file(&trace, &body)?;
    let mut lines = listing(&[&vision, &text, &trace])?;
    if let (Some(first), Some(last)) = (trained.loss_trace.first(), trained.loss_trace.last()) {
        lines.insert(
            0,
            format!(
                "base loss {first:.4} -> {last:.4} over {} steps",
                trained.loss_trace.len()
            ),
        );
    }
    Ok(lines)
}

fn index(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let stem = index_stem(&cfg.paths.index_dir);
    let store = match &cfg.paths.import_pool {
        Some(src) => {
            let (pool, manifest, _) = store_paths(src);
            require(&pool, "set import_pool to an existing pool stem")?;
            require(&manifest, "set import_pool to an existing pool stem")?;
            let imported = load_store(src)?;
            let renormalized = PoolStore::new(
                imported.dim(),
                imported.embeddings().to_vec(),
                imported.manifest().to_vec(),
            )?;
            match imported.features() {
                Some(f) => renormalized.with_features(f.clone())?,
                None => renormalized,
            }
        }
        None => {
            let paths = BenchPaths::in_dir(&cfg.paths.data_dir);
            require(&paths.manifest, "run `efsa gen` first")?;
            require(&paths.features, "run `efsa gen` first")?;
            let encoders = load_model(cfg)?;
            let open = |p: &Path| -> CliResult<std::io::BufReader<std::fs::File>> {
                Ok(std::io::BufReader::new(std::fs::File::open(p)?))
            };
            let features = read_features(&mut open(&paths.features)?)?;
            let manifest = read_manifest(open(&paths.manifest)?)?;
            index_pool(&encoders, features, manifest)?
        }
    };
    save_store(&store, &stem)?;
    let (pool, manifest, feat) = store_paths(&stem);
    let mut files = vec![pool.as_path(), manifest.as_path()];
    if store.features().is_some() {
        files.push(feat.as_path());
    }
    let mut lines = listing(&files)?;
    lines.insert(
        0,
        format!("indexed {} rows of dimension {}", store.len(), store.dim()),
    );
    Ok(lines)
}

struct Loaded {
    pool: PoolStore,
    encoders: DualEncoder,
    queries: Vec<GenQuery>,
}

impl Loaded {
    fn new(cfg: &RunConfig) -> CliResult<Self> {
        let queries = load_eval_queries(cfg)?;
        let encoders = load_model(cfg)?;
        let pool = load_index(cfg)?;
        if pool.dim() != encoders.vision.d_e() {
            return Err(CliError::config(format!(
                "index dimension {} does not match model d_e {}",
                pool.dim(),
                encoders.vision.d_e()
            )));
        }
        Ok(Self {
            pool,
            encoders,
            queries,
        })
    }

    fn input(&self) -> SuiteInput<'_> {
        SuiteInput {
            pool: &self.pool,
            encoders: &self.encoders,
            queries: &self.queries,
        }
    }
}

fn note_containment(report: &mut RecallReport, runs: &[MethodRun], k_of: impl Fn(&str) -> usize) {
    for run in runs.iter().filter(|r| !r.episodes.is_empty()) {
        report.meta(
            &format!("containment_{}", run.method),
            containment_holds(&run.episodes, k_of(&run.method)),
        );
    }
}

fn emit(
    cfg: &RunConfig,
    stem: &str,
    report: &RecallReport,
    runs: &[MethodRun],
    queries: &[GenQuery],
) -> CliResult<Vec<String>> {
    let dir = &cfg.paths.out_dir;
    let csv = dir.join(format!("{stem}.csv"));
    let records = dir.join(format!("{stem}.records"));
    let rankings = dir.join(format!("{stem}.rankings.tsv"));
    write_file(&csv, &report.to_csv())?;
    write_file(&records, &report.to_records())?;
    write_file(
        &rankings,
        &runs.iter().map(|r| r.export(queries)).collect::<String>(),
    )?;
    let mut lines: Vec<String> = report.to_csv().lines().map(str::to_string).collect();
    lines.extend(listing(&[&csv, &records, &rankings])?);
    Ok(lines)
}

fn eval(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let loaded = Loaded::new(cfg)?;
    let out = match cfg.setting {
        Setting::Multi => run_suite(&loaded.input(), &cfg.suite)?,
        Setting::Single => run_single_domain(&loaded.input(), &cfg.suite)?,
    };
    let mut report = out.report;
    report.meta(
        "setting",
        if cfg.setting == Setting::Multi {
            "multi"
        } else {
            "single"
        },
    );
    note_containment(&mut report, &out.runs, |_| cfg.suite.episode.k);
    emit(cfg, "eval", &report, &out.runs, &loaded.queries)
}

fn ablate(cfg: &RunConfig, kind: AblationKind) -> CliResult<Vec<String>> {
    let loaded = Loaded::new(cfg)?;
    let input = loaded.input();
    let base = &cfg.suite.episode;
    let Ablation { mut report, runs } = match kind {
        AblationKind::Topk => ablate_topk(&input, base, &cfg.topk_ks)?,
        AblationKind::Epochs => ablate_epochs(&input, base, &cfg.epoch_list)?,
        AblationKind::Loss => ablate_loss(&input, base)?,
        AblationKind::Lora => ablate_lora_vs_full(&input, base)?,
    };
    let ks = cfg.topk_ks.clone();
    note_containment(&mut report, &runs, |method| {
        ks.iter()
            .find(|k| method == format!("EFSA-k{k}"))
            .copied()
            .unwrap_or(base.k)
    });
    emit(
        cfg,
        &format!("ablate-{}", kind.name()),
        &report,
        &runs,
        &loaded.queries,
    )
}

fn storage(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let s = cfg.storage;
    let report = storage_report(
        s.pool_size,
        s.d_e,
        s.bytes_per_scalar,
        s.caption_tokens,
        s.bytes_per_token,
    )?;
    let text = report.to_string();
    let path = cfg.paths.out_dir.join("storage.txt");
    write_file(&path, &text)?;
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.push(format!("wrote {}", path.display()));
    Ok(lines)
}
