//! Argument parsing and the four subcommands.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use celltopic_core::cluster::{ari, cluster_theta, nmi, ClusterMode};
use celltopic_core::data::{generate_synthetic, Dataset, PathwayDb, SynthConfig};
use celltopic_core::metrics::{full_report, GseaConfig, MetricsConfig};
use celltopic_core::model::{train_with, EpochLog, RegMode, TopicOutputs, TrainConfig};
use celltopic_core::ot::SinkhornConfig;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{CliError, Result};
use crate::io::{self, NamedMatrix};
use crate::report::{self, ClusterScores, ClusteringOutput, EvalConfig, EvalReport, Scores};

pub const THREADS_ENV: &str = "CELLTOPIC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "celltopic", version, about = "Cross-view embedded topic modelling for single-cell expression data")]
pub struct Cli {
    /// Worker threads for parallel kernels.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-topic dataset.
    Synth(SynthArgs),
    /// Fit the model and write a checkpoint plus topic outputs.
    Train(TrainArgs),
    /// Score trained outputs against labels and a pathway database.
    Eval(EvalArgs),
    /// Print a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub cells: usize,
    #[arg(long, default_value_t = 300)]
    pub genes: usize,
    #[arg(long, default_value_t = 5)]
    pub topics: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub view_dim: usize,
    /// Expression boost of each topic's signature genes.
    #[arg(long, default_value_t = 10.0)]
    pub boost: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExprFormat {
    Csv,
    Mtx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    /// Entropy of the batch-mean assignment.
    BatchMean,
    /// Sum of per-cell assignment entropies.
    PerCell,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cells × genes expression counts.
    #[arg(long)]
    pub expression: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<ExprFormat>,
    /// Gene names for an MTX input, one per line.
    #[arg(long)]
    pub mtx_genes: Option<PathBuf>,
    /// Cell ids for an MTX input, one per line.
    #[arg(long)]
    pub mtx_cells: Option<PathBuf>,
    /// External cell embeddings (headerless CSV, same row order).
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Train without the external view.
    #[arg(long)]
    pub no_cve: bool,
    #[arg(long, default_value_t = 100)]
    pub topics: usize,
    #[arg(long, default_value_t = 200)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 200)]
    pub hidden: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Defaults to 512 below 10 000 cells, 2048 otherwise.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 20.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub sinkhorn_tol: f64,
    #[arg(long, default_value_t = 15)]
    pub knn: usize,
    #[arg(long, default_value_t = 0.5)]
    pub contrastive_temperature: f64,
    #[arg(long, default_value_t = 5000)]
    pub n_hvg: usize,
    #[arg(long, default_value_t = 10)]
    pub top_genes: usize,
    #[arg(long, value_enum, default_value_t = RegArg::BatchMean)]
    pub reg: RegArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print progress every this many epochs.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClusterArg {
    Argmax,
    Kmeans,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// `cell_id,label` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// Pathway database in GMT format.
    #[arg(long)]
    pub gmt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_genes: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_perm: usize,
    #[arg(long, default_value_t = 0.05)]
    pub ora_q: f64,
    #[arg(long, default_value_t = 0.01)]
    pub gsea_q: f64,
    /// Exponent on gene scores in the GSEA walk (0 = unweighted).
    #[arg(long, default_value_t = 1.0)]
    pub gsea_weight: f64,
    #[arg(long, value_enum, default_value_t = ClusterArg::Argmax)]
    pub cluster: ClusterArg,
    /// Cluster count for k-means; defaults to the number of label classes.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` written by `eval`.
    pub input: PathBuf,
    /// Print the JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub const EXPRESSION_FILE: &str = "expression.csv";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const GMT_FILE: &str = "pathways.gmt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const THETA_FILE: &str = "theta.csv";
pub const GENE_TOPIC_FILE: &str = "gene_topic.csv";
pub const TOP_GENES_FILE: &str = "top_genes.json";
pub const REPORT_FILE: &str = "report.json";
pub const CLUSTERING_FILE: &str = "clustering.json";
pub const ORA_FILE: &str = "ora.csv";
pub const GSEA_FILE: &str = "gsea.csv";

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.quiet),
        Command::Train(a) => train(a, cli.quiet),
        Command::Eval(a) => eval(a, cli.quiet),
        Command::Report(a) => print_report(a),
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct Truth {
    pub config: SynthConfig,
    pub labels: Vec<usize>,
    pub signature_genes: Vec<Vec<String>>,
}

pub fn synth(a: &SynthArgs, quiet: bool) -> Result<()> {
    let cfg = SynthConfig {
        n_cells: a.cells,
        n_genes: a.genes,
        n_topics: a.topics,
        zipf_exponent: a.zipf,
        noise_level: a.noise,
        view_dim: a.view_dim,
        boost: a.boost,
        seed: a.seed,
    };
    let s = generate_synthetic(&cfg)?;
    let d = &s.dataset;
    let expr = NamedMatrix { row_names: d.cell_ids.clone(), col_names: d.gene_names.clone(), values: d.expression.clone() };
    io::write_expression_csv(&a.out.join(EXPRESSION_FILE), &expr)?;
    io::write_embedding_csv(&a.out.join(EMBEDDING_FILE), d.external.as_ref().expect("synthetic data has a view"))?;
    let label_names: Vec<String> = s.labels.iter().map(|l| format!("type_{l}")).collect();
    io::write_labels(&a.out.join(LABELS_FILE), &d.cell_ids, &label_names)?;
    let signature_genes =
        s.signature_blocks.iter().map(|b| b.clone().map(|g| d.gene_names[g].clone()).collect()).collect();
    io::write_json(&a.out.join(TRUTH_FILE), &Truth { config: cfg, labels: s.labels.clone(), signature_genes })?;
    io::write_gmt(&a.out.join(GMT_FILE), &s.signature_pathways())?;
    if !quiet {
        eprintln!("wrote {} cells x {} genes to {}", d.n_cells(), d.n_genes(), a.out.display());
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        n_topics: a.topics,
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        alpha: a.alpha,
        lambda: a.lambda,
        tau: a.tau,
        sinkhorn: SinkhornConfig { epsilon: a.epsilon, max_iter: a.sinkhorn_iters, tol: a.sinkhorn_tol },
        knn_k: a.knn,
        contrastive_temperature: a.contrastive_temperature,
        n_hvg: a.n_hvg,
        top_h: a.top_genes,
        reg_mode: match a.reg {
            RegArg::BatchMean => RegMode::BatchMean,
            RegArg::PerCell => RegMode::PerCell,
        },
        use_cve: !a.no_cve,
        seed: a.seed,
    }
}

fn load_expression(a: &TrainArgs) -> Result<NamedMatrix> {
    let format = a.format.unwrap_or_else(|| {
        if a.expression.extension().is_some_and(|e| e.eq_ignore_ascii_case("mtx")) {
            ExprFormat::Mtx
        } else {
            ExprFormat::Csv
        }
    });
    match format {
        ExprFormat::Csv => io::read_expression_csv(&a.expression),
        ExprFormat::Mtx => io::read_mtx(&a.expression, a.mtx_genes.as_deref(), a.mtx_cells.as_deref()),
    }
}

pub fn train(a: &TrainArgs, quiet: bool) -> Result<()> {
    let cfg = train_config(a);
    cfg.validate()?;
    let expr = load_expression(a)?;
    let external = match (&a.embedding, a.no_cve) {
        (_, true) => None,
        (Some(p), false) => Some(io::read_embedding_csv(p)?),
        (None, false) => return Err(CliError::Usage("--embedding is required unless --no-cve is given".into())),
    };
    if let Some(v) = &external {
        if v.rows() != expr.values.rows() {
            return Err(CliError::Data(format!(
                "embedding has {} rows, expression has {} cells",
                v.rows(),
                expr.values.rows()
            )));
        }
    }
    let dataset = Dataset::new(expr.values, external, expr.col_names, expr.row_names, None)?;

    let mut log = String::from("epoch,L_RE,L_CON,L_NEI,L_REG,L_ECR,total,sinkhorn_iters,sinkhorn_violation\n");
    let every = a.log_every.max(1);
    let result = train_with(&dataset, &cfg, |e: &EpochLog| {
        let l = &e.losses;
        log.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.epoch, l.re, l.con, l.nei, l.reg, l.ecr, l.total, e.sinkhorn_iters, e.sinkhorn_violation
        ));
        if !quiet && (e.epoch.is_multiple_of(every) || e.epoch == cfg.epochs) {
            eprintln!("epoch {:>4}  total {:.4}  re {:.4}  ecr {:.4}", e.epoch, l.total, l.re, l.ecr);
        }
    });
    // Keep the partial loss log when training stops early.
    io::atomic_write(&a.out.join(LOSS_LOG_FILE), log.as_bytes())?;
    let result = result?;

    let out = &result.outputs;
    let gene_names = out.gene_names.clone();
    checkpoint::save(
        &a.out.join(CHECKPOINT_DIR),
        &Checkpoint { params: result.params.clone(), config: cfg.clone(), gene_names: gene_names.clone() },
    )?;
    let topics = io::topic_names(out.n_topics());
    io::write_named_csv(
        &a.out.join(THETA_FILE),
        "cell_id",
        &NamedMatrix { row_names: dataset.cell_ids.clone(), col_names: topics.clone(), values: out.theta.clone() },
    )?;
    io::write_named_csv(
        &a.out.join(GENE_TOPIC_FILE),
        "gene",
        &NamedMatrix { row_names: gene_names, col_names: topics, values: out.gene_topic.clone() },
    )?;
    io::write_top_genes(&a.out.join(TOP_GENES_FILE), &out.top_genes)?;
    if !quiet {
        eprintln!("wrote model outputs to {}", a.out.display());
    }
    Ok(())
}

/// Restricts every pathway to `vocabulary`, dropping pathways left empty.
pub fn restrict_pathways(db: &PathwayDb, vocabulary: &[String], warnings: &mut Vec<String>) -> Result<PathwayDb> {
    let vocab: BTreeSet<&str> = vocabulary.iter().map(String::as_str).collect();
    let mut out = PathwayDb::new();
    let mut missing = BTreeSet::new();
    let mut dropped = Vec::new();
    for p in db.iter() {
        let kept: Vec<&String> = p.genes.iter().filter(|g| vocab.contains(g.as_str())).collect();
        missing.extend(p.genes.iter().filter(|g| !vocab.contains(g.as_str())).map(String::as_str));
        if kept.is_empty() {
            dropped.push(p.name.clone());
        } else {
            out.insert(p.name.clone(), kept.into_iter().cloned())?;
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no pathway gene is in the model vocabulary".into()));
    }
    if !missing.is_empty() {
        warnings.push(format!("{} pathway genes are not in the model vocabulary and were ignored", missing.len()));
    }
    if !dropped.is_empty() {
        warnings.push(format!("{} pathways share no gene with the model vocabulary: {}", dropped.len(), dropped.join(", ")));
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs, quiet: bool) -> Result<()> {
    let theta = io::read_named_csv(&a.model.join(THETA_FILE))?;
    let gene_topic = io::read_named_csv(&a.model.join(GENE_TOPIC_FILE))?;
    if theta.values.cols() != gene_topic.values.cols() {
        return Err(CliError::Data("theta and gene-topic files disagree on the number of topics".into()));
    }
    let labels = io::read_labels(&a.labels)?.align(&theta.row_names)?;
    let mut warnings = Vec::new();
    let db = restrict_pathways(&io::read_gmt(&a.gmt)?, &gene_topic.row_names, &mut warnings)?;
    for w in &warnings {
        if !quiet {
            eprintln!("warning: {w}");
        }
    }

    let metrics = MetricsConfig {
        top_h: a.top_genes,
        ora_q_threshold: a.ora_q,
        gsea: GseaConfig { n_perm: a.n_perm, q_threshold: a.gsea_q, weight: a.gsea_weight, seed: a.seed },
    };
    let outputs = TopicOutputs::new(theta.values, gene_topic.values, gene_topic.row_names.clone(), a.top_genes.min(gene_topic.row_names.len()))?;
    let interp = full_report(&outputs, &labels, &db, &metrics)?;

    let n_classes = labels.iter().collect::<BTreeSet<_>>().len();
    let (mode, kmeans_k) = match a.cluster {
        ClusterArg::Argmax => (ClusterMode::Argmax, None),
        ClusterArg::Kmeans => {
            let k = a.k.unwrap_or(n_classes);
            (ClusterMode::KMeans { k, seed: a.seed }, Some(k))
        }
    };
    let assignments = cluster_theta(&outputs.theta, mode)?;
    let clustering = ClusterScores {
        mode: format!("{:?}", a.cluster).to_lowercase(),
        n_clusters: assignments.iter().collect::<BTreeSet<_>>().len(),
        ari: ari(&assignments, &labels)?,
        nmi: nmi(&assignments, &labels)?,
    };

    let scores = Scores::from(&interp);
    let report = EvalReport {
        negative_tc: scores.tc < 0.0,
        scores,
        clustering: clustering.clone(),
        n_cells: outputs.theta.rows(),
        n_genes: outputs.gene_names.len(),
        n_topics: outputs.n_topics(),
        n_pathways: db.len(),
        topic_coherence: interp.topic_coherence.clone(),
        top_genes: interp.top_genes.clone(),
        ora_skipped: interp.ora.skipped.clone(),
        gsea_skipped: interp.gsea.skipped.clone(),
        warnings,
        config: EvalConfig { metrics, cluster_mode: clustering.mode.clone(), kmeans_k },
    };
    io::write_json(&a.out.join(REPORT_FILE), &report)?;
    io::write_json(
        &a.out.join(CLUSTERING_FILE),
        &ClusteringOutput { scores: clustering, cell_ids: theta.row_names, assignments },
    )?;
    report::write_enrichment_csv(&a.out.join(ORA_FILE), &interp.ora)?;
    report::write_enrichment_csv(&a.out.join(GSEA_FILE), &interp.gsea)?;
    if !quiet {
        eprint!("{}", report::render(&report));
    }
    Ok(())
}

pub fn print_report(a: &ReportArgs) -> Result<()> {
    let r: EvalReport = io::read_json(&a.input)?;
    let text = if a.json {
        serde_json::to_string_pretty(&r).map_err(|e| CliError::Data(e.to_string()))? + "\n"
    } else {
        report::render(&r)
    };
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}
