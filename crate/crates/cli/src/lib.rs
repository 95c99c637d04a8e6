//! Command-line front end: dataset generation, training, evaluation,
//! analysis reports, and the separability validator. Every run prints its
//! fully-resolved configuration before doing any work, and all randomness is
//! controlled by `--seed`, so identical invocations produce byte-identical
//! outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use node_moe::analysis;
use node_moe::csbm::{generate, CsbmParams};
use node_moe::graph::{detect_communities, node_homophily};
use node_moe::io::{load_bundle_with_stats, save_bundle, DatasetBundle};
use node_moe::model::{
    Checkpoint, ExpertConfig, GateConfig, GateMode, GraphContext, ModelConfig, NodeMoe,
};
use node_moe::separability::{run_theorem_row, write_theorem_csv, TheoremRow};
use node_moe::spectral::{export_filters, InitStrategy, SmoothingGrid};
use node_moe::train::{
    evaluate, make_split, train, write_history_csv, Split, SplitFractions, TrainConfig,
};
use node_moe::svg;

#[derive(Parser)]
#[command(name = "node-moe", version, about = "Node-wise spectral filtering with a mixture of experts")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mixed-pattern synthetic dataset bundle.
    Generate(GenerateArgs),
    /// Train a model on a dataset bundle.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Emit analysis reports as CSV (optionally SVG).
    Analyze(AnalyzeArgs),
    /// Validate the separability behavior of global vs. node-wise filters.
    ValidateTheorem(TheoremArgs),
    /// Export learned filter response curves.
    ExportFilters(ExportFiltersArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    #[arg(long, default_value_t = 0.05)]
    p0: f64,
    #[arg(long, default_value_t = 0.01)]
    q0: f64,
    #[arg(long, default_value_t = 0.01)]
    p1: f64,
    #[arg(long, default_value_t = 0.05)]
    q1: f64,
    /// Probability that a node is homophilic.
    #[arg(long = "P", default_value_t = 0.5)]
    prob_homophilic: f64,
    /// Target distance between the two class means.
    #[arg(long = "mu-nu-dist", default_value_t = 1.0)]
    mu_nu_dist: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Number of experts (1 bypasses the gate).
    #[arg(long, default_value_t = 2)]
    experts: usize,
    /// Chebyshev polynomial order.
    #[arg(long, default_value_t = 10)]
    order: usize,
    /// Comma-separated init strategies, one per expert
    /// (decreasing|increasing|uniform). Defaults depend on the expert count.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Expert feature-transform hidden width.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Gate GIN hidden width.
    #[arg(long = "gate-hidden", default_value_t = 32)]
    gate_hidden: usize,
    /// GIN self-weight epsilon.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Gating mode: soft or topk.
    #[arg(long, default_value = "soft")]
    mode: String,
    /// Number of active experts per node (top-k mode only).
    #[arg(long)]
    k: Option<usize>,
    /// Smoothing-grid segments on [0, 2].
    #[arg(long = "grid-segments", default_value_t = 50)]
    grid_segments: usize,
}

impl ModelArgs {
    fn gate_mode(&self) -> anyhow::Result<GateMode> {
        match self.mode.as_str() {
            "soft" => {
                if self.k.is_some() {
                    bail!("--k only applies to --mode topk");
                }
                Ok(GateMode::Soft)
            }
            "topk" => Ok(GateMode::TopK(self.k.unwrap_or(1))),
            other => bail!("unknown gating mode '{other}' (expected soft|topk)"),
        }
    }

    fn init_strategies(&self) -> anyhow::Result<Vec<InitStrategy>> {
        let defaults = |m: usize| -> Vec<InitStrategy> {
            match m {
                1 => vec![InitStrategy::Uniform],
                2 => vec![InitStrategy::Increasing, InitStrategy::Decreasing],
                3 => vec![
                    InitStrategy::Increasing,
                    InitStrategy::Decreasing,
                    InitStrategy::Uniform,
                ],
                m => {
                    // Cycle through the three families for larger ensembles.
                    let all = [
                        InitStrategy::Increasing,
                        InitStrategy::Decreasing,
                        InitStrategy::Uniform,
                    ];
                    (0..m).map(|i| all[i % 3]).collect()
                }
            }
        };
        match &self.init {
            None => Ok(defaults(self.experts)),
            Some(spec) => {
                let parts: Vec<&str> = spec.split(',').collect();
                if parts.len() != self.experts {
                    bail!(
                        "--init lists {} strategies for {} experts",
                        parts.len(),
                        self.experts
                    );
                }
                parts
                    .iter()
                    .map(|s| InitStrategy::parse(s.trim()).map_err(|e| anyhow!(e)))
                    .collect()
            }
        }
    }

    fn model_config(
        &self,
        in_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> anyhow::Result<ModelConfig> {
        let inits = self.init_strategies()?;
        let experts = inits
            .into_iter()
            .map(|init| ExpertConfig::new(self.order, self.hidden, init, self.alpha))
            .collect();
        Ok(ModelConfig {
            in_dim,
            num_classes,
            experts,
            gate: GateConfig {
                hidden: self.gate_hidden,
                mode: self.gate_mode()?,
                epsilon: self.epsilon,
            },
            grid_segments: self.grid_segments,
            seed,
        })
    }
}

#[derive(Args)]
struct TrainHyperArgs {
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long = "lr-network", default_value_t = 0.01)]
    lr_network: f64,
    #[arg(long = "lr-filter", default_value_t = 0.05)]
    lr_filter: f64,
    #[arg(long = "wd-network", default_value_t = 5e-4)]
    wd_network: f64,
    #[arg(long = "wd-filter", default_value_t = 0.0)]
    wd_filter: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Filter smoothing weight.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Load balancing weight.
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
}

impl TrainHyperArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            patience: self.patience,
            lr_filter: self.lr_filter,
            lr_network: self.lr_network,
            wd_filter: self.wd_filter,
            wd_network: self.wd_network,
            dropout: self.dropout,
            gamma: self.gamma,
            beta: self.beta,
            seed,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs with seeds seed, seed+1, ... on the same split.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Checkpoint output path (repeat i > 0 appends `.r{i}`).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch history CSV path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Which index set to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Second checkpoint for accuracy-bucket comparisons.
    #[arg(long = "baseline-ckpt")]
    baseline_ckpt: Option<PathBuf>,
    /// homophily | communities | gates | filters | accuracy-buckets
    #[arg(long)]
    report: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG plot path (homophily and filters reports).
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 5)]
    buckets: usize,
    #[arg(long = "top", default_value_t = 10)]
    top_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TheoremArgs {
    /// Named parameter preset (regime1) instead of explicit parameters.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    #[arg(long, default_value_t = 0.05)]
    p0: f64,
    #[arg(long, default_value_t = 0.01)]
    q0: f64,
    #[arg(long, default_value_t = 0.01)]
    p1: f64,
    #[arg(long, default_value_t = 0.05)]
    q1: f64,
    #[arg(long = "P", default_value_t = 0.5)]
    prob_homophilic: f64,
    #[arg(long = "mu-nu-dist", default_value_t = 1.0)]
    mu_nu_dist: f64,
    /// Weight-norm bound of the linear probe.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportFiltersArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

/// Parse and execute; returns the process exit code (0 success,
/// 1 validation error, 2 runtime failure).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<node_moe::Error>() {
            return match e {
                node_moe::Error::InvalidInput(_)
                | node_moe::Error::ShapeMismatch(_)
                | node_moe::Error::Parse { .. } => 1,
                node_moe::Error::Diverged(_)
                | node_moe::Error::Io(_)
                | node_moe::Error::Serde(_) => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    // Argument-level problems raised in this crate are validation errors.
    1
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::ValidateTheorem(args) => cmd_theorem(args),
        Command::ExportFilters(args) => cmd_export_filters(args),
    }
}

fn print_config(command: &str, value: serde_json::Value) {
    let full = json!({ "command": command, "config": value });
    println!("{}", serde_json::to_string_pretty(&full).expect("config serializes"));
}

fn csbm_params(
    n: usize,
    d: usize,
    p0: f64,
    q0: f64,
    p1: f64,
    q1: f64,
    prob: f64,
    dist: f64,
    seed: u64,
) -> anyhow::Result<CsbmParams> {
    Ok(CsbmParams::with_mean_distance(
        n,
        d,
        (p0, q0),
        (p1, q1),
        prob,
        dist,
        seed,
    )?)
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let params = csbm_params(
        args.n,
        args.d,
        args.p0,
        args.q0,
        args.p1,
        args.q1,
        args.prob_homophilic,
        args.mu_nu_dist,
        args.seed,
    )?;
    print_config(
        "generate",
        json!({ "params": params, "out": args.out }),
    );
    let sample = generate(&params)?;
    let bundle = DatasetBundle::from_sample(&sample, "csbm");
    save_bundle(&bundle, &args.out)?;
    let h = node_homophily(&sample.graph, &sample.labels);
    println!(
        "{}",
        json!({
            "nodes": sample.graph.num_nodes(),
            "edges": sample.graph.num_edges(),
            "mean_homophily": node_moe::graph::graph_homophily(&h),
            "out": args.out,
        })
    );
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<(DatasetBundle, GraphContext)> {
    let (bundle, stats) = load_bundle_with_stats(path)
        .with_context(|| format!("loading bundle from {}", path.display()))?;
    if stats.duplicate_edges > 0 || stats.self_loops > 0 {
        eprintln!(
            "note: dropped {} duplicate edge line(s) and {} self-loop(s)",
            stats.duplicate_edges, stats.self_loops
        );
    }
    let ctx = GraphContext::new(Arc::new(bundle.graph.clone()), bundle.features.clone())?;
    Ok((bundle, ctx))
}

fn with_repeat_suffix(path: &Path, repeat: usize) -> PathBuf {
    if repeat == 0 {
        path.to_path_buf()
    } else {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".r{repeat}"));
        path.with_file_name(name)
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let (bundle, ctx) = load_data(&args.data)?;
    let model_cfg = args
        .model
        .model_config(bundle.meta.feature_dim, bundle.meta.num_classes, args.seed)?;
    let train_cfg = args.hyper.train_config(args.seed);
    train_cfg.validate()?;
    model_cfg.validate()?;

    // One split for all repeats: taken from the bundle when present,
    // otherwise generated from the base seed.
    let (split, split_from_file) = match &bundle.splits {
        Some(s) => (s.clone(), true),
        None => (
            make_split(
                bundle.meta.num_nodes,
                &bundle.labels,
                &train_cfg.fractions,
                args.seed,
            )?,
            false,
        ),
    };
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }

    print_config(
        "train",
        json!({
            "data": args.data,
            "model": model_cfg,
            "train": train_cfg,
            "seed": args.seed,
            "repeats": args.repeats,
            "split_from_file": split_from_file,
            "out": args.out,
            "history": args.history,
        }),
    );

    let mut test_accs = Vec::new();
    for r in 0..args.repeats {
        let run_seed = args.seed + r as u64;
        let mut mc = model_cfg.clone();
        mc.seed = run_seed;
        let mut tc = train_cfg.clone();
        tc.seed = run_seed;
        let model = NodeMoe::new(mc.clone())?;
        let outcome = train(model, &ctx, &bundle.labels, &split, &tc)?;
        let (test_acc, _) = evaluate(&outcome.model, &ctx, &bundle.labels, &split.test)?;
        test_accs.push(test_acc);

        let mut ckpt = outcome.model.to_checkpoint();
        ckpt.train_config = Some(json!({
            "train": tc,
            "split_seed": args.seed,
            "split_from_file": split_from_file,
        }));
        let ckpt_path = with_repeat_suffix(&args.out, r);
        ckpt.save(&ckpt_path)?;
        if let Some(history) = &args.history {
            let path = with_repeat_suffix(history, r);
            let mut file = std::fs::File::create(&path)?;
            write_history_csv(&outcome.history, &mut file)?;
        }
        println!(
            "{}",
            json!({
                "repeat": r,
                "seed": run_seed,
                "best_epoch": outcome.best_epoch,
                "best_val_acc": outcome.best_val_acc,
                "test_acc": test_acc,
                "ckpt": ckpt_path,
            })
        );
    }
    let mean = test_accs.iter().sum::<f64>() / test_accs.len() as f64;
    let std = (test_accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
        / test_accs.len() as f64)
        .sqrt();
    println!(
        "{}",
        json!({ "repeats": args.repeats, "test_acc_mean": mean, "test_acc_std": std })
    );
    Ok(())
}

/// Split used by a checkpoint: the bundle's own when present, otherwise
/// regenerated from the training configuration embedded in the checkpoint.
fn split_for(bundle: &DatasetBundle, ckpt: &Checkpoint) -> anyhow::Result<Split> {
    if let Some(s) = &bundle.splits {
        return Ok(s.clone());
    }
    let tc = ckpt
        .train_config
        .as_ref()
        .ok_or_else(|| anyhow!("bundle has no splits.json and checkpoint has no training config"))?;
    let split_seed = tc
        .get("split_seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| anyhow!("checkpoint training config lacks a split seed"))?;
    let fractions: SplitFractions = serde_json::from_value(
        tc.get("train")
            .and_then(|t| t.get("fractions"))
            .cloned()
            .ok_or_else(|| anyhow!("checkpoint training config lacks split fractions"))?,
    )?;
    Ok(make_split(
        bundle.meta.num_nodes,
        &bundle.labels,
        &fractions,
        split_seed,
    )?)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (bundle, ctx) = load_data(&args.data)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    print_config(
        "evaluate",
        json!({ "data": args.data, "ckpt": args.ckpt, "split": args.split }),
    );
    let model = NodeMoe::from_checkpoint(ckpt.clone())?;
    let split = split_for(&bundle, &ckpt)?;
    let all: Vec<usize> = (0..bundle.meta.num_nodes).collect();
    let idx: &[usize] = match args.split.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        "all" => &all,
        other => bail!("unknown split '{other}' (expected train|val|test|all)"),
    };
    let (acc, flags) = evaluate(&model, &ctx, &bundle.labels, idx)?;
    let pred = model.predict(&ctx)?;
    println!(
        "{}",
        json!({
            "split": args.split,
            "nodes": idx.len(),
            "accuracy": acc,
            "correct": flags.iter().filter(|&&b| b).count(),
            "gate_max_nonzeros_per_row": pred.gate.max_nonzeros_per_row(),
        })
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let (bundle, ctx) = load_data(&args.data)?;
    print_config(
        "analyze",
        json!({
            "data": args.data,
            "report": args.report,
            "ckpt": args.ckpt,
            "baseline_ckpt": args.baseline_ckpt,
            "out": args.out,
            "svg": args.svg,
            "bins": args.bins,
            "buckets": args.buckets,
            "top": args.top_n,
            "seed": args.seed,
        }),
    );
    let mut out = std::fs::File::create(&args.out)?;
    match args.report.as_str() {
        "homophily" => {
            let table = analysis::homophily_density(&bundle.graph, &bundle.labels, args.bins)?;
            analysis::write_density_csv(&table, &mut out)?;
            if let Some(svg_path) = &args.svg {
                let series = vec![
                    svg::Series {
                        label: "density".into(),
                        points: table.rows.iter().map(|r| (r.center, r.density)).collect(),
                    },
                    svg::Series {
                        label: "histogram".into(),
                        points: table.rows.iter().map(|r| (r.center, r.histogram)).collect(),
                    },
                ];
                let mut f = std::fs::File::create(svg_path)?;
                svg::line_plot(&series, "node homophily density", &mut f)?;
            }
            println!(
                "{}",
                json!({ "mode": table.mode(), "skipped_nodes": table.skipped_nodes })
            );
        }
        "communities" => {
            let membership = detect_communities(&bundle.graph, args.seed);
            let rows =
                analysis::community_homophily(&bundle.graph, &bundle.labels, &membership, args.top_n)?;
            analysis::write_communities_csv(&rows, &mut out)?;
            println!(
                "{}",
                json!({
                    "communities": membership.iter().copied().max().map_or(0, |c| c + 1),
                    "reported": rows.len(),
                })
            );
        }
        "gates" => {
            let ckpt_path = args.ckpt.as_ref().ok_or_else(|| anyhow!("--ckpt required"))?;
            let model = NodeMoe::from_checkpoint(Checkpoint::load(ckpt_path)?)?;
            let pred = model.predict(&ctx)?;
            let h = node_homophily(&bundle.graph, &bundle.labels);
            let bw = analysis::gate_weight_by_homophily(&h, &pred.gate.weights, args.buckets)?;
            analysis::write_bucket_weights_csv(&bw, &mut out)?;
            println!(
                "{}",
                json!({
                    "spearman_per_expert": bw.spearman_per_expert,
                    "empty_buckets": bw.empty_buckets,
                    "skipped_nodes": bw.skipped_nodes,
                })
            );
        }
        "filters" => {
            let ckpt_path = args.ckpt.as_ref().ok_or_else(|| anyhow!("--ckpt required"))?;
            let model = NodeMoe::from_checkpoint(Checkpoint::load(ckpt_path)?)?;
            write_filter_curves(&model, &mut out, args.svg.as_deref())?;
        }
        "accuracy-buckets" => {
            let ckpt_path = args.ckpt.as_ref().ok_or_else(|| anyhow!("--ckpt required"))?;
            let ckpt = Checkpoint::load(ckpt_path)?;
            let model = NodeMoe::from_checkpoint(ckpt.clone())?;
            let split = split_for(&bundle, &ckpt)?;
            let (_, flags_a) = evaluate(&model, &ctx, &bundle.labels, &split.test)?;
            let flags_b = match &args.baseline_ckpt {
                Some(p) => {
                    let other = NodeMoe::from_checkpoint(Checkpoint::load(p)?)?;
                    let (_, f) = evaluate(&other, &ctx, &bundle.labels, &split.test)?;
                    Some(f)
                }
                None => None,
            };
            let h = node_homophily(&bundle.graph, &bundle.labels);
            let ab = analysis::accuracy_by_homophily(
                &h,
                &split.test,
                &flags_a,
                flags_b.as_deref(),
                args.buckets,
            )?;
            analysis::write_accuracy_buckets_csv(&ab, &mut out)?;
            println!(
                "{}",
                json!({
                    "overall_a": ab.overall_a,
                    "overall_b": ab.overall_b,
                    "skipped_nodes": ab.skipped_nodes,
                })
            );
        }
        other => bail!(
            "unknown report '{other}' (expected homophily|communities|gates|filters|accuracy-buckets)"
        ),
    }
    Ok(())
}

fn write_filter_curves(
    model: &NodeMoe,
    out: &mut dyn std::io::Write,
    svg_path: Option<&Path>,
) -> anyhow::Result<()> {
    let grid = model.grid();
    let filters = model.all_filter_coeffs();
    export_filters(&filters, grid, out)?;
    if let Some(path) = svg_path {
        let series: Vec<svg::Series> = filters
            .iter()
            .enumerate()
            .map(|(o, f)| {
                Ok(svg::Series {
                    label: format!("expert_{o}"),
                    points: grid
                        .points()
                        .iter()
                        .map(|&x| Ok((x, f.response(x)?)))
                        .collect::<node_moe::Result<Vec<_>>>()?,
                })
            })
            .collect::<node_moe::Result<Vec<_>>>()?;
        let mut f = std::fs::File::create(path)?;
        svg::line_plot(&series, "filter frequency responses", &mut f)?;
    }
    Ok(())
}

fn cmd_theorem(args: TheoremArgs) -> anyhow::Result<()> {
    let base = match args.preset.as_deref() {
        Some("regime1") => csbm_params(2000, 100, 0.05, 0.01, 0.01, 0.05, 0.5, 1.0, args.seed)?,
        Some(other) => bail!("unknown preset '{other}' (expected regime1)"),
        None => csbm_params(
            args.n,
            args.d,
            args.p0,
            args.q0,
            args.p1,
            args.q1,
            args.prob_homophilic,
            args.mu_nu_dist,
            args.seed,
        )?,
    };
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    print_config(
        "validate-theorem",
        json!({
            "params": base,
            "radius": args.radius,
            "seeds": args.seeds,
            "seed": args.seed,
            "out": args.out,
        }),
    );
    let mut rows: Vec<TheoremRow> = Vec::with_capacity(args.seeds);
    for i in 0..args.seeds {
        let mut params = base.clone();
        params.seed = args.seed + i as u64;
        rows.push(run_theorem_row(&params, args.radius)?);
    }
    let mut file = std::fs::File::create(&args.out)?;
    write_theorem_csv(&rows, &mut file)?;

    let med = |f: fn(&TheoremRow) -> f64| median(rows.iter().map(f).collect());
    println!(
        "{}",
        json!({
            "median_h0_acc": med(|r| r.h0_acc),
            "median_h1_acc": med(|r| r.h1_acc),
            "median_h1_bce": med(|r| r.h1_bce),
            "bound": rows[0].bound,
            "median_part1_overall_acc": med(|r| r.part1_overall_acc),
            "median_part2_acc": med(|r| r.part2_acc),
            "out": args.out,
        })
    );
    Ok(())
}

fn cmd_export_filters(args: ExportFiltersArgs) -> anyhow::Result<()> {
    print_config(
        "export-filters",
        json!({ "ckpt": args.ckpt, "out": args.out, "svg": args.svg }),
    );
    let model = NodeMoe::from_checkpoint(Checkpoint::load(&args.ckpt)?)?;
    let mut out = std::fs::File::create(&args.out)?;
    write_filter_curves(&model, &mut out, args.svg.as_deref())?;
    // Also report the grid so downstream plots can label the axis.
    let grid: &SmoothingGrid = model.grid();
    println!(
        "{}",
        json!({ "experts": model.config().num_experts(), "grid_points": grid.points().len() })
    );
    Ok(())
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
