use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsketch::lowrank::{expected_space, lowrank_run, AdaptiveVariant, LowRankConfig, ProductMode};
use fsketch::regress::{min_norm_lstsq, regress_solve, RegressionConfig};
use fsketch::streams::{
    gen_logdata, gen_rank_fixture, gen_regression, gen_sqdata, ingest_cooccurrence,
    pmi_column_weights, write_text, CooccurrenceConfig, Generated, LogDataVariant, MemoryStream,
    UpdateStream, Weighting,
};
use fsketch::{Error, Result, Transform};
use fsketch_cli::{
    baseline_uniform, dense_transformed, error_ratio, load_memory, matched_columns, read_unigrams,
    read_vector, resolve_budget, write_csv, write_records, write_vector, Budget, EvalRecord,
    WORD_BYTES,
};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "fsketch", version, about = "Streaming f(A)·B sketches and the pipelines built on them")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic or ingested stream file.
    Generate(GenerateArgs),
    /// Run the low-rank pipeline and report error and space ratios.
    Lowrank(LowrankArgs),
    /// Uniform column sampling baseline.
    Baseline(BaselineArgs),
    /// Grid over k-set budgets and sample sizes.
    Sweep(SweepArgs),
    /// Sketch-and-solve regression on log(|A| + 1).
    Regress(RegressArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Logdata,
    Sqdata,
    Cooc,
    Fixture,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Unit,
    Inverse,
}

#[derive(Args)]
struct SeedArg {
    /// Defaults to $FSKETCH_SEED, then 0.
    #[arg(long, env = "FSKETCH_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    kind: Kind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Write the text format instead of the binary one.
    #[arg(long)]
    text: bool,
    /// logdata: use exp(M) rather than exp(M) - 1.
    #[arg(long)]
    exp: bool,
    /// fixture: rank of the latent matrix.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// regression: number of features; the target is written to OUT.b.
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// regression: noise level of the target.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// cooc: input text, one sentence per line.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Unit)]
    weighting: WeightingArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Skip the dense oracle; error columns are left empty.
    #[arg(long)]
    no_exact_eval: bool,
    /// Largest dimension the dense oracle accepts.
    #[arg(long, default_value_t = 4000)]
    max_exact_n: usize,
    /// Write 0 in the wall_ms column.
    #[arg(long)]
    no_timing: bool,
    /// Dataset label; defaults to the stream file stem.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct LowrankArgs {
    stream: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "log1p")]
    f: Transform,
    /// Integer size or percentage of dense space; defaults to the size formulas.
    #[arg(long)]
    budget: Option<Budget>,
    #[arg(long, default_value = "experimental_qi")]
    variant: AdaptiveVariant,
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    #[command(flatten)]
    seed: SeedArg,
    /// Number of consecutive seeds; more than one appends a mean row.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Use exact products instead of sketches.
    #[arg(long)]
    exact_products: bool,
    /// Skip the uniform baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Unigram sidecar; columns are weighted by max(1, (N_j / N_10)^2).
    #[arg(long)]
    pmi_weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct BaselineArgs {
    stream: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "log1p")]
    f: Transform,
    #[arg(long)]
    num_cols: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct SweepArgs {
    stream: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "log1p")]
    f: Transform,
    /// K-set capacities.
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<usize>,
    /// Sample sizes, used for s = d1 = d2.
    #[arg(long, value_delimiter = ',', required = true)]
    gammas: Vec<usize>,
    #[arg(long, default_value = "experimental_qi")]
    variant: AdaptiveVariant,
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct RegressArgs {
    stream: PathBuf,
    /// Target vector, one value per line.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    /// Sketch rows; defaults to ceil(4 d^2 / eps^2).
    #[arg(long)]
    s: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    exact_products: bool,
    #[arg(long)]
    no_exact_eval: bool,
    /// Report x for the problem rescaled to ||f(A)||_2 = 1.
    #[arg(long)]
    normalize: bool,
    /// Write the solution here, one value per line.
    #[arg(long)]
    x_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Lowrank(a) => cmd_lowrank(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Regress(a) => cmd_regress(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsketch: {e}");
            ExitCode::from(fsketch_cli::exit_code(&e) as u8)
        }
    }
}

fn save(stream: &MemoryStream, out: &Path, text: bool) -> Result<()> {
    if text {
        write_text(BufWriter::new(File::create(out)?), stream)
    } else {
        stream.save(out)
    }
}

fn sidecar(out: &Path, ext: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let seed = a.seed.seed;
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let stream = match a.kind {
        Kind::Logdata => {
            let v = if a.exp { LogDataVariant::Exp } else { LogDataVariant::ExpMinusOne };
            gen_logdata(a.n, seed, v)?.stream
        }
        Kind::Sqdata => gen_sqdata(a.n, seed)?.stream,
        Kind::Fixture => gen_rank_fixture(a.n, a.k, seed)?.stream,
        Kind::Regression => {
            let data = gen_regression(a.n, a.d, a.noise, seed)?;
            write_vector(&sidecar(&a.out, ".b"), &data.b)?;
            let Generated { stream, .. } = data.generated;
            stream
        }
        Kind::Cooc => {
            let input = a
                .input
                .as_ref()
                .ok_or_else(|| Error::Config("cooc needs --input".into()))?;
            let text = std::fs::read_to_string(input)?;
            let mut cfg = CooccurrenceConfig::new(a.n);
            cfg.window = a.window;
            cfg.weighting = match a.weighting {
                WeightingArg::Unit => Weighting::Unit,
                WeightingArg::Inverse => Weighting::InverseDistance,
            };
            let c = ingest_cooccurrence(&text, &cfg)?;
            c.write_unigrams(BufWriter::new(File::create(sidecar(&a.out, ".unigrams"))?))?;
            c.stream
        }
    };
    save(&stream, &a.out, a.text)?;
    let h = stream.header();
    println!("wrote {} events ({}x{}) to {}", h.m, h.n_rows, h.n_cols, a.out.display());
    Ok(())
}

fn dataset_name(label: &Option<String>, path: &Path) -> String {
    label.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "stream".into())
    })
}

/// Loads the stream and, unless disabled, the dense oracle `f(A)`.
fn prepare(path: &Path, f: Transform, eval: &EvalArgs) -> Result<(MemoryStream, Option<DMatrix<f64>>)> {
    let stream = load_memory(path)?;
    let h = stream.header();
    let big = h.n_rows.max(h.n_cols) as usize;
    if !eval.no_exact_eval && big > eval.max_exact_n {
        return Err(Error::Config(format!(
            "dense evaluation of a {}x{} matrix is too large; pass --no-exact-eval or raise --max-exact-n",
            h.n_rows, h.n_cols
        )));
    }
    let oracle = if eval.no_exact_eval {
        None
    } else {
        let mut s = stream.clone();
        Some(dense_transformed(&mut s, f)?)
    };
    Ok((stream, oracle))
}

fn emit(out: &Option<PathBuf>, rows: &[EvalRecord]) -> Result<()> {
    match out {
        Some(p) => write_csv(p, rows),
        None => write_records(std::io::stdout().lock(), rows, true),
    }
}

struct RunSpec<'a> {
    dataset: &'a str,
    k: usize,
    f: Transform,
    budget: String,
    gamma: String,
    seed: u64,
    baseline: bool,
    timing: bool,
}

fn run_once(
    stream: &MemoryStream,
    oracle: Option<&DMatrix<f64>>,
    cfg: &LowRankConfig,
    spec: &RunSpec<'_>,
) -> Result<EvalRecord> {
    let h = stream.header();
    let (n, m) = (h.n_rows as usize, h.n_cols as usize);
    let dense_bytes = (n * m * WORD_BYTES) as f64;
    let mut s = stream.clone();
    let t = Instant::now();
    let res = lowrank_run(&mut s, cfg, spec.f)?;
    let wall_ms = if spec.timing { t.elapsed().as_millis() as u64 } else { 0 };
    let weighted = |o: &DMatrix<f64>| -> DMatrix<f64> {
        match &cfg.column_weights {
            None => o.clone(),
            Some(w) => {
                let mut o = o.clone();
                for (j, mut c) in o.column_iter_mut().enumerate() {
                    c *= w[j];
                }
                o
            }
        }
    };
    let target = oracle.map(weighted);
    let err = target.as_ref().map(|o| error_ratio(o, &res.l, spec.k));
    let base = match (&target, spec.baseline) {
        (Some(o), true) => {
            let planned = expected_space(n, m, cfg, h.scale_bits)?;
            let cols = matched_columns(planned, n, m, spec.k);
            let mut s = stream.clone();
            let l = baseline_uniform(&mut s, spec.k, spec.f, cols, spec.seed)?;
            Some(error_ratio(o, &l, spec.k))
        }
        _ => None,
    };
    Ok(EvalRecord {
        dataset: spec.dataset.to_string(),
        n,
        k: spec.k,
        budget: spec.budget.clone(),
        gamma: spec.gamma.clone(),
        variant: cfg.variant.to_string(),
        seed: spec.seed.to_string(),
        space_ratio: res.peak_space_bytes() as f64 / dense_bytes,
        error_ratio: err,
        baseline_error_ratio: base,
        wall_ms,
    })
}

fn cmd_lowrank(a: LowrankArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let (stream, oracle) = prepare(&a.stream, a.f, &a.eval)?;
    let h = stream.header();
    let (n, m) = (h.n_rows as usize, h.n_cols as usize);
    let weights = match &a.pmi_weights {
        Some(p) => Some(pmi_column_weights(&read_unigrams(p)?)),
        None => None,
    };
    let template = |b: Option<usize>| {
        let mut c = match b {
            Some(b) => LowRankConfig::with_budget(a.k, a.epsilon, b),
            None => LowRankConfig::new(a.k, a.epsilon),
        };
        c.variant = a.variant;
        c.column_weights = weights.clone();
        if a.exact_products {
            c.mode = ProductMode::Exact;
        }
        c
    };
    let size = match a.budget {
        Some(b) => Some(resolve_budget(b, n, m, |v| template(Some(v)), h.scale_bits)?),
        None => None,
    };
    let base_cfg = template(size);
    base_cfg.validate(n, m)?;
    let dataset = dataset_name(&a.eval.dataset, &a.stream);
    let mut rows = Vec::new();
    for seed in a.seed.seed..a.seed.seed + a.seeds {
        let cfg = base_cfg.clone().with_seed(seed);
        let spec = RunSpec {
            dataset: &dataset,
            k: a.k,
            f: a.f,
            budget: size.map_or("auto".into(), |b| b.to_string()),
            gamma: cfg.s.to_string(),
            seed,
            baseline: !a.no_baseline,
            timing: !a.eval.no_timing,
        };
        rows.push(run_once(&stream, oracle.as_ref(), &cfg, &spec)?);
    }
    if rows.len() > 1 {
        rows.extend(EvalRecord::mean(&rows));
    }
    emit(&a.out, &rows)
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let (stream, oracle) = prepare(&a.stream, a.f, &a.eval)?;
    let h = stream.header();
    let (n, m) = (h.n_rows as usize, h.n_cols as usize);
    let mut s = stream.clone();
    let t = Instant::now();
    let l = baseline_uniform(&mut s, a.k, a.f, a.num_cols, a.seed.seed)?;
    let wall_ms = if a.eval.no_timing { 0 } else { t.elapsed().as_millis() as u64 };
    let row = EvalRecord {
        dataset: dataset_name(&a.eval.dataset, &a.stream),
        n,
        k: a.k,
        budget: a.num_cols.to_string(),
        gamma: String::new(),
        variant: "uniform".into(),
        seed: a.seed.seed.to_string(),
        space_ratio: a.num_cols as f64 / m as f64,
        error_ratio: oracle.as_ref().map(|o| error_ratio(o, &l, a.k)),
        baseline_error_ratio: None,
        wall_ms,
    };
    emit(&a.out, &[row])
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if a.budgets.is_empty() || a.gammas.is_empty() {
        return Err(Error::Config("--budgets and --gammas must be nonempty".into()));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let (stream, oracle) = prepare(&a.stream, a.f, &a.eval)?;
    let dataset = dataset_name(&a.eval.dataset, &a.stream);
    let mut rows = Vec::new();
    for &budget in &a.budgets {
        for &gamma in &a.gammas {
            let mut group = Vec::new();
            for seed in a.seed.seed..a.seed.seed + a.seeds {
                let mut cfg = LowRankConfig::with_budget(a.k, a.epsilon, gamma).with_seed(seed);
                cfg.sketch.capacity = Some(budget);
                cfg.variant = a.variant;
                let spec = RunSpec {
                    dataset: &dataset,
                    k: a.k,
                    f: a.f,
                    budget: budget.to_string(),
                    gamma: gamma.to_string(),
                    seed,
                    baseline: a.baseline,
                    timing: !a.eval.no_timing,
                };
                group.push(run_once(&stream, oracle.as_ref(), &cfg, &spec)?);
            }
            if group.len() > 1 {
                group.extend(EvalRecord::mean(&group));
            }
            rows.extend(group);
        }
    }
    emit(&a.out, &rows)
}

fn cmd_regress(a: RegressArgs) -> Result<()> {
    let b = read_vector(&a.b)?;
    let stream = load_memory(&a.stream)?;
    let h = stream.header();
    if a.d as u64 != h.n_cols {
        return Err(Error::Config(format!("--d {} but the stream has {} columns", a.d, h.n_cols)));
    }
    let mut cfg = RegressionConfig::new(a.d, a.epsilon).with_seed(a.seed.seed);
    if let Some(s) = a.s {
        cfg.s = s;
    }
    if a.exact_products {
        cfg.mode = ProductMode::Exact;
    }
    let mut s = stream.clone();
    let res = regress_solve(&mut s, &b, &cfg, Transform::LOG1P)?;
    let mut out = std::io::stdout().lock();
    let oracle = if a.no_exact_eval && !a.normalize {
        None
    } else {
        let mut s = stream.clone();
        Some(dense_transformed(&mut s, Transform::LOG1P)?)
    };
    let scale = match (&oracle, a.normalize) {
        (Some(m), true) => fsketch::densela::singular_values(m).first().copied().unwrap_or(1.0),
        _ => 1.0,
    };
    let x = &res.x * scale;
    writeln!(out, "sketch_rows {}", cfg.s)?;
    writeln!(out, "rank {}", res.rank)?;
    writeln!(out, "rank_deficient {}", res.rank_deficient)?;
    writeln!(out, "space_bytes {}", res.space_bytes)?;
    if let (Some(m), false) = (&oracle, a.no_exact_eval) {
        let (x_opt, _) = min_norm_lstsq(m, &b)?;
        let resid = (m * &res.x - &b).norm();
        let opt = (m * x_opt - &b).norm();
        writeln!(out, "residual {resid}")?;
        writeln!(out, "opt {opt}")?;
        writeln!(out, "b_norm {}", b.norm())?;
        writeln!(out, "ratio {}", if opt > 0.0 { resid / opt } else { f64::NAN })?;
    }
    writeln!(
        out,
        "x {}",
        x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    if let Some(p) = &a.x_out {
        write_vector(p, &x)?;
    }
    Ok(())
}
