use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varadhan_lab::cli::{self, Command, EXIT_NUMERICAL, EXIT_USAGE};
use varadhan_lab::config::{ExperimentConfig, ScalingKind};
use varadhan_lab::Result;

#[derive(Parser)]
#[command(name = "varadhan", version, about = "Small-noise density asymptotics for fBm-driven equations")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Empirical fBm covariance against the exact kernel.
    FbmCheck(Common),
    /// Bracket spanning constant over sampled points.
    HypoCheck(Common),
    /// Rate functions d² and d²_R at y (or over rate.y_grid).
    Rate(Common),
    /// Monte Carlo ε² log p_ε(y) and its extrapolated limit.
    Density(Common),
    /// Small-ε scaling of the inverse Malliavin matrix.
    Scaling(Common),
    /// Rate plus density, merged into the verdict table.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory for JSON, CSV and plot files.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Size of the worker pool.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long = "H", alias = "hurst")]
    hurst: Option<f64>,
    /// Comma-separated start point.
    #[arg(long)]
    x0: Option<String>,
    /// Comma-separated target point.
    #[arg(long)]
    y: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    substeps: Option<usize>,
    /// Sample count (fbm paths, density or scaling samples).
    #[arg(long = "N", alias = "n-samples")]
    n: Option<usize>,
    /// Comma-separated, strictly decreasing.
    #[arg(long)]
    eps_grid: Option<String>,
    #[arg(long)]
    restricted: Option<bool>,
    #[arg(long)]
    delta_det: Option<f64>,
    #[arg(long)]
    level: Option<usize>,
    /// gamma or hypoelliptic.
    #[arg(long)]
    kind: Option<String>,
}

fn parse_list(what: &str, s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("--{what}: cannot parse '{t}'")))
        .collect()
}

fn build_config(cmd: Command, a: &Common) -> std::result::Result<ExperimentConfig, String> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &a.system {
        c.system = s.clone();
        c.system_def = None;
    }
    if let Some(h) = a.hurst {
        c.hurst = h;
    }
    if let Some(s) = &a.x0 {
        c.x0 = Some(parse_list("x0", s)?);
    }
    if let Some(s) = &a.y {
        let y = parse_list("y", s)?;
        c.rate.y = Some(y.clone());
        c.rate.y_grid.clear();
        c.density.y = Some(y);
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(m) = a.m {
        c.m = m;
        c.fbm.m = m;
    }
    if let Some(s) = a.substeps {
        c.substeps = s;
    }
    if let Some(n) = a.n {
        match cmd {
            Command::FbmCheck => c.fbm.n_paths = n,
            Command::Scaling => c.scaling.n_samples = n,
            _ => c.density.n_samples = n,
        }
    }
    if let Some(s) = &a.eps_grid {
        let g = parse_list("eps-grid", s)?;
        match cmd {
            Command::Scaling => c.scaling.eps_grid = g,
            _ => c.density.eps_grid = g,
        }
    }
    if let Some(r) = a.restricted {
        c.rate.restricted = r;
    }
    if let Some(d) = a.delta_det {
        c.rate.delta_det = d;
    }
    if let Some(l) = a.level {
        c.hypo.level = l;
    }
    if let Some(k) = &a.kind {
        c.scaling.kind = match k.as_str() {
            "gamma" => ScalingKind::Gamma,
            "hypoelliptic" => ScalingKind::Hypoelliptic,
            other => return Err(format!("--kind: unknown '{other}'")),
        };
    }
    Ok(c)
}

fn write_files(dir: &PathBuf, files: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Sub::FbmCheck(a) => (Command::FbmCheck, a),
        Sub::HypoCheck(a) => (Command::HypoCheck, a),
        Sub::Rate(a) => (Command::Rate, a),
        Sub::Density(a) => (Command::Density, a),
        Sub::Scaling(a) => (Command::Scaling, a),
        Sub::Report(a) => (Command::Report, a),
    };
    if let Some(w) = args.workers {
        if w == 0 || rayon::ThreadPoolBuilder::new().num_threads(w).build_global().is_err() {
            eprintln!("error: cannot start {w} workers");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let cfg = match build_config(cmd, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let outcome = match cli::run(cmd, cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(cli::exit_code(&e) as u8);
        }
    };
    print!("{}", outcome.json());
    if let Some(dir) = &args.out {
        if let Err(e) = write_files(dir, &outcome.files) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERICAL as u8);
        }
    }
    ExitCode::from(outcome.exit_code() as u8)
}
