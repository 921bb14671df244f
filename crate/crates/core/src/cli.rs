//! The `ace` command line: train, eval, oracle, verify and export.
//!
//! Exit codes: 0 success, 1 a check or run failed, 2 usage or config error.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Algo, RunConfig};
use crate::env::GridConfig;
use crate::error::{AceError, Result};
use crate::eval::run_episodes;
use crate::learner::{
    evaluate, oracle_mean_steps, AceLearner, AceTrainer, EvalReport, GreedyPolicy, MetricsRecord,
    RunSummary, ORACLE_DISCOUNT, ORACLE_TOL,
};
use crate::neural::load_checkpoint;
use crate::oracle::Oracle;
use crate::ppo::{PpoLearner, PpoTrainer};
use crate::seeding;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Largest grid the exact oracle is built for.
pub const ORACLE_MAX_SIDE: u32 = 7;

#[derive(Debug, Parser)]
#[command(
    name = "ace",
    version,
    about = "Sequential-expansion Q-learning on Spiders-and-Fly"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a learner; writes the resolved config, metrics, checkpoint and summary.
    Train(TrainArgs),
    /// Evaluate a trained run's checkpoint with the greedy policy.
    Eval(EvalArgs),
    /// Solve a grid exactly; writes the value table and a mean-steps fixture.
    Oracle(OracleArgs),
    /// Run a self-check suite; exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Convert a metrics stream to CSV.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Ace,
    #[value(name = "ace_ppo")]
    AcePpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Sorted,
    Shuffle,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid side length.
    #[arg(long)]
    pub grid: Option<u32>,
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    /// Environment-sample budget.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    /// Disable interaction (passive) embeddings.
    #[arg(long)]
    pub no_ia: bool,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Extra `section.key=value` overrides, applied after the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl TrainArgs {
    /// Flags as overrides, in a fixed order, followed by `--set` entries.
    pub fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(g) = self.grid {
            o.push(format!("env.side={g}"));
        }
        if let Some(a) = self.algo {
            let name = match a {
                AlgoArg::Ace => "ace",
                AlgoArg::AcePpo => "ace_ppo",
            };
            o.push(format!("algo=\"{name}\""));
        }
        if let Some(b) = self.budget {
            o.push(format!("budget={b}"));
        }
        if let Some(order) = self.order {
            let name = match order {
                OrderArg::Sorted => "sorted",
                OrderArg::Shuffle => "shuffle",
            };
            o.push(format!("train.order_mode=\"{name}\""));
        }
        if self.no_ia {
            o.push("train.ia_enabled=false".into());
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `ace train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Evaluation episodes; defaults to the run's `eval.episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Seed of the evaluation stream; defaults to the run's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    pub grid: u32,
    #[arg(long, default_value = "oracle")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Equivalence,
    Gradients,
    Env,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Environment steps for the env suite.
    #[arg(long, default_value_t = 1_000_000)]
    pub steps: usize,
    /// Grid side for the equivalence and env suites.
    #[arg(long)]
    pub grid: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Metrics stream (one JSON record per line).
    #[arg(long)]
    pub metrics: PathBuf,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `stdout` and diagnostics to `stderr`.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help and version requests are not errors
            if e.exit_code() == 0 {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let _ = write!(stderr, "{e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                AceError::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILED,
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Oracle(a) => cmd_oracle(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Export(a) => cmd_export(&a, out),
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides())?;
    train_run(&cfg, &args.out, out)?;
    Ok(EXIT_OK)
}

/// Trains `cfg` into `dir`: `config.toml` first, then one metrics line per
/// evaluation, the checkpoint after each evaluation, and `summary.json`.
pub fn train_run(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    writeln!(out, "config: {}", dir.join(CONFIG_FILE).display())?;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let ckpt = dir.join(CHECKPOINT_DIR);
    let summary = {
        let mut sink = |r: &MetricsRecord| -> Result<()> {
            serde_json::to_writer(&mut metrics, r)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            writeln!(
                out,
                "samples {:>8}  success@10 {:.3}  mean steps {:.2}  gap {}",
                r.samples,
                r.success_rate_10,
                r.mean_steps,
                r.steps_gap.map_or("n/a".into(), |g| format!("{g:.3}"))
            )?;
            Ok(())
        };
        match cfg.algo {
            Algo::Ace => AceTrainer::new(cfg)?.run(cfg.budget, &mut sink, Some(&ckpt))?,
            Algo::AcePpo => PpoTrainer::new(cfg)?.run(cfg.budget, &mut sink, Some(&ckpt))?,
        }
    };
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(summary)
}

/// Greedy evaluation of the checkpoint in a run directory.
pub fn evaluate_run(dir: &Path, episodes: Option<usize>, seed: Option<u64>) -> Result<EvalReport> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
    let mut cfg = RunConfig::from_toml_str(&text, &[])?;
    if let Some(e) = episodes {
        cfg.eval.episodes = e;
    }
    let grid = cfg.grid();
    let mut rng = seeding::stream_rng(seed.unwrap_or(cfg.seed), seeding::EVAL_STREAM);
    let ckpt = dir.join(CHECKPOINT_DIR);
    let model_cfg = cfg.model.model_config(cfg.train.ia_enabled);
    let oracle = oracle_mean_steps(&grid)?;
    let mode = cfg.train.order_mode;
    match cfg.algo {
        Algo::Ace => {
            let mut learner = AceLearner::new(model_cfg, &cfg.train, grid.side, cfg.seed);
            load_checkpoint(&mut learner.online, &ckpt)?;
            let vf = learner.online_value();
            evaluate(
                &GreedyPolicy {
                    vf: &vf,
                    order_mode: mode,
                },
                &grid,
                &cfg.eval,
                oracle,
                &mut rng,
            )
        }
        Algo::AcePpo => {
            let mut learner = PpoLearner::new(model_cfg, &cfg, grid.side);
            load_checkpoint(&mut learner.store, &ckpt)?;
            let vf = learner.policy_value();
            evaluate(
                &GreedyPolicy {
                    vf: &vf,
                    order_mode: mode,
                },
                &grid,
                &cfg.eval,
                oracle,
                &mut rng,
            )
        }
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let r = evaluate_run(&args.run, args.episodes, args.seed)?;
    let text = serde_json::to_string_pretty(&r)?;
    if let Some(p) = &args.out {
        fs::write(p, &text)?;
    }
    writeln!(out, "{text}")?;
    Ok(EXIT_OK)
}

/// Contents of the oracle fixture file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleFixture {
    pub side: u32,
    pub discount: f64,
    pub states: usize,
    pub sweeps: usize,
    pub residual: f64,
    /// Exact mean catch time of the greedy oracle over legal starts.
    pub mean_steps: f64,
    /// Exact probability of a catch within 10 steps.
    pub success_rate_10: f64,
    /// Monte-Carlo cross-check of both numbers.
    pub monte_carlo_mean_steps: f64,
    pub monte_carlo_success_rate_10: f64,
}

pub const ORACLE_MC_EPISODES: usize = 20_000;

pub fn oracle_files(side: u32) -> (String, String) {
    (
        format!("value_table_L{side}.bin"),
        format!("oracle_L{side}.json"),
    )
}

/// Solves the grid and writes the value table and fixture into `dir`.
/// On grids up to 5×5 the oracle must catch within 10 steps from every
/// start; a miss is an error.
pub fn build_oracle(side: u32, dir: &Path) -> Result<OracleFixture> {
    if side > ORACLE_MAX_SIDE {
        return Err(AceError::Config(format!(
            "oracle: grid side {side} exceeds the supported maximum {ORACLE_MAX_SIDE}"
        )));
    }
    let grid = GridConfig::new(side);
    let oracle = Oracle::solve(&grid, ORACLE_DISCOUNT, ORACLE_TOL)?;
    let mut rng = seeding::stream_rng(0, seeding::EVAL_STREAM);
    let mc = run_episodes(&grid, &oracle.policy, ORACLE_MC_EPISODES, 500, &mut rng)?;
    let t = &oracle.solution.table;
    let fixture = OracleFixture {
        side,
        discount: t.discount,
        states: t.values.len(),
        sweeps: t.sweeps,
        residual: t.residual,
        mean_steps: oracle.catch_time.mean_steps,
        success_rate_10: oracle.catch_time.success_rate_10,
        monte_carlo_mean_steps: mc.mean_steps,
        monte_carlo_success_rate_10: mc.success_rate_10,
    };
    if side <= 5 && fixture.success_rate_10 < 1.0 {
        return Err(AceError::Divergence(format!(
            "oracle catches within 10 steps with probability {} on {side}x{side}, expected 1",
            fixture.success_rate_10
        )));
    }
    fs::create_dir_all(dir)?;
    let (table, fix) = oracle_files(side);
    t.write(&dir.join(table))?;
    fs::write(
        dir.join(fix),
        serde_json::to_string_pretty(&fixture)? + "\n",
    )?;
    Ok(fixture)
}

pub fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> Result<i32> {
    let f = build_oracle(args.grid, &args.out)?;
    let (table, fix) = oracle_files(args.grid);
    writeln!(
        out,
        "{side}x{side}: {states} states, {sweeps} sweeps, mean steps {m:.4}, success@10 {s:.5}",
        side = f.side,
        states = f.states,
        sweeps = f.sweeps,
        m = f.mean_steps,
        s = f.success_rate_10
    )?;
    writeln!(
        out,
        "wrote {} and {}",
        args.out.join(table).display(),
        args.out.join(fix).display()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let report = match args.suite {
        Suite::Equivalence => verify::equivalence(args.grid.unwrap_or(3), ORACLE_DISCOUNT)?,
        Suite::Gradients => verify::gradients(args.seed)?,
        Suite::Env => verify::env_fuzz(args.grid.unwrap_or(5), args.steps, args.seed)?,
    };
    write!(out, "{}", report.render())?;
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

pub const CSV_HEADER: [&str; 8] = [
    "samples",
    "episodes",
    "eps",
    "loss",
    "success_rate_10",
    "mean_steps",
    "steps_gap",
    "wall_time_s",
];

/// Parses a metrics stream; blank lines are skipped and a malformed line is
/// reported with its 1-based number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| AceError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

/// One CSV row per record; absent optional fields are empty cells.
pub fn write_csv<W: Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| AceError::Format(e.to_string());
    csv.write_record(CSV_HEADER).map_err(io)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        csv.write_record([
            r.samples.to_string(),
            r.episodes.to_string(),
            r.eps.to_string(),
            opt(r.loss),
            r.success_rate_10.to_string(),
            r.mean_steps.to_string(),
            opt(r.steps_gap),
            r.wall_time_s.to_string(),
        ])
        .map_err(io)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn cmd_export(args: &ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let records = read_metrics(&args.metrics)?;
    match &args.out {
        Some(p) => write_csv(&records, File::create(p)?)?,
        None => write_csv(&records, out)?,
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Output {
        code: i32,
        stdout: Vec<u8>,
        stderr: Vec<u8>,
    }

    fn ace(args: &[&str]) -> Output {
        let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
        let argv = std::iter::once("ace").chain(args.iter().copied());
        let code = run_cli(argv, &mut stdout, &mut stderr);
        Output {
            code,
            stdout,
            stderr,
        }
    }

    fn code(o: &Output) -> i32 {
        o.code
    }

    fn path_arg(p: &Path) -> &str {
        p.to_str().expect("utf-8 path")
    }

    const TINY: &[&str] = &[
        "--grid",
        "5",
        "--budget",
        "2048",
        "--set",
        "train.sample_per_collect=512",
        "--set",
        "train.batch_size=64",
        "--set",
        "train.update_per_collect=2",
        "--set",
        "model.hidden=16",
        "--set",
        "eval.interval=1024",
        "--set",
        "eval.episodes=20",
    ];

    fn tiny_train(dir: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--out", path_arg(dir)];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        ace(&args)
    }

    #[test]
    fn train_writes_config_metrics_checkpoint_and_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tmp.path().join("run");
        let out = tiny_train(&run, &["--seed", "4", "--set", "eps.decay_steps=150000"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

        let config = fs::read_to_string(run.join("config.toml")).unwrap();
        let echoed: toml::Table = config.parse().unwrap();
        assert_eq!(echoed["eps"]["decay_steps"].as_integer(), Some(150_000));
        assert_eq!(echoed["seed"].as_integer(), Some(4));
        assert_eq!(echoed["env"]["side"].as_integer(), Some(5));

        let records: Vec<MetricsRecord> = fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.first().map(|r| r.samples), Some(0));
        assert_eq!(records.last().map(|r| r.samples), Some(2048));
        assert!(records.windows(2).all(|w| w[0].samples < w[1].samples));

        let summary_text = fs::read_to_string(run.join("summary.json")).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&summary_text).unwrap();
        assert!(raw.get("samples_to_solve").is_some());
        assert!(raw.get("final_steps_gap").is_some());
        let summary: RunSummary = serde_json::from_value(raw).unwrap();
        assert_eq!(summary.samples, 2048);
        assert!(run.join("checkpoint").is_dir());
    }

    #[test]
    fn eval_reloads_a_trained_run_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        for algo in ["ace", "ace_ppo"] {
            let run = tmp.path().join(algo);
            let out = tiny_train(&run, &["--algo", algo]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            let report = tmp.path().join(format!("{algo}.json"));
            let args = [
                "eval",
                "--run",
                path_arg(&run),
                "--episodes",
                "40",
                "--seed",
                "3",
                "--out",
                path_arg(&report),
            ];
            let first = ace(&args);
            assert_eq!(
                code(&first),
                0,
                "{}",
                String::from_utf8_lossy(&first.stderr)
            );
            let second = ace(&args);
            assert_eq!(first.stdout, second.stdout);
            let parsed: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
            let rate = parsed["success_rate_10"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&rate));
        }
    }

    #[test]
    fn eval_of_a_missing_run_fails() {
        let tmp = tempfile::tempdir().unwrap();
        assert_ne!(
            code(&ace(&["eval", "--run", path_arg(&tmp.path().join("nope"))])),
            0
        );
    }

    #[test]
    fn usage_and_config_errors_exit_2() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("r");
        assert_eq!(
            code(&ace(&["train", "--algo", "dqn", "--out", path_arg(&dir)])),
            2
        );
        assert_eq!(
            code(&ace(&[
                "train",
                "--set",
                "train.discount=2",
                "--out",
                path_arg(&dir)
            ])),
            2
        );
        assert_eq!(
            code(&ace(&[
                "train",
                "--set",
                "train.no_such_key=1",
                "--out",
                path_arg(&dir)
            ])),
            2
        );
        assert_eq!(
            code(&ace(&["train", "--grid", "2", "--out", path_arg(&dir)])),
            2
        );
        assert_eq!(
            code(&ace(&["oracle", "--grid", "9", "--out", path_arg(&dir)])),
            2
        );
        assert_eq!(code(&ace(&["frobnicate"])), 2);
        assert_eq!(code(&ace(&[])), 2);
        assert_eq!(code(&ace(&["--help"])), 0);
        let missing = tmp.path().join("missing.toml");
        assert_eq!(
            code(&ace(&[
                "train",
                "--config",
                path_arg(&missing),
                "--out",
                path_arg(&dir)
            ])),
            2
        );
    }

    #[test]
    fn config_file_is_read_and_flags_override_it() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("c.toml");
        fs::write(
            &cfg,
            "seed = 9\n[eps]\ndecay_steps = 1000\n[env]\nside = 4\n",
        )
        .unwrap();
        let run = tmp.path().join("run");
        let mut args = vec!["train", "--config", path_arg(&cfg), "--out", path_arg(&run)];
        args.extend_from_slice(TINY);
        let out = ace(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let echoed: toml::Table = fs::read_to_string(run.join("config.toml"))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(echoed["seed"].as_integer(), Some(9));
        assert_eq!(echoed["eps"]["decay_steps"].as_integer(), Some(1000));
        assert_eq!(echoed["env"]["side"].as_integer(), Some(5));
    }

    #[test]
    fn oracle_on_3x3_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("oracle");
        assert_eq!(
            code(&ace(&["oracle", "--grid", "3", "--out", path_arg(&dir)])),
            0
        );
        let table = fs::read(dir.join("value_table_L3.bin")).unwrap();
        let fixture = fs::read_to_string(dir.join("oracle_L3.json")).unwrap();
        assert_eq!(
            code(&ace(&["oracle", "--grid", "3", "--out", path_arg(&dir)])),
            0
        );
        assert_eq!(fs::read(dir.join("value_table_L3.bin")).unwrap(), table);
        assert_eq!(
            fs::read_to_string(dir.join("oracle_L3.json")).unwrap(),
            fixture
        );

        let parsed: serde_json::Value = serde_json::from_str(&fixture).unwrap();
        assert_eq!(parsed["side"].as_u64(), Some(3));
        assert_eq!(parsed["states"].as_u64(), Some(729));
        assert_eq!(parsed["success_rate_10"].as_f64(), Some(1.0));
    }

    #[test]
    fn verify_suites_pass_and_report_per_check_lines() {
        let eq = ace(&["verify", "equivalence"]);
        assert_eq!(code(&eq), 0);
        let text = String::from_utf8_lossy(&eq.stdout);
        assert!(text.lines().any(|l| l.starts_with("PASS")));
        assert!(!text.lines().any(|l| l.starts_with("FAIL")));
        assert_eq!(code(&ace(&["verify", "env", "--steps", "20000"])), 0);
        assert_eq!(code(&ace(&["verify", "gradients", "--seed", "3"])), 0);
        assert_eq!(code(&ace(&["verify", "nonsense"])), 2);
    }

    fn record(samples: u64, loss: Option<f64>, gap: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            samples,
            episodes: samples / 10,
            eps: 0.5,
            loss,
            success_rate_10: 0.25,
            mean_steps: 7.5,
            steps_gap: gap,
            wall_time_s: 1.5,
        }
    }

    fn export(metrics: &Path) -> Output {
        ace(&["export", "--metrics", path_arg(metrics)])
    }

    #[test]
    fn export_of_an_empty_stream_is_the_header_only() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.jsonl");
        fs::write(&m, "").unwrap();
        let out = export(&m);
        assert_eq!(code(&out), 0);
        assert_eq!(
            String::from_utf8(out.stdout).unwrap(),
            "samples,episodes,eps,loss,success_rate_10,mean_steps,steps_gap,wall_time_s\n"
        );
    }

    #[test]
    fn export_round_trips_every_record() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.jsonl");
        let recs = vec![
            record(0, None, Some(1.25)),
            record(1024, Some(0.125), None),
            record(2048, Some(3.0), Some(-0.5)),
        ];
        let body: String = recs
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        fs::write(&m, body).unwrap();
        let csv_path = tmp.path().join("m.csv");
        assert_eq!(
            code(&ace(&[
                "export",
                "--metrics",
                path_arg(&m),
                "--out",
                path_arg(&csv_path)
            ])),
            0
        );

        let mut reader = csv::Reader::from_path(&csv_path).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), recs.len());
        let opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                Some(s.parse::<f64>().unwrap())
            }
        };
        for (row, rec) in rows.iter().zip(&recs) {
            assert_eq!(row[0].parse::<u64>().unwrap(), rec.samples);
            assert_eq!(row[1].parse::<u64>().unwrap(), rec.episodes);
            assert_eq!(row[2].parse::<f64>().unwrap(), rec.eps);
            assert_eq!(opt(&row[3]), rec.loss);
            assert_eq!(row[4].parse::<f64>().unwrap(), rec.success_rate_10);
            assert_eq!(row[5].parse::<f64>().unwrap(), rec.mean_steps);
            assert_eq!(opt(&row[6]), rec.steps_gap);
            assert_eq!(row[7].parse::<f64>().unwrap(), rec.wall_time_s);
        }
    }

    #[test]
    fn export_names_the_malformed_line() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.jsonl");
        let good = serde_json::to_string(&record(0, None, None)).unwrap();
        fs::write(&m, format!("{good}\n{good}\n{{\"samples\": oops}}\n")).unwrap();
        let out = export(&m);
        assert_eq!(code(&out), 1);
        assert!(
            String::from_utf8_lossy(&out.stderr).contains("line 3"),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
