mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "msanet", version, about = "Few-shot segmentation on synthetic shape episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shape dataset.
    Generate(Common),
    /// Meta-train on the training folds; writes checkpoint.msaw and loss.csv.
    Train(Common),
    /// Score a checkpoint on the held-out fold; writes eval.txt and eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score ground-truth masks instead of a model.
        #[arg(long)]
        oracle_gt: bool,
        /// Also write predicted and ground-truth masks under `<out>/masks`.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Correlation energy maps, prior and prediction for one episode.
    Viz {
        #[command(flatten)]
        common: Common,
        /// Query image index in the manifest. Sampled from the test fold when omitted.
        #[arg(long)]
        query: Option<usize>,
        /// Comma-separated support indices; requires --query.
        #[arg(long, value_delimiter = ',', requires = "query")]
        support: Vec<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load (eval, viz) instead of `<out>/checkpoint.msaw`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Further `--key value` config overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    /// Defaults, then the file, then overrides, then the named flags.
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse_from(reorder(std::env::args().collect())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msanet: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Move `--key value` overrides behind a `--` so that flags the subcommand
/// knows are found wherever they appear.
fn reorder(args: Vec<String>) -> Vec<String> {
    let command = Cli::command();
    let Some(sub) = args.get(1).and_then(|name| command.find_subcommand(name)) else {
        return args;
    };
    let takes_value = |name: &str| {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(name))
            .map(|a| a.get_action().takes_values())
    };
    let mut known = args[..2].to_vec();
    let mut overrides = Vec::new();
    let mut rest = args[2..].iter();
    while let Some(arg) = rest.next() {
        if arg == "--" {
            overrides.extend(rest.by_ref().cloned());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            if arg.starts_with('-') {
                known.push(arg.clone());
            } else {
                overrides.push(arg.clone());
            }
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, _)) => (n, true),
            None => (flag, false),
        };
        let (dst, value) = match takes_value(name) {
            Some(v) => (&mut known, v),
            None if name == "help" || name == "version" => (&mut known, false),
            None => (&mut overrides, true),
        };
        dst.push(arg.clone());
        if value && !inline {
            dst.extend(rest.next().cloned());
        }
    }
    if !overrides.is_empty() {
        known.push("--".into());
        known.extend(overrides);
    }
    known
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    let common = match &cli.command {
        Command::Generate(c) | Command::Train(c) => c,
        Command::Eval { common, .. } | Command::Viz { common, .. } => common,
    };
    let cfg = common.resolve()?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| commands::Failure::runtime(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(c) => commands::generate(&cfg, c.out.is_some()),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval { oracle_gt, dump_masks, .. } => commands::eval(&cfg, oracle_gt, dump_masks),
        Command::Viz { query, support, .. } => commands::viz(&cfg, query, &support),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        let argv = std::iter::once("msanet").chain(args.iter().copied()).map(String::from).collect();
        Cli::try_parse_from(reorder(argv))
    }

    #[test]
    fn trailing_overrides_are_collected() {
        let cli = parse(&["train", "--seed", "3", "--lr", "0.1", "--attention", "off"]).unwrap();
        let Command::Train(c) = cli.command else { panic!() };
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.overrides, ["--lr", "0.1", "--attention", "off"]);
        let cfg = c.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.lr, cfg.attention), (3, 0.1, false));
    }

    #[test]
    fn flags_after_overrides_still_apply_as_keys() {
        let cli = parse(&["train", "--lr", "0.1", "--seed", "9", "--out", "x"]).unwrap();
        let Command::Train(c) = cli.command else { panic!() };
        let cfg = c.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.out.as_path()), (9, std::path::Path::new("x")));
    }

    #[test]
    fn eval_flags_anywhere() {
        let cli = parse(&["eval", "--eval_runs", "2", "--oracle-gt", "--lr=0.2", "--dump-masks"]).unwrap();
        let Command::Eval { common, oracle_gt, dump_masks } = cli.command else { panic!() };
        assert!(oracle_gt && dump_masks);
        let cfg = common.resolve().unwrap();
        assert_eq!((cfg.eval_runs, cfg.lr), (2, 0.2));
    }

    #[test]
    fn viz_selector() {
        let cli = parse(&["viz", "--shots", "2", "--query", "4", "--support", "1,2"]).unwrap();
        let Command::Viz { query, support, .. } = cli.command else { panic!() };
        assert_eq!((query, support), (Some(4), vec![1, 2]));
        assert!(parse(&["viz", "--support", "1"]).is_err());
    }

    #[test]
    fn unknown_override_is_a_config_error() {
        let cli = parse(&["train", "--learning-rate", "1"]).unwrap();
        let Command::Train(c) = cli.command else { panic!() };
        assert!(c.resolve().unwrap_err().0.contains("learning_rate"));
    }
}
