//! `sessgraph` command line: one subcommand per pipeline stage.
//!
//! Every config key is also a long option with hyphens (`--walk-length 40`).
//! Values are layered as defaults, then `--config FILE`, then options.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use log::info;

use sessgraph::eval;
use sessgraph::pipeline::{self, PipelineConfig};
use sessgraph::synthetic::{planted_events, write_events, PlantedConfig};

const USAGE_EXIT: u8 = 1;
const DATA_EXIT: u8 = 2;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Keys whose default is `false` become switches; everything else takes a value.
fn is_switch(key: &str) -> bool {
    PipelineConfig::is_flag(key) && PipelineConfig::default().get(key).as_deref() == Some("false")
}

fn config_args() -> Vec<Arg> {
    let defaults = PipelineConfig::default();
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .global(true)
        .help("key = value file, e.g. a manifest.txt from an earlier run")];
    for &key in PipelineConfig::KEYS {
        let help = PipelineConfig::help(key).unwrap_or_default();
        let arg = Arg::new(key).long(flag_name(key)).global(true).help_heading("Config");
        args.push(if is_switch(key) {
            arg.action(ArgAction::SetTrue).help(help)
        } else {
            let default = defaults.get(key).unwrap_or_default();
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            arg.value_name("VALUE").help(help)
        });
    }
    args
}

fn command() -> Command {
    Command::new("sessgraph")
        .about("Session-based recommendation with pre-trained global item graphs")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(config_args())
        .subcommand(Command::new("preprocess").about("Filter, split and augment the click log"))
        .subcommand(Command::new("pretrain").about("Walk the global item graph and train skip-gram embeddings"))
        .subcommand(Command::new("train").about("Train the session model and keep the best checkpoint"))
        .subcommand(Command::new("evaluate").about("Report metrics for the model and the baselines"))
        .subcommand(Command::new("run").about("preprocess, pretrain, train and evaluate in one go"))
        .subcommand(
            Command::new("recommend")
                .about("Top-k next items for a prefix of raw item ids")
                .arg(Arg::new("items").value_name("ITEM").num_args(1..).required(true))
                .arg(
                    Arg::new("k")
                        .short('k')
                        .long("k")
                        .value_parser(value_parser!(usize))
                        .default_value("20"),
                ),
        )
        .subcommand(
            Command::new("synth")
                .about("Write a planted Markov-chain click log")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(
                    Arg::new("sessions")
                        .long("sessions")
                        .value_parser(value_parser!(usize))
                        .default_value("2000"),
                )
                .arg(Arg::new("items").long("items").value_parser(value_parser!(usize)).default_value("50"))
                .arg(Arg::new("blocks").long("blocks").value_parser(value_parser!(usize)).default_value("2")),
        )
}

fn build_config(m: &ArgMatches) -> sessgraph::Result<PipelineConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for &key in PipelineConfig::KEYS {
        if is_switch(key) {
            if m.get_flag(key) {
                cfg.set(key, "true")?;
            }
        } else if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(name: &str, sub: &ArgMatches, cfg: &PipelineConfig) -> sessgraph::Result<()> {
    match name {
        "preprocess" => {
            let stats = pipeline::run_preprocess(cfg)?;
            print!("{stats}");
        }
        "pretrain" => {
            let report = pipeline::run_pretrain(cfg)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {}\tpairs {}\tloss {l:.6}", i + 1, report.pairs_per_epoch);
            }
        }
        "train" => {
            let report = pipeline::run_train(cfg)?;
            for e in &report.epochs {
                println!(
                    "epoch {}\tloss {:.6}\tP@{k} {:.4}\tMRR@{k} {:.4}",
                    e.epoch,
                    e.train_loss,
                    e.val_precision,
                    e.val_mrr,
                    k = cfg.select_k
                );
            }
            match report.best_epoch {
                Some(b) => println!("best epoch {b}"),
                None => println!("no validation split; kept the final parameters"),
            }
        }
        "evaluate" => print_reports(&pipeline::run_evaluate(cfg)?),
        "run" => print_reports(&pipeline::run_all(cfg)?),
        "recommend" => {
            let items: Vec<String> = sub.get_many::<String>("items").unwrap().cloned().collect();
            let k = *sub.get_one::<usize>("k").unwrap();
            for (item, score) in pipeline::run_recommend(cfg, &items, k)? {
                println!("{item}\t{score:.6}");
            }
        }
        "synth" => {
            let planted = PlantedConfig {
                sessions: *sub.get_one("sessions").unwrap(),
                items: *sub.get_one("items").unwrap(),
                blocks: *sub.get_one("blocks").unwrap(),
                seed: cfg.seed,
                ..PlantedConfig::default()
            };
            let out: &Path = sub.get_one::<PathBuf>("out").unwrap();
            let events = planted_events(&planted)?;
            write_events(out, &events)?;
            info!("wrote {} events to {}", events.len(), out.display());
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(())
}

fn print_reports(methods: &[pipeline::MethodReport]) {
    for m in methods {
        println!("{}", eval::format_table(&m.method, &m.reports));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_EXIT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = build_config(sub).and_then(|cfg| dispatch(name, sub, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { USAGE_EXIT } else { DATA_EXIT })
        }
    }
}
