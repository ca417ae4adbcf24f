use std::io::{ErrorKind, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use caat_core::error::{Error, ErrorClass};
use caat_core::experiment::{self, Command, Config, KEYS};
use clap::{Arg, ArgAction, ArgMatches};

fn subcommand(cmd: Command, about: &'static str) -> clap::Command {
    let mut c = clap::Command::new(cmd.name()).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value file, or a manifest.json from an earlier run"),
    );
    for key in KEYS {
        let default = cmd
            .defaults()
            .iter()
            .find(|(k, _)| *k == key.name)
            .map_or(key.default, |(_, v)| v);
        let mut arg = Arg::new(key.name)
            .long(key.name)
            .value_name("VALUE")
            .action(ArgAction::Set)
            .overrides_with(key.name)
            .help(format!("{} [default: {}]", key.help, if default.is_empty() { "\"\"" } else { default }));
        let dashed = key.name.replace('_', "-");
        if dashed != key.name {
            arg = arg.alias(dashed);
        }
        c = c.arg(arg);
    }
    c
}

fn cli() -> clap::Command {
    clap::Command::new("caat")
        .about("Conflict-aware adversarial training experiments")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand(Command::Train, "Train one model and write metrics, checkpoint and manifest"))
        .subcommand(subcommand(Command::Eval, "Clean and attacked accuracy of a checkpoint"))
        .subcommand(subcommand(Command::Sweep, "Sweep lambda and gamma grids and write the accuracy front"))
        .subcommand(subcommand(Command::Synthetic, "MNIST 1-vs-2 logistic study of gradient conflict versus budget"))
        .subcommand(subcommand(Command::BoundCheck, "Audit the spectral conflict bound on test inputs"))
        .subcommand(subcommand(Command::ExportGradients, "Export per-sample clean and adversarial gradients"))
}

fn resolve(cmd: Command, m: &ArgMatches) -> Result<Config, Error> {
    let overrides: Vec<(&str, &str)> = KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name, v.as_str())))
        .collect();
    Config::resolve(cmd, m.get_one::<PathBuf>("config").map(PathBuf::as_path), overrides)
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
macro_rules! out {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(Error::Io { path: "<stdout>".into(), source: e });
        }
    };
}

fn run(cmd: Command, cfg: &Config) -> Result<(), Error> {
    match cmd {
        Command::Train => {
            let out = experiment::cmd_train(cfg)?;
            out!("run_id,epoch,std_acc,adv_acc,mean_mu,mean_phi");
            if let Some(r) = out.records.last() {
                out!(
                    "{},{},{:.4},{:.4},{:.6e},{:.6}",
                    out.manifest.run_id, r.epoch, r.std_acc, r.adv_acc, r.mean_mu, r.mean_phi
                );
            }
            eprintln!("wrote {}", cfg.out_dir()?.display());
        }
        Command::Eval => {
            let (_, r) = experiment::cmd_eval(cfg)?;
            out!("samples,std_acc,adv_acc");
            out!("{},{:.4},{:.4}", r.samples, r.std_acc, r.adv_acc);
        }
        Command::Sweep => {
            let out = experiment::cmd_sweep(cfg)?;
            out!("method,knob,std_acc,adv_acc,dominated");
            for r in &out.front {
                out!("{},{},{:.4},{:.4},{}", r.method, r.knob, r.std_acc, r.adv_acc, r.dominated);
            }
            for f in &out.manifest.failures {
                eprintln!("failed point: {f}");
            }
        }
        Command::Synthetic => {
            let out = experiment::cmd_synthetic(cfg)?;
            out!("delta,std_acc,adv_acc,mean_mu,audit_satisfied,audit_bound_mean");
            for r in &out.rows {
                out!(
                    "{},{:.4},{:.4},{:.6e},{}/{},{:.6e}",
                    r.delta, r.std_acc, r.adv_acc, r.mean_mu, r.audit_satisfied, r.audit_samples, r.audit_bound_mean
                );
            }
        }
        Command::BoundCheck => {
            let (_, lines) = experiment::cmd_bound_check(cfg)?;
            for l in &lines {
                out!("{}", serde_json::to_string(l)?);
            }
            let ok = lines.iter().filter(|l| l.report.satisfied).count();
            eprintln!("{ok}/{} reports satisfied", lines.len());
        }
        Command::ExportGradients => {
            let m = experiment::cmd_export_gradients(cfg)?;
            if let Some(p) = m.artifacts.get("gradients") {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 1,
        ErrorClass::ResourceGuard => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = [
        Command::Train,
        Command::Eval,
        Command::Sweep,
        Command::Synthetic,
        Command::BoundCheck,
        Command::ExportGradients,
    ]
    .into_iter()
    .find(|c| c.name() == name)
    .expect("every registered subcommand maps to a command");
    match resolve(cmd, sub).and_then(|cfg| run(cmd, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
