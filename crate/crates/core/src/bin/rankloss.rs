//! `rankloss` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rankloss_kit::config::{parse_kset, ExperimentConfig};
use rankloss_kit::dataio::{
    generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, split_by_classes, Checkpoint,
    Dataset,
};
use rankloss_kit::encoder::{forward, Architecture};
use rankloss_kit::gradcheck::{self, GradCheckConfig};
use rankloss_kit::retrieval_eval::{evaluate, MetricTable};
use rankloss_kit::rsloss::KSet;
use rankloss_kit::trainer::{train_loop, TrainConfig, TrainReport};
use rankloss_kit::Error;

const METRICS_HEADER: &str = "# rankloss-kit metrics v1";
const SWEEP_HEADER: &str = "# rankloss-kit sweep v1";

#[derive(Parser)]
#[command(name = "rankloss", version, about = "Recall@k surrogate training and retrieval evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clustered dataset.
    Gen {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (the training half when --out-eval is given).
        #[arg(long)]
        out: PathBuf,
        /// Split classes in half and write the second half here.
        #[arg(long)]
        out_eval: Option<PathBuf>,
    },
    /// Train an encoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_metrics: Option<PathBuf>,
    },
    /// Evaluate a trained encoder by self-retrieval on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cut-offs, comma separated.
        #[arg(long, default_value = "1,2,4,8")]
        k: String,
        /// Metrics to report.
        #[arg(long, value_delimiter = ',', default_value = "r,recall,map")]
        metrics: Vec<MetricName>,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients end to end.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        tau1: f64,
        #[arg(long, default_value_t = 0.1)]
        tau2: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
        simix: bool,
        #[arg(long, default_value = "linear")]
        encoder: Architecture,
    },
    /// Retrain across values of one parameter and several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Values separated by ';' (k sets themselves use ',', e.g. "16;8,16").
        /// A list without ';' is split on ',' for scalar parameters.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricName {
    R,
    Recall,
    Map,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    #[value(name = "batch_size")]
    BatchSize,
    #[value(name = "tau1")]
    Tau1,
    #[value(name = "k_set")]
    KSet,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            Self::BatchSize => "batch_size",
            Self::Tau1 => "tau1",
            Self::KSet => "k_set",
        }
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn runtime(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::BadParam(_) | Error::NotDivisible { .. } => usage(e.to_string()),
            _ => runtime(e.to_string()),
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            msg: format!("{}: {}", path.display(), f.msg),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen(
    classes: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
    out: &Path,
    out_eval: Option<&Path>,
) -> Result<(), Failure> {
    let data = generate_synthetic(classes, per_class, dim, noise, seed)?;
    match out_eval {
        None => {
            save_dataset(&data, out).map_err(with_path(out))?;
            println!("wrote {} examples, {} classes to {}", data.len(), classes, out.display());
        }
        Some(eval_path) => {
            let (train, eval) = split_by_classes(&data)?;
            save_dataset(&train, out).map_err(with_path(out))?;
            save_dataset(&eval, eval_path).map_err(with_path(eval_path))?;
            println!(
                "wrote {} examples, {} classes to {}",
                train.len(),
                train.class_ids().len(),
                out.display()
            );
            println!(
                "wrote {} examples, {} classes to {}",
                eval.len(),
                eval.class_ids().len(),
                eval_path.display()
            );
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(with_path(path))
}

fn load_data(path: &Path, expected_dim: Option<usize>) -> Result<Dataset, Failure> {
    let d = load_dataset(path).map_err(with_path(path))?;
    if let Some(want) = expected_dim {
        if d.dim() != want {
            return Err(usage(format!(
                "{}: config input_dim is {want} but the data has {} features",
                path.display(),
                d.dim()
            )));
        }
    }
    Ok(d)
}

fn metrics_csv(report: &TrainReport, ks: &KSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{METRICS_HEADER}");
    let recall_cols: Vec<String> = ks.as_slice().iter().map(|k| format!("val_recall@{k}")).collect();
    let _ = writeln!(s, "iteration,loss,val_r@1,{},elapsed_ms", recall_cols.join(","));
    for r in &report.records {
        let mut row = format!("{},{:.8}", r.iteration, r.loss);
        match &r.val {
            Some(m) => {
                let _ = write!(row, ",{:.6}", m.r_at(1).unwrap_or(f64::NAN));
                for &k in ks.as_slice() {
                    let _ = write!(row, ",{:.6}", m.recall_at(k).unwrap_or(f64::NAN));
                }
            }
            None => row.push_str(&",".repeat(1 + ks.len())),
        }
        let _ = writeln!(s, "{row},{:.1}", r.elapsed_ms);
    }
    s
}

fn describe(m: &MetricTable) -> String {
    format!(
        "r@1 {:.4} recall@1 {:.4} mAP {:.4}",
        m.r_at(1).unwrap_or(f64::NAN),
        m.recall_at(1).unwrap_or(f64::NAN),
        m.map
    )
}

fn cmd_train(
    config: &Path,
    data: &Path,
    val: Option<&Path>,
    out_model: &Path,
    out_metrics: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let train = load_data(data, cfg.input_dim)?;
    let val = val.map(|p| load_data(p, cfg.input_dim)).transpose()?;
    let t = &cfg.train;
    println!(
        "training {} on {} examples ({} features) for {} iterations",
        t.encoder,
        train.len(),
        train.dim(),
        t.iterations
    );
    if t.simix {
        println!(
            "simix on: batch {} with {} per class, expanded batch {}",
            t.batch_size,
            t.samples_per_class,
            rankloss_kit::simix::extended_batch_size(t.batch_size, t.samples_per_class)
        );
    }
    let (params, report) = train_loop(&train, val.as_ref(), t)?;
    if let Some(m) = &report.initial_val {
        println!("initial val {}", describe(m));
    }
    for r in &report.records {
        if let Some(m) = &r.val {
            println!("iter {} loss {:.6} val {}", r.iteration, r.loss, describe(m));
        }
    }
    let ck = Checkpoint {
        params,
        seed: t.seed,
        iteration: t.iterations,
    };
    save_checkpoint(&ck, out_model).map_err(with_path(out_model))?;
    println!("saved model to {}", out_model.display());
    if let Some(p) = out_metrics {
        write_file(p, &metrics_csv(&report, &t.eval_ks()))?;
    }
    println!(
        "time: sampling {:.0} ms, steps {:.0} ms, evaluation {:.0} ms",
        report.times.sample_ms, report.times.step_ms, report.times.eval_ms
    );
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, k: &str, metrics: &[MetricName], out: Option<&Path>) -> Result<(), Failure> {
    let ks = parse_kset(k).map_err(|e| usage(format!("--k: {e}")))?;
    let ck = load_checkpoint(model).map_err(with_path(model))?;
    let d = load_dataset(data).map_err(with_path(data))?;
    if d.dim() != ck.params.input_dim {
        return Err(runtime(format!(
            "dimension mismatch: model {} expects {} features, dataset {} has {}",
            model.display(),
            ck.params.input_dim,
            data.display(),
            d.dim()
        )));
    }
    let (e, _) = forward(&ck.params, &d.features, false)?;
    let table = evaluate(&e, &d.labels, &ks)?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    if metrics.contains(&MetricName::R) {
        for &k in ks.as_slice() {
            rows.push((format!("r@{k}"), table.r_at(k).unwrap_or(f64::NAN)));
        }
    }
    if metrics.contains(&MetricName::Recall) {
        for &k in ks.as_slice() {
            rows.push((format!("recall@{k}"), table.recall_at(k).unwrap_or(f64::NAN)));
        }
    }
    if metrics.contains(&MetricName::Map) {
        rows.push(("mAP".into(), table.map));
    }
    println!("{} queries", table.queries);
    for (name, v) in &rows {
        println!("{name} {v:.4}");
    }
    if let Some(p) = out {
        let mut s = String::from("metric,value\n");
        for (name, v) in &rows {
            let _ = writeln!(s, "{name},{v:.6}");
        }
        write_file(p, &s)?;
    }
    Ok(())
}

fn cmd_gradcheck(cfg: GradCheckConfig) -> Result<(), Failure> {
    let r = gradcheck::run(&cfg)?;
    println!(
        "checked {} parameters (dim {}, batch {}, tau1 {}, tau2 {}, eps {:e}, simix {})",
        r.params_checked, cfg.dim, cfg.batch, cfg.tau1, cfg.tau2, cfg.eps, cfg.simix
    );
    println!("loss {:.6}", r.loss);
    println!("max relative error {:.3e} (threshold {:e})", r.max_rel_error, gradcheck::THRESHOLD);
    if r.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(runtime("gradient check failed"))
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, raw: &str) -> Result<Vec<T>, Failure> {
    raw.split(',')
        .map(|t| t.trim().parse().map_err(|_| usage(format!("{flag}: invalid value {t:?}"))))
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sweep_settings(base: &ExperimentConfig, param: SweepParam, values: &str) -> Result<Vec<(String, TrainConfig)>, Failure> {
    let raw: Vec<&str> = if values.contains(';') || param == SweepParam::KSet {
        values.split(';').collect()
    } else {
        values.split(',').collect()
    };
    let mut out = Vec::new();
    for v in raw {
        let v = v.trim();
        let mut cfg = base.clone();
        cfg.set(param.name(), v).map_err(|e| usage(format!("--values: {e}")))?;
        cfg.train.validate().map_err(|e| usage(format!("--values {v}: {e}")))?;
        out.push((v.replace(',', " "), cfg.train));
    }
    if out.is_empty() {
        return Err(usage("--values is empty"));
    }
    Ok(out)
}

fn cmd_sweep(
    config: &Path,
    data: &Path,
    val: &Path,
    param: SweepParam,
    values: &str,
    seeds: &str,
    out: &Path,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    let settings = sweep_settings(&base, param, values)?;
    let seeds: Vec<u64> = parse_list("--seeds", seeds)?;
    let train = load_data(data, base.input_dim)?;
    let val = load_data(val, base.input_dim)?;

    let mut csv = format!("{SWEEP_HEADER}\nparam,value,seed,initial_r@1,final_r@1,final_map,final_loss\n");
    for (label, cfg) in &settings {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (_, report) = train_loop(&train, Some(&val), &cfg)?;
            let init = report.initial_val.as_ref().and_then(|m| m.r_at(1)).unwrap_or(f64::NAN);
            let last = report.final_val().expect("validation data given");
            let r1 = last.r_at(1).unwrap_or(f64::NAN);
            let loss = report.records.last().map_or(f64::NAN, |r| r.loss);
            let _ = writeln!(
                csv,
                "{},{label},{seed},{init:.6},{r1:.6},{:.6},{loss:.8}",
                param.name(),
                last.map
            );
            finals.push(r1);
        }
        println!(
            "{}={label}: median final r@1 {:.4} over {} seeds",
            param.name(),
            median(&mut finals),
            seeds.len()
        );
    }
    write_file(out, &csv)?;
    println!("wrote {} rows to {}", settings.len() * seeds.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            classes,
            per_class,
            dim,
            noise,
            seed,
            out,
            out_eval,
        } => cmd_gen(classes, per_class, dim, noise, seed, &out, out_eval.as_deref()),
        Command::Train {
            config,
            data,
            val,
            out_model,
            out_metrics,
        } => cmd_train(&config, &data, val.as_deref(), &out_model, out_metrics.as_deref()),
        Command::Eval {
            model,
            data,
            k,
            metrics,
            out,
        } => cmd_eval(&model, &data, &k, &metrics, out.as_deref()),
        Command::Gradcheck {
            dim,
            batch,
            tau1,
            tau2,
            eps,
            seed,
            simix,
            encoder,
        } => cmd_gradcheck(GradCheckConfig {
            dim,
            batch,
            tau1,
            tau2,
            eps,
            seed,
            simix,
            encoder,
            ..GradCheckConfig::default()
        }),
        Command::Sweep {
            config,
            data,
            val,
            param,
            values,
            seeds,
            out,
        } => cmd_sweep(&config, &data, &val, param, &values, &seeds, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
