use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::{error, info, warn};

use dasc_core::config::{find_key, Precision, RunConfig, KEYS};
use dasc_core::data::{self, Dataset, Split};
use dasc_core::eval::{self, MetricsRecord};
use dasc_core::train::{self, RunOptions, Trainer};
use dasc_core::{centroid, select, Error, Result, Scalar};

fn key_args() -> Vec<Arg> {
    let defaults = RunConfig::default();
    KEYS.iter()
        .map(|k| {
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(format!("{} [default: {}]", k.help, defaults.get(k.name).unwrap_or_default()))
                .help_heading("Configuration keys")
        })
        .collect()
}

fn common(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value file; flags override it"),
    )
    .arg(
        Arg::new("format")
            .long("format")
            .value_name("FORMAT")
            .value_parser(["text"])
            .default_value("text")
            .help("report format"),
    )
    .args(key_args())
}

fn cli() -> Command {
    Command::new("dasc")
        .about("Noisy long-tailed classification on synthetic data: generation, training, selection diagnostics and ablation sweeps")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more logging (-vv for debug)"),
        )
        .arg(
            Arg::new("quiet")
                .short('q')
                .long("quiet")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("warnings and errors only"),
        )
        .subcommand(common(Command::new("gen").about("write train.txt and test.txt from the generator settings")))
        .subcommand(common(
            Command::new("train").about("train both networks, writing metrics.jsonl and checkpoints").arg(
                Arg::new("resume")
                    .long("resume")
                    .action(ArgAction::SetTrue)
                    .help("continue from the latest checkpoint in out_dir"),
            ),
        ))
        .subcommand(common(
            Command::new("select")
                .about("one centroid estimation and selection pass from a checkpoint")
                .arg(checkpoint_arg())
                .arg(
                    Arg::new("epoch")
                        .long("epoch")
                        .value_name("T")
                        .value_parser(clap::value_parser!(usize))
                        .help("epoch whose confidence threshold to use [default: the checkpoint's]"),
                ),
        ))
        .subcommand(common(
            Command::new("eval").about("test accuracy of a checkpoint").arg(checkpoint_arg()),
        ))
        .subcommand(common(
            Command::new("sweep")
                .about("cross-product of boolean toggles, one run per combination and seed")
                .arg(
                    Arg::new("toggles")
                        .long("toggles")
                        .value_name("KEYS")
                        .required(true)
                        .help("comma-separated boolean keys, e.g. use_dacc,use_sbcl"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .default_value("1")
                        .help("seeds per combination, starting at `seed`"),
                )
                .arg(
                    Arg::new("jobs")
                        .long("jobs")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .default_value("1")
                        .help("rows run concurrently"),
                ),
        ))
        .subcommand(common(Command::new("config").about("print the effective configuration")))
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("DIR")
        .required(true)
        .help("a ckpt_epoch{t} directory")
}

fn build_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(Path::new(path))?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    match (&cfg.data, &cfg.test_data) {
        (Some(tr), Some(te)) => Ok((data::load_dataset(tr, Split::Train)?, data::load_dataset(te, Split::Test)?)),
        (None, None) => data::generate_benchmark(&cfg.gen, cfg.test_per_class),
        _ => Err(Error::Config("--data and --test_data must be given together".into())),
    }
}

fn print_counts<T: Scalar>(ds: &Dataset<T>) {
    println!("noisy class counts: {:?}", ds.class_counts());
    if let Some(t) = ds.true_labels() {
        println!("true class counts:  {:?}", data::count_labels(t, ds.num_classes()));
    }
    if let Some(r) = ds.noise_rate() {
        println!("realised noise rate: {r:.4}");
    }
}

fn cmd_gen<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let (train, test) = data::generate_benchmark::<T>(&cfg.gen, cfg.test_per_class)?;
    create_out_dir(cfg)?;
    let tr = cfg.out_dir.join("train.txt");
    let te = cfg.out_dir.join("test.txt");
    data::save_dataset(&train, &tr)?;
    data::save_dataset(&test, &te)?;
    println!("wrote {} ({} samples) and {} ({} samples)", tr.display(), train.len(), te.display(), test.len());
    print_counts(&train);
    Ok(())
}

fn run_options(cfg: &RunConfig) -> RunOptions {
    RunOptions {
        out_dir: Some(cfg.out_dir.clone()),
        checkpoint_every: cfg.checkpoint_every,
        stop_after: cfg.stop_after,
        dump_every: cfg.dump_every,
        class_sets: cfg.class_sets,
        auc_score: cfg.auc_score,
    }
}

/// Full training run into `cfg.out_dir`; returns the last record.
fn train_run<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<Option<MetricsRecord>> {
    let (train, test) = load_data::<T>(cfg)?;
    create_out_dir(cfg)?;
    let cfg_path = cfg.out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let view = train.train_view();
    let net_cfg = cfg.net_config(train.dim(), train.num_classes());
    let mut trainer = match resume.then(|| train::latest_checkpoint(&cfg.out_dir)).flatten() {
        Some((t, dir)) => {
            info!("resuming from {} (epoch {t})", dir.display());
            let trainer = Trainer::<T>::load_checkpoint(&dir, cfg.train.clone(), &view)?;
            if trainer.net_config() != &net_cfg {
                return Err(Error::Checkpoint("checkpoint network shape differs from the configuration".into()));
            }
            trainer
        }
        None => {
            if resume {
                warn!("no checkpoint under {}, starting fresh", cfg.out_dir.display());
            }
            Trainer::new(cfg.train.clone(), net_cfg, &view)?
        }
    };
    let records = train::run_training(&mut trainer, &train, &test, &run_options(cfg))?;
    Ok(records.last().cloned())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_record(r: &MetricsRecord) {
    println!("epoch            {}", r.epoch);
    println!("overall_acc      {}", fmt_opt(r.overall_acc));
    println!("many_acc         {}", fmt_opt(r.many_acc));
    println!("medium_acc       {}", fmt_opt(r.medium_acc));
    println!("few_acc          {}", fmt_opt(r.few_acc));
    println!("selection_auc    {}", fmt_opt(r.selection_auc));
    println!("selection_prec   {}", fmt_opt(r.selection_precision));
    println!("selection_recall {}", fmt_opt(r.selection_recall));
    println!("clean_fraction   {}", fmt_opt(r.clean_fraction));
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<()> {
    match train_run::<T>(cfg, resume)? {
        Some(r) => print_record(&r),
        None => println!("nothing to do: all {} epochs already ran", cfg.train.epochs),
    }
    Ok(())
}

fn load_pair<T: Scalar>(dir: &Path) -> Result<(dasc_core::net::ModelState<T>, dasc_core::net::ModelState<T>, usize)> {
    if !dir.is_dir() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let a = dasc_core::net::ModelState::load(&dir.join("net_a.bin"))?;
    let b = dasc_core::net::ModelState::load(&dir.join("net_b.bin"))?;
    let epoch = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("ckpt_epoch"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    Ok((a, b, epoch))
}

fn cmd_select<T: Scalar>(cfg: &RunConfig, ckpt: &Path, epoch: Option<usize>) -> Result<()> {
    let (train, _) = load_data::<T>(cfg)?;
    let (net_a, _, ckpt_epoch) = load_pair::<T>(ckpt)?;
    let t = epoch.unwrap_or(ckpt_epoch);
    let tau = cfg.train.threshold(t, train.num_classes());
    let pass = train::selection_pass(&net_a, &train.train_view(), tau, &cfg.train, None)?;
    create_out_dir(cfg)?;
    let path = cfg.out_dir.join(format!("selection_epoch{t}.csv"));
    select::write_selection_csv(&path, &pass.selection, train.noisy_labels(), train.true_labels())?;
    centroid::dump_centroids(&cfg.out_dir, t, &pass.centroids)?;
    println!("estimator        {}", cfg.train.centroid);
    println!("tau              {tau:.6}");
    println!("confident        {}", pass.centroids.confident_count());
    println!("selected clean   {} / {}", pass.selection.clean_count(), train.len());
    if let Some(truth) = train.true_labels() {
        let counts = data::count_labels(truth, train.num_classes());
        let sets = eval::class_sets(&counts, cfg.class_sets);
        let m = eval::selection_metrics(&pass.selection, train.noisy_labels(), truth, &sets, cfg.auc_score);
        println!("selection_auc    {}", fmt_opt(m.auc));
        println!("selection_auc_few {}", fmt_opt(m.auc_few));
        println!("precision        {}", fmt_opt(m.precision));
        println!("recall           {}", fmt_opt(m.recall));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let (train, test) = load_data::<T>(cfg)?;
    let (a, b, _) = load_pair::<T>(ckpt)?;
    let counts = match train.true_labels() {
        Some(t) => data::count_labels(t, train.num_classes()),
        None => train.class_counts().to_vec(),
    };
    let sets = eval::class_sets(&counts, cfg.class_sets);
    let probs = train::predict(&a, &b, test.features())?;
    let labels = test.true_labels().unwrap_or(test.noisy_labels());
    let acc = eval::accuracy_breakdown(&probs, labels, &sets);
    println!("overall_acc      {:.4}", acc.overall);
    println!("many_acc         {}", fmt_opt(acc.many));
    println!("medium_acc       {}", fmt_opt(acc.medium));
    println!("few_acc          {}", fmt_opt(acc.few));
    for (k, a) in acc.per_class.iter().enumerate() {
        println!("class {k:<10} {}", fmt_opt(*a));
    }
    Ok(())
}

struct SweepRow {
    seed: u64,
    values: Vec<bool>,
    cfg: RunConfig,
}

fn sweep_rows(base: &RunConfig, toggles: &[String], seeds: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for combo in 0..(1usize << toggles.len()) {
        for s in 0..seeds {
            let mut cfg = base.clone();
            let seed = base.gen.seed + s;
            cfg.set("seed", &seed.to_string())?;
            let values: Vec<bool> = (0..toggles.len()).map(|i| combo & (1 << (toggles.len() - 1 - i)) != 0).collect();
            for (k, v) in toggles.iter().zip(&values) {
                cfg.set(k, &v.to_string())?;
            }
            cfg.validate()?;
            cfg.out_dir = base.out_dir.join(format!("row_{}", &cfg.hash()[..12]));
            rows.push(SweepRow { seed, values, cfg });
        }
    }
    Ok(rows)
}

fn run_row(row: &SweepRow) -> Result<MetricsRecord> {
    let done = row.cfg.out_dir.join("final.json");
    if let Ok(text) = fs::read_to_string(&done) {
        if let Ok(r) = MetricsRecord::from_json_line(text.trim()) {
            info!("reusing {}", row.cfg.out_dir.display());
            return Ok(r);
        }
    }
    let record = match row.cfg.precision {
        Precision::F64 => train_run::<f64>(&row.cfg, false)?,
        Precision::F32 => train_run::<f32>(&row.cfg, false)?,
    }
    .ok_or_else(|| Error::Config("run produced no epochs".into()))?;
    fs::write(&done, record.to_json_line() + "\n").map_err(|e| Error::io(&done, e))?;
    Ok(record)
}

fn cmd_sweep(base: &RunConfig, toggles: &str, seeds: u64, jobs: usize) -> Result<()> {
    let toggles: Vec<String> = toggles.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if toggles.is_empty() {
        return Err(Error::Config("--toggles needs at least one key".into()));
    }
    for t in &toggles {
        match find_key(t) {
            Some(k) if k.boolean => {}
            Some(_) => return Err(Error::Config(format!("--toggles: `{t}` is not a boolean key"))),
            None => return Err(Error::Config(format!("--toggles: unknown key `{t}`"))),
        }
    }
    let rows = sweep_rows(base, &toggles, seeds)?;
    create_out_dir(base)?;
    let results: Vec<Mutex<Option<Result<MetricsRecord>>>> = rows.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(rows.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(row) = rows.get(i) else { break };
                let r = run_row(row);
                if let Err(e) = &r {
                    error!("row {} failed: {e}", row.cfg.out_dir.display());
                }
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let path = base.out_dir.join("sweep_summary.csv");
    let mut csv = format!(
        "row,seed,{},config_hash,status,overall_acc,many_acc,medium_acc,few_acc,selection_auc\n",
        toggles.join(",")
    );
    let mut failures = 0;
    for (i, (row, slot)) in rows.iter().zip(results).enumerate() {
        let flags: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
        let res = slot.into_inner().expect("result slot").expect("every row ran");
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let tail = match &res {
            Ok(r) => format!(
                "ok,{},{},{},{},{}",
                cell(r.overall_acc),
                cell(r.many_acc),
                cell(r.medium_acc),
                cell(r.few_acc),
                cell(r.selection_auc)
            ),
            Err(e) => {
                failures += 1;
                format!("\"error: {}\",,,,,", e.to_string().replace('"', "'"))
            }
        };
        csv.push_str(&format!("{i},{},{},{},{tail}\n", row.seed, flags.join(","), row.cfg.hash()));
    }
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    println!("wrote {} ({} rows, {failures} failed)", path.display(), rows.len());
    Ok(())
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = build_config(sub)?;
    let ckpt = || PathBuf::from(sub.get_one::<String>("checkpoint").expect("required"));
    macro_rules! typed {
        ($f:ident ( $($arg:expr),* )) => {
            match cfg.precision {
                Precision::F64 => $f::<f64>($($arg),*),
                Precision::F32 => $f::<f32>($($arg),*),
            }
        };
    }
    match name {
        "gen" => typed!(cmd_gen(&cfg)),
        "train" => typed!(cmd_train(&cfg, sub.get_flag("resume"))),
        "select" => typed!(cmd_select(&cfg, &ckpt(), sub.get_one::<usize>("epoch").copied())),
        "eval" => typed!(cmd_eval(&cfg, &ckpt())),
        "sweep" => cmd_sweep(
            &cfg,
            sub.get_one::<String>("toggles").expect("required"),
            *sub.get_one::<u64>("seeds").expect("default"),
            *sub.get_one::<u64>("jobs").expect("default") as usize,
        ),
        "config" => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if m.get_flag("quiet") {
        "warn"
    } else {
        match m.get_count("verbose") {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
