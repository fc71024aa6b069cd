use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use ddm_core::condense::{run_condensation, CondenseConfig, METRICS_HEADER};
use ddm_core::data::{gen_toy_dataset, load_cifar_binary, load_condensed, save_condensed, CifarLayout, Dataset, ToyConfig};
use ddm_core::diagnostics::{
    export_style_stats, run_drift_experiment, texture_report, write_drift_csv, GlcmConfig, TEXTURE_HEADER,
};
use ddm_core::evaluate::{run_evaluation, train_classifier, EvalProtocol, TrainSource};
use ddm_core::losses::LossConfig;
use ddm_core::network::{LayerSet, NetworkSpec};
use ddm_core::Error;

use crate::args::{CondenseArgs, DataArgs, DataKind, DiagnoseArgs, EvaluateArgs, NetArgs, ProtocolArgs, SourceKind};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or inputs; nothing was computed.
    Invalid(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "{m}"),
            CliError::Core(Error::NonFinite { term, iteration }) => {
                write!(f, "numeric abort: {term} became non-finite at iteration {iteration}")
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Invalid(msg.into()))
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(args: &DataArgs) -> CliResult<(Dataset, Dataset)> {
    match args.data {
        DataKind::Toy => {
            if args.toy_size == 0 {
                return invalid("--toy-size must be positive");
            }
            let cfg = ToyConfig {
                classes: args.toy_classes,
                per_class: args.toy_per_class,
                shape: [3, args.toy_size, args.toy_size],
                noise: args.toy_noise,
                seed: args.data_seed,
                ..ToyConfig::default()
            };
            gen_toy_dataset(&cfg).map_err(|e| CliError::Invalid(format!("toy dataset flags: {e}")))
        }
        DataKind::Cifar10 => {
            let Some(dir) = &args.data_dir else {
                return invalid("--data cifar10 needs --data-dir");
            };
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = load_cifar_binary(&train_files, CifarLayout::Cifar10, None)?;
            let test = load_cifar_binary(&[dir.join("test_batch.bin")], CifarLayout::Cifar10, Some(train.norm()))?;
            Ok((train, test))
        }
    }
}

fn network_spec(net: &NetArgs, train: &Dataset) -> CliResult<NetworkSpec> {
    let mut spec = NetworkSpec::for_input(train.image_shape(), net.width, train.num_classes());
    if let Some(d) = net.depth {
        spec.depth = d;
    }
    if net.width == 0 {
        return invalid("--width must be at least 1");
    }
    spec.validate()
        .map_err(|e| CliError::Invalid(format!("--depth/--width: {e}")))?;
    Ok(spec)
}

fn check_class_sizes(train: &Dataset, ipc: usize) -> CliResult {
    for c in 0..train.num_classes() {
        let n = train.class_indices(c).len();
        if n < ipc {
            return invalid(format!("--ipc {ipc} exceeds the {n} training images of class {c}"));
        }
    }
    Ok(())
}

pub fn condense(args: &CondenseArgs) -> CliResult {
    let (train, _) = load_data(&args.data)?;
    let spec = network_spec(&args.net, &train)?;
    let cfg = CondenseConfig {
        ipc: args.ipc,
        iters: args.iters,
        seed: args.seed,
        lr: args.lr,
        momentum: args.momentum,
        log_interval: args.log_interval,
        loss: LossConfig {
            alpha: args.alpha,
            beta: args.beta,
            lambda: args.lambda,
            k_frac: args.k_frac,
            layers: args.layers.clone().map(LayerSet::new),
            real_batch_per_class: args.real_batch,
        },
    };
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    if let Some(l) = &args.layers {
        if let Some(bad) = l.iter().find(|&&l| l >= spec.depth) {
            return invalid(format!("--layers: block {bad} does not exist in a depth-{} network", spec.depth));
        }
    }
    check_class_sizes(&train, args.ipc)?;
    if !cfg.loss.icd_active(args.ipc) && args.beta > 0.0 {
        eprintln!("warning: --ipc {} has no intra-class neighbours; the diversity term (--beta) is disabled", args.ipc);
    }

    let metrics_path = with_suffix(&args.out, ".metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut write_err = None;
    let result = run_condensation::<f32>(&train, &spec, &cfg, |row| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", row.csv_line()).and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        }
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let out = result?;
    save_condensed(&out.syn, &args.out)?;
    let last = out.metrics.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!(
        "wrote {} ({} images, {} per class); final loss {last:.6}; metrics in {}",
        args.out.display(),
        out.syn.labels().len(),
        args.ipc,
        metrics_path.display()
    );
    Ok(())
}

fn protocol(p: &ProtocolArgs) -> CliResult<EvalProtocol> {
    let protocol = EvalProtocol {
        nets_per_set: p.nets,
        repeats: p.repeats,
        epochs: p.epochs,
        lr: p.eval_lr,
        momentum: p.eval_momentum,
        weight_decay: p.weight_decay,
        batch_size: p.batch_size,
        augment: !p.no_augment,
    };
    protocol.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(protocol)
}

fn load_matching(path: &Path, train: &Dataset) -> CliResult<Dataset> {
    if !path.exists() {
        return invalid(format!("condensed file {} does not exist", path.display()));
    }
    let set = load_condensed(path)?.to_dataset();
    if set.image_shape() != train.image_shape() || set.num_classes() != train.num_classes() {
        return invalid(format!(
            "{} holds {:?} images of {} classes; the dataset has {:?} and {}",
            path.display(),
            set.image_shape(),
            set.num_classes(),
            train.image_shape(),
            train.num_classes()
        ));
    }
    Ok(set)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult {
    let (train, test) = load_data(&args.data)?;
    let spec = network_spec(&args.net, &train)?;
    let protocol = protocol(&args.protocol)?;
    let condensed;
    let source = match args.source {
        SourceKind::Condensed => {
            let Some(path) = &args.file else {
                return invalid("--source condensed needs --file");
            };
            condensed = load_matching(path, &train)?;
            TrainSource::Condensed(&condensed)
        }
        SourceKind::Random | SourceKind::Herding => {
            if args.ipc == 0 {
                return invalid("--ipc must be positive");
            }
            check_class_sizes(&train, args.ipc)?;
            if args.source == SourceKind::Random {
                TrainSource::Random {
                    real: &train,
                    ipc: args.ipc,
                }
            } else {
                TrainSource::Herding {
                    real: &train,
                    ipc: args.ipc,
                }
            }
        }
    };
    let report = run_evaluation(source, &spec, &protocol, &test, args.seed)?;
    report.write_report_csv(BufWriter::new(File::create(with_suffix(&args.out, ".report.csv"))?))?;
    report.write_summary_csv(BufWriter::new(File::create(with_suffix(&args.out, ".summary.csv"))?))?;
    println!("source      mean_pct  std_pct  runs  seconds");
    println!(
        "{:<10}  {:>8.2}  {:>7.2}  {:>4}  {:>7.1}",
        report.source,
        report.mean_pct,
        report.std_pct,
        report.runs.len(),
        report.seconds
    );
    println!("{} accuracy: {:.2} ± {:.2} %", report.source, report.mean_pct, report.std_pct);
    Ok(())
}

fn set_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "condensed".into())
}

pub fn diagnose(args: &DiagnoseArgs) -> CliResult {
    let (train, test) = load_data(&args.data)?;
    let spec = network_spec(&args.net, &train)?;
    if args.layer >= spec.depth {
        return invalid(format!("--layer {} does not exist in a depth-{} network", args.layer, spec.depth));
    }
    let glcm = GlcmConfig {
        levels: args.glcm_levels,
        kernels: args.glcm_kernels.clone(),
        ..GlcmConfig::default()
    };
    let [_, h, w] = train.image_shape();
    glcm.validate(h, w)
        .map_err(|e| CliError::Invalid(format!("--glcm-*: {e}")))?;
    if let Some(g) = args.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return invalid(format!("--gammas: {g} is outside [0, 1]"));
    }
    let drift_protocol = EvalProtocol {
        epochs: args.drift_epochs,
        ..EvalProtocol::default()
    };

    let a = load_matching(&args.file, &train)?;
    let a_name = set_name(&args.file);
    let (b, b_name) = match &args.against {
        Some(p) => (load_matching(p, &train)?, set_name(p)),
        None => (train.clone(), "real".to_string()),
    };

    let texture = texture_report(&[(&a_name, &a), (&b_name, &b)], &glcm)?;
    let style = export_style_stats((&a_name, &a), (&b_name, &b), &spec, args.seed, args.layer)?;
    let drift = if args.drift {
        let clf = train_classifier(&b, &spec, &drift_protocol, args.seed)?;
        Some(run_drift_experiment(&clf, &test, &a, args.layer, &args.gammas)?)
    } else {
        None
    };

    let mut out = BufWriter::new(File::create(with_suffix(&args.out, ".texture.csv"))?);
    writeln!(out, "{TEXTURE_HEADER}")?;
    for row in &texture {
        writeln!(out, "{}", row.csv_line())?;
    }
    out.flush()?;
    style.write_rows_csv(BufWriter::new(File::create(with_suffix(&args.out, ".style.csv"))?))?;
    style.write_gaps_csv(BufWriter::new(File::create(with_suffix(&args.out, ".style_gap.csv"))?))?;
    for row in &texture {
        println!(
            "texture {:<12} dissimilarity {:.4}  entropy {:.4}",
            row.set, row.dissimilarity, row.entropy
        );
    }
    println!("style gap at block {} (sum over classes): {:.6}", args.layer, style.total_gap());
    if let Some(rows) = drift {
        write_drift_csv(BufWriter::new(File::create(with_suffix(&args.out, ".drift.csv"))?), &rows)?;
        for r in &rows {
            println!("drift gamma {:.2}: accuracy {:.2} %", r.gamma, r.accuracy_pct);
        }
    }
    Ok(())
}
