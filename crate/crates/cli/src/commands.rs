use std::path::{Path, PathBuf};

use clap::ArgMatches;
use deltaquant::eval::{ablate_signals, ablation_csv, curve_csv, layer_report, pseudo_ft_curve, EvalOptions};
use deltaquant::search::quantize_model;
use deltaquant::signals::importance_all;
use deltaquant::store::check_compatible;
use deltaquant::toy::{gaussian_batch, init_model, stream, train};
use deltaquant::{
    load_container, save_container, CalibrationSet, Error, ImportanceSet, MappingConfig, QuantArtifact, QuantConfig,
    SearchConfig, Signal, TensorMap, TrainConfig,
};

use crate::config::{parse_list, ConfigFile, Layered};
use crate::{
    AblateArgs, Cli, CliError, Command, CurveArgs, EvalArgs, HeldOutArgs, ImportanceArgs, MappingArgs, QuantArgs,
    QuantizeArgs, SearchArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let layered = Layered { matches: sub, file: &file };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::TrainToy(a) => train_toy(a, &layered),
        Command::Importance(a) => importance(a, &layered),
        Command::Quantize(a) => quantize(a, &layered),
        Command::Eval(a) => eval(a, &layered),
        Command::Ablate(a) => ablate(a, &layered),
        Command::Curve(a) => curve(a, &layered),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn save(map: &TensorMap, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(save_container(map, path)?)
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    Ok(CalibrationSet::from_tensor_map(&load_container(path)?)?)
}

fn parse_signal(raw: &str) -> std::result::Result<Signal, String> {
    raw.parse::<Signal>().map_err(|e| e.to_string())
}

fn mapping_config(a: &MappingArgs, l: &Layered) -> Result<MappingConfig> {
    let signal = parse_signal(&a.signal).map_err(CliError::Usage)?;
    let cfg = MappingConfig {
        signal: l.pick_with("signal", "mapping.signal", signal, parse_signal)?,
        y_min: l.pick("y_min", "mapping.y_min", a.y_min)?,
        y_max: l.pick("y_max", "mapping.y_max", a.y_max)?,
        slices: l.pick("slices", "mapping.slices", a.slices)?,
        zero_epsilon: l.pick("zero_epsilon", "mapping.zero_epsilon", a.zero_epsilon)?,
        multiply_activation: l.pick("multiply_activation", "mapping.multiply_activation", a.multiply_activation)?,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn quant_config(a: &QuantArgs, l: &Layered) -> Result<QuantConfig> {
    let cfg = QuantConfig {
        bits: l.pick("bits", "quant.bits", a.bits)?,
        group_size: l.pick("group_size", "quant.group_size", a.group_size)?,
        protect_fraction: l.pick("protect", "quant.protect_fraction", a.protect)?,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn search_config(a: &SearchArgs, l: &Layered) -> Result<SearchConfig> {
    let cfg = SearchConfig {
        grid_points: l.pick("grid_points", "search.grid_points", a.grid_points)?,
        alpha_lo: l.pick("alpha_lo", "search.alpha_lo", a.alpha_lo)?,
        alpha_hi: l.pick("alpha_hi", "search.alpha_hi", a.alpha_hi)?,
        normalize_scale: l.pick("no_normalize", "search.normalize_scale", !a.no_normalize)?,
        max_calib_rows: l.pick("max_calib_rows", "search.max_calib_rows", a.max_calib_rows)?,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn eval_options(a: &HeldOutArgs, max_calib_rows: usize, l: &Layered) -> Result<EvalOptions> {
    let opts = EvalOptions {
        max_calib_rows,
        held_out_rows: l.pick("held_out_rows", "eval.held_out_rows", a.held_out_rows)?,
        seed: l.pick("eval_seed", "eval.seed", a.eval_seed)?,
    };
    if opts.held_out_rows == 0 || opts.max_calib_rows == 0 {
        return Err(CliError::Usage("row counts must be >= 1".into()));
    }
    Ok(opts)
}

/// Configuration errors found while merging flags count as usage errors.
fn usage(e: Error) -> CliError {
    match e {
        Error::Config(msg) => CliError::Usage(msg),
        other => CliError::Run(other),
    }
}

fn train_toy(a: TrainArgs, l: &Layered) -> Result<()> {
    let dims: Vec<usize> = parse_list(&a.dims).map_err(|e| CliError::Usage(format!("--dims: {e}")))?;
    let dims = l.pick_with("dims", "train.dims", dims, parse_list)?;
    let seed = l.pick("seed", "train.seed", a.seed)?;
    let cfg = TrainConfig {
        steps: l.pick("steps", "train.steps", a.steps)?,
        learning_rate: l.pick("lr", "train.learning_rate", a.lr)?,
        batch_size: l.pick("batch_size", "train.batch_size", a.batch_size)?,
        data_seed: l.pick("data_seed", "train.data_seed", a.data_seed)?,
        snapshot_every: l.pick("snapshot_every", "train.snapshot_every", a.snapshot_every)?,
    };
    cfg.validate().map_err(usage)?;
    let calib_rows = l.pick("calib_rows", "train.calib_rows", a.calib_rows)?;
    if calib_rows == 0 {
        return Err(CliError::Usage("--calib-rows must be >= 1".into()));
    }

    let model = init_model(&dims, seed).map_err(usage)?;
    let out = train(&model, &cfg)?;
    for (step, snap) in &out.snapshots {
        save(snap, &a.out.join(format!("step_{step:06}.dqt")))?;
    }
    save(&out.snapshots[0].1, &a.out.join("pre.dqt"))?;
    save(&out.snapshots.last().expect("final snapshot").1, &a.out.join("post.dqt"))?;

    let x = gaussian_batch(calib_rows, out.model.input_dim(), cfg.data_seed, stream::CALIB);
    let (_, calib) = out.model.forward(&x)?;
    save(&calib.to_tensor_map()?, &a.out.join("calib.dqt"))?;

    let mut csv = String::from("step,loss\n");
    for (i, loss) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    write_file(&a.out.join("losses.csv"), csv.as_bytes())?;
    println!(
        "trained {} steps: probe loss {:.6} -> {:.6}, {} snapshots in {}",
        cfg.steps,
        out.initial_loss,
        out.final_loss,
        out.snapshots.len(),
        a.out.display()
    );
    Ok(())
}

fn importance(a: ImportanceArgs, l: &Layered) -> Result<()> {
    let cfg = mapping_config(&a.mapping, l)?;
    if cfg.needs_calibration() && a.calib.is_none() {
        let why = if cfg.signal == Signal::ActivationSq {
            format!("signal `{}`", cfg.signal)
        } else {
            "--multiply-activation".to_string()
        };
        return Err(CliError::Usage(format!("missing input --calib, required by {why}")));
    }
    let pre = load_container(&a.pre)?;
    let post = load_container(&a.post)?;
    check_compatible(&pre, &post)?;
    let calib = a.calib.as_deref().map(load_calib).transpose()?;
    let set = importance_all(&pre, &post, &cfg, calib.as_ref())?;
    save(&set.to_tensor_map()?, &a.out)?;
    println!("importance ({}) for {} modules -> {}", cfg.signal, set.vectors.len(), a.out.display());
    Ok(())
}

fn quantize(a: QuantizeArgs, l: &Layered) -> Result<()> {
    let qcfg = quant_config(&a.quant, l)?;
    let scfg = search_config(&a.search, l)?;
    let post = load_container(&a.post)?;
    let imp = ImportanceSet::from_tensor_map(&load_container(&a.importance)?)?;
    let calib = load_calib(&a.calib)?;
    let (artifact, results) = quantize_model(&post, &imp.vectors, &calib, &scfg, &qcfg)?;
    save(&artifact.to_tensor_map()?, &a.out)?;
    if let Some(path) = &a.report {
        let lines: Vec<_> = results.iter().map(|r| r.report_line()).collect();
        let mut json = serde_json::to_string_pretty(&lines).expect("report serializes");
        json.push('\n');
        write_file(path, json.as_bytes())?;
    }
    for r in &results {
        println!(
            "{}: alpha* = {:.4}, loss {:.6e} (round-to-nearest {:.6e})",
            r.module, r.alpha_star, r.best_loss, r.rtn_loss
        );
    }
    Ok(())
}

fn eval(a: EvalArgs, l: &Layered) -> Result<()> {
    let rows = l.pick("max_calib_rows", "search.max_calib_rows", a.max_calib_rows)?;
    let opts = eval_options(&a.held_out, rows, l)?;
    let post = load_container(&a.post)?;
    let artifact = QuantArtifact::from_tensor_map(&load_container(&a.artifact)?)?;
    let calib = load_calib(&a.calib)?;
    let report = layer_report(&post, &artifact, &calib, &opts)?;
    write_file(&a.out, report.to_json().as_bytes())?;
    println!(
        "end-to-end output mse {:.6e}, relative frobenius {:.6e}",
        report.end_to_end.output_mse_fp32_vs_quant, report.end_to_end.relative_frobenius
    );
    Ok(())
}

fn ablate(a: AblateArgs, l: &Layered) -> Result<()> {
    let signals: Vec<Signal> = match &a.signals {
        Some(raw) => parse_list(raw).map_err(|e| CliError::Usage(format!("--signals: {e}")))?,
        None => Vec::new(),
    };
    let signals = l.pick_with("signals", "ablate.signals", signals, parse_list)?;
    if signals.is_empty() {
        return Err(CliError::Usage("--signals needs at least one signal".into()));
    }
    let fractions: Vec<f64> = parse_list(&a.fractions).map_err(|e| CliError::Usage(format!("--fractions: {e}")))?;
    let fractions = l.pick_with("fractions", "ablate.fractions", fractions, parse_list)?;
    if fractions.is_empty() {
        return Err(CliError::Usage("--fractions needs at least one value".into()));
    }
    let base = MappingConfig {
        y_min: l.pick("y_min", "mapping.y_min", a.y_min)?,
        y_max: l.pick("y_max", "mapping.y_max", a.y_max)?,
        slices: l.pick("slices", "mapping.slices", a.slices)?,
        zero_epsilon: l.pick("zero_epsilon", "mapping.zero_epsilon", a.zero_epsilon)?,
        ..MappingConfig::default()
    };
    base.validate().map_err(usage)?;
    let mappings: Vec<MappingConfig> = signals
        .into_iter()
        .map(|signal| MappingConfig { signal, ..base.clone() })
        .collect();
    let qcfg = QuantConfig {
        bits: l.pick("bits", "quant.bits", a.bits)?,
        group_size: l.pick("group_size", "quant.group_size", a.group_size)?,
        protect_fraction: 0.0,
    };
    qcfg.validate().map_err(usage)?;
    for &f in &fractions {
        QuantConfig { protect_fraction: f, ..qcfg.clone() }.validate().map_err(usage)?;
    }
    let opts = eval_options(&a.held_out, SearchConfig::default().max_calib_rows, l)?;

    let pre = load_container(&a.pre)?;
    let post = load_container(&a.post)?;
    check_compatible(&pre, &post)?;
    let calib = load_calib(&a.calib)?;
    let rows = ablate_signals(&pre, &post, &calib, &mappings, &fractions, &qcfg, &opts)?;
    write_file(&a.out, ablation_csv(&rows).as_bytes())?;
    for r in &rows {
        println!(
            "{:<16} protect {:<5} mean mse {:.6e}  end-to-end {:.6e}",
            r.signal, r.protect_fraction, r.mean_mse, r.end_to_end_mse
        );
    }
    Ok(())
}

fn snapshot_step(map: &TensorMap, path: &Path) -> Result<usize> {
    map.meta_get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Run(Error::Header(format!("{} has no `step` meta", path.display()))))
}

fn run_snapshots(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("step_") && name.ends_with(".dqt") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn curve(a: CurveArgs, l: &Layered) -> Result<()> {
    let mcfg = mapping_config(&a.mapping, l)?;
    let qcfg = quant_config(&a.quant, l)?;
    let scfg = search_config(&a.search, l)?;
    let (paths, final_path, calib_path) = match (&a.run, &a.snapshots, &a.final_ckpt) {
        (Some(dir), _, _) => (
            run_snapshots(dir)?,
            dir.join("post.dqt"),
            a.calib.clone().unwrap_or_else(|| dir.join("calib.dqt")),
        ),
        (None, Some(list), Some(fin)) => {
            let calib = a
                .calib
                .clone()
                .ok_or_else(|| CliError::Usage("--calib is required with --snapshots".into()))?;
            let paths = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect();
            (paths, fin.clone(), calib)
        }
        _ => return Err(CliError::Usage("give either --run or --snapshots with --final".into())),
    };
    if paths.len() < 2 {
        return Err(CliError::Usage(format!("the curve needs at least two snapshots, found {}", paths.len())));
    }
    let mut snapshots = Vec::with_capacity(paths.len());
    for p in &paths {
        let map = load_container(p)?;
        snapshots.push((snapshot_step(&map, p)?, map));
    }
    snapshots.sort_by_key(|(step, _)| *step);
    let final_ref = load_container(&final_path)?;
    let calib = load_calib(&calib_path)?;
    let curve = pseudo_ft_curve(&snapshots, &final_ref, &calib, &mcfg, &scfg, &qcfg)?;
    write_file(&a.out, curve_csv(&curve).as_bytes())?;
    match curve.slope {
        Some(s) => println!("{} points, slope {:.6e} per step", curve.points.len(), s),
        None => println!("{} points, slope undefined", curve.points.len()),
    }
    Ok(())
}
