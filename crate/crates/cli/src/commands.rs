use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use wavenet_qoe::bench::{run_bench, MIN_EPOCHS, MIN_PREDICTIONS};
use wavenet_qoe::data::csv_io::fmt_sig17;
use wavenet_qoe::data::{
    build_split_plan, derive_features, generate_synthetic, load_traces_csv, load_traces_dir, write_traces_csv,
    SessionTrace, SplitPlan, SplitProtocol, SynthConfig,
};
use wavenet_qoe::evaluation::evaluate;
use wavenet_qoe::models::{load_model, save_model, ArchConfig, LstmConfig, ModelKind, QoeModel, WaveNetConfig};
use wavenet_qoe::streaming::StreamState;
use wavenet_qoe::training::{train_with_hook, TrainConfig};
use wavenet_qoe::QoeError;

use crate::error::{CliError, CliResult, WithPath, EXIT_NUMERIC};
use crate::{BenchArgs, EvalArgs, FeaturesArgs, GenerateArgs, PredictArgs, SplitOpts, SynthOpts, TrainArgs};

fn comment_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

fn load_data(path: &Path) -> CliResult<Vec<SessionTrace>> {
    if path.is_dir() {
        Ok(load_traces_dir(path)?)
    } else {
        load_traces_csv(path).at(path)
    }
}

/// Writes `text` to `path`, or to stdout when there is no path.
fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).at(p),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn synth_config(s: &SynthOpts) -> SynthConfig {
    SynthConfig {
        seed: s.seed,
        num_sessions: s.sessions,
        duration_s: s.duration,
        stall_intensity: s.stall,
        num_contents: s.contents,
        num_patterns: s.patterns,
    }
}

fn protocol(s: &SplitOpts) -> CliResult<SplitProtocol> {
    let p: SplitProtocol = s.protocol.parse().map_err(|e: QoeError| CliError::usage(e.to_string()))?;
    Ok(match p {
        SplitProtocol::Holdout { .. } => SplitProtocol::Holdout {
            test_count: s.test_count,
        },
        other => other,
    })
}

fn select<'a>(sessions: &'a [SessionTrace], ids: &[String]) -> Vec<&'a SessionTrace> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    sessions.iter().filter(|s| wanted.contains(s.session_id.as_str())).collect()
}

fn check_window(arch: &ArchConfig, window: usize) -> CliResult<()> {
    if let ArchConfig::WaveNet(c) = arch {
        let rf = c.effective_receptive_field().map_err(|e| CliError::usage(e.to_string()))?;
        if window < rf {
            return Err(CliError::usage(format!(
                "--window {window} is shorter than the WaveNet receptive field {rf}"
            )));
        }
    }
    Ok(())
}

pub fn generate(a: GenerateArgs, embed: &[String]) -> CliResult<()> {
    let traces = generate_synthetic(&synth_config(&a.synth)).map_err(|e| CliError::usage(e.to_string()))?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    let header = comment_block(embed);
    for t in &traces {
        let path = a.out.join(format!("{}.csv", t.session_id));
        let mut bytes = header.clone().into_bytes();
        write_traces_csv(&mut bytes, &[t])?;
        fs::write(&path, bytes).at(&path)?;
    }
    eprintln!("wrote {} sessions to {}", traces.len(), a.out.display());
    Ok(())
}

pub fn features(a: FeaturesArgs, embed: &[String]) -> CliResult<()> {
    let traces = load_data(&a.input)?;
    let mut out = comment_block(embed);
    out.push_str("session_id,t,stsq,pi,nr,tr\n");
    for trace in &traces {
        let f = derive_features(trace).at(&a.input)?;
        for (t, s) in trace.samples.iter().enumerate() {
            let [stsq, pi, nr, tr] = f.column(t);
            out.push_str(&format!("{},{},{},{pi},{nr},{tr}\n", trace.session_id, s.t, fmt_sig17(stsq)));
        }
    }
    emit(a.out.as_deref(), &out)
}

fn arch_config(a: &crate::ArchOpts) -> CliResult<ArchConfig> {
    let kind: ModelKind = a.model_type.parse().map_err(|e: QoeError| CliError::usage(e.to_string()))?;
    let arch = match kind {
        ModelKind::WaveNet => ArchConfig::WaveNet(WaveNetConfig {
            filter_size: a.filter_size,
            num_filters: a.filters,
            dilation_base: a.dilation_base,
            num_layers: a.layers,
            ..WaveNetConfig::default()
        }),
        ModelKind::Lstm => ArchConfig::Lstm(LstmConfig {
            hidden_size: a.hidden,
            ..LstmConfig::default()
        }),
    };
    if let ArchConfig::WaveNet(c) = &arch {
        c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    if arch.param_count() == 0 {
        return Err(CliError::usage("model has no parameters"));
    }
    Ok(arch)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: TrainArgs, embed: &[String]) -> CliResult<()> {
    let arch = arch_config(&a.arch)?;
    let t = &a.train;
    let config = TrainConfig {
        window_len: t.window,
        batch_size: t.batch_size,
        max_epochs: t.epochs,
        learning_rate: t.lr,
        early_stop_patience: t.patience,
        validation_fraction: t.val_fraction,
        seed: t.seed,
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    check_window(&arch, config.window_len)?;
    let protocol = protocol(&a.split)?;
    let sessions = load_data(&a.data)?;
    let plan = build_split_plan(&sessions, protocol, config.seed)?;
    eprintln!(
        "{} plan: {} test session(s), {} parameters",
        plan.protocol,
        plan.entries.len(),
        arch.param_count()
    );

    let run = |ids: &[String], verbose: bool| -> CliResult<(QoeModel, String)> {
        let train_set = select(&sessions, ids);
        let started = Instant::now();
        let outcome = train_with_hook(&arch, &train_set, &config, &mut |e| {
            if verbose {
                eprintln!(
                    "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  {:.3} s",
                    e.epoch, e.train_mse, e.val_mse, e.epoch_seconds
                );
            }
            true
        })?;
        let log = &outcome.log;
        for w in &log.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!(
            "trained on {} windows ({} validation), best epoch {} of {}{}, {:.1} s",
            log.train_windows,
            log.val_windows,
            log.best_epoch,
            log.epochs.len(),
            if log.stopped_early { " (early stop)" } else { "" },
            started.elapsed().as_secs_f64()
        );
        let mut model = outcome.model;
        model.metadata = format!("{}\n{}", model.metadata, embed.join("\n"));
        Ok((model, log.to_csv(embed)))
    };

    if plan.is_shared() {
        let (model, log) = run(&plan.entries[0].train, !a.quiet)?;
        save_model(&a.out, &model).at(&a.out)?;
        let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
        fs::write(&log_path, log).at(&log_path)?;
        eprintln!("model written to {}", a.out.display());
    } else {
        if a.log.is_some() {
            eprintln!("warning: --log is ignored for per-session protocols; logs are written next to each model");
        }
        fs::create_dir_all(&a.out).at(&a.out)?;
        let n = plan.entries.len();
        for (i, entry) in plan.entries.iter().enumerate() {
            eprintln!("[{}/{n}] test session {}", i + 1, entry.test);
            let (model, log) = run(&entry.train, false)?;
            let path = a.out.join(format!("{}.wqoe", entry.test));
            save_model(&path, &model).at(&path)?;
            let log_path = a.out.join(format!("{}.log.csv", entry.test));
            fs::write(&log_path, log).at(&log_path)?;
        }
        eprintln!("{n} models written to {}", a.out.display());
    }
    Ok(())
}

pub fn predict(a: PredictArgs, embed: &[String]) -> CliResult<()> {
    if a.stream {
        if a.input.is_some() || a.out.is_some() {
            return Err(CliError::usage("--stream reads stdin and writes stdout; drop --input/--out"));
        }
        let model = load_model(&a.model).at(&a.model)?;
        return stream(&model, io::stdin().lock(), &mut io::stdout().lock());
    }
    let Some(input) = a.input.as_deref() else {
        return Err(CliError::usage("--input is required unless --stream is given"));
    };
    let model = load_model(&a.model).at(&a.model)?;
    let traces = load_data(input)?;
    let mut out = comment_block(embed);
    out.push_str("session_id,t,qoe_pred,qoe\n");
    for trace in &traces {
        let pred = model.predict_session(trace).at(input)?;
        for (s, p) in trace.samples.iter().zip(pred) {
            let truth = s.qoe.map(fmt_sig17).unwrap_or_default();
            out.push_str(&format!("{},{},{},{truth}\n", trace.session_id, s.t, fmt_sig17(p)));
        }
    }
    emit(a.out.as_deref(), &out)
}

/// One output line per accepted input line. Rejected samples are reported on
/// stderr and turn the exit status into a numeric failure at the end.
fn stream(model: &QoeModel, input: impl BufRead, out: &mut impl Write) -> CliResult<()> {
    let mut state = StreamState::for_model(model)?;
    writeln!(out, "t,qoe_pred,warmup")?;
    out.flush()?;
    let mut rejected = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') || (lineno == 1 && line.starts_with("stsq")) {
            continue;
        }
        let bad = |msg: String| CliError::data(format!("stdin line {lineno}: {msg}"));
        let (stsq, pi) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected 'stsq,pi', got '{line}'")))?;
        let stsq: f64 = stsq.trim().parse().map_err(|_| bad(format!("bad stsq '{}'", stsq.trim())))?;
        let pi = match pi.trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("pi must be 0 or 1, got '{other}'"))),
        };
        match state.push_sample(stsq, pi, model) {
            Ok(p) => {
                writeln!(out, "{},{},{}", p.t, fmt_sig17(p.qoe_pred), p.warmup)?;
                out.flush()?;
            }
            Err(e @ QoeError::NonFinite(_)) => {
                rejected += 1;
                eprintln!("stdin line {lineno}: rejected: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if rejected > 0 {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("{rejected} non-finite sample(s) rejected"),
        });
    }
    Ok(())
}

fn load_models(plan: &SplitPlan, dir: &Path) -> CliResult<HashMap<String, QoeModel>> {
    plan.entries
        .iter()
        .map(|e| {
            let path = dir.join(format!("{}.wqoe", e.test));
            Ok((e.test.clone(), load_model(&path).at(&path)?))
        })
        .collect()
}

pub fn eval(a: EvalArgs, embed: &[String]) -> CliResult<()> {
    let protocol = protocol(&a.split)?;
    let sessions = load_data(&a.data)?;
    let plan = build_split_plan(&sessions, protocol, a.seed)?;
    let report = if a.model.is_dir() {
        let models = load_models(&plan, &a.model)?;
        evaluate(&plan, &sessions, |e| {
            models
                .get(&e.test)
                .ok_or_else(|| QoeError::InvalidArgument(format!("no model for session '{}'", e.test)))
        })?
    } else {
        let model = load_model(&a.model).at(&a.model)?;
        if !plan.is_shared() {
            eprintln!("warning: one model is used for every entry of a per-session protocol");
        }
        evaluate(&plan, &sessions, |_| Ok(&model))?
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let degenerate = report.degenerate_sessions();
    if !degenerate.is_empty() {
        eprintln!("warning: constant series in {} session(s): {}", degenerate.len(), degenerate.join(" "));
    }
    emit(a.out.as_deref(), &report.to_csv(embed))?;
    if let Some(p) = &a.predictions {
        let text = comment_block(embed) + &report.predictions_csv();
        fs::write(p, text).at(p)?;
    }
    let table = report.to_table();
    if a.out.is_some() {
        print!("{table}");
    } else {
        eprint!("{table}");
    }
    Ok(())
}

pub fn bench(a: BenchArgs, embed: &[String]) -> CliResult<()> {
    if a.bench_epochs < MIN_EPOCHS {
        return Err(CliError::usage(format!("--bench-epochs must be at least {MIN_EPOCHS}")));
    }
    if a.predictions < MIN_PREDICTIONS {
        return Err(CliError::usage(format!("--predictions must be at least {MIN_PREDICTIONS}")));
    }
    let config = TrainConfig {
        window_len: a.window,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.synth.seed,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    check_window(&ArchConfig::default_for(ModelKind::WaveNet), a.window)?;
    let sessions = match &a.data {
        Some(p) => load_data(p)?,
        None => generate_synthetic(&synth_config(&a.synth)).map_err(|e| CliError::usage(e.to_string()))?,
    };
    let plan = build_split_plan(
        &sessions,
        SplitProtocol::Holdout {
            test_count: a.test_count,
        },
        config.seed,
    )?;
    let train_set = select(&sessions, &plan.entries[0].train);
    eprintln!("timing on {} sessions", train_set.len());
    let report = run_bench(&train_set, &config, a.bench_epochs, a.predictions)?;
    emit(a.out.as_deref(), &report.to_csv(embed))?;
    let markdown = report.to_markdown();
    if let Some(p) = &a.markdown {
        fs::write(p, &markdown).at(p)?;
    }
    if a.out.is_some() {
        print!("{markdown}");
    } else {
        eprint!("{markdown}");
    }
    Ok(())
}
