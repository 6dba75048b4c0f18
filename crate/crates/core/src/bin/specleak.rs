use std::fs::File;
use std::io::BufWriter;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use specleak::harness::*;
use specleak::lm::{load_model, save_model, train_from_corpus_file, SamplerConfig, UnknownPolicy};
use specleak::observer::{capture, write_traces_csv, Trace};
use specleak::seed::derive_seed;
use specleak::stream::{queue_link, serve, Framer, SessionConfig, StreamTap, TcpSink};

#[derive(Parser)]
#[command(
    name = "specleak",
    version,
    about = "Packet-size side channels in speculative decoding"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set engine.g=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Data directory replacing the bundled assets file by file.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an n-gram model and save it.
    TrainLm {
        /// Corpus, one document per line; the bundled corpus when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream responses over TCP, one session per accepted connection.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Prompt text; cycles through the configured prompt set otherwise.
        #[arg(long)]
        prompt: Option<String>,
        /// Sessions to serve before exiting.
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        /// Append server-side session logs as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Capture traces into the observer CSV, from a TCP server or in-process.
    Capture {
        /// Server address; without it, every configured prompt is run
        /// in-process fingerprint.traces_per_query times.
        #[arg(long)]
        connect: Option<String>,
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query fingerprinting, optionally over a TPQ x temperature grid.
    AttackFingerprint,
    /// Datastore extraction against the retrieval engine.
    AttackExtract,
    /// Recover N of lookahead engines over probes.n_grid.
    ProbeN,
    /// Recover G of lookahead engines over probes.g_grid.
    ProbeG,
    /// Fingerprinting accuracy and overhead under each mitigation point.
    MitigateSweep,
    /// Summarize report files; --check regenerates each from its echoed config.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        check: bool,
    },
    /// Print the effective config as TOML.
    Config,
    /// Print the JSON Schema of the config or a report kind, or write all.
    Schema {
        /// One of: config, fingerprint, sweep, extraction, probe.
        kind: Option<String>,
        /// Write every schema into this directory instead.
        #[arg(long, conflicts_with = "kind")]
        write: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, &c.overrides)?,
        None => ExperimentConfig::from_toml_with("", &c.overrides)?,
    };
    if c.data_dir.is_some() {
        cfg.data_dir = c.data_dir.clone();
    }
    if let Some(d) = &c.out_dir {
        cfg.output.dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn wrote(path: &Path) {
    eprintln!("wrote {}", path.display());
}

fn write_csv_traces(path: &Path, traces: &[(String, Trace)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| path.display().to_string())?;
    write_traces_csv(BufWriter::new(f), traces)?;
    wrote(path);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml()),
        Cmd::Schema { kind, write } => match (kind, write) {
            (_, Some(dir)) => {
                std::fs::create_dir_all(&dir)?;
                for k in SCHEMA_KINDS {
                    let path = dir.join(schema_file_name(k));
                    write_text(&path, &schema(k).expect("known kind"))?;
                    wrote(&path);
                }
            }
            (Some(k), None) => match schema(&k) {
                Some(s) => print!("{s}"),
                None => bail!(
                    "unknown schema kind {k:?}; expected one of {}",
                    SCHEMA_KINDS.join(", ")
                ),
            },
            (None, None) => bail!("give a schema kind or --write DIR"),
        },
        Cmd::TrainLm {
            corpus,
            order,
            alpha,
            out,
        } => {
            let order = order.unwrap_or(cfg.model.order);
            let alpha = alpha.unwrap_or(cfg.model.alpha);
            let model = match corpus.or(cfg.model.corpus.clone()) {
                Some(p) => train_from_corpus_file(&p, order, alpha)
                    .with_context(|| p.display().to_string())?,
                None => {
                    specleak::lm::NGramModel::train_on_text(cfg.assets()?.corpus(), order, alpha)?
                }
            };
            save_model(&model, &out)?;
            let back = load_model(&out)?;
            if back.to_text() != model.to_text() {
                bail!("model did not round-trip through {}", out.display());
            }
            eprintln!(
                "order {} model, {} types, {} contexts",
                model.order(),
                model.vocab_size(),
                model.context_count()
            );
            wrote(&out);
        }
        Cmd::Serve {
            listen,
            prompt,
            sessions,
            log,
        } => {
            let wb = Workbench::new(cfg)?;
            let engine = wb.engine(&wb.config.engine)?;
            let prompts: Vec<String> = match prompt {
                Some(p) => vec![p],
                None => wb.prompt_lines(&wb.config.fingerprint.prompts)?,
            };
            let listener = TcpListener::bind(&listen).with_context(|| format!("bind {listen}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            let mut log_out = match &log {
                Some(p) => Some(BufWriter::new(
                    File::create(p).with_context(|| p.display().to_string())?,
                )),
                None => None,
            };
            for i in 0..sessions {
                let (stream, peer) = listener.accept()?;
                let text = &prompts[i % prompts.len()];
                let seed = derive_seed(wb.config.seed, &[i as u64]);
                let session = SessionConfig {
                    engine: engine.clone(),
                    prompt: wb.model.vocab().tokenize(text, UnknownPolicy::Reject)?,
                    max_tokens: wb.config.fingerprint.max_tokens,
                    sampler: SamplerConfig {
                        temperature: wb.config.sampler.temperature,
                        seed,
                    },
                    policy: wb.config.mitigation.reseeded(derive_seed(seed, &[1])),
                    framer: Framer::default(),
                };
                let record = serve(&session, &mut TcpSink::new(stream))?;
                eprintln!("session {i} to {peer}: {} packets", record.packets.len());
                if let Some(w) = log_out.as_mut() {
                    serde_json::to_writer(&mut *w, &record)?;
                    std::io::Write::write_all(w, b"\n")?;
                }
            }
        }
        Cmd::Capture {
            connect,
            sessions,
            label,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_path(&cfg, "traces.csv"));
            let mut traces = Vec::new();
            match connect {
                Some(addr) => {
                    for i in 0..sessions {
                        let stream =
                            TcpStream::connect(&addr).with_context(|| format!("connect {addr}"))?;
                        let mut trace = capture(&mut StreamTap::new(stream))?;
                        trace.label = label.clone();
                        traces.push((format!("t{i:04}"), trace));
                    }
                }
                None => {
                    let wb = Workbench::new(cfg)?;
                    let engine = wb.engine(&wb.config.engine)?;
                    let names = wb.prompt_lines(&wb.config.fingerprint.prompts)?;
                    for (p, text) in names.iter().enumerate() {
                        for t in 0..wb.config.fingerprint.traces_per_query {
                            let seed = derive_seed(wb.config.seed, &[p as u64, t as u64]);
                            let session = SessionConfig {
                                engine: engine.clone(),
                                prompt: wb.tokenize(text)?,
                                max_tokens: wb.config.fingerprint.max_tokens,
                                sampler: SamplerConfig {
                                    temperature: wb.config.sampler.temperature,
                                    seed,
                                },
                                policy: wb.config.mitigation.reseeded(derive_seed(seed, &[1])),
                                framer: Framer::default(),
                            };
                            let (sink, mut tap) = queue_link();
                            let mut sink = sink;
                            serve(&session, &mut sink)?;
                            drop(sink);
                            let trace = capture(&mut tap)?
                                .with_label(label.clone().unwrap_or_else(|| text.clone()));
                            traces.push((format!("q{p:02}-t{t:02}"), trace));
                        }
                    }
                }
            }
            write_csv_traces(&out, &traces)?;
        }
        Cmd::AttackFingerprint => {
            let report = fingerprint(&Workbench::new(cfg.clone())?)?;
            let path = out_path(&cfg, "fingerprint.json");
            write_json(&path, &report)?;
            wrote(&path);
            println!(
                "{} {}: accuracy {:.4} (sd {:.4}), macro F1 {:.4}",
                report.engine,
                cfg.fingerprint.scenario.as_str(),
                report.mean_accuracy,
                report.std_accuracy,
                report.mean_macro_f1
            );
            for c in &report.grid {
                println!(
                    "  tpq {:3} temperature {:.2}: accuracy {:.4} (sd {:.4})",
                    c.traces_per_query, c.temperature, c.mean_accuracy, c.std_accuracy
                );
            }
        }
        Cmd::AttackExtract => {
            let report = extraction(&Workbench::new(cfg.clone())?)?;
            let path = out_path(&cfg, "extraction.json");
            write_json(&path, &report)?;
            wrote(&path);
            let csv = out_path(&cfg, "extraction_timeline.csv");
            write_text(&csv, &report.timeline_csv())?;
            wrote(&csv);
            for s in &report.strategies {
                let sound = s.runs.iter().map(|r| r.soundness).fold(1.0, f64::min);
                println!(
                    "{:15} mean unique leaks {:8.1} over {} runs, min soundness {sound:.3}",
                    s.strategy.as_str(),
                    s.mean_unique_leaks,
                    s.runs.len()
                );
            }
        }
        Cmd::ProbeN | Cmd::ProbeG => {
            let wb = Workbench::new(cfg.clone())?;
            let (report, name) = match cli.cmd {
                Cmd::ProbeN => (probe_n(&wb)?, "probe_n"),
                _ => (probe_g(&wb)?, "probe_g"),
            };
            let path = out_path(&cfg, &format!("{name}.json"));
            write_json(&path, &report)?;
            wrote(&path);
            write_csv_traces(
                &out_path(&cfg, &format!("{name}_evidence.csv")),
                &report.evidence_traces(),
            )?;
            for r in &report.rows {
                println!(
                    "configured {} recovered {} confidence {:.3}{}",
                    r.configured,
                    r.result.recovered.map_or("-".into(), |v| v.to_string()),
                    r.result.confidence,
                    r.result
                        .note
                        .as_deref()
                        .map_or(String::new(), |n| format!(" ({n})"))
                );
            }
            println!("exact {}/{}", report.exact, report.total);
        }
        Cmd::MitigateSweep => {
            let report = mitigation_sweep(&Workbench::new(cfg.clone())?)?;
            let path = out_path(&cfg, "mitigation_sweep.json");
            write_json(&path, &report)?;
            wrote(&path);
            let mut csv =
                String::from("family,parameter,policy,mean_accuracy,std_accuracy,mean_overhead\n");
            for r in &report.rows {
                csv.push_str(&format!(
                    "{},{},{},{:.4},{:.4},{:.4}\n",
                    r.family,
                    r.parameter,
                    r.label,
                    r.mean_accuracy,
                    r.std_accuracy,
                    r.mean_overhead
                ));
            }
            let csv_path = out_path(&cfg, "mitigation_sweep.csv");
            write_text(&csv_path, &csv)?;
            wrote(&csv_path);
            print!("{csv}");
        }
        Cmd::Report { files, check } => {
            if files.is_empty() {
                bail!("no report files given");
            }
            let mut stale = 0;
            for f in &files {
                let text = std::fs::read_to_string(f).with_context(|| f.display().to_string())?;
                let value: Value =
                    serde_json::from_str(&text).with_context(|| f.display().to_string())?;
                let kind = report_kind(&value)
                    .with_context(|| format!("{}: not a report", f.display()))?;
                println!("{}: {}", f.display(), summarize(kind, &value));
                if check {
                    let cfg: ExperimentConfig = serde_json::from_value(value["config"].clone())?;
                    let again = regenerate(kind, &value, cfg)?;
                    let same = again == text;
                    println!(
                        "  regenerated from echoed config: {}",
                        if same { "identical" } else { "DIFFERS" }
                    );
                    stale += usize::from(!same);
                }
            }
            if stale > 0 {
                bail!("{stale} report(s) did not regenerate identically");
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Kind {
    Fingerprint,
    Sweep,
    Extraction,
    Probe,
}

fn report_kind(v: &Value) -> Option<Kind> {
    let has = |k: &str| v.get(k).is_some();
    if !has("config") {
        None
    } else if has("runs") && has("grid") {
        Some(Kind::Fingerprint)
    } else if has("rows") && has("chance") {
        Some(Kind::Sweep)
    } else if has("strategies") {
        Some(Kind::Extraction)
    } else if has("parameter") && has("rows") {
        Some(Kind::Probe)
    } else {
        None
    }
}

fn summarize(kind: Kind, v: &Value) -> String {
    match kind {
        Kind::Fingerprint => format!(
            "fingerprint, {} engine, mean accuracy {:.4}, {} grid cells",
            v["engine"].as_str().unwrap_or("?"),
            v["mean_accuracy"].as_f64().unwrap_or(f64::NAN),
            v["grid"].as_array().map_or(0, Vec::len)
        ),
        Kind::Sweep => {
            let rows = v["rows"].as_array().cloned().unwrap_or_default();
            let body: Vec<String> = rows
                .iter()
                .map(|r| {
                    format!(
                        "{} {:.3} ({:.2}x)",
                        r["label"].as_str().unwrap_or("?"),
                        r["mean_accuracy"].as_f64().unwrap_or(f64::NAN),
                        r["mean_overhead"].as_f64().unwrap_or(f64::NAN)
                    )
                })
                .collect();
            format!("mitigation sweep: {}", body.join(", "))
        }
        Kind::Extraction => {
            let s = v["strategies"].as_array().cloned().unwrap_or_default();
            let body: Vec<String> = s
                .iter()
                .map(|x| {
                    format!(
                        "{} {:.1}",
                        x["strategy"].as_str().unwrap_or("?"),
                        x["mean_unique_leaks"].as_f64().unwrap_or(f64::NAN)
                    )
                })
                .collect();
            format!("extraction, mean unique leaks: {}", body.join(", "))
        }
        Kind::Probe => format!(
            "probe {}, exact {}/{}",
            v["parameter"].as_str().unwrap_or("?"),
            v["exact"],
            v["total"]
        ),
    }
}

fn regenerate(kind: Kind, v: &Value, cfg: ExperimentConfig) -> Result<String> {
    let wb = Workbench::new(cfg)?;
    Ok(match kind {
        Kind::Fingerprint => to_json(&fingerprint(&wb)?)?,
        Kind::Sweep => to_json(&mitigation_sweep(&wb)?)?,
        Kind::Extraction => to_json(&extraction(&wb)?)?,
        Kind::Probe => match v["parameter"].as_str() {
            Some("n") => to_json(&probe_n(&wb)?)?,
            _ => to_json(&probe_g(&wb)?)?,
        },
    })
}
