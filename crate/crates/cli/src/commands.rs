use std::path::Path;

use asana_core::biomech::extract_features;
use asana_core::edge_opt::{bench, prune, quantize, sparsity, EdgeOptError};
use asana_core::evaluator::{evaluate_posture, EvalError};
use asana_core::feedback::{CooldownState, FeedbackGenerator};
use asana_core::ingest::{normalize, parse_frame, IngestError};
use asana_core::model::{
    evaluate, split_indices, train, AnyModel, Dataset, Metrics, ModelError, ModelFile, ModelMeta, ModelVariant,
    SequenceSample, TrainConfig,
};
use asana_core::pipeline::{PipelineError, Resources};
use asana_core::session_log::{replay, SessionLog, SessionLogError};
use asana_core::synth::{export_dataset, make_dataset, read_dataset, DatasetConfig, SynthError};
use asana_service::{Server, ServerConfig, ServiceError};
use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::output::{opt, Output};
use crate::{
    AnalyzeArgs, BenchArgs, Cli, Command, EvalArgs, PoseCheckArgs, PruneArgs, QuantizeArgs, ServeArgs, SplitPart,
    SynthArgs, TrainArgs,
};

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Log(#[from] SessionLogError),
    #[error(transparent)]
    EdgeOpt(#[from] EdgeOptError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => ServerConfig::load(path)?,
        None => ServerConfig::default(),
    };
    let out = Output::new(cli.json);
    let ctx = Ctx { cli, config, out };
    match &cli.command {
        Command::Synth(a) => ctx.synth(a),
        Command::Train(a) => ctx.train(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Analyze(a) => ctx.analyze(a),
        Command::Quantize(a) => ctx.quantize(a),
        Command::Prune(a) => ctx.prune(a),
        Command::Bench(a) => ctx.bench(a),
        Command::Serve(a) => ctx.serve(a),
        Command::PoseCheck(a) => ctx.pose_check(a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: ServerConfig,
    out: Output,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn float_model(file: &ModelFile, path: &Path) -> Result<asana_core::model::ModelParams> {
    file.float_params()
        .cloned()
        .ok_or_else(|| CliError::Invalid(format!("{} holds a quantized model; float weights are needed", path.display())))
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(DEFAULT_SEED)
    }

    /// Tables from the config, without a classifier.
    fn tables(&self) -> Result<Resources> {
        let config = ServerConfig {
            model_path: None,
            ..self.config.clone()
        };
        Ok(config.load_resources()?)
    }

    /// Tables plus the classifier from `model` or the config.
    fn resources(&self, model: Option<&Path>, window: usize) -> Result<Resources> {
        let config = ServerConfig {
            model_path: model.map(Path::to_owned).or_else(|| self.config.model_path.clone()),
            window,
            ..self.config.clone()
        };
        Ok(config.load_resources()?)
    }

    fn synth(&self, a: &SynthArgs) -> Result<()> {
        let res = self.tables()?;
        let config = DatasetConfig {
            num_classes: a.classes,
            samples_per_class: a.samples_per_class,
            window: a.window,
            noise_deg: a.noise,
            seed: self.seed(),
        };
        let dataset = make_dataset(&config, &res.library)?;
        export_dataset(&dataset, &res.table, &a.out)?;
        #[derive(Serialize)]
        struct Written<'a> {
            path: String,
            samples: usize,
            classes: &'a [String],
            window: usize,
            seed: u64,
        }
        let w = Written {
            path: a.out.display().to_string(),
            samples: dataset.samples.len(),
            classes: &dataset.class_labels,
            window: a.window,
            seed: config.seed,
        };
        self.out.emit("dataset", &w, || {
            format!(
                "wrote {} samples ({} classes: {}) of {} frames to {} (seed {})",
                w.samples,
                w.classes.len(),
                w.classes.join(", "),
                w.window,
                w.path,
                w.seed
            )
        });
        Ok(())
    }

    fn dataset(&self, path: &Path) -> Result<(Resources, Dataset)> {
        let res = self.tables()?;
        let dataset = read_dataset(path, &res.table, self.config.min_confidence)?;
        Ok((res, dataset))
    }

    fn train(&self, a: &TrainArgs) -> Result<()> {
        let (res, dataset) = self.dataset(&a.data)?;
        let config = TrainConfig {
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            epochs: a.epochs,
            conv_channels: a.conv_channels,
            hidden: a.hidden,
            seed: self.seed(),
            ..TrainConfig::default()
        };
        info!("training on {} samples from {}", dataset.samples.len(), a.data.display());
        let outcome = train(&dataset, &config)?;
        self.out
            .note(|| format!("{:>5}  {:>10}  {:>9}  {:>10}  {:>9}", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"));
        for e in &outcome.history {
            self.out.emit("epoch", e, || {
                format!(
                    "{:>5}  {:>10.6}  {:>9.4}  {:>10}  {:>9}",
                    e.epoch,
                    e.train_loss,
                    e.train_accuracy,
                    opt(e.val_loss, 6),
                    opt(e.val_accuracy, 4)
                )
            });
        }
        let window = dataset.samples[0].features.len();
        let meta = ModelMeta {
            class_labels: dataset.class_labels.clone(),
            angle_table_version: res.table.version.clone(),
            window,
            seed: Some(config.seed),
            pruned_fraction: None,
        };
        let test: Vec<&SequenceSample> = dataset.subset(&outcome.split.test);
        let test_accuracy = if test.is_empty() {
            None
        } else {
            Some(evaluate(&outcome.params, &test)?.accuracy)
        };
        ModelFile::new(meta, AnyModel::Float(outcome.params)).save(&a.out)?;
        #[derive(Serialize)]
        struct Trained {
            path: String,
            best_epoch: usize,
            test_accuracy: Option<f64>,
            test_samples: usize,
        }
        let t = Trained {
            path: a.out.display().to_string(),
            best_epoch: outcome.best_epoch,
            test_accuracy,
            test_samples: test.len(),
        };
        self.out.emit("trained", &t, || {
            format!(
                "best epoch {}; test accuracy {} on {} samples; model written to {}",
                t.best_epoch,
                opt(t.test_accuracy, 4),
                t.test_samples,
                t.path
            )
        });
        Ok(())
    }

    fn eval(&self, a: &EvalArgs) -> Result<()> {
        let file = ModelFile::load(&a.model)?;
        let (_, dataset) = self.dataset(&a.data)?;
        if dataset.class_labels != file.meta.class_labels {
            return Err(CliError::Invalid(format!(
                "dataset classes [{}] differ from model classes [{}]",
                dataset.class_labels.join(", "),
                file.meta.class_labels.join(", ")
            )));
        }
        let seed = self.cli.seed.or(file.meta.seed).unwrap_or(DEFAULT_SEED);
        let split = split_indices(dataset.samples.len(), TrainConfig::default().split, seed);
        let indices: Vec<usize> = match a.split {
            SplitPart::Train => split.train,
            SplitPart::Validation => split.validation,
            SplitPart::Test => split.test,
            SplitPart::All => (0..dataset.samples.len()).collect(),
        };
        let samples = dataset.subset(&indices);
        let metrics = match &file.model {
            AnyModel::Float(p) => evaluate(p, &samples)?,
            AnyModel::Quantized(q) => evaluate(q, &samples)?,
        };
        self.print_metrics(&metrics, &file.meta.class_labels, file.variant(), samples.len());
        Ok(())
    }

    fn print_metrics(&self, m: &Metrics, labels: &[String], variant: ModelVariant, n: usize) {
        if self.out.is_json() {
            #[derive(Serialize)]
            struct Report<'a> {
                variant: ModelVariant,
                samples: usize,
                class_labels: &'a [String],
                #[serde(flatten)]
                metrics: &'a Metrics,
            }
            let r = Report {
                variant,
                samples: n,
                class_labels: labels,
                metrics: m,
            };
            self.out.emit("metrics", &r, String::new);
            return;
        }
        let width = labels.iter().map(String::len).max().unwrap_or(5).max(5);
        println!("{variant} model on {n} samples");
        println!("accuracy {:.4}", m.accuracy);
        println!("{:<width$}  {:>9}  {:>6}  {:>6}  {:>7}", "class", "precision", "recall", "f1", "support");
        for (label, c) in labels.iter().zip(&m.per_class) {
            println!(
                "{:<width$}  {:>9}  {:>6}  {:>6}  {:>7}",
                label,
                opt(c.precision, 4),
                opt(c.recall, 4),
                opt(c.f1, 4),
                c.support
            );
        }
        println!(
            "{:<width$}  {:>9.4}  {:>6.4}  {:>6.4}",
            "macro", m.macro_precision, m.macro_recall, m.macro_f1
        );
        println!("confusion (rows true, columns predicted):");
        for (label, row) in labels.iter().zip(&m.confusion) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            println!("{label:<width$} {}", cells.join(""));
        }
    }

    fn analyze(&self, a: &AnalyzeArgs) -> Result<()> {
        let log = SessionLog::read(&a.log)?;
        let res = self.resources(a.model.as_deref(), log.header.config.window)?;
        let r = replay(&log, &res, a.pose.as_deref())?;
        if !a.summary_only {
            for o in &r.outputs {
                let e = &o.evaluation;
                self.out.emit("evaluation", e, || {
                    let flagged: Vec<&str> = e.flagged_joints().collect();
                    let mut line = format!(
                        "frame {:>6}  t={:>8}ms  {:<11}  score {}",
                        e.frame_id,
                        e.timestamp_ms,
                        format!("{:?}", e.status).to_lowercase(),
                        opt(e.score, 6)
                    );
                    if !flagged.is_empty() {
                        line.push_str(&format!("  flagged: {}", flagged.join(", ")));
                    }
                    line
                });
                if let Some(c) = &o.classification {
                    self.out.emit("classification", c, || {
                        format!("frame {:>6}  classified {} ({:.3})", c.frame_id, c.label, c.confidence)
                    });
                }
            }
        }
        let s = &r.summary;
        self.out.emit("summary", s, || {
            let flags: Vec<String> = s.flag_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!(
                "summary: {} frames, {} dropped, {} unevaluable, {} rejected; mean score {}, min {}; {} ms\nflags: {}",
                s.frames,
                s.drops,
                s.unevaluable,
                s.rejected,
                opt(s.mean_score, 6),
                opt(s.min_score, 6),
                s.duration_ms,
                flags.join(" ")
            )
        });

        if a.pose.as_ref().is_some_and(|p| *p != log.header.pose_id) {
            return Ok(());
        }
        let mut problems = Vec::new();
        if !r.evaluation_mismatches.is_empty() {
            problems.push(format!("evaluations differ at frames {:?}", r.evaluation_mismatches));
        }
        if !r.feedback_matches {
            problems.push("feedback differs".to_owned());
        }
        if r.classifications_match == Some(false) {
            problems.push("classifications differ".to_owned());
        }
        let recorded = log.recorded_summary(&res.library.get(&log.header.pose_id).map_or_else(Vec::new, |p| p.joint_names.clone()));
        if recorded != r.summary {
            problems.push("summary of recorded evaluations differs from the replay".to_owned());
        }
        if let Some(logged) = log.summary() {
            if *logged != r.summary {
                problems.push("logged summary differs from the replay".to_owned());
            }
        }
        #[derive(Serialize)]
        struct Check<'a> {
            reproduced: bool,
            classifications_checked: bool,
            problems: &'a [String],
        }
        let check = Check {
            reproduced: problems.is_empty(),
            classifications_checked: r.classifications_match.is_some(),
            problems: &problems,
        };
        self.out.emit("replay", &check, || {
            if check.reproduced {
                format!(
                    "replay: reproduces the live session exactly ({} frames{})",
                    r.outputs.len(),
                    if check.classifications_checked { ", classifications included" } else { "" }
                )
            } else {
                format!("replay: DIVERGED: {}", problems.join("; "))
            }
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Check("replay did not reproduce the session log".into()))
        }
    }

    fn quantize(&self, a: &QuantizeArgs) -> Result<()> {
        let file = ModelFile::load(&a.model)?;
        let params = float_model(&file, &a.model)?;
        let q = quantize(&params)?;
        #[derive(Serialize)]
        struct Scale {
            tensor: &'static str,
            scale: f64,
        }
        for (tensor, m) in q.weight_matrices() {
            let s = Scale { tensor, scale: m.scale };
            self.out.emit("scale", &s, || format!("{:<20} scale {:.6e}", s.tensor, s.scale));
        }
        ModelFile::new(file.meta, AnyModel::Quantized(q)).save(&a.out)?;
        self.out.note(|| format!("quantized model written to {}", a.out.display()));
        Ok(())
    }

    fn prune(&self, a: &PruneArgs) -> Result<()> {
        let file = ModelFile::load(&a.model)?;
        let params = float_model(&file, &a.model)?;
        let pruned = prune(&params, a.fraction)?;
        #[derive(Serialize)]
        struct Sparsity {
            tensor: &'static str,
            sparsity: f64,
        }
        for (tensor, sparsity) in sparsity(&pruned) {
            let s = Sparsity { tensor, sparsity };
            self.out.emit("sparsity", &s, || format!("{:<20} {:.4}", s.tensor, s.sparsity));
        }
        let mut meta = file.meta;
        // a zero fraction changes nothing, so the file stays identical
        if a.fraction > 0.0 {
            meta.pruned_fraction = Some(meta.pruned_fraction.map_or(a.fraction, |p| p.max(a.fraction)));
        }
        ModelFile::new(meta, AnyModel::Float(pruned)).save(&a.out)?;
        self.out.note(|| format!("pruned model written to {}", a.out.display()));
        Ok(())
    }

    fn bench(&self, a: &BenchArgs) -> Result<()> {
        let text = read_text(&a.log)?;
        let (lines, pose, variant, config) = match SessionLog::parse(text.as_bytes()) {
            Ok(log) => {
                let lines: Vec<String> = log.frame_lines().map(str::to_owned).collect();
                (lines, log.header.pose_id, log.header.variant, log.header.config)
            }
            Err(SessionLogError::MissingHeader) => {
                let lines = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect();
                let pose = a
                    .pose
                    .clone()
                    .ok_or_else(|| CliError::Invalid("a plain frame file needs --pose".into()))?;
                (lines, pose, ModelVariant::Float, self.config.pipeline_config())
            }
            Err(e) => return Err(e.into()),
        };
        let pose = a.pose.clone().unwrap_or(pose);
        let variant = a.variant.map_or(variant, ModelVariant::from);
        let res = self.resources(a.model.as_deref(), config.window)?;
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let report = bench(&res, &pose, variant, config, &refs)?;
        if self.out.is_json() {
            self.out.emit("bench", &report, String::new);
            return Ok(());
        }
        println!(
            "{} frames measured after {} warm-up; pose {}; {} model{}",
            report.frames_measured,
            report.warmup_frames,
            report.pose_id,
            report.variant,
            if res.models.is_some() { "" } else { " (none loaded)" }
        );
        println!("{:<10}  {:>10}  {:>10}  {:>10}", "stage", "median_ms", "p95_ms", "max_ms");
        let row = |name: &str, s: &asana_core::edge_opt::LatencyStats| {
            println!(
                "{:<10}  {:>10.4}  {:>10.4}  {:>10.4}",
                name,
                s.median_us / 1000.0,
                s.p95_us / 1000.0,
                s.max_us / 1000.0
            )
        };
        row("total", &report.end_to_end);
        for stage in asana_core::pipeline::Stage::ALL {
            row(&format!("{stage:?}").to_lowercase(), report.stage(stage));
        }
        Ok(())
    }

    fn serve(&self, a: &ServeArgs) -> Result<()> {
        let mut config = self.config.clone();
        if let Some(v) = &a.listen {
            config.listen = v.clone();
        }
        if let Some(v) = &a.tcp_listen {
            config.tcp_listen = Some(v.clone());
        }
        if let Some(v) = &a.model {
            config.model_path = Some(v.clone());
        }
        if let Some(v) = &a.poses {
            config.pose_path = Some(v.clone());
        }
        if let Some(v) = &a.log_dir {
            config.log_dir = v.clone();
        }
        if let Some(v) = a.max_sessions {
            config.max_sessions = v;
        }
        let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
            path: "tokio runtime".into(),
            source,
        })?;
        runtime.block_on(async {
            let server = Server::bind(&config).await?;
            #[derive(Serialize)]
            struct Listening {
                websocket: String,
                tcp: Option<String>,
                log_dir: String,
            }
            let l = Listening {
                websocket: format!("ws://{}/ws", server.http_addr()?),
                tcp: server.tcp_addr().transpose()?.map(|a| a.to_string()),
                log_dir: config.log_dir.display().to_string(),
            };
            self.out.emit("listening", &l, || {
                let tcp = l.tcp.as_ref().map_or(String::new(), |t| format!(", ndjson on {t}"));
                format!("serving {}{tcp}; logs in {}", l.websocket, l.log_dir)
            });
            server.run().await
        })?;
        Ok(())
    }

    fn pose_check(&self, a: &PoseCheckArgs) -> Result<()> {
        let text = read_text(&a.frame)?;
        let line = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| CliError::Invalid(format!("{} is empty", a.frame.display())))?;
        let res = self.tables()?;
        let pose = res
            .library
            .get(&a.pose)
            .ok_or_else(|| PipelineError::UnknownPose(a.pose.clone()))?;
        let frame = parse_frame(line)?;
        let min_conf = self.config.min_confidence;
        let normalized = normalize(&frame, min_conf)?;
        let features = extract_features(&normalized, &res.table.angles, min_conf);
        let report = evaluate_posture(&features, pose)?;
        let feedback = FeedbackGenerator::new(res.templates.clone(), self.config.cooldown_ms).generate(
            &report,
            &mut CooldownState::default(),
            frame.timestamp_ms,
        );
        let message = feedback.iter().find_map(|f| f.message()).map(str::to_owned);
        if self.out.is_json() {
            #[derive(Serialize)]
            struct Check<'a> {
                #[serde(flatten)]
                report: &'a asana_core::evaluator::PostureReport,
                angles: &'a [f64],
                mask: &'a [bool],
                message: Option<String>,
            }
            let c = Check {
                report: &report,
                angles: &features.angles,
                mask: &features.mask,
                message,
            };
            self.out.emit("posture", &c, String::new);
            return Ok(());
        }
        println!("{} ({}): score {:.3}", pose.display_name, pose.pose_id, report.score);
        println!(
            "{:<16}  {:>8}  {:>8}  {:>9}",
            "joint", "measured", "target", "deviation"
        );
        for (i, j) in report.joints.iter().enumerate() {
            let measured = features.mask[i].then_some(features.angles[i]);
            let status = if j.masked {
                "not visible"
            } else if j.flagged {
                "FIX"
            } else {
                "ok"
            };
            println!(
                "{:<16}  {:>8}  {:>8.1}  {:>9}  {}",
                j.name,
                opt(measured, 1),
                pose.joints[i].ref_deg,
                opt(j.signed_deviation_deg, 1),
                status
            );
        }
        match message {
            Some(m) => println!("feedback: {m}"),
            None => println!("feedback: none, posture within tolerance"),
        }
        Ok(())
    }
}
