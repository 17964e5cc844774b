use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{sub_seed, ExperimentConfig, GRADCHECK_STREAM, TRAIN_STREAM};
use crate::error::{CliError, Result};
use crate::io::{parse_json, read_json, read_text, to_json, write_atomic};
use scmoe_core::analysis::{cosine_similarity_matrix, GatingBehaviorReport, SimilarityReport};
use scmoe_core::arch::{model_forward, ActivationTrace, ShortcutPos, Variant};
use scmoe_core::grad::{
    case_objective, check_model, gradcheck_matrix, loss_curve_csv, train_toy_with, FdScheme, TrainReport,
    DEFAULT_REL_FLOOR, MATRIX_FD_EPS,
};
use scmoe_core::numkit::Rng;
use scmoe_sim::distsim::{
    calibrate_profile, compare_strategies, simulate, BlockCosts, ComparisonReport, HardwareProfile, StrategySpec,
};
use scmoe_sim::offload::{plan_offload, simulate_decode, DecodeCosts, OffloadMode, OffloadReport};
use scmoe_sim::sched::{choose_slot, verify_bounds, CostVector, ScheduleChoice};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    /// Positional input: a trace or cost-vector path, or inline JSON.
    pub input: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
    pub format: Format,
}

/// Text for stdout plus the files written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub files: Vec<PathBuf>,
}

struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Sink {
    fn new(dir: PathBuf) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.dir.join(name);
        write_atomic(&p, contents)?;
        self.files.push(p);
        Ok(())
    }

    fn finish(self, stdout: String) -> Outcome {
        Outcome {
            stdout,
            files: self.files,
        }
    }
}

fn load(opts: &Options) -> Result<ExperimentConfig> {
    let path = opts
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    read_json(path)
}

fn out_dir(opts: &Options, cfg: Option<&ExperimentConfig>) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn seed(opts: &Options, cfg: Option<&ExperimentConfig>) -> u64 {
    opts.seed.or(cfg.map(|c| c.seed)).unwrap_or(0)
}

/// Positional input or `--config`, read as a file unless it is inline JSON.
fn input_text(opts: &Options, what: &str) -> Result<(String, String)> {
    if let Some(s) = &opts.input {
        if s.trim_start().starts_with('{') {
            return Ok((what.to_string(), s.clone()));
        }
        return Ok((s.clone(), read_text(Path::new(s))?));
    }
    match &opts.config {
        Some(p) => Ok((p.display().to_string(), read_text(p)?)),
        None => Err(CliError::Usage(format!("{what} path or inline JSON required"))),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    steps: usize,
    initial_eval: f64,
    final_eval: f64,
    report: &'a TrainReport,
}

pub fn cmd_train(opts: &Options) -> Result<Outcome> {
    let cfg = load(opts)?;
    let sec = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::Usage("config has no `train` section".into()))?;
    let s = sub_seed(seed(opts, Some(&cfg)), TRAIN_STREAM);
    let (report, params) = train_toy_with(&cfg.model, &sec.train_config(s), sec.task, |_, _| {})?;
    let x = Rng::derive(s, 5).normal_matrix(sec.trace_tokens, cfg.model.d_model, 1.0);
    let (_, trace) = model_forward(&cfg.model, &params, &x)?;

    let mut sink = Sink::new(out_dir(opts, Some(&cfg)));
    let curve = loss_curve_csv(&report);
    let summary = to_json(&TrainSummary {
        seed: s,
        steps: sec.steps,
        initial_eval: report.initial_eval,
        final_eval: report.final_eval,
        report: &report,
    });
    sink.write("loss.csv", &curve)?;
    sink.write("train.json", &summary)?;
    sink.write("trace.json", &to_json(&trace))?;
    Ok(sink.finish(match opts.format {
        Format::Json => summary,
        Format::Csv => curve,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckLine {
    pub label: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub flagged: usize,
    pub passed: bool,
}

pub fn cmd_gradcheck(opts: &Options) -> Result<Outcome> {
    let cfg = match &opts.config {
        Some(_) => Some(load(opts)?),
        None => None,
    };
    let s = sub_seed(seed(opts, cfg.as_ref()), GRADCHECK_STREAM);
    let mut outcomes: Vec<(String, _)> = gradcheck_matrix(s)?.into_iter().map(|o| (o.label, o.report)).collect();
    if let Some(c) = &cfg {
        let obj = case_objective(&c.model, 5, s)?;
        outcomes.push((
            "config".into(),
            check_model(&obj, MATRIX_FD_EPS, FdScheme::Richardson, DEFAULT_REL_FLOOR, true)?,
        ));
    }
    let lines: Vec<GradCheckLine> = outcomes
        .into_iter()
        .map(|(label, r)| GradCheckLine {
            label,
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            checked: r.checked,
            flagged: r.flagged,
            passed: r.max_rel_error <= GRADCHECK_TOLERANCE,
        })
        .collect();

    let mut sink = Sink::new(out_dir(opts, cfg.as_ref()));
    let json = to_json(&lines);
    let mut csv = String::from("label,max_rel_error,max_abs_error,checked,flagged,passed\n");
    for l in &lines {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.label, l.max_rel_error, l.max_abs_error, l.checked, l.flagged, l.passed
        ));
    }
    sink.write("gradcheck.json", &json)?;
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| l.label.clone()).collect();
    if !failed.is_empty() {
        return Err(CliError::GradCheck {
            tolerance: GRADCHECK_TOLERANCE,
            failed,
        });
    }
    Ok(sink.finish(match opts.format {
        Format::Json => json,
        Format::Csv => csv,
    }))
}

#[derive(Serialize)]
struct SimulationOutput<'a> {
    profile: &'a HardwareProfile,
    costs: &'a BlockCosts,
    comparison: &'a ComparisonReport,
}

pub fn cmd_simulate(opts: &Options) -> Result<Outcome> {
    let cfg = load(opts)?;
    let sec = cfg.simulate.clone().unwrap_or_default();
    let costs = BlockCosts::from_flops(&cfg.model, &sec.workload, &cfg.hardware)?;
    let prof = match sec.calibrate_comm_fraction {
        Some(t) => calibrate_profile(t, &cfg.model, &cfg.hardware, &costs)?,
        None => cfg.hardware.clone(),
    };
    let mut strategies = if cfg.strategies.is_empty() {
        StrategySpec::figure_set(cfg.model.shortcut_pos.unwrap_or(ShortcutPos::Pos2), sec.chunks)
    } else {
        cfg.strategies.clone()
    };
    if let Some(name) = &opts.strategy {
        strategies.retain(|s| &s.label() == name);
        if strategies.is_empty() {
            return Err(CliError::Usage(format!("no strategy labelled `{name}`")));
        }
    }
    let report = compare_strategies(&cfg.model, &prof, &costs, &strategies)?;

    let mut sink = Sink::new(out_dir(opts, Some(&cfg)));
    for s in &strategies {
        let (t, _) = simulate(&cfg.model, s, &prof, &costs)?;
        sink.write(&format!("timeline-{}.csv", s.label()), &t.to_csv())?;
    }
    let json = to_json(&SimulationOutput {
        profile: &prof,
        costs: &costs,
        comparison: &report,
    });
    let csv = report.to_csv();
    sink.write("comparison.json", &json)?;
    sink.write("comparison.csv", &csv)?;
    Ok(sink.finish(match opts.format {
        Format::Json => json,
        Format::Csv => csv,
    }))
}

pub fn schedule(c: &CostVector) -> Result<ScheduleChoice> {
    let choice = choose_slot(c)?;
    verify_bounds(c, &choice)?;
    Ok(choice)
}

pub fn cmd_schedule(opts: &Options) -> Result<Outcome> {
    let (what, text) = input_text(opts, "cost vector")?;
    let c: CostVector = parse_json(&what, &text)?;
    let choice = schedule(&c)?;
    Ok(Outcome {
        stdout: match opts.format {
            Format::Json => to_json(&choice),
            Format::Csv => format!(
                "slot,objective,makespan\n{},{},{}\n",
                choice.slot, choice.objective, choice.makespan
            ),
        },
        files: Vec::new(),
    })
}

#[derive(Serialize)]
struct OffloadOutput<'a> {
    resident_bytes: u64,
    offloaded_bytes: u64,
    expert_bytes: u64,
    migration_bytes: u64,
    memory_reduction: f64,
    costs: &'a DecodeCosts,
    reports: &'a [OffloadReport],
}

fn mode_tag(m: OffloadMode) -> &'static str {
    match m {
        OffloadMode::GpuOnly => "gpu-only",
        OffloadMode::OffloadBlocking => "offload-blocking",
        OffloadMode::OffloadAsync => "offload-async",
    }
}

pub fn cmd_offload(opts: &Options) -> Result<Outcome> {
    let cfg = load(opts)?;
    let sec = cfg
        .offload
        .clone()
        .ok_or_else(|| CliError::Usage("config has no `offload` section".into()))?;
    let plan = plan_offload(&cfg.model, &sec.sizes, &cfg.hardware)?;
    let costs = DecodeCosts::from_flops(&cfg.model, &sec.sizes, &cfg.hardware)?;
    let modes: Vec<OffloadMode> = OffloadMode::ALL
        .into_iter()
        .filter(|&m| m != OffloadMode::OffloadAsync || cfg.model.variant == Variant::ScMoE)
        .collect();
    let reports = modes
        .iter()
        .map(|&m| simulate_decode(&plan, &costs, m))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut sink = Sink::new(out_dir(opts, Some(&cfg)));
    let mut csv = String::from("mode,peak_memory,latency,stall,migration,window,overlap_fraction\n");
    for r in &reports {
        sink.write(&format!("decode-{}.csv", mode_tag(r.mode)), &r.to_csv())?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            mode_tag(r.mode),
            r.peak_memory,
            r.latency,
            r.stall,
            r.migration,
            r.window,
            r.overlap_fraction
        ));
    }
    let json = to_json(&OffloadOutput {
        resident_bytes: plan.resident_bytes(),
        offloaded_bytes: plan.offloaded_bytes(),
        expert_bytes: plan.expert_bytes,
        migration_bytes: plan.migration_bytes(),
        memory_reduction: plan.memory_reduction(),
        costs: &costs,
        reports: &reports,
    });
    sink.write("offload.json", &json)?;
    sink.write("offload.csv", &csv)?;
    Ok(sink.finish(match opts.format {
        Format::Json => json,
        Format::Csv => csv,
    }))
}

#[derive(Serialize)]
struct AnalysisOutput<'a> {
    gating: &'a GatingBehaviorReport,
    similarity: &'a SimilarityReport,
}

pub fn cmd_analyze(opts: &Options) -> Result<Outcome> {
    let (what, text) = input_text(opts, "trace")?;
    let trace: ActivationTrace = parse_json(&what, &text)?;
    let gating = GatingBehaviorReport::from_trace(&trace)?;
    let similarity = cosine_similarity_matrix(&trace)?;

    let mut sink = Sink::new(out_dir(opts, None));
    let json = to_json(&AnalysisOutput {
        gating: &gating,
        similarity: &similarity,
    });
    sink.write("gating.csv", &gating.to_csv())?;
    sink.write("similarity.csv", &similarity.to_csv())?;
    sink.write("analysis.json", &json)?;
    Ok(sink.finish(match opts.format {
        Format::Json => json,
        Format::Csv => format!("{}\n{}", gating.to_csv(), similarity.to_csv()),
    }))
}
