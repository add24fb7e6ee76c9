use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use apce_core::adaptive::{fit_all_channels, StopReason};
use apce_core::doe::{sample, ExperimentalDesign};
use apce_core::pso::{optimize, pattern_cost, write_history_csv, PatternTarget};
use apce_core::qoi::{ingest_table, run_design, OracleSpec, PROXY_NOTE};
use apce_core::surrogate::{estimate_pdf, percentiles, ChannelModels, GridSpec, PceModel};

use crate::config::{EvaluatorKind, Run, MC_STREAM, SAMPLE_STREAM};
use crate::CliError;

const DESIGN_FILE: &str = "design.csv";
const MODEL_DIR: &str = "models";
const MANIFEST: &str = "manifest.txt";
/// Channels generated together in `analyze`; bounds memory at large sample counts.
const SAMPLE_BLOCK: usize = 32;

pub struct Ctx {
    pub run: Run,
    pub quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run.out_dir.join(name)
    }

    /// Comment lines heading every CSV.
    fn header(&self) -> Vec<String> {
        let mut lines = vec![self.run.checksum_line()];
        if matches!(self.run.config.oracle, OracleSpec::FlattopProxy { .. }) {
            lines.push(PROXY_NOTE.to_string());
        }
        lines
    }

    fn create(&self, name: &str, extra: &[String]) -> Result<csv::Writer<BufWriter<File>>, CliError> {
        fs::create_dir_all(&self.run.out_dir)?;
        let mut out = BufWriter::new(File::create(self.path(name))?);
        for line in self.header().iter().chain(extra) {
            writeln!(out, "# {line}")?;
        }
        Ok(csv::Writer::from_writer(out))
    }

    fn load_design(&self) -> Result<ExperimentalDesign, CliError> {
        let design = match &self.run.table {
            Some(table) => ingest_table(table, &self.run.design_box).map_err(|e| CliError::Validation(format!("{}: {e}", table.display())))?,
            None => {
                let path = self.path(DESIGN_FILE);
                if !path.exists() {
                    return Err(CliError::Validation(format!("{} not found; run `apce design` first", path.display())));
                }
                ExperimentalDesign::load_csv(&path, &self.run.design_box).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            }
        };
        if !design.is_complete() {
            return Err(CliError::Validation("the design has missing observations; fill them before fitting".into()));
        }
        Ok(design)
    }

    fn load_models(&self) -> Result<Vec<PceModel>, CliError> {
        let dir = self.path(MODEL_DIR);
        let manifest = dir.join(MANIFEST);
        let file = File::open(&manifest).map_err(|_| CliError::Validation(format!("{} not found; run `apce fit` first", manifest.display())))?;
        let mut models = Vec::new();
        for line in BufReader::new(file).lines() {
            let name = line?;
            if name.is_empty() {
                continue;
            }
            let path = dir.join(&name);
            models.push(PceModel::load(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?);
        }
        if models.is_empty() {
            return Err(CliError::Validation("no fitted models".into()));
        }
        Ok(models)
    }
}

pub fn design(ctx: &Ctx) -> Result<(), CliError> {
    let run = &ctx.run;
    let d = run.design_box.dim();
    let points = sample(run.config.design.method, d, run.config.design.samples, run.config.seed)?;
    let design = match &run.oracle {
        Some(oracle) if run.config.design.observe => run_design(oracle, points)?,
        Some(oracle) => ExperimentalDesign::unobserved(run.design_box.clone(), points, oracle.channel_labels().to_vec())?.with_note(oracle.describe()),
        None => ExperimentalDesign::unobserved(run.design_box.clone(), points, vec!["qoi".to_string()])?,
    }
    .with_seed(run.config.seed);
    fs::create_dir_all(&run.out_dir)?;
    let path = ctx.path(DESIGN_FILE);
    let comments = vec![run.checksum_line()];
    design.save_csv(&path, &comments)?;
    ctx.say(format!("wrote {} ({} points, {} variables)", path.display(), design.len(), d));
    Ok(())
}

fn stop_label(r: StopReason) -> &'static str {
    match r {
        StopReason::TolMet => "tol_met",
        StopReason::Overfit => "overfit",
        StopReason::MaxOrder => "max_order",
    }
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn file_stem(channel: usize, label: &str) -> String {
    format!("{channel:04}_{}", sanitize(label))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn fit(ctx: &Ctx) -> Result<(), CliError> {
    let design = ctx.load_design()?;
    let results = fit_all_channels(&design, &ctx.run.config.fit)?;
    let names = ctx.run.design_box.names();
    let dir = ctx.path(MODEL_DIR);
    fs::create_dir_all(&dir)?;

    let mut report = ctx.create("fit_report.csv", &[])?;
    let mut head = vec!["label", "chosen_order", "stop_reason", "loo_error", "sparsity", "mean", "std"].into_iter().map(String::from).collect::<Vec<_>>();
    head.extend(names.iter().map(|n| format!("S_{n}")));
    report.write_record(&head)?;
    let mut orders = ctx.create("fit_orders.csv", &[])?;
    orders.write_record(["label", "order", "loo_error", "active_size"])?;

    let mut manifest = String::new();
    let mut failed = Vec::new();
    for (channel, result) in results.into_iter().enumerate() {
        let label = &design.channel_labels()[channel];
        let model = match result {
            Ok(m) => m,
            Err(e) => {
                eprintln!("channel {label}: {e}");
                failed.push(label.clone());
                continue;
            }
        };
        let name = format!("{}.json", file_stem(channel, label));
        model.save(dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');

        let diag = model.diagnostics().expect("fitted models carry diagnostics");
        let sobol = model.total_sobol().ok();
        let mut rec = vec![
            label.clone(),
            diag.chosen_order.to_string(),
            stop_label(diag.stop_reason).to_string(),
            opt(diag.chosen().loo_error),
            model.sparsity().to_string(),
            model.mean().to_string(),
            model.std_dev().to_string(),
        ];
        match sobol {
            Some(s) => rec.extend(s.iter().map(f64::to_string)),
            None => rec.extend(names.iter().map(|_| String::new())),
        }
        report.write_record(&rec)?;
        for r in &diag.per_order {
            orders.write_record([label.clone(), r.order.to_string(), opt(r.loo_error), r.active_size.to_string()])?;
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    report.flush()?;
    orders.flush()?;
    if !failed.is_empty() {
        return Err(CliError::Compute(format!("fit failed for channels: {}", failed.join(", "))));
    }
    ctx.say(format!("fitted {} channel(s) from {} samples into {}", design.channels(), design.len(), dir.display()));
    Ok(())
}

fn percentile_header(p: f64) -> String {
    format!("P{p}")
}

pub fn analyze(ctx: &Ctx) -> Result<(), CliError> {
    let models = ctx.load_models()?;
    let stats_cfg = &ctx.run.config.stats;
    let labels: Vec<&str> = models.iter().map(|m| m.channel_label()).collect();
    let pdf_wanted: Vec<usize> = match &stats_cfg.pdf_channels {
        Some(wanted) => wanted
            .iter()
            .map(|w| labels.iter().position(|l| l == w).ok_or_else(|| CliError::Validation(format!("no model for channel '{w}'"))))
            .collect::<Result<_, _>>()?,
        None => vec![0],
    };
    let names = ctx.run.design_box.names();

    let mut stats = ctx.create("stats.csv", &[])?;
    let mut head = vec!["label".to_string(), "mean".into(), "std".into()];
    if stats_cfg.sobol {
        head.extend(names.iter().map(|n| format!("S_{n}")));
    }
    stats.write_record(&head)?;
    for m in &models {
        let mut rec = vec![m.channel_label().to_string(), m.mean().to_string(), m.std_dev().to_string()];
        if stats_cfg.sobol {
            match m.total_sobol() {
                Ok(s) => rec.extend(s.iter().map(f64::to_string)),
                Err(_) => rec.extend(names.iter().map(|_| String::new())),
            }
        }
        stats.write_record(&rec)?;
    }
    stats.flush()?;

    let seed = ctx.run.stream(SAMPLE_STREAM);
    let mut table = ctx.create("percentiles.csv", &[format!("generated_samples={} seed={seed}", stats_cfg.samples)])?;
    let mut head = vec!["label".to_string()];
    head.extend(stats_cfg.percentiles.iter().map(|&p| percentile_header(p)));
    table.write_record(&head)?;
    let grid = GridSpec {
        points: stats_cfg.grid_points,
        padding: stats_cfg.padding,
    };
    for (block_index, block) in models.chunks(SAMPLE_BLOCK).enumerate() {
        let samples = ChannelModels::new(block.to_vec())?.generate_samples(stats_cfg.samples, seed)?;
        for (offset, s) in samples.iter().enumerate() {
            let channel = block_index * SAMPLE_BLOCK + offset;
            let mut rec = vec![labels[channel].to_string()];
            rec.extend(percentiles(s, &stats_cfg.percentiles)?.iter().map(f64::to_string));
            table.write_record(&rec)?;
            if pdf_wanted.contains(&channel) {
                write_pdf(ctx, labels[channel], s, grid)?;
            }
        }
    }
    table.flush()?;
    ctx.say(format!("analyzed {} channel(s) into {}", models.len(), ctx.run.out_dir.display()));
    Ok(())
}

fn write_pdf(ctx: &Ctx, label: &str, samples: &[f64], grid: GridSpec) -> Result<(), CliError> {
    let pdf = match estimate_pdf(samples, grid) {
        Ok(p) => p,
        Err(apce_core::Error::DegenerateDistribution) => {
            eprintln!("channel {label}: constant output, no density written");
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let name = format!("pdf_{}.csv", sanitize(label));
    let mut w = ctx.create(&name, &[format!("bandwidth={} samples={}", pdf.bandwidth, pdf.sample_count)])?;
    w.write_record(["x", "density"])?;
    for (x, f) in pdf.grid.iter().zip(&pdf.density) {
        w.write_record([x.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn mc_compare(ctx: &Ctx) -> Result<(), CliError> {
    let oracle = ctx
        .run
        .oracle
        .as_ref()
        .ok_or_else(|| CliError::Validation("mc-compare needs an oracle; an external table cannot be sampled again".into()))?;
    let models = ctx.load_models()?;
    let n = ctx.run.config.mc.samples;
    let seed = ctx.run.stream(MC_STREAM);
    let points = apce_core::doe::sample_uniform(oracle.dim(), n, seed)?;
    let mc = run_design(oracle, points)?;

    let mut w = ctx.create("mc_compare.csv", &[format!("mc_samples={n} seed={seed}")])?;
    w.write_record(["label", "pce_mean", "mc_mean", "pce_std", "mc_std", "abs_mean_dev", "abs_std_dev"])?;
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for m in &models {
        let channel = mc
            .channel_labels()
            .iter()
            .position(|l| l == m.channel_label())
            .ok_or_else(|| CliError::Validation(format!("model channel '{}' is not an oracle output", m.channel_label())))?;
        let (mu, sd) = mean_std(&mc.channel_values(channel)?);
        let (dm, ds) = ((m.mean() - mu).abs(), (m.std_dev() - sd).abs());
        worst_mean = worst_mean.max(dm);
        worst_std = worst_std.max(ds);
        w.write_record([m.channel_label().to_string(), m.mean().to_string(), mu.to_string(), m.std_dev().to_string(), sd.to_string(), dm.to_string(), ds.to_string()])?;
    }
    w.flush()?;
    ctx.say(format!("max |mean deviation| {worst_mean:.6e}, max |std deviation| {worst_std:.6e} over {n} MC samples"));
    Ok(())
}

fn label_angle(label: &str) -> Option<f64> {
    label.strip_prefix("theta_")?.parse().ok()
}

/// Channel index for each target angle.
fn match_channels(labels: &[String], target: &PatternTarget) -> Result<Vec<usize>, CliError> {
    target
        .angles()
        .iter()
        .map(|&a| {
            labels
                .iter()
                .position(|l| label_angle(l) == Some(a))
                .ok_or_else(|| CliError::Validation(format!("no channel for target angle {a}")))
        })
        .collect()
}

fn default_target(labels: &[String]) -> Result<PatternTarget, CliError> {
    let mut angles: Vec<f64> = labels.iter().filter_map(|l| label_angle(l)).collect();
    angles.sort_by(f64::total_cmp);
    if angles.is_empty() {
        return Err(CliError::Validation("optimize needs angle channels labelled theta_<degrees>".into()));
    }
    PatternTarget::flat_top(angles).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn optimize_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let run = &ctx.run;
    let swarm = run.swarm();
    let (labels, surrogate) = match run.config.optimize.evaluator {
        EvaluatorKind::Surrogate => {
            let models = ctx.load_models()?;
            let labels: Vec<String> = models.iter().map(|m| m.channel_label().to_string()).collect();
            (labels, Some(models))
        }
        EvaluatorKind::Oracle => {
            let oracle = run.oracle.as_ref().ok_or_else(|| CliError::Validation("evaluator = \"oracle\" needs an oracle, not a table".into()))?;
            (oracle.channel_labels().to_vec(), None)
        }
    };
    let target = match &run.target {
        Some(t) => t.clone(),
        None => default_target(&labels)?,
    };
    let picks = match_channels(&labels, &target)?;

    let surrogate = match surrogate {
        Some(models) => Some(ChannelModels::new(picks.iter().map(|&i| models[i].clone()).collect())?),
        None => None,
    };
    let pattern_at = |x: &[f64]| -> apce_core::Result<Vec<f64>> {
        match &surrogate {
            Some(cm) => cm.evaluate_physical(x),
            None => {
                let oracle = run.oracle.as_ref().expect("checked above");
                let all = oracle.evaluate(&run.design_box.to_standard(x)?)?;
                Ok(picks.iter().map(|&i| all[i]).collect())
            }
        }
    };
    let result = optimize(&swarm, |x: &[f64]| pattern_cost(&target, &pattern_at(x)?))?;

    fs::create_dir_all(&run.out_dir)?;
    let mut comments = ctx.header();
    comments.push(format!("evaluator={:?} swarm_seed={}", run.config.optimize.evaluator, swarm.seed).to_lowercase());
    write_history_csv(BufWriter::new(File::create(ctx.path("optimize_history.csv"))?), &result.history, &comments)?;

    let mut best = ctx.create("optimize_best.csv", &[format!("best_cost={}", result.best_cost)])?;
    best.write_record(["variable", "value"])?;
    for (name, v) in run.design_box.names().iter().zip(&result.best_point) {
        best.write_record([name.clone(), v.to_string()])?;
    }
    best.flush()?;

    let optimized = pattern_at(&result.best_point)?;
    let truth = match (&surrogate, &run.oracle) {
        (Some(_), Some(oracle)) => {
            let all = oracle.evaluate(&run.design_box.to_standard(&result.best_point)?)?;
            Some(picks.iter().map(|&i| all[i]).collect::<Vec<f64>>())
        }
        _ => None,
    };
    let mut pattern = ctx.create("optimize_pattern.csv", &[])?;
    let mut head = vec!["angle", "ideal", "optimized"];
    if truth.is_some() {
        head.push("oracle");
    }
    pattern.write_record(&head)?;
    for (i, (a, g)) in target.angles().iter().zip(target.ideal()).enumerate() {
        let mut rec = vec![a.to_string(), g.to_string(), optimized[i].to_string()];
        if let Some(t) = &truth {
            rec.push(t[i].to_string());
        }
        pattern.write_record(&rec)?;
    }
    pattern.flush()?;
    ctx.say(format!("best cost {:.6e} after {} iterations", result.best_cost, result.history.len()));
    Ok(())
}
