use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};

use ccagnn_core::graph::{
    load_bundle, make_folds_with, save_bundle_with, synth_confounded, FoldOptions, Graph,
};
use ccagnn_core::model::load_checkpoint;
use ccagnn_core::train::{
    cross_validate, f1_score, per_class_f1, read_metrics, run_ablation, write_run, AblationVariant,
    F1Average, ModelKind, TrainConfig, METRICS_HEADER,
};
use ccagnn_core::verify::{run_suite, Suite};

use crate::args::{
    AblateCmd, Command, EvalCmd, GradcheckCmd, ModelArg, PlotCmd, SplitArg, SynthCmd, TrainArgs,
    TrainCmd,
};
use crate::svg;

/// Bad flag values; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(cmd) => train(cmd),
        Command::Eval(cmd) => eval(cmd),
        Command::Gradcheck(cmd) => gradcheck(cmd),
        Command::Synth(cmd) => synth(cmd),
        Command::Ablate(cmd) => ablate(cmd),
        Command::Plot(cmd) => plot(cmd),
    }
}

fn average_name(a: F1Average) -> &'static str {
    match a {
        F1Average::Macro => "macro",
        F1Average::Micro => "micro",
        F1Average::Weighted => "weighted",
    }
}

fn load(dir: &Path) -> Result<Graph> {
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn load_views(args: &TrainArgs) -> Result<(Graph, Option<Graph>)> {
    let g = load(&args.data)?;
    let test = args.test_data.as_deref().map(load).transpose()?;
    Ok((g, test))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(cmd: TrainCmd) -> Result<()> {
    let kind = match cmd.kind {
        ModelArg::Ccagnn => ModelKind::Ccagnn,
        ModelArg::PlainGat => ModelKind::PlainGat,
    };
    let cfg = cmd
        .train
        .train_config(kind, cmd.variant.into())
        .map_err(UsageError)?;
    let (g, test) = load_views(&cmd.train)?;
    let cv = cross_validate(&g, test.as_ref(), &cfg)?;
    let out = &cmd.train.out;
    write_run(out, &cv)?;
    write_json(&out.join("run.json"), &cfg)?;
    let avg = average_name(cfg.average);
    for f in &cv.folds {
        println!(
            "fold {}: test {avg}-F1 {:.4} (best epoch {} of {}, {:.1}s)",
            f.fold,
            f.test_f1,
            f.best_epoch,
            f.records.len(),
            f.seconds
        );
    }
    println!(
        "{avg}-F1 {:.4} ± {:.4} over {} folds",
        cv.mean,
        cv.std,
        cv.folds.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn softmax_max(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    1.0 / z
}

fn eval(cmd: EvalCmd) -> Result<()> {
    let seed = cmd.fold.effective_seed().map_err(UsageError)?;
    let model = load_checkpoint(&cmd.checkpoint)?;
    let g = load(&cmd.data)?;
    let g = if g.has_self_loops() {
        g
    } else {
        g.add_self_loops()
    };
    let fold_g = match &cmd.fold_data {
        Some(dir) => load(dir)?,
        None => g.clone(),
    };
    if fold_g.num_nodes() != g.num_nodes() {
        bail!(
            "fold bundle has {} nodes, scored bundle {}",
            fold_g.num_nodes(),
            g.num_nodes()
        );
    }
    let plan = make_folds_with(
        &fold_g,
        &FoldOptions {
            k: cmd.fold.folds,
            val_fraction: cmd.fold.val_fraction,
            seed,
            allow_unstratified: cmd.fold.allow_unstratified,
        },
    )?;
    let Some(fold) = plan.folds.get(cmd.fold_index) else {
        return Err(UsageError(format!(
            "--fold-index {} out of range for {} folds",
            cmd.fold_index,
            plan.folds.len()
        ))
        .into());
    };
    let nodes: Vec<usize> = match cmd.split {
        SplitArg::Train => fold.train.clone(),
        SplitArg::Val => fold.val.clone(),
        SplitArg::Test => fold.test.clone(),
        SplitArg::All => (0..g.num_nodes()).collect(),
    };
    let logits = model
        .logits(&g)
        .context("scoring the checkpoint on the bundle")?;
    let pred = logits.argmax_rows();
    let c = g.num_classes();
    let p: Vec<usize> = nodes.iter().map(|&i| pred[i]).collect();
    let y: Vec<usize> = nodes.iter().map(|&i| g.labels()[i]).collect();

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&cmd.out)
        .with_context(|| format!("writing {}", cmd.out.display()))?;
    w.write_record(["node", "true", "pred", "confidence"])?;
    for &i in &nodes {
        w.write_record([
            i.to_string(),
            g.labels()[i].to_string(),
            pred[i].to_string(),
            softmax_max(logits.row(i)).to_string(),
        ])?;
    }
    w.flush()?;

    let average: F1Average = cmd.average.into();
    if nodes.is_empty() {
        bail!("the selected split is empty");
    }
    let score = f1_score(&p, &y, c, average)?;
    println!(
        "{} nodes, {}-F1 {:.4}",
        nodes.len(),
        average_name(average),
        score
    );
    for (k, f) in per_class_f1(&p, &y, c)?.iter().enumerate() {
        println!("  class {k}: F1 {f:.4}");
    }
    println!("wrote {}", cmd.out.display());
    Ok(())
}

/// Failed verification; reported with exit code 1.
#[derive(Debug)]
struct VerificationFailed(String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn gradcheck(cmd: GradcheckCmd) -> Result<()> {
    if !(cmd.tolerance.is_finite() && cmd.tolerance >= 0.0) {
        return Err(UsageError(format!(
            "--tolerance {} must be finite and non-negative",
            cmd.tolerance
        ))
        .into());
    }
    let mut suites: Vec<Suite> = Vec::new();
    for s in &cmd.suite {
        let s = Suite::from(*s);
        if !suites.contains(&s) {
            suites.push(s);
        }
    }
    if suites.is_empty() {
        suites = Suite::ALL.to_vec();
    }
    let mut failures = Vec::new();
    for suite in suites {
        let start = Instant::now();
        let cases = run_suite(suite, cmd.tolerance)?;
        let worst = cases
            .iter()
            .max_by(|a, b| a.max_error.total_cmp(&b.max_error));
        let verdict = if cases.iter().all(|c| c.passed) {
            "ok"
        } else {
            "FAILED"
        };
        match worst {
            Some(w) => println!(
                "{}: {} cases, worst relative error {:.3e} in {} (parameter `{}`), {:.1}s, {verdict}",
                suite.name(),
                cases.len(),
                w.max_error,
                w.case,
                w.worst,
                start.elapsed().as_secs_f64()
            ),
            None => println!("{}: no cases, {verdict}", suite.name()),
        }
        for c in cases.iter().filter(|c| !c.passed) {
            eprintln!(
                "  {}/{}: parameter `{}` relative error {:.3e} not below {:.1e}",
                suite.name(),
                c.case,
                c.worst,
                c.max_error,
                cmd.tolerance
            );
            failures.push(format!(
                "{}/{} (parameter `{}`)",
                suite.name(),
                c.case,
                c.worst
            ));
        }
    }
    if !failures.is_empty() {
        return Err(
            VerificationFailed(format!("gradient check failed: {}", failures.join(", "))).into(),
        );
    }
    Ok(())
}

fn synth(cmd: SynthCmd) -> Result<()> {
    let spec = cmd.spec().map_err(UsageError)?;
    let views = synth_confounded(&spec)?;
    let extra = |view: &str, rho: f64| {
        let mut m = serde_json::Map::new();
        m.insert("view".into(), view.into());
        m.insert("rho".into(), rho.into());
        m.insert("seed".into(), spec.seed.into());
        m
    };
    save_bundle_with(
        &views.train,
        cmd.out.join("train"),
        extra("train", spec.rho_train),
    )?;
    save_bundle_with(
        &views.test,
        cmd.out.join("test"),
        extra("test", spec.rho_test),
    )?;
    let mut truth = serde_json::to_value(&views.truth)?;
    truth["spec"] = serde_json::to_value(&spec)?;
    write_json(&cmd.out.join("groundtruth.json"), &truth)?;
    println!(
        "wrote {} nodes per view, {} + {} features, train {} edges, test {} edges to {}",
        spec.n,
        spec.d_causal,
        spec.d_spurious,
        views.train.num_edges(),
        views.test.num_edges(),
        cmd.out.display()
    );
    Ok(())
}

fn ablate(cmd: AblateCmd) -> Result<()> {
    let mut variants: Vec<AblationVariant> = Vec::new();
    for v in &cmd.variants {
        let v = AblationVariant::from(*v);
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let cfg: TrainConfig = cmd
        .train
        .train_config(ModelKind::Ccagnn, AblationVariant::Full)
        .map_err(UsageError)?;
    for &v in &variants {
        cmd.train
            .train_config(ModelKind::Ccagnn, v)
            .map_err(UsageError)?;
    }
    let (g, test) = load_views(&cmd.train)?;
    let runs = run_ablation(&g, test.as_ref(), &variants, &cfg)?;
    let out = &cmd.train.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (v, cv) in &runs {
        write_run(&out.join(v.name()), cv)?;
    }
    write_json(&out.join("run.json"), &cfg)?;

    let path = out.join("ablation.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["variant", "mean_f1", "std_f1"])?;
    for (v, cv) in &runs {
        w.write_record([
            v.name().to_string(),
            cv.mean.to_string(),
            cv.std.to_string(),
        ])?;
    }
    w.flush()?;

    let bars: Vec<(String, f64, f64)> = runs
        .iter()
        .map(|(v, cv)| (v.name().to_string(), cv.mean, cv.std))
        .collect();
    let title = format!(
        "Ablation: mean test {}-F1 over {} folds",
        average_name(cfg.average),
        cfg.folds
    );
    let chart = svg::bar_chart(&title, g.name(), &bars);
    let svg_path = out.join("ablation.svg");
    fs::write(&svg_path, chart).with_context(|| format!("writing {}", svg_path.display()))?;

    for (name, mean, std) in &bars {
        println!("{name:<16} {mean:.4} ± {std:.4}");
    }
    println!("wrote {} and {}", path.display(), svg_path.display());
    Ok(())
}

fn plot(cmd: PlotCmd) -> Result<()> {
    let available: Vec<&str> = METRICS_HEADER
        .iter()
        .copied()
        .filter(|c| *c != "fold" && *c != "epoch")
        .collect();
    for col in &cmd.column {
        if !available.contains(&col.as_str()) {
            bail!(
                "unknown column `{col}`; available columns: {}",
                available.join(", ")
            );
        }
    }
    let many = cmd.metrics.len() > 1;
    let mut rows = Vec::new();
    let mut segments: Vec<svg::Segment> = Vec::new();
    for (file_index, path) in cmd.metrics.iter().enumerate() {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_metrics(file).with_context(|| format!("reading {}", path.display()))?;
        let mut current = None;
        for r in records {
            if current != Some(r.fold) {
                current = Some(r.fold);
                let label = if many {
                    format!("run {file_index} fold {}", r.fold)
                } else {
                    format!("fold {}", r.fold)
                };
                segments.push(svg::Segment {
                    label,
                    start: rows.len(),
                    len: 0,
                });
            }
            segments.last_mut().expect("segment opened above").len += 1;
            rows.push(r);
        }
    }
    let series: Vec<svg::Series> = cmd
        .column
        .iter()
        .map(|col| svg::Series {
            name: col.clone(),
            values: rows
                .iter()
                .map(|r| r.column(col).expect("column checked above"))
                .collect(),
        })
        .collect();
    let title = format!("{} per epoch", cmd.column.join(", "));
    let chart = svg::line_chart(&title, "epoch (folds concatenated)", &series, &segments);
    if let Some(dir) = cmd.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&cmd.out, chart).with_context(|| format!("writing {}", cmd.out.display()))?;
    println!(
        "{} points in {} segments, wrote {}",
        rows.len(),
        segments.len(),
        cmd.out.display()
    );
    Ok(())
}
