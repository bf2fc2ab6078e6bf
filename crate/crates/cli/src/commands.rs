use std::path::Path;
use std::time::Instant;

use patchwipe::data::{train_mlp, Dataset, Split, TrainConfig};
use patchwipe::evaluation::{accuracy, mean_loss, mia_recall, unlearn_metrics, BeforeAfter, MetricsDelta};
use patchwipe::model_file::{load_model, save_model};
use patchwipe::net::FeatureMap;
use patchwipe::par::Execution;
use patchwipe::patching::{ConfusionMode, PatchedModel};
use patchwipe::unlearning::{unlearn as run_unlearn, UnlearnParams, UnlearnReport, UnlearnRequest, UnlearnStatus};
use serde::{Deserialize, Serialize};

use crate::data_source::{DataSource, Loaded};
use crate::manifest::{sidecar, write_json, Manifest};
use crate::selection::Selection;
use crate::{CliError, ConfusionArg, EvalArgs, ModeArg, ReportArgs, RetrainArgs, TrainArgs, UnlearnArgs};

/// What `train` records for `retrain` to replay.
#[derive(Debug, Serialize, Deserialize)]
struct TrainRecipe {
    data: String,
    train: TrainConfig,
}

/// The document written by `unlearn --report`.
#[derive(Debug, Serialize, Deserialize)]
struct RunReport {
    request: UnlearnRequest,
    report: UnlearnReport,
    /// Before/after accuracies; `null` where a split is empty.
    metrics: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct RetrainTimings {
    retrain_seconds: f64,
    dropped: usize,
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let data = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(data)?;
    w.write_record(header).map_err(data)?;
    for r in rows {
        w.write_record(r).map_err(data)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn empty_like(train: &Dataset, split: Split) -> Dataset {
    Dataset {
        features: vec![],
        labels: vec![],
        num_classes: train.num_classes,
        split,
    }
}

fn load_with_model(source: &DataSource, model: &PatchedModel, stats: Option<&patchwipe::data::Standardization>) -> Result<Loaded, CliError> {
    let data = source.load(stats)?;
    if data.train.dim() != model.feature_map().input_dim() {
        return Err(CliError::Usage(format!(
            "data has {} features but the model expects {}",
            data.train.dim(),
            model.feature_map().input_dim()
        )));
    }
    if data.train.num_classes != model.base().output_dim() {
        return Err(CliError::Usage(format!(
            "data has {} classes but the model predicts {}",
            data.train.num_classes,
            model.base().output_dim()
        )));
    }
    Ok(data)
}

fn fit(source: &DataSource, data: &Loaded, cfg: &TrainConfig) -> Result<PatchedModel, CliError> {
    let net = train_mlp(&data.train, cfg)?;
    let domain = source.domain(&data.train)?;
    Ok(PatchedModel::new(net, FeatureMap::Identity { dim: data.train.dim() }, domain)?)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let source: DataSource = a.data.parse()?;
    let data = source.load(None)?;
    let cfg = TrainConfig {
        hidden: a.arch.clone(),
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        momentum: a.momentum,
        seed: a.seed,
    };
    let model = fit(&source, &data, &cfg)?;
    save_model(&a.out, &model, data.standardization.as_ref())?;
    let exec = Execution::Parallel;
    print!("train accuracy {:.2}%", accuracy(&model, &data.train, exec)?);
    if let Some(test) = data.test.as_ref().filter(|t| !t.is_empty()) {
        print!(", test accuracy {:.2}%", accuracy(&model, test, exec)?);
    }
    println!();

    let mut m = Manifest::new("train", a);
    m.seed("train", a.seed);
    if let DataSource::Blobs(b) = &source {
        m.seed("data", b.seed);
    }
    for f in source.files() {
        m.input(&f)?;
    }
    m.output(&a.out)?;
    m.config = serde_json::to_value(TrainRecipe {
        data: a.data.clone(),
        train: cfg,
    })
    .map_err(|e| CliError::Data(e.to_string()))?;
    m.write(&sidecar(&a.out, "manifest.json"))
}

pub fn retrain(a: &RetrainArgs) -> Result<(), CliError> {
    let recipe_manifest = Manifest::read(&a.model_config)?;
    let recipe: TrainRecipe = serde_json::from_value(recipe_manifest.config.clone())
        .map_err(|e| CliError::Data(format!("{}: not a train manifest: {e}", a.model_config.display())))?;
    let source: DataSource = recipe.data.parse()?;
    let selection: Selection = a.drop.parse()?;
    let data = source.load(None)?;
    let drop = selection.resolve(&data.train, a.seed)?;
    let kept = Loaded {
        train: data.train.without(&drop),
        test: data.test,
        standardization: data.standardization,
    };
    let t = Instant::now();
    let model = fit(&source, &kept, &recipe.train)?;
    let seconds = t.elapsed().as_secs_f64();
    save_model(&a.out, &model, kept.standardization.as_ref())?;
    let timings_path = sidecar(&a.out, "timings.json");
    write_json(
        &timings_path,
        &RetrainTimings {
            retrain_seconds: seconds,
            dropped: drop.len(),
        },
    )?;
    println!("retrained without {} points in {seconds:.2}s", drop.len());

    let mut m = Manifest::new("retrain", a);
    m.seed("train", recipe.train.seed).seed("drop", a.seed);
    m.input(&a.model_config)?;
    if let Some(f) = selection.file() {
        m.input(f)?;
    }
    for f in source.files() {
        m.input(&f)?;
    }
    m.output(&a.out)?.output(&timings_path)?;
    m.config = recipe_manifest.config;
    m.write(&sidecar(&a.out, "manifest.json"))
}

fn metrics_json(m: &MetricsDelta) -> serde_json::Value {
    // NaN (empty split) serializes as null.
    serde_json::to_value(m).unwrap_or(serde_json::Value::Null)
}

pub fn unlearn(a: &UnlearnArgs, exec: Execution) -> Result<(), CliError> {
    let source: DataSource = a.data.parse()?;
    let selection: Selection = a.select.parse()?;
    match (a.mode, &selection) {
        (ModeArg::Class, Selection::Class(_)) => {}
        (ModeArg::Class, _) => return Err(CliError::Usage("--mode class needs --select class:C".into())),
        (_, Selection::Class(_)) => {
            return Err(CliError::Usage("--select class:C is only valid with --mode class".into()))
        }
        _ => {}
    }
    let (model, stats) = load_model(&a.model)?;
    let data = load_with_model(&source, &model, stats.as_ref())?;
    let train = &data.train;
    let ids = selection.resolve(train, a.seed)?;

    let mut params = UnlearnParams {
        delta: a.delta,
        k: a.k,
        lambda: a.lambda,
        epsilon: a.eps,
        seed: a.seed,
        max_iterations: a.max_iterations,
        confusion: match a.confusion {
            ConfusionArg::ConstantShift => ConfusionMode::ConstantShift,
            ConfusionArg::FullAffine => ConfusionMode::FullAffine,
        },
        ..UnlearnParams::default()
    };
    let request = match a.mode {
        ModeArg::Single => {
            if ids.len() != 1 {
                return Err(CliError::Usage(format!("--mode single needs exactly one point, got {}", ids.len())));
            }
            params.k = 1;
            params.delta = 1.0;
            UnlearnRequest::single(ids[0], params)
        }
        ModeArg::Multi => UnlearnRequest::multipoint(ids.clone(), params),
        ModeArg::Class => {
            let c = selection.class().expect("checked above");
            if ids.is_empty() {
                return Err(CliError::Usage(format!("no training point has label {c}")));
            }
            UnlearnRequest::class(train, c, params)
        }
    };
    let out = run_unlearn(&model, train, &request, exec)?;

    let d_u = train.subset(&request.points);
    let d_r = train.without(&request.points);
    let test = data.test.clone().unwrap_or_else(|| empty_like(train, Split::Test));
    let metrics = unlearn_metrics(&model, &out.model, &d_u, &d_r, &test, request.y_unlearn, exec)?;

    save_model(&a.out, &out.model, data.standardization.as_ref())?;
    let doc = RunReport {
        request: request.clone(),
        report: out.report.clone(),
        metrics: metrics_json(&metrics),
    };
    write_json(&a.report, &doc)?;
    let csv_path = sidecar(&a.report, "csv");
    let mut header: Vec<&str> = vec!["mode", "status", "final_flip_rate", "iterations", "patches"];
    header.extend(MetricsDelta::CSV_HEADER);
    let mut row = vec![
        format!("{:?}", out.report.mode).to_lowercase(),
        format!("{:?}", out.report.status).to_lowercase(),
        format!("{:.4}", out.report.final_flip_rate),
        out.report.iterations_used().to_string(),
        out.report.patches.len().to_string(),
    ];
    row.extend(metrics.csv_row(None));
    write_csv(&csv_path, &header, &[row])?;
    let timings_path = sidecar(&a.report, "timings.json");
    write_json(&timings_path, &out.timings)?;

    let r = &out.report;
    println!(
        "{:?}: {} of {} requested points forgotten (flip rate {:.3}) after {} iteration(s), {} patch(es)",
        r.status,
        r.requested - r.residual.len(),
        r.requested,
        r.final_flip_rate,
        r.iterations_used(),
        r.patches.len()
    );
    println!(
        "accuracy before -> after: test {:.2} -> {:.2}, retained {:.2} -> {:.2}, unlearned {:.2} -> {:.2}",
        metrics.a_tes.before, metrics.a_tes.after, metrics.a_res.before, metrics.a_res.after, metrics.a_u.before, metrics.a_u.after
    );
    let excluded = r.excluded_points();
    if !excluded.is_empty() {
        println!("{} training point(s) excluded from the preservation guarantee", excluded.len());
    }

    let mut m = Manifest::new("unlearn", a);
    m.seed("unlearn", a.seed);
    m.input(&a.model)?;
    if let Some(f) = selection.file() {
        m.input(f)?;
    }
    for f in source.files() {
        m.input(&f)?;
    }
    m.output(&a.out)?.output(&a.report)?.output(&csv_path)?;
    m.write(&sidecar(&a.out, "manifest.json"))?;

    if r.status == UnlearnStatus::NotConverged {
        return Err(CliError::NotConverged);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, exec: Execution) -> Result<(), CliError> {
    let source: DataSource = a.data.parse()?;
    let selection: Option<Selection> = a.unlearned.as_deref().map(str::parse).transpose()?;
    if a.mia && selection.is_none() {
        return Err(CliError::Usage("--mia needs --unlearned".into()));
    }
    let (before, stats) = load_model(&a.before)?;
    let (after, _) = load_model(&a.after)?;
    if before.feature_map().input_dim() != after.feature_map().input_dim() {
        return Err(CliError::Usage("the two models take different inputs".into()));
    }
    let data = load_with_model(&source, &before, stats.as_ref())?;
    let train = &data.train;
    let ids = match &selection {
        Some(s) => s.resolve(train, a.seed)?,
        None => vec![],
    };
    let d_u = train.subset(&ids);
    let d_r = train.without(&ids);
    let test = data.test.clone().unwrap_or_else(|| empty_like(train, Split::Test));
    let class = selection.as_ref().and_then(Selection::class);
    let metrics = unlearn_metrics(&before, &after, &d_u, &d_r, &test, class, exec)?;
    let mia = if a.mia {
        let tau = mean_loss(&before, train, exec)?;
        Some(BeforeAfter {
            before: mia_recall(&before, &d_u, tau, exec)?,
            after: mia_recall(&after, &d_u, tau, exec)?,
        })
    } else {
        None
    };
    write_csv(&a.report, &MetricsDelta::CSV_HEADER, &[metrics.csv_row(mia)])?;

    let show = |name: &str, b: &BeforeAfter| {
        if !b.before.is_nan() {
            println!("{name:>10}: {:.2} -> {:.2} (delta {:.2})", b.before, b.after, b.delta());
        }
    };
    show("test", &metrics.a_tes);
    show("retained", &metrics.a_res);
    show("unlearned", &metrics.a_u);
    if let Some(c) = &metrics.class {
        show("test_u", &c.a_tes_u);
        show("test_r", &c.a_tes_r);
        show("train_r", &c.a_r);
    }
    if let Some(m) = &mia {
        println!("{:>10}: {:.2} -> {:.2}", "mia recall", m.before, m.after);
    }

    let mut m = Manifest::new("eval", a);
    m.seed("select", a.seed);
    m.input(&a.before)?.input(&a.after)?;
    if let Some(f) = selection.as_ref().and_then(Selection::file) {
        m.input(f)?;
    }
    for f in source.files() {
        m.input(&f)?;
    }
    m.output(&a.report)?;
    m.write(&sidecar(&a.report, "manifest.json"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let retrain = match &a.retrain_timings {
        Some(p) => Some(read_json::<RetrainTimings>(p)?.retrain_seconds),
        None => None,
    };
    let header = [
        "run",
        "mode",
        "status",
        "k",
        "delta",
        "seed",
        "requested",
        "iterations",
        "final_flip_rate",
        "patches",
        "excluded",
        "A_tes_before",
        "A_tes_after",
        "dA_tes",
        "A_res_before",
        "A_res_after",
        "dA_res",
        "A_u_before",
        "A_u_after",
        "dA_u",
        "unlearn_seconds",
        "retrain_seconds",
        "normalized_time",
    ];
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for path in &a.inputs {
        let doc: RunReport = read_json(path)?;
        let run = path.display().to_string();
        let r = &doc.report;
        let p = &doc.request.params;
        let metric = |name: &str, side: &str| doc.metrics[name][side].as_f64();
        let mut row = vec![
            run.clone(),
            format!("{:?}", r.mode).to_lowercase(),
            format!("{:?}", r.status).to_lowercase(),
            p.k.to_string(),
            p.delta.to_string(),
            p.seed.to_string(),
            r.requested.to_string(),
            r.iterations_used().to_string(),
            format!("{:.4}", r.final_flip_rate),
            r.patches.len().to_string(),
            r.excluded_points().len().to_string(),
        ];
        for name in ["a_tes", "a_res", "a_u"] {
            let (b, af) = (metric(name, "before"), metric(name, "after"));
            row.extend([cell(b), cell(af), cell(b.zip(af).map(|(x, y)| x - y))]);
        }
        let timings = sidecar(path, "timings.json");
        let seconds = if timings.exists() {
            let t: serde_json::Value = read_json(&timings)?;
            t["total"].as_f64()
        } else {
            None
        };
        row.extend([cell(seconds), cell(retrain), cell(seconds.zip(retrain).map(|(u, t)| u / t))]);
        println!(
            "{run}: {:?} k={} delta={} flip rate {:.3} in {} iteration(s)",
            r.status,
            p.k,
            p.delta,
            r.final_flip_rate,
            r.iterations_used()
        );
        rows.push(row);
        for it in &r.iterations {
            curves.push(vec![
                run.clone(),
                format!("{:?}", r.mode).to_lowercase(),
                p.k.to_string(),
                it.iteration.to_string(),
                format!("{:.4}", it.accuracy_u),
                it.flipped.to_string(),
                it.residual.to_string(),
                format!("{:.6}", it.success_fraction),
            ]);
        }
    }
    write_csv(&a.out, &header, &rows)?;
    write_csv(
        &a.plot_data,
        &["run", "mode", "k", "iteration", "accuracy_u", "flipped", "residual", "success_fraction"],
        &curves,
    )?;

    let mut m = Manifest::new("report", a);
    for p in &a.inputs {
        m.input(p)?;
    }
    if let Some(p) = &a.retrain_timings {
        m.input(p)?;
    }
    m.output(&a.out)?.output(&a.plot_data)?;
    m.write(&sidecar(&a.out, "manifest.json"))
}
