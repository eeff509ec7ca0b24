use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use rvae::baselines::{fit_marginals, marginal_repair, marginal_score, MarginalModel};
use rvae::corruption::{make_scenario, CorruptionRecord, NoiseSpec};
use rvae::data::{load_csv, MixedTable, TableSchema};
use rvae::evaluation::{evaluate as eval_scenario, EvalReport, RepairInput};
use rvae::repair::{read_simplexes, repair as run_repair, RepairMethod, RepairOptions, RepairResult};
use rvae::scoring::{score as run_score, ScoreOptions, ScoreReport, ScoreRule};
use rvae::synthetic::{mixture_schema, mixture_table};
use rvae::training::{checkpoint_kind, load_model, save_model, train_with, ModelKind, TrainConfig};

use crate::manifest::{sidecar, ManifestBuilder};
use crate::{CliError, CorruptArgs, EvaluateArgs, ExperimentArgs, ModelArgs, RepairArgs, ScoreArgs, SynthArgs, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

const MARGINAL: &str = "marginal";

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_table(input: &Path, schema: &Path) -> CliResult<MixedTable> {
    Ok(load_csv(input, schema)?)
}

fn parse<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e| CliError::Config(format!("{what}: {e}")))
}

fn report_manifest(path: PathBuf) {
    eprintln!("manifest: {}", path.display());
}

pub fn corrupt(a: &CorruptArgs) -> CliResult {
    if !(a.rows > 0.0) {
        return Err(CliError::Config("row fraction must be positive".into()));
    }
    let noise: NoiseSpec = parse(&a.noise, "noise")?;
    let m = ManifestBuilder::start("corrupt", a, vec![a.seed]);
    let table = load_table(&a.input, &a.schema)?;
    let (dirty, record) = make_scenario(&table, a.rows, a.features, &noise, a.seed)?;
    dirty.save_csv(&a.out_dirty)?;
    record.save(table.schema(), &a.out_record)?;
    eprintln!("corrupted {} cells in {} rows", record.n_cells(), record.row_labels().iter().filter(|&&r| r).count());
    report_manifest(m.finish(
        &[&a.input, &a.schema],
        &[&a.out_dirty, &a.out_record],
        a.manifest.as_deref(),
    )?);
    Ok(())
}

fn train_config(m: &ModelArgs, kind: ModelKind, seed: u64) -> TrainConfig {
    TrainConfig {
        kind,
        epochs: m.epochs,
        learning_rate: m.lr,
        batch_size: m.batch,
        alpha: m.alpha,
        outlier_scale: m.outlier_scale,
        latent_dim: m.latent,
        hidden_dim: m.hidden,
        embedding_dim: m.embedding,
        weight_decay: m.l2,
        seed,
    }
}

#[derive(Serialize)]
struct TrainRun<'a> {
    args: &'a TrainArgs,
    config: Option<&'a TrainConfig>,
}

pub fn train(a: &TrainArgs) -> CliResult {
    let table = load_table(&a.input, &a.schema)?;
    if a.model.model == MARGINAL {
        let m = ManifestBuilder::start("train", &TrainRun { args: a, config: None }, vec![a.seed]);
        let model = fit_marginals(&table, a.seed)?;
        model.save(&a.out)?;
        report_manifest(m.finish(&[&a.input, &a.schema], &[&a.out], a.manifest.as_deref())?);
        return Ok(());
    }
    let kind: ModelKind = parse(&a.model.model, "model")?;
    let config = train_config(&a.model, kind, a.seed);
    config.validate()?;
    let m = ManifestBuilder::start("train", &TrainRun { args: a, config: Some(&config) }, vec![a.seed]);

    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, "log.csv"));
    let mut log = csv::Writer::from_writer(create(&log_path)?);
    log.write_record(["epoch", "mean_elbo", "mean_pi"]).map_err(rvae::Error::from)?;
    let mut log_err = None;
    let standardized = table.standardize()?;
    let (model, summary) = train_with(&standardized, &config, |e| {
        let pi = e.mean_pi.map(|p| p.to_string()).unwrap_or_default();
        if let Err(err) = log.write_record([e.epoch.to_string(), e.mean_elbo.to_string(), pi.clone()]) {
            log_err.get_or_insert(err);
        }
        if !a.quiet {
            eprintln!("epoch {:>4}  elbo {:.4}  pi {}", e.epoch, e.mean_elbo, pi);
        }
    })?;
    if let Some(err) = log_err {
        return Err(rvae::Error::from(err).into());
    }
    log.flush()?;
    drop(log);
    save_model(&model, &a.out)?;
    eprintln!("trained {} in {:.1}s", kind, summary.wall_time_secs);
    report_manifest(m.finish(&[&a.input, &a.schema], &[&a.out, &log_path], a.manifest.as_deref())?);
    Ok(())
}

pub fn score(a: &ScoreArgs) -> CliResult {
    let rule: Option<ScoreRule> = a.rule.as_deref().map(|r| parse(r, "rule")).transpose()?;
    let m = ManifestBuilder::start("score", a, vec![a.seed]);
    let table = load_table(&a.input, &a.schema)?;
    let report = if checkpoint_kind(&a.model)? == MARGINAL {
        if rule.is_some_and(|r| r != ScoreRule::Nll) {
            return Err(CliError::PiRule(
                "the pi rule needs a robust model; the marginal baseline only supports nll".into(),
            ));
        }
        marginal_score(&MarginalModel::load(&a.model)?, &table)?
    } else {
        let model = load_model(&a.model)?;
        let opts = ScoreOptions {
            seed: a.seed,
            mc_samples: a.mc_samples,
            threads: a.threads,
        };
        let rule = rule.unwrap_or(if model.kind().is_robust() { ScoreRule::Pi } else { ScoreRule::Nll });
        run_score(&model, &table, rule, &opts)?
    };
    let mut w = create(&a.out)?;
    report.write_csv(table.schema(), &mut w)?;
    w.flush()?;
    drop(w);
    report_manifest(m.finish(&[&a.model, &a.input, &a.schema], &[&a.out], a.manifest.as_deref())?);
    Ok(())
}

fn write_repair(result: &RepairResult, out: &Path, simplex: &Path) -> CliResult {
    result.table.save_csv(out)?;
    let mut w = create(simplex)?;
    result.write_simplexes(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn repair(a: &RepairArgs) -> CliResult {
    let method: RepairMethod = parse(&a.method, "method")?;
    let m = ManifestBuilder::start("repair", a, vec![a.seed]);
    let table = load_table(&a.input, &a.schema)?;
    let mut inputs: Vec<&Path> = vec![&a.model, &a.input, &a.schema];
    let result = if checkpoint_kind(&a.model)? == MARGINAL {
        let model = MarginalModel::load(&a.model)?;
        let record = match &a.record {
            Some(p) => {
                inputs.push(p);
                Some(CorruptionRecord::load(table.schema(), p)?)
            }
            None => None,
        };
        marginal_repair(&model, &table, record.as_ref().map(|r| &r.mask))?
    } else {
        let model = load_model(&a.model)?;
        let opts = RepairOptions {
            seed: a.seed,
            iterations: a.gibbs_iters,
            sample_latent: a.sample_latent,
            threads: a.threads,
        };
        run_repair(&model, &table, method, &opts)?
    };
    let simplex = a.out_simplex.clone().unwrap_or_else(|| sidecar(&a.out, "simplex.csv"));
    write_repair(&result, &a.out, &simplex)?;
    report_manifest(m.finish(&inputs, &[&a.out, &simplex], a.manifest.as_deref())?);
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult {
    if a.scores.is_none() && a.repaired.is_none() {
        return Err(CliError::Config("nothing to evaluate: pass --scores and/or --repaired".into()));
    }
    let m = ManifestBuilder::start("evaluate", a, vec![]);
    let schema = TableSchema::from_json_file(&a.schema)?;
    let dirty = load_table(&a.dirty, &a.schema)?;
    let record = CorruptionRecord::load(&schema, &a.record)?;
    let stats = dirty.compute_stats()?;
    let mut inputs: Vec<&Path> = vec![&a.schema, &a.dirty, &a.record];

    let scores = match &a.scores {
        Some(p) => {
            inputs.push(p);
            Some(ScoreReport::read_csv(open(p)?, &schema)?)
        }
        None => None,
    };
    let simplex_path = a
        .simplex
        .clone()
        .or_else(|| a.repaired.as_deref().map(|r| sidecar(r, "simplex.csv")));
    let repaired = match &a.repaired {
        Some(p) => {
            inputs.push(p);
            let sp = simplex_path.as_deref().expect("set with --repaired");
            inputs.push(sp);
            let table = load_table(p, &a.schema)?;
            let simplexes = read_simplexes(open(sp)?, &schema, table.n_rows())?;
            Some((table, simplexes))
        }
        None => None,
    };
    let repair_input = repaired.as_ref().map(|(table, simplexes)| RepairInput {
        table,
        simplexes,
        method: "file",
    });
    let report = eval_scenario(&schema, &record, &stats, scores.as_ref(), repair_input)?;
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report).map_err(rvae::Error::from)?)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.out_csv {
        let mut w = create(p)?;
        report.write_csv(&mut w)?;
        w.flush()?;
        outputs.push(p);
    }
    print_summary(&report);
    report_manifest(m.finish(&inputs, &outputs, a.manifest.as_deref())?);
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_summary(r: &EvalReport) {
    eprintln!(
        "row AVPR {}  cell AVPR {}  SMSE {}  Brier {}",
        fmt_opt(r.row_avpr),
        fmt_opt(r.macro_cell_avpr),
        fmt_opt(r.mean_smse_real),
        fmt_opt(r.mean_brier_categorical)
    );
}

#[derive(Debug, Clone, Serialize)]
struct ExperimentRow {
    row_fraction: f64,
    seed: String,
    model: String,
    score_rule: String,
    repair_method: String,
    row_avpr: Option<f64>,
    macro_cell_avpr: Option<f64>,
    macro_cell_avpr_real: Option<f64>,
    macro_cell_avpr_categorical: Option<f64>,
    mean_smse_real: Option<f64>,
    mean_brier_categorical: Option<f64>,
}

fn run_one(clean: &MixedTable, a: &ExperimentArgs, row_frac: f64, seed: u64, model: &str) -> CliResult<ExperimentRow> {
    let noise: NoiseSpec = parse(&a.noise, "noise")?;
    let (dirty, record) = make_scenario(clean, row_frac, a.features, &noise, seed)?;
    let stats = dirty.compute_stats()?;
    let (scores, result) = if model == MARGINAL {
        let marg = fit_marginals(&dirty, seed)?;
        (marginal_score(&marg, &dirty)?, marginal_repair(&marg, &dirty, None)?)
    } else {
        let kind: ModelKind = parse(model, "model")?;
        let config = train_config(&a.train, kind, seed);
        let (trained, _) = train_with(&dirty.standardize()?, &config, |_| {})?;
        let rule = if kind.is_robust() { ScoreRule::Pi } else { ScoreRule::Nll };
        let sopts = ScoreOptions {
            seed,
            mc_samples: 1,
            threads: a.threads,
        };
        let ropts = RepairOptions {
            seed,
            threads: a.threads,
            ..RepairOptions::default()
        };
        (
            run_score(&trained, &dirty, rule, &sopts)?,
            run_repair(&trained, &dirty, RepairMethod::Map, &ropts)?,
        )
    };
    let method = result.method.to_string();
    let input = RepairInput {
        table: &result.table,
        simplexes: &result.simplexes,
        method: &method,
    };
    let r = eval_scenario(clean.schema(), &record, &stats, Some(&scores), Some(input))?;
    Ok(ExperimentRow {
        row_fraction: row_frac,
        seed: seed.to_string(),
        model: model.to_string(),
        score_rule: scores.rule.to_string(),
        repair_method: method,
        row_avpr: r.row_avpr,
        macro_cell_avpr: r.macro_cell_avpr,
        macro_cell_avpr_real: r.macro_cell_avpr_real,
        macro_cell_avpr_categorical: r.macro_cell_avpr_categorical,
        mean_smse_real: r.mean_smse_real,
        mean_brier_categorical: r.mean_brier_categorical,
    })
}

fn mean_of(rows: &[ExperimentRow], f: impl Fn(&ExperimentRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn mean_row(rows: &[ExperimentRow]) -> ExperimentRow {
    ExperimentRow {
        seed: "mean".into(),
        row_avpr: mean_of(rows, |r| r.row_avpr),
        macro_cell_avpr: mean_of(rows, |r| r.macro_cell_avpr),
        macro_cell_avpr_real: mean_of(rows, |r| r.macro_cell_avpr_real),
        macro_cell_avpr_categorical: mean_of(rows, |r| r.macro_cell_avpr_categorical),
        mean_smse_real: mean_of(rows, |r| r.mean_smse_real),
        mean_brier_categorical: mean_of(rows, |r| r.mean_brier_categorical),
        ..rows[0].clone()
    }
}

pub fn experiment(a: &ExperimentArgs) -> CliResult {
    if a.seeds == 0 || a.rows.is_empty() || a.models.is_empty() {
        return Err(CliError::Config("experiment needs at least one seed, row fraction and model".into()));
    }
    parse::<NoiseSpec>(&a.noise, "noise")?;
    for model in &a.models {
        if model != MARGINAL {
            let kind: ModelKind = parse(model, "model")?;
            train_config(&a.train, kind, 0).validate()?;
        }
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let m = ManifestBuilder::start("experiment", a, seeds.clone());
    let clean = load_table(&a.input, &a.schema)?;
    let mut out = csv::Writer::from_writer(create(&a.out)?);
    for &frac in &a.rows {
        for model in &a.models {
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in &seeds {
                let row = run_one(&clean, a, frac, seed, model)?;
                eprintln!(
                    "rows {frac} seed {seed} {model}: cell AVPR {} SMSE {}",
                    fmt_opt(row.macro_cell_avpr),
                    fmt_opt(row.mean_smse_real)
                );
                out.serialize(&row).map_err(rvae::Error::from)?;
                runs.push(row);
            }
            out.serialize(mean_row(&runs)).map_err(rvae::Error::from)?;
        }
    }
    out.flush()?;
    drop(out);
    report_manifest(m.finish(&[&a.input, &a.schema], &[&a.out], a.manifest.as_deref())?);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let m = ManifestBuilder::start("synth", a, vec![a.seed]);
    let table = mixture_table(a.rows, a.seed)?;
    table.save_csv(&a.out)?;
    std::fs::write(&a.out_schema, mixture_schema().to_json_pretty())?;
    report_manifest(m.finish(&[], &[&a.out, &a.out_schema], a.manifest.as_deref())?);
    Ok(())
}
