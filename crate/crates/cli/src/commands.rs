//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fusehead::data::synth::{synth_generate, Profile, SynthConfig};
use fusehead::data::{self, read_manifest, validate_cache, Dataset, Manifest, ManifestRow, Split};
use fusehead::eval::{self, GroupReport, MetricsReport, Wins};
use fusehead::fusion::{FusionKind, FusionVariant, Prep};
use fusehead::head::HeadConfig;
use fusehead::model::{count_params, ModelConfig, ParamBreakdown, ENCODER_DIM};
use fusehead::training::run::{self, RunInfo};
use fusehead::training::{aggregate, uniform_score_average, MeanStd, Prediction};
use fusehead::Error;
use serde::Serialize;

use crate::config::{Analysis, RunConfig, SNAPSHOT_FILE};

pub const REPORT_PREFIX: &str = "report";
pub const COMPARISON_FILE: &str = "comparison.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub struct SynthArgs {
    pub n: usize,
    pub seed: u64,
    pub profile: Profile,
    pub dim: usize,
    pub out: PathBuf,
    pub force: bool,
}

pub fn synth(a: &SynthArgs) -> Result<String> {
    if nonempty_dir(&a.out) && !a.force {
        return Err(Error::Config(format!("{} already exists and is not empty; pass --force to overwrite", a.out.display())).into());
    }
    let out = synth_generate(&SynthConfig { n_items: a.n, seed: a.seed, profile: a.profile, feature_dim: a.dim, require_folds: None })?;
    let ds = &out.dataset;
    ds.save(&a.out)?;
    let labels: Vec<f64> = ds.items.iter().map(|i| i.row.label).collect();
    let (lo, hi) = labels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let mut s = String::new();
    writeln!(s, "wrote {} items ({} profile, seed {}, dim {}) to {}", ds.items.len(), a.profile, a.seed, a.dim, a.out.display())?;
    for split in [Split::Train, Split::Dev, Split::Eval] {
        writeln!(s, "  {split:<5} {}", ds.split(split).len())?;
    }
    let scenes: std::collections::BTreeSet<&str> = ds.items.iter().map(|i| i.row.scene_token.as_str()).collect();
    let systems: std::collections::BTreeSet<&str> = ds.items.iter().map(|i| i.row.system_id.as_str()).collect();
    writeln!(s, "  scenes {}, systems {}, labels {lo:.1}..{hi:.1} (mean {mean:.1})", scenes.len(), systems.len())?;
    Ok(s)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub jobs: usize,
    pub force: bool,
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let (cfg, text) = RunConfig::load(&a.config)?;
    let data_dir = cfg.resolve_data_dir()?;
    let report = validate_cache(&data_dir.join(data::CACHE_FILE), Some(&data_dir.join(data::MANIFEST_FILE)))?;
    if !report.is_ok() {
        return Err(Error::data(format!("pre-flight validation failed:\n  {}", report.errors.join("\n  "))).into());
    }
    let dataset = Dataset::load(&data_dir)?;
    let feature_dim = dataset.feature_dim().ok_or_else(|| Error::data("dataset is empty"))?;
    let model_cfg = cfg.model_config(feature_dim)?;
    let train_cfg = cfg.train.to_train_config();
    train_cfg.validate()?;
    if cfg.run_dir.join(run::RUN_INFO_FILE).exists() && !a.force {
        return Err(Error::Config(format!("{} already holds a run; pass --force to overwrite", cfg.run_dir.display())).into());
    }
    std::fs::create_dir_all(&cfg.run_dir)?;
    std::fs::write(cfg.run_dir.join(SNAPSHOT_FILE), &text)?;
    let data_dir = std::fs::canonicalize(&data_dir)?;
    let info = run::run_protocol(&dataset, &data_dir, &model_cfg, &train_cfg, &cfg.seeds, &cfg.run_dir, a.jobs)?;

    let mut s = String::new();
    writeln!(
        s,
        "trained {} ({} params) with {} seed(s) x {} folds into {}",
        describe(&model_cfg.fusion),
        count_params(&model_cfg).total,
        info.seeds.len(),
        info.folds,
        cfg.run_dir.display()
    )?;
    let manifest = dataset.manifest();
    for &split in &info.splits {
        let per_seed = seed_metrics(&cfg.run_dir, &info, &manifest, split)?;
        writeln!(s, "{split}: {}", overall_line(&per_seed)?)?;
    }
    Ok(s)
}

fn describe(f: &FusionVariant) -> String {
    match (f.kind, f.prep) {
        (FusionKind::FrameAligned, p) => {
            let prep = if p == Prep::Conv { "conv" } else { "avg" };
            format!("frame_aligned({prep}, shift {})", f.shift_steps)
        }
        (k, _) => k.as_str().to_string(),
    }
}

/// Predictions matched to the split's manifest rows, in manifest order.
fn aligned<'m>(preds: &[Prediction], manifest: &'m Manifest, split: Split) -> Result<(Vec<f64>, Vec<&'m ManifestRow>)> {
    let by_id: BTreeMap<&str, f64> = preds.iter().map(|p| (p.utterance_id.as_str(), p.score)).collect();
    let rows: Vec<&ManifestRow> = manifest.split(split).collect();
    let missing: Vec<&str> = rows.iter().map(|r| r.utterance_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() || by_id.len() != rows.len() {
        return Err(Error::data(format!(
            "{split} predictions do not match the manifest ({} missing, {} predicted, {} expected)",
            missing.len(),
            by_id.len(),
            rows.len()
        ))
        .into());
    }
    Ok((rows.iter().map(|r| by_id[r.utterance_id.as_str()]).collect(), rows))
}

fn seed_metrics(run_dir: &Path, info: &RunInfo, manifest: &Manifest, split: Split) -> Result<Vec<(u64, MetricsReport)>> {
    info.seeds
        .iter()
        .map(|&seed| {
            let preds = run::load_seed_predictions(run_dir, seed, split)?;
            let (p, rows) = aligned(&preds, manifest, split)?;
            let t: Vec<f64> = rows.iter().map(|r| r.label).collect();
            Ok((seed, MetricsReport::compute(&p, &t)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricStats {
    pub n: usize,
    pub rmse: MeanStd,
    pub corr: MeanStd,
    pub mae: MeanStd,
}

fn stats<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Result<MetricStats> {
    let rs: Vec<&MetricsReport> = reports.into_iter().collect();
    let col = |f: fn(&MetricsReport) -> f64| aggregate(&rs.iter().map(|m| f(m)).collect::<Vec<_>>());
    Ok(MetricStats { n: rs.first().map_or(0, |m| m.n), rmse: col(|m| m.rmse)?, corr: col(|m| m.corr)?, mae: col(|m| m.mae)? })
}

fn pm(m: MeanStd, digits: usize) -> String {
    format!("{:.*}±{:.*}", digits, m.mean, digits, m.std)
}

fn overall_line(per_seed: &[(u64, MetricsReport)]) -> Result<String> {
    let st = stats(per_seed.iter().map(|(_, m)| m))?;
    Ok(format!("N {}  RMSE {}  Corr {}  MAE {}", st.n, pm(st.rmse, 2), pm(st.corr, 3), pm(st.mae, 2)))
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub key: String,
    pub stats: MetricStats,
}

fn group_stats(per_seed: &[GroupReport]) -> Result<Vec<GroupStats>> {
    let mean = GroupReport::mean_over(per_seed)?;
    mean.groups
        .iter()
        .enumerate()
        .map(|(i, (key, _))| Ok(GroupStats { key: key.clone(), stats: stats(per_seed.iter().map(|r| &r.groups[i].1))? }))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MacroStats {
    pub rmse: MeanStd,
    pub corr: MeanStd,
    pub mae: MeanStd,
}

fn macro_stats(per_seed: &[GroupReport]) -> Result<MacroStats> {
    let col = |f: fn(&GroupReport) -> f64| aggregate(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(MacroStats { rmse: col(|r| r.macro_avg.rmse)?, corr: col(|r| r.macro_avg.corr)?, mae: col(|r| r.macro_avg.mae)? })
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemSection {
    pub groups: Vec<GroupStats>,
    pub macro_avg: MacroStats,
    pub baseline: Option<PathBuf>,
    pub baseline_groups: Option<Vec<GroupStats>>,
    pub baseline_macro: Option<MacroStats>,
    /// Strict wins of this run over the baseline, on seed-mean metrics.
    pub wins: Option<Wins>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftStats {
    pub delta_steps: i64,
    pub shift_ms: i64,
    pub rmse: MeanStd,
    pub corr: MeanStd,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub run: PathBuf,
    pub split: Split,
    pub per_seed: Vec<(u64, MetricsReport)>,
    pub overall: MetricStats,
    pub severity: Option<(Vec<GroupStats>, MacroStats)>,
    pub system: Option<SystemSection>,
    pub shift_sweep: Option<Vec<ShiftStats>>,
    pub params: Option<ParamBreakdown>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Severity,
    System,
}

pub struct EvaluateArgs {
    pub run: PathBuf,
    pub split: Split,
    pub by: Vec<GroupBy>,
    pub baseline: Option<PathBuf>,
    pub shift_sweep: bool,
    pub params: bool,
}

fn snapshot_analysis(run_dir: &Path) -> Result<Option<Analysis>> {
    let path = run_dir.join(SNAPSHOT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(RunConfig::parse(&std::fs::read_to_string(path)?)?.analysis))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(String, EvalReport)> {
    let info = RunInfo::load(&a.run)?;
    if !info.splits.contains(&a.split) {
        return Err(Error::data(format!("run {} has no {} predictions", a.run.display(), a.split)).into());
    }
    let analysis = snapshot_analysis(&a.run)?;
    let (by_sev, by_sys) = if a.by.is_empty() {
        analysis.map_or((false, false), |an| (an.severity, an.system))
    } else {
        (a.by.contains(&GroupBy::Severity), a.by.contains(&GroupBy::System))
    };
    let want_sweep = a.shift_sweep || analysis.is_some_and(|an| an.shift_sweep);
    let want_params = a.params || analysis.is_some_and(|an| an.params);

    let manifest = read_manifest(&info.data_dir.join(data::MANIFEST_FILE))?;
    let per_seed = seed_metrics(&a.run, &info, &manifest, a.split)?;
    let mut text = String::new();
    writeln!(text, "{} [{}] seeds {:?}", a.run.display(), a.split, info.seeds)?;
    writeln!(text, "overall  {}", overall_line(&per_seed)?)?;
    for (seed, m) in &per_seed {
        writeln!(text, "  seed {seed}: RMSE {:.3}  Corr {:.4}  MAE {:.3}", m.rmse, m.corr, m.mae)?;
    }

    let seed_preds = |run_dir: &Path, info: &RunInfo| -> Result<Vec<(Vec<f64>, Vec<&ManifestRow>)>> {
        info.seeds.iter().map(|&s| aligned(&run::load_seed_predictions(run_dir, s, a.split)?, &manifest, a.split)).collect()
    };
    let own = seed_preds(&a.run, &info)?;

    let severity = if by_sev {
        let reps: Vec<GroupReport> = own.iter().map(|(p, r)| eval::severity_report(p, r)).collect::<Result<_, _>>()?;
        let (groups, mac) = (group_stats(&reps)?, macro_stats(&reps)?);
        writeln!(text, "\nby severity")?;
        write_group_table(&mut text, &groups)?;
        Some((groups, mac))
    } else {
        None
    };

    let system = if by_sys {
        let reps: Vec<GroupReport> = own.iter().map(|(p, r)| eval::system_groups(p, r)).collect::<Result<_, _>>()?;
        let mut sec = SystemSection {
            groups: group_stats(&reps)?,
            macro_avg: macro_stats(&reps)?,
            baseline: a.baseline.clone(),
            baseline_groups: None,
            baseline_macro: None,
            wins: None,
        };
        if let Some(base_dir) = &a.baseline {
            let base_info = RunInfo::load(base_dir)?;
            let base = seed_preds(base_dir, &base_info)?;
            let base_reps: Vec<GroupReport> = base.iter().map(|(p, r)| eval::system_groups(p, r)).collect::<Result<_, _>>()?;
            sec.wins = Some(eval::count_wins(&GroupReport::mean_over(&base_reps)?, &GroupReport::mean_over(&reps)?)?);
            sec.baseline_groups = Some(group_stats(&base_reps)?);
            sec.baseline_macro = Some(macro_stats(&base_reps)?);
        }
        writeln!(text, "\nby system")?;
        write_group_table(&mut text, &sec.groups)?;
        let m = &sec.macro_avg;
        writeln!(text, "{:<18} {:>5}  {:>14}  {:>14}  {:>14}", "macro", "", pm(m.rmse, 2), pm(m.corr, 3), pm(m.mae, 2))?;
        if let (Some(w), Some(bm)) = (&sec.wins, &sec.baseline_macro) {
            writeln!(text, "{:<18} {:>5}  {:>14}  {:>14}  {:>14}", "baseline macro", "", pm(bm.rmse, 2), pm(bm.corr, 3), pm(bm.mae, 2))?;
            writeln!(text, "{:<18} {:>5}  {:>14}  {:>14}  {:>14}", "wins", "", frac(w.rmse, w.groups), frac(w.corr, w.groups), frac(w.mae, w.groups))?;
        }
        Some(sec)
    } else {
        None
    };

    let model = info.model;
    let shift_sweep = if want_sweep {
        let model = model.ok_or_else(|| Error::Config("shift sweep needs a trained run, not an averaged one".into()))?;
        if model.fusion.kind != FusionKind::FrameAligned {
            return Err(Error::Config(format!("shift sweep needs a frame_aligned run, this run is {}", model.fusion.kind.as_str())).into());
        }
        let rows = sweep(&a.run, &info, a.split, &eval::SHIFT_DELTAS)?;
        writeln!(text, "\nshift sweep")?;
        write_sweep_table(&mut text, &rows)?;
        Some(rows)
    } else {
        None
    };

    let params = if want_params {
        let model = model.ok_or_else(|| Error::Config("parameter counts need a trained run".into()))?;
        let b = count_params(&model);
        writeln!(text, "\n{}", params_text(&b))?;
        Some(b)
    } else {
        None
    };

    let report = EvalReport {
        run: a.run.clone(),
        split: a.split,
        overall: stats(per_seed.iter().map(|(_, m)| m))?,
        per_seed,
        severity,
        system,
        shift_sweep,
        params,
    };
    write_json(&a.run.join(format!("{REPORT_PREFIX}_{}.json", a.split)), &report)?;
    Ok((text, report))
}

fn frac(k: usize, n: usize) -> String {
    format!("{k}/{n}")
}

fn write_group_table(text: &mut String, groups: &[GroupStats]) -> Result<()> {
    writeln!(text, "{:<18} {:>5}  {:>14}  {:>14}  {:>14}", "group", "N", "RMSE", "Corr", "MAE")?;
    for g in groups {
        let s = &g.stats;
        writeln!(text, "{:<18} {:>5}  {:>14}  {:>14}  {:>14}", g.key, s.n, pm(s.rmse, 2), pm(s.corr, 3), pm(s.mae, 2))?;
    }
    Ok(())
}

fn write_sweep_table(text: &mut String, rows: &[ShiftStats]) -> Result<()> {
    writeln!(text, "{:>8}  {:>14}  {:>14}", "shift_ms", "RMSE", "Corr")?;
    for r in rows {
        writeln!(text, "{:>8}  {:>14}  {:>14}", r.shift_ms, pm(r.rmse, 2), pm(r.corr, 3))?;
    }
    Ok(())
}

fn sweep(run_dir: &Path, info: &RunInfo, split: Split, deltas: &[i64]) -> Result<Vec<ShiftStats>> {
    let dataset = Dataset::load(&info.data_dir)?;
    let items = dataset.split(split);
    let mut per_seed = Vec::with_capacity(info.seeds.len());
    for &seed in &info.seeds {
        let models = run::load_fold_models(run_dir, info, seed)?;
        per_seed.push(eval::shift_sweep(&models, &items, deltas)?);
    }
    deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let col = |f: fn(&MetricsReport) -> f64| aggregate(&per_seed.iter().map(|rows| f(&rows[i].metrics)).collect::<Vec<_>>());
            Ok(ShiftStats { delta_steps: d, shift_ms: per_seed[0][i].shift_ms, rmse: col(|m| m.rmse)?, corr: col(|m| m.corr)? })
        })
        .collect()
}

pub struct ShiftArgs {
    pub run: PathBuf,
    pub split: Split,
    pub deltas: Vec<i64>,
}

pub fn shift_sweep(a: &ShiftArgs) -> Result<(String, Vec<ShiftStats>)> {
    let info = RunInfo::load(&a.run)?;
    let model = info.model.ok_or_else(|| Error::Config("shift sweep needs a trained run, not an averaged one".into()))?;
    if model.fusion.kind != FusionKind::FrameAligned {
        return Err(Error::Config(format!("shift sweep needs a frame_aligned run, this run is {}", model.fusion.kind.as_str())).into());
    }
    let rows = sweep(&a.run, &info, a.split, &a.deltas)?;
    let mut text = String::new();
    write_sweep_table(&mut text, &rows)?;
    write_json(&a.run.join(format!("shift_sweep_{}.json", a.split)), &rows)?;
    Ok((text, rows))
}

pub struct EnsembleArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub split: Split,
    pub a: MetricStats,
    pub b: MetricStats,
    pub average: MetricStats,
}

/// Seeds are paired by position; the output run takes the first run's seeds.
pub fn ensemble_avg(args: &EnsembleArgs) -> Result<(String, Vec<Comparison>)> {
    let ia = RunInfo::load(&args.a)?;
    let ib = RunInfo::load(&args.b)?;
    if ia.data_dir != ib.data_dir {
        return Err(Error::Config(format!("runs use different data ({} vs {})", ia.data_dir.display(), ib.data_dir.display())).into());
    }
    if ia.seeds.len() != ib.seeds.len() {
        return Err(Error::Config(format!("runs have {} and {} seeds", ia.seeds.len(), ib.seeds.len())).into());
    }
    if args.out.join(run::RUN_INFO_FILE).exists() && !args.force {
        return Err(Error::Config(format!("{} already holds a run; pass --force to overwrite", args.out.display())).into());
    }
    let splits: Vec<Split> = ia.splits.iter().copied().filter(|s| ib.splits.contains(s)).collect();
    let manifest = read_manifest(&ia.data_dir.join(data::MANIFEST_FILE))?;
    let mut comparisons = Vec::new();
    let mut text = String::new();
    for &split in &splits {
        let mut ma = Vec::new();
        let mut mb = Vec::new();
        let mut mavg = Vec::new();
        for (&sa, &sb) in ia.seeds.iter().zip(&ib.seeds) {
            let pa = run::load_seed_predictions(&args.a, sa, split)?;
            let pb = run::load_seed_predictions(&args.b, sb, split)?;
            let avg = uniform_score_average(&pa, &pb)?;
            let dir = run::seed_dir(&args.out, sa);
            std::fs::create_dir_all(&dir)?;
            run::write_predictions(&run::predictions_file(&dir, split), &avg)?;
            for (preds, acc) in [(&pa, &mut ma), (&pb, &mut mb), (&avg, &mut mavg)] {
                let (p, rows) = aligned(preds, &manifest, split)?;
                let t: Vec<f64> = rows.iter().map(|r| r.label).collect();
                acc.push(MetricsReport::compute(&p, &t)?);
            }
        }
        let c = Comparison { split, a: stats(&ma)?, b: stats(&mb)?, average: stats(&mavg)? };
        writeln!(text, "{split}")?;
        for (name, s) in [("a", &c.a), ("b", &c.b), ("average", &c.average)] {
            writeln!(text, "  {name:<8} RMSE {}  Corr {}  MAE {}", pm(s.rmse, 2), pm(s.corr, 3), pm(s.mae, 2))?;
        }
        comparisons.push(c);
    }
    let info = RunInfo {
        data_dir: ia.data_dir.clone(),
        seeds: ia.seeds.clone(),
        folds: ia.folds,
        splits,
        model: None,
        parents: vec![args.a.clone(), args.b.clone()],
    };
    info.save(&args.out)?;
    write_json(&args.out.join(COMPARISON_FILE), &comparisons)?;
    Ok((text, comparisons))
}

pub struct ParamsArgs {
    pub config: Option<PathBuf>,
    pub kind: Option<FusionKind>,
    pub prep: Prep,
    pub d: Option<usize>,
    pub input_dim: usize,
}

pub fn params(a: &ParamsArgs) -> Result<(String, ParamBreakdown)> {
    let cfg = match (&a.config, a.kind) {
        (Some(path), _) => {
            let (rc, _) = RunConfig::load(path)?;
            rc.model_config(rc.model.input_dim.unwrap_or(ENCODER_DIM))?
        }
        (None, Some(kind)) => {
            let fusion = FusionVariant { kind, prep: a.prep, shift_steps: 0 };
            let mut cfg = ModelConfig::new(fusion);
            cfg.input_dim = a.input_dim;
            if let Some(d) = a.d {
                cfg.head = HeadConfig::with_d(d);
            }
            cfg.validate()?;
            cfg
        }
        (None, None) => return Err(Error::Config("pass --config or --kind".into()).into()),
    };
    let b = count_params(&cfg);
    Ok((format!("{} (d = {}, input {})\n{}", describe(&cfg.fusion), cfg.head.d, cfg.input_dim, params_text(&b)), b))
}

fn params_text(b: &ParamBreakdown) -> String {
    let mut s = String::new();
    for (block, n) in &b.blocks {
        let _ = writeln!(s, "  {block:<12} {n:>10}");
    }
    let _ = write!(s, "  {:<12} {:>10}", "total", b.total);
    s
}

pub struct ValidateArgs {
    pub cache: PathBuf,
    pub manifest: Option<PathBuf>,
}

pub fn validate(a: &ValidateArgs) -> Result<String> {
    let r = validate_cache(&a.cache, a.manifest.as_deref())?;
    let mut s = format!(
        "{}: {} records, {} utterances, feature dim {}\n",
        a.cache.display(),
        r.records,
        r.utterances,
        r.feature_dim.map_or("-".to_string(), |d| d.to_string())
    );
    if r.is_ok() {
        s.push_str("ok\n");
        Ok(s)
    } else {
        for e in &r.errors {
            let _ = writeln!(s, "  {e}");
        }
        print!("{s}");
        Err(Error::data(format!("{} problem(s) found", r.errors.len())).into())
    }
}
