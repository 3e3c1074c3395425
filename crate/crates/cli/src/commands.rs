use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use log::{info, warn};

use uqcurate::dataset::{dataset_stats, parse_dataset};
use uqcurate::density::{load_model, ClassConditionalGaussian, Regularization};
use uqcurate::features::{
    build_archive, read_archive, DirectorySource, GridLayout, PoolMode, PoolOptions,
};
use uqcurate::filtering::{
    apply_filter, filter_noise_global, filter_noise_per_class, filter_redundant, ApplyOptions,
    FilterResult,
};
use uqcurate::regularizer::{
    bernoulli_entropy, loss_gradient, loss_value, mean_bce, LossBatch, Objective, SignMode,
    PROB_CLAMP,
};
use uqcurate::scoring::{histogram, read_scores, score_dataset, HistogramScope, ScoreTable};
use uqcurate::synth::{generate, recovery_experiment, Label, SynthConfig};

use crate::config::FileConfig;
use crate::output::Staged;
use crate::{
    FilterArgs, LayoutFlag, LossEvalArgs, PoolArgs, PoolFlag, ReportArgs, ScopeFlag, ScoreArgs,
    SignFlag, StrategyFlag, SynthArgs,
};

/// Bad or missing arguments; maps to exit code 1.
#[derive(Debug)]
pub struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<uqcurate::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        usage(format!(
            "missing required value --{flag} (flag or config key)"
        ))
    })
}

fn choice<E: ValueEnum>(flag: Option<E>, file: Option<&str>, key: &str) -> Result<Option<E>> {
    match (flag, file) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(s)) => E::from_str(s, true)
            .map(Some)
            .map_err(|_| usage(format!("invalid value {s:?} for config key {key}"))),
        (None, None) => Ok(None),
    }
}

fn switch(flag: bool, file: Option<bool>) -> bool {
    flag || file.unwrap_or(false)
}

fn finish(staged: Staged) -> Result<()> {
    for path in staged.commit()? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn bytes_of(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn pool(args: PoolArgs, file: &FileConfig) -> Result<()> {
    let annotations = require(args.annotations.or(file.annotations.clone()), "annotations")?;
    let features_dir = require(
        args.features_dir.or(file.features_dir.clone()),
        "features-dir",
    )?;
    let out = require(args.out.or(file.out.clone()), "out")?;
    let mode = match choice(args.pool, file.pool.as_deref(), "pool")?.unwrap_or(PoolFlag::Box) {
        PoolFlag::Box => PoolMode::BoxMean,
        PoolFlag::Mask => PoolMode::MaskMean,
    };
    let layout = match choice(args.grid_layout, file.grid_layout.as_deref(), "grid_layout")? {
        Some(LayoutFlag::LongestSide) => GridLayout::LongestSide,
        _ => GridLayout::Stretch,
    };
    let options = PoolOptions {
        mode,
        include_crowd: switch(args.include_crowd, file.include_crowd),
        skip_missing: switch(args.skip_missing, file.skip_missing),
        layout,
    };

    let (index, parsed) = parse_dataset(&annotations)?;
    if !parsed.clamped.is_empty() || !parsed.zero_area.is_empty() {
        warn!(
            "{} boxes clamped to image bounds, {} with zero area",
            parsed.clamped.len(),
            parsed.zero_area.len()
        );
    }
    let source = DirectorySource::open(&features_dir)?;
    let (archive, report) = build_archive(&index, &source, &options)?;
    if !report.missing_images.is_empty() {
        warn!(
            "{} images without feature maps, {} annotations skipped",
            report.missing_images.len(),
            report.skipped_annotations
        );
    }

    let mut staged = Staged::new(&out)?;
    staged.write("archive.uqfa", &archive.to_bytes())?;
    finish(staged)?;
    println!(
        "pooled {} objects (dim {}), excluded {} crowd and {} zero-area, {} mask fallbacks to box",
        report.pooled,
        archive.dim,
        report.excluded_crowd,
        report.excluded_zero_area,
        report.box_fallbacks
    );
    Ok(())
}

fn histogram_outputs(
    staged: &mut Staged,
    table: &ScoreTable,
    bins: usize,
    scope: ScopeFlag,
) -> Result<()> {
    if matches!(scope, ScopeFlag::Global | ScopeFlag::Both) {
        let global = histogram(table, bins, HistogramScope::Global)?;
        staged.write("histogram.csv", global.to_csv().as_bytes())?;
        staged.write("histogram.svg", global.to_svg().as_bytes())?;
    }
    if matches!(scope, ScopeFlag::PerClass | ScopeFlag::Both) {
        let per_class = histogram(table, bins, HistogramScope::PerClass)?;
        staged.write("histogram_per_class.csv", per_class.to_csv().as_bytes())?;
    }
    Ok(())
}

fn hist_bins(flag: Option<usize>, file: Option<usize>) -> Result<usize> {
    let bins = flag.or(file).unwrap_or(20);
    if bins == 0 {
        return Err(usage("--hist-bins must be at least 1"));
    }
    Ok(bins)
}

pub fn score(args: ScoreArgs, file: &FileConfig) -> Result<()> {
    let archive_path = require(args.archive.or(file.archive.clone()), "archive")?;
    let out = require(args.out.or(file.out.clone()), "out")?;
    let bins = hist_bins(args.hist_bins, file.hist_bins)?;
    let model_path = args.model.or(file.model.clone());
    let reg = match args.eps.or(file.eps) {
        Some(eps) if !(eps >= 0.0 && eps.is_finite()) => {
            return Err(usage(format!("--eps {eps} must be finite and >= 0")))
        }
        Some(eps) => Regularization::Fixed(eps),
        None => Regularization::Auto,
    };

    let archive = read_archive(&archive_path)?;
    let model = match &model_path {
        Some(path) => {
            let model = load_model(path)?;
            model.check_dim(archive.dim)?;
            model
        }
        None => ClassConditionalGaussian::fit(&archive, reg)?,
    };
    info!(
        "model: {} classes, dim {}, eps {:e}",
        model.means().len(),
        model.dim(),
        model.eps()
    );
    let table = score_dataset(&model, &archive)?;
    let degenerate = table.degenerate_classes();
    if !degenerate.is_empty() {
        warn!(
            "{} classes have a single distinct distance and score 0",
            degenerate.len()
        );
    }

    let mut staged = Staged::new(&out)?;
    if model_path.is_none() {
        staged.write("model.uqgm", &model.to_bytes())?;
    }
    staged.write("scores.tsv", &bytes_of(|w| table.write_to(w)))?;
    histogram_outputs(&mut staged, &table, bins, ScopeFlag::Both)?;
    finish(staged)?;
    println!(
        "scored {} objects in {} classes, model {:016x}",
        table.records.len(),
        table.per_class_minmax.len(),
        table.model_checksum
    );
    Ok(())
}

pub fn filter(args: FilterArgs, file: &FileConfig) -> Result<()> {
    let scores = require(args.scores.or(file.scores.clone()), "scores")?;
    let annotations = require(args.annotations.or(file.annotations.clone()), "annotations")?;
    let out = require(args.out.or(file.out.clone()), "out")?;
    let strategy = require(
        choice(args.strategy, file.strategy.as_deref(), "strategy")?,
        "strategy",
    )?;
    let p = require(args.p.or(file.p), "p")?;
    let bins = args.bins.or(file.bins).unwrap_or(10);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    match strategy {
        StrategyFlag::NoiseGlobal | StrategyFlag::NoiseClass if !(p > 0.0 && p <= 1.0) => {
            return Err(usage(format!(
                "--p {p} must lie in (0, 1] for noise filters"
            )));
        }
        StrategyFlag::Redundancy if !(0.0..1.0).contains(&p) => {
            return Err(usage(format!(
                "--p {p} must lie in [0, 1) for the redundancy filter"
            )));
        }
        StrategyFlag::Redundancy if bins == 0 => return Err(usage("--bins must be at least 1")),
        _ => {}
    }
    let options = ApplyOptions {
        drop_empty_images: switch(args.drop_empty_images, file.drop_empty_images),
        keep_unscored: !switch(args.drop_unscored, file.drop_unscored),
    };

    let table = read_scores(&scores)?;
    let (index, _) = parse_dataset(&annotations)?;
    let result = match strategy {
        StrategyFlag::NoiseGlobal => filter_noise_global(&table, p)?,
        StrategyFlag::NoiseClass => filter_noise_per_class(&table, p)?,
        StrategyFlag::Redundancy => filter_redundant(&table, bins, p, seed)?,
    };
    let (filtered, report) = apply_filter(&index, &result, options)?;

    let mut staged = Staged::new(&out)?;
    staged.write("filter.txt", &bytes_of(|w| result.write_to(w)))?;
    staged.write("annotations_filtered.json", &filtered.to_json_vec()?)?;
    finish(staged)?;
    print_filter_summary(&result);
    println!(
        "dataset: kept {} scored and {} unscored annotations, removed {} unscored, {} images",
        report.kept, report.unscored_kept, report.unscored_removed, report.images_removed
    );
    Ok(())
}

fn print_filter_summary(result: &FilterResult) {
    println!(
        "{}: kept {}, dropped {} at p = {}",
        result.strategy,
        result.kept.len(),
        result.dropped.len(),
        result.p
    );
}

pub fn report(args: ReportArgs, file: &FileConfig) -> Result<()> {
    let scores = require(args.scores.or(file.scores.clone()), "scores")?;
    let bins = hist_bins(args.hist_bins, file.hist_bins)?;
    let scope = choice(args.scope, file.scope.as_deref(), "scope")?.unwrap_or(ScopeFlag::Both);
    let annotations = args.annotations.or(file.annotations.clone());
    let out = args.out.or(file.out.clone());

    let table = read_scores(&scores)?;
    let stats = match &annotations {
        Some(path) => Some(dataset_stats(&parse_dataset(path)?.0)),
        None => None,
    };

    match out {
        Some(dir) => {
            let mut staged = Staged::new(&dir)?;
            histogram_outputs(&mut staged, &table, bins, scope)?;
            if let Some(stats) = &stats {
                let mut json =
                    serde_json::to_vec_pretty(stats).context("serializing statistics")?;
                json.push(b'\n');
                staged.write("stats.json", &json)?;
            }
            finish(staged)?;
        }
        None => {
            if matches!(scope, ScopeFlag::Global | ScopeFlag::Both) {
                print!(
                    "{}",
                    histogram(&table, bins, HistogramScope::Global)?.to_csv()
                );
            }
            if matches!(scope, ScopeFlag::PerClass | ScopeFlag::Both) {
                print!(
                    "{}",
                    histogram(&table, bins, HistogramScope::PerClass)?.to_csv()
                );
            }
        }
    }
    println!(
        "{} objects, {} classes, {} degenerate",
        table.records.len(),
        table.per_class_minmax.len(),
        table.degenerate_classes().len()
    );
    if let Some(stats) = stats {
        println!(
            "dataset: {} images, {} annotations ({} crowd, {} zero-area), {:.2} mean / {} max per image",
            stats.images,
            stats.annotations,
            stats.crowd,
            stats.zero_area,
            stats.mean_instances_per_image,
            stats.max_instances_per_image
        );
    }
    Ok(())
}

pub fn synth(args: SynthArgs, file: &FileConfig) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        classes: args.classes.or(file.classes).unwrap_or(defaults.classes),
        dim: args.dim.or(file.dim).unwrap_or(defaults.dim),
        per_class: args
            .per_class
            .or(file.per_class)
            .unwrap_or(defaults.per_class),
        mean_separation: args
            .separation
            .or(file.separation)
            .unwrap_or(defaults.mean_separation),
        contamination: args
            .contamination
            .or(file.contamination)
            .unwrap_or(defaults.contamination),
        outlier_shift: args.shift.or(file.shift).unwrap_or(defaults.outlier_shift),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let out = args.out.or(file.out.clone());
    let write_data = switch(args.write_data, file.write_data);
    if write_data && out.is_none() {
        return Err(usage("--write-data needs --out"));
    }

    let report = recovery_experiment(&config)?;
    let csv = report.to_csv();
    if let Some(dir) = out {
        let mut staged = Staged::new(&dir)?;
        staged.write("report.csv", csv.as_bytes())?;
        if write_data {
            let data = generate(&config)?;
            staged.write("archive.uqfa", &data.archive.to_bytes())?;
            staged.write("annotations.json", &data.index.to_json_vec()?)?;
            staged.write("truth.tsv", truth_tsv(&data.truth.labels).as_bytes())?;
        }
        finish(staged)?;
    }
    print!("{csv}");
    Ok(())
}

fn truth_tsv(labels: &std::collections::BTreeMap<uqcurate::AnnotationId, Label>) -> String {
    let mut out = String::from("annotation_id\tlabel\n");
    for (id, label) in labels {
        let name = match label {
            Label::Clean => "clean",
            Label::Outlier => "outlier",
        };
        out.push_str(&format!("{id}\t{name}\n"));
    }
    out
}

fn parse_target(field: &str) -> Option<bool> {
    match field.trim() {
        "1" | "true" | "1.0" => Some(true),
        "0" | "false" | "0.0" => Some(false),
        _ => None,
    }
}

fn read_loss_csv(path: &Path) -> Result<(Vec<f64>, Vec<bool>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| uqcurate::Error::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
    let (mut probs, mut targets, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let bad = |message: String| uqcurate::Error::Parse { line, message };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())).into());
        }
        let prob = record[0].parse::<f64>();
        if i == 0 && prob.is_err() {
            continue;
        }
        probs.push(prob.map_err(|_| bad(format!("invalid probability {:?}", &record[0])))?);
        targets.push(
            parse_target(&record[1])
                .ok_or_else(|| bad(format!("invalid target {:?}", &record[1])))?,
        );
        scores.push(
            record[2]
                .parse::<f64>()
                .map_err(|_| bad(format!("invalid score {:?}", &record[2])))?,
        );
    }
    Ok((probs, targets, scores))
}

pub fn loss_eval(args: LossEvalArgs, file: &FileConfig) -> Result<()> {
    let input: PathBuf = require(args.input.or(file.input.clone()), "input")?;
    let beta = args.beta.or(file.beta).unwrap_or(0.2);
    let gamma = args.gamma.or(file.gamma).unwrap_or(2.0);
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(usage(format!("--beta {beta} must be finite and >= 0")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(usage(format!("--gamma {gamma} must be finite and >= 0")));
    }
    let sign = match choice(args.sign, file.sign.as_deref(), "sign")? {
        Some(SignFlag::MaxEntropy) => SignMode::MaxEntropy,
        _ => SignMode::Literal,
    };
    let out = args.out.or(file.out.clone());

    let (probs, targets, scores) = read_loss_csv(&input)?;
    let batch = LossBatch::new(probs, targets, scores, beta, sign)?;
    let objectives = [
        ("ua_entropy", Objective::UaEntropy),
        ("constant_entropy", Objective::ConstantEntropy),
        ("focal", Objective::Focal { gamma }),
    ];
    let clamped = batch
        .probs()
        .iter()
        .filter(|p| !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(*p))
        .count();
    let mean_entropy = batch
        .probs()
        .iter()
        .map(|&p| bernoulli_entropy(p))
        .sum::<f64>()
        / batch.len() as f64;

    println!("items,{}", batch.len());
    println!("clamped,{clamped}");
    println!("bce,{:?}", mean_bce(batch.probs(), batch.targets())?);
    println!("mean_entropy,{mean_entropy:?}");
    let mut grads = Vec::new();
    for (name, objective) in objectives {
        let value = loss_value(&batch, objective)?;
        let g = loss_gradient(&batch, objective)?;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("{name},{value:?}");
        println!("{name}_grad_norm,{norm:?}");
        grads.push(g);
    }

    if let Some(path) = out {
        let mut text =
            String::from("prob,target,score,grad_ua_entropy,grad_constant_entropy,grad_focal\n");
        for i in 0..batch.len() {
            text.push_str(&format!(
                "{:?},{},{:?},{:?},{:?},{:?}\n",
                batch.probs()[i],
                u8::from(batch.targets()[i]),
                batch.scores()[i],
                grads[0][i],
                grads[1][i],
                grads[2][i]
            ));
        }
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| usage(format!("invalid output path {}", path.display())))?;
        let mut staged = Staged::new(&dir)?;
        staged.write(name, text.as_bytes())?;
        finish(staged)?;
    }
    Ok(())
}
