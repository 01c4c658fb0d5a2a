use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rsgn_core::autodiff::OpKind;
use rsgn_core::checkpoint;
use rsgn_core::connectivity::connectivity;
use rsgn_core::dataset::{
    load_image, make_split, save_mask, save_prob_map, synth_vessels, DatasetKind, Manifest, Split,
};
use rsgn_core::gradcheck::{network_check, op_suite, CheckReport, GradCheckConfig};
use rsgn_core::metrics::{auc, binarize, confusion, otsu_threshold, se_sp};
use rsgn_core::model::param_count;
use rsgn_core::trainer::{infer, train as train_network};
use rsgn_core::{ArchConfig, BinaryMask, ProbMap, RsgnParams};

use crate::config::{RunConfig, ARCH_KEYS};
use crate::error::{CliError, CliResult};

pub const CSV_HEADER: [&str; 10] = [
    "id", "auc", "se", "sp", "cor", "inf", "wrn", "otsu_k", "n_pairs", "seed",
];

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let p = dir.join("run.cfg");
    fs::write(&p, cfg.to_text()).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

/// The manifest named by `manifest`, or one built from `data_root`.
pub fn open_dataset(cfg: &RunConfig) -> CliResult<Manifest> {
    if let Some(m) = cfg.path("manifest") {
        return Ok(Manifest::read(&m)?);
    }
    if let Some(root) = cfg.path("data_root") {
        let kind: DatasetKind = cfg.raw("dataset").parse()?;
        return Ok(make_split(&root, kind, cfg.seed())?);
    }
    Err(CliError::usage("no dataset: set `manifest` or `data_root`"))
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<RsgnParams> {
    let manifest = open_dataset(cfg)?;
    let samples = manifest.load_split(Split::Train)?;
    let first = samples
        .first()
        .ok_or_else(|| CliError::data(format!("manifest {} has no training records", manifest.base.display())))?;
    let arch = cfg.arch(first.channels() + 1)?;
    let tc = cfg.train_config()?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    write_resolved(cfg, &dir)?;
    let mut log = create_file(&dir.join("train.log"))?;
    writeln!(
        out,
        "train: {} images, {} parameters, digest {}",
        samples.len(),
        param_count(&arch),
        cfg.digest()
    )?;
    let outcome = train_network(&samples, &arch, &tc, |entry, _| {
        writeln!(log, "{entry}")
            .and_then(|_| writeln!(out, "{entry}"))
            .map_err(|e| rsgn_core::Error::io(dir.join("train.log"), e))
    })?;
    log.flush()?;
    let ckpt = cfg.checkpoint_path();
    checkpoint::save(&ckpt, &outcome.params)?;
    if let Some(msg) = outcome.aborted {
        return Err(CliError::numeric(format!(
            "training stopped: {msg}; last finite weights written to {}",
            ckpt.display()
        )));
    }
    writeln!(out, "checkpoint {}", ckpt.display())?;
    Ok(outcome.params)
}

/// Loads the checkpoint and rejects it when an explicitly configured
/// architecture key disagrees with its header.
pub fn load_checkpoint(cfg: &RunConfig) -> CliResult<RsgnParams> {
    let path = cfg.checkpoint_path();
    let bytes = fs::read(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let header = checkpoint::peek_config(&bytes)?;
    let stored = |k: &str| match k {
        "c1" => header.widths[0].to_string(),
        "c2" => header.widths[1].to_string(),
        "c3" => header.widths[2].to_string(),
        "ppm_out" => header.ppm_out.to_string(),
        _ => header.semantics_guided.to_string(),
    };
    for k in ARCH_KEYS {
        if cfg.is_explicit(k) && cfg.raw(k) != stored(k) {
            return Err(CliError::data(format!(
                "checkpoint {} was trained with {k} = {} but the configuration says {k} = {}",
                path.display(),
                stored(k),
                cfg.raw(k)
            )));
        }
    }
    Ok(checkpoint::from_bytes(&bytes)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub auc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub cor: f64,
    pub inf: f64,
    pub wrn: f64,
    pub otsu_k: Option<usize>,
    pub n_pairs: usize,
    pub seed: u64,
}

/// Unweighted mean over images of every metric; undefined entries are left
/// out of their column's mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub auc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub cor: f64,
    pub inf: f64,
    pub wrn: f64,
    pub otsu_k: Option<f64>,
    pub n_pairs: f64,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(rows: &[ImageMetrics]) -> Aggregate {
    let col = |f: fn(&ImageMetrics) -> Option<f64>| mean(rows.iter().map(f));
    Aggregate {
        auc: col(|r| r.auc),
        se: col(|r| r.se),
        sp: col(|r| r.sp),
        cor: col(|r| Some(r.cor)).unwrap_or(0.0),
        inf: col(|r| Some(r.inf)).unwrap_or(0.0),
        wrn: col(|r| Some(r.wrn)).unwrap_or(0.0),
        otsu_k: col(|r| r.otsu_k.map(|k| k as f64)),
        n_pairs: col(|r| Some(r.n_pairs as f64)).unwrap_or(0.0),
    }
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn segment(p: &ProbMap, fov: Option<&BinaryMask>) -> CliResult<(Option<usize>, BinaryMask)> {
    match otsu_threshold(p, fov) {
        Ok(k) => Ok((Some(k), binarize(p, k, fov)?)),
        // a constant map has no threshold; nothing is foreground
        Err(rsgn_core::Error::InvalidArgument(_)) => Ok((None, BinaryMask::filled(p.width(), p.height(), false))),
        Err(e) => Err(e.into()),
    }
}

/// Per-image metrics over the test split, in manifest order. Probability
/// maps and masks go to `<out>/maps` and `<out>/masks`. With `oracle` the
/// ground truth itself is scored as the prediction.
pub fn evaluate(cfg: &RunConfig, oracle: bool) -> CliResult<Vec<ImageMetrics>> {
    let manifest = open_dataset(cfg)?;
    let records: Vec<_> = manifest.split(Split::Test).collect();
    if records.is_empty() {
        return Err(CliError::data(format!(
            "manifest {} has no test records",
            manifest.base.display()
        )));
    }
    let params = if oracle { None } else { Some(load_checkpoint(cfg)?) };
    let iterations = cfg.int("iterations");
    let tiles = cfg.tiles()?;
    if iterations == 0 {
        return Err(CliError::usage("iterations must be at least 1"));
    }
    let (n_pairs, delta, seed) = (cfg.int("n_pairs"), cfg.real("delta"), cfg.seed());
    let dir = cfg.out_dir();
    create_dir(&dir.join("maps"))?;
    create_dir(&dir.join("masks"))?;
    records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let s = manifest.load(record)?;
            let p = match &params {
                Some(params) => infer(&s.image, params, iterations, &tiles)?,
                None => ProbMap::from_tensor(&s.gt.to_tensor())?,
            };
            let fov = s.fov.as_ref();
            let (otsu_k, seg) = segment(&p, fov)?;
            save_prob_map(&dir.join("maps").join(format!("{}.pgm", s.id)), &p)?;
            save_mask(&dir.join("masks").join(format!("{}.pgm", s.id)), &seg)?;
            let (se, sp) = se_sp(&confusion(&seg, &s.gt, fov)?);
            let image_seed = seed ^ index as u64;
            let c = connectivity(&s.gt, &seg, n_pairs, delta, image_seed)?;
            Ok(ImageMetrics {
                id: s.id,
                auc: auc(&p, &s.gt, fov)?,
                se,
                sp,
                cor: c.cor,
                inf: c.inf,
                wrn: c.wrn,
                otsu_k,
                n_pairs: c.n_samples,
                seed: image_seed,
            })
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[ImageMetrics], seed: u64) -> CliResult<Aggregate> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            field(r.auc),
            field(r.se),
            field(r.sp),
            r.cor.to_string(),
            r.inf.to_string(),
            r.wrn.to_string(),
            r.otsu_k.map_or_else(String::new, |k| k.to_string()),
            r.n_pairs.to_string(),
            r.seed.to_string(),
        ])?;
    }
    let a = aggregate(rows);
    w.write_record([
        "mean".to_string(),
        field(a.auc),
        field(a.se),
        field(a.sp),
        a.cor.to_string(),
        a.inf.to_string(),
        a.wrn.to_string(),
        field(a.otsu_k),
        a.n_pairs.to_string(),
        seed.to_string(),
    ])?;
    w.flush()?;
    Ok(a)
}

pub fn eval(cfg: &RunConfig, oracle: bool, out: &mut dyn Write) -> CliResult<Aggregate> {
    let rows = evaluate(cfg, oracle)?;
    let dir = cfg.out_dir();
    write_resolved(cfg, &dir)?;
    let path = dir.join("metrics.csv");
    let a = write_metrics_csv(&path, &rows, cfg.seed())?;
    writeln!(out, "eval: {} images, digest {}", rows.len(), cfg.digest())?;
    writeln!(
        out,
        "mean AUC {} SE {} SP {} COR {} INF {} WRN {}",
        field(a.auc),
        field(a.se),
        field(a.sp),
        a.cor,
        a.inf,
        a.wrn
    )?;
    writeln!(out, "metrics {}", path.display())?;
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Leg {
    pub name: &'static str,
    pub semantics_guided: bool,
    pub refinement: bool,
}

pub const LEGS: [Leg; 4] = [
    Leg {
        name: "baseline",
        semantics_guided: false,
        refinement: false,
    },
    Leg {
        name: "method-a",
        semantics_guided: true,
        refinement: false,
    },
    Leg {
        name: "method-b",
        semantics_guided: false,
        refinement: true,
    },
    Leg {
        name: "method-c",
        semantics_guided: true,
        refinement: true,
    },
];

#[derive(Clone, Debug)]
pub struct LegSummary {
    pub leg: Leg,
    pub iterations: usize,
    pub param_count: usize,
    pub runs: Vec<(u64, Aggregate, PathBuf)>,
}

impl LegSummary {
    pub fn mean(&self, f: fn(&Aggregate) -> Option<f64>) -> Option<f64> {
        mean(self.runs.iter().map(|r| f(&r.1)))
    }
}

/// The 2×2 grid {semantics module on/off} × {refinement on/off}, each leg
/// trained and evaluated once per seed under `<out>/<leg>/seed-<s>`.
pub fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Vec<LegSummary>> {
    let iterations = cfg.int("iterations");
    if iterations < 2 {
        return Err(CliError::usage(
            "ablation needs iterations >= 2 for the refinement legs",
        ));
    }
    let seeds = cfg.list("ablate_seeds");
    let root = cfg.out_dir();
    create_dir(&root)?;
    write_resolved(cfg, &root)?;
    writeln!(
        out,
        "ablate: {} legs x {} seeds, digest {}",
        LEGS.len(),
        seeds.len(),
        cfg.digest()
    )?;
    let channels = {
        let m = open_dataset(cfg)?;
        let r = m
            .split(Split::Train)
            .next()
            .ok_or_else(|| CliError::data("manifest has no training records"))?;
        m.load(r)?.channels()
    };
    let mut summaries = Vec::new();
    for leg in LEGS {
        let leg_iterations = if leg.refinement { iterations } else { 1 };
        let mut leg_cfg = cfg.clone();
        leg_cfg.set("semantics_guided", &leg.semantics_guided.to_string())?;
        leg_cfg.set("iterations", &leg_iterations.to_string())?;
        let arch = leg_cfg.arch(channels + 1)?;
        let mut summary = LegSummary {
            leg,
            iterations: leg_iterations,
            param_count: param_count(&arch),
            runs: Vec::new(),
        };
        for &seed in &seeds {
            let dir = root.join(leg.name).join(format!("seed-{seed}"));
            let mut run = leg_cfg.clone();
            run.set("seed", &seed.to_string())?;
            run.set("out", &dir.display().to_string())?;
            run.set("checkpoint", "")?;
            writeln!(out, "== {} seed {seed}", leg.name)?;
            train(&run, &mut std::io::sink())?;
            let a = eval(&run, false, out)?;
            summary.runs.push((seed, a, dir));
        }
        summaries.push(summary);
    }
    write_ablation(&root, &summaries)?;
    writeln!(out, "{}", ablation_table(&summaries))?;
    Ok(summaries)
}

fn write_ablation(root: &Path, summaries: &[LegSummary]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(&root.join("ablation.csv"))?);
    w.write_record([
        "leg",
        "semantics_guided",
        "iterations",
        "param_count",
        "seeds",
        "auc",
        "se",
        "sp",
        "cor",
        "inf",
        "wrn",
    ])?;
    for s in summaries {
        w.write_record([
            s.leg.name.to_string(),
            s.leg.semantics_guided.to_string(),
            s.iterations.to_string(),
            s.param_count.to_string(),
            s.runs.len().to_string(),
            field(s.mean(|a| a.auc)),
            field(s.mean(|a| a.se)),
            field(s.mean(|a| a.sp)),
            field(s.mean(|a| Some(a.cor))),
            field(s.mean(|a| Some(a.inf))),
            field(s.mean(|a| Some(a.wrn))),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create_file(&root.join("ablation_runs.csv"))?);
    w.write_record(["leg", "seed", "auc", "se", "sp", "cor", "inf", "wrn"])?;
    for s in summaries {
        for (seed, a, _) in &s.runs {
            w.write_record([
                s.leg.name.to_string(),
                seed.to_string(),
                field(a.auc),
                field(a.se),
                field(a.sp),
                a.cor.to_string(),
                a.inf.to_string(),
                a.wrn.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ablation_table(summaries: &[LegSummary]) -> String {
    let f = |v: Option<f64>, d: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.d$}"));
    let mut s = format!(
        "{:<9} {:>5} {:>2} {:>8} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n",
        "leg", "sgm", "I", "params", "AUC", "SE", "SP", "COR", "INF", "WRN"
    );
    for l in summaries {
        s.push_str(&format!(
            "{:<9} {:>5} {:>2} {:>8} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n",
            l.leg.name,
            if l.leg.semantics_guided { "on" } else { "off" },
            l.iterations,
            l.param_count,
            f(l.mean(|a| a.auc), 4),
            f(l.mean(|a| a.se), 4),
            f(l.mean(|a| a.sp), 4),
            f(l.mean(|a| Some(a.cor)), 1),
            f(l.mean(|a| Some(a.inf)), 1),
            f(l.mean(|a| Some(a.wrn)), 1),
        ));
    }
    s
}

pub fn parse_fault(name: &str) -> CliResult<OpKind> {
    OpKind::DIFFERENTIABLE
        .iter()
        .copied()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::usage(format!("unknown op `{name}`")))
}

/// Every differentiable op once, then the toy network with and without the
/// semantics module.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>, out: &mut dyn Write) -> CliResult<Vec<CheckReport>> {
    let gc = GradCheckConfig {
        seed: cfg.seed(),
        ..GradCheckConfig::default()
    };
    let extent = cfg.int("gradcheck_extent");
    let iterations = cfg.int("gradcheck_iterations");
    writeln!(
        out,
        "gradcheck: eps {} tolerance {}, digest {}",
        gc.eps,
        gc.tolerance,
        cfg.digest()
    )?;
    let mut reports = op_suite(&gc, fault)?;
    let toy = ArchConfig::toy();
    let mut net = network_check(&toy, extent, iterations, &gc, fault)?;
    net.name = "network".into();
    reports.push(net);
    let mut ablated = network_check(
        &ArchConfig {
            semantics_guided: false,
            ..toy
        },
        extent,
        iterations,
        &gc,
        fault,
    )?;
    ablated.name = "network_without_semantics".into();
    reports.push(ablated);
    writeln!(
        out,
        "{:<26} {:>7} {:>7} {:>12}",
        "check", "probes", "skipped", "max_rel_err"
    )?;
    for r in &reports {
        writeln!(
            out,
            "{:<26} {:>7} {:>7} {:>12.3e} {}",
            r.name,
            r.probes,
            r.skipped,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        )?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::numeric(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )));
    }
    Ok(reports)
}

pub fn synth(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Manifest> {
    let dir = cfg.out_dir();
    let (n, extent, seed) = (cfg.int("n_images"), cfg.int("extent"), cfg.seed());
    synth_vessels(&dir, n, extent, seed)?;
    let manifest = make_split(&dir, DatasetKind::Synthetic, seed)?;
    let path = dir.join("manifest.tsv");
    manifest.write(&path)?;
    let count = |s| manifest.split(s).count();
    writeln!(
        out,
        "synth: {n} images {extent}x{extent}, {} train / {} test, digest {}",
        count(Split::Train),
        count(Split::Test),
        cfg.digest()
    )?;
    writeln!(out, "manifest {}", path.display())?;
    Ok(manifest)
}

/// Probability map and Otsu mask of a single image, written as
/// `<out>/<stem>_prob.pgm` and `<out>/<stem>_seg.pgm`.
pub fn infer_image(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<(ProbMap, BinaryMask)> {
    let image_path = cfg
        .path("image")
        .ok_or_else(|| CliError::usage("infer needs `image`"))?;
    let params = load_checkpoint(cfg)?;
    let image = load_image(&image_path)?;
    let p = infer(&image, &params, cfg.int("iterations"), &cfg.tiles()?)?;
    let (k, seg) = segment(&p, None)?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    save_prob_map(&dir.join(format!("{stem}_prob.pgm")), &p)?;
    save_mask(&dir.join(format!("{stem}_seg.pgm")), &seg)?;
    writeln!(
        out,
        "infer: {} -> {}, otsu_k {}, digest {}",
        image_path.display(),
        dir.display(),
        k.map_or_else(|| "-".to_string(), |k| k.to_string()),
        cfg.digest()
    )?;
    Ok((p, seg))
}
