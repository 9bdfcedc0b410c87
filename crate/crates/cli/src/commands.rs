use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medpt::bench::{bench_attention, expected_flops, BenchRow, BenchShape};
use medpt::dataio::{
    gen_classification_set, gen_segmentation_set, read_checkpoint, shape_cloud, vessel_cloud, write_checkpoint, Dataset,
};
use medpt::geometry::PointCloud;
use medpt::network::{evaluate, model_gradient_check, train_with, Model, ModelConfig, Task, TrainingLog};
use medpt::Error;

use crate::config::RunConfig;
use crate::{CliError, Common};

/// Config file, then `--set` overrides, then the dedicated flags.
fn load_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v).map_err(CliError::Usage)?;
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<Option<&Path>, CliError> {
    let Some(dir) = common.out.as_deref() else {
        return Ok(None);
    };
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(Some(dir))
}

fn required_out(common: &Common) -> Result<&Path, CliError> {
    out_dir(common)?.ok_or_else(|| CliError::Usage("--out <dir> is required".into()))
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| CliError::Run(Error::Io { path, source: e }))
}

fn generate(cfg: &RunConfig) -> medpt::Result<Dataset> {
    match cfg.task {
        Task::Classify => gen_classification_set(&cfg.shapes, cfg.per_class, cfg.n_points, cfg.noise, cfg.seed),
        Task::Segment => gen_segmentation_set(cfg.count, cfg.n_points, cfg.seed),
    }
}

fn dataset(cfg: &RunConfig, dir: Option<PathBuf>) -> Result<Dataset, CliError> {
    let Some(dir) = dir.or_else(|| cfg.data.clone()) else {
        return Ok(generate(cfg)?);
    };
    let d = Dataset::load(&dir)?;
    if d.task() != cfg.task {
        return Err(CliError::Run(Error::Config(format!(
            "{} holds a {} dataset but the task is {}",
            dir.display(),
            d.task(),
            cfg.task
        ))));
    }
    Ok(d)
}

/// Architecture from the config, with class count and input width taken
/// from the data unless set explicitly.
fn model_config(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let mut m = cfg.model_config(cfg.model_preset());
    if cfg.model.num_classes.is_none() {
        m.num_classes = data.num_classes().max(2);
    }
    if cfg.model.in_features.is_none() {
        m.in_features = data.samples()[0].features().map_or(3, |f| f.shape()[1]);
    }
    m
}

pub fn gen(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common, &[])?;
    let out = required_out(common)?;
    let d = generate(&cfg)?;
    d.save(out, cfg.format)?;
    println!(
        "wrote {} {} samples ({} train, {} test) to {}",
        d.len(),
        cfg.task,
        d.train().len(),
        d.test().len(),
        out.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(common, &[])?;
    let out = required_out(common)?;
    let d = dataset(&cfg, data)?;
    let mcfg = model_config(&cfg, &d);
    let tcfg = cfg.train_config();
    let mut model = Model::build(mcfg.clone(), cfg.seed)?;
    let (train_set, test_set) = (d.train(), d.test());
    eprintln!(
        "training {} parameters on {} clouds, testing on {}",
        model.parameter_count(),
        train_set.len(),
        test_set.len()
    );
    let log = train_with(&mut model, &train_set, &test_set, &tcfg, |r| {
        eprintln!("{}", TrainingLog::csv_row(mcfg.task, r));
    })?;
    write(out.join("log.csv"), &log.to_csv())?;
    write_checkpoint(&out.join("model.ckpt"), &model.state())?;
    write(out.join("run.cfg"), &cfg.resolved_text(&mcfg, &tcfg))?;
    if let Some(last) = log.last() {
        println!("{}", TrainingLog::csv_header(mcfg.task));
        println!("{}", TrainingLog::csv_row(mcfg.task, last));
    }
    Ok(())
}

pub fn eval(common: &Common, data: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(common, &[])?;
    let out = required_out(common)?;
    let ckpt = checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("--checkpoint <file> (or the `checkpoint` key) is required".into()))?;
    let d = dataset(&cfg, data)?;
    let mcfg = model_config(&cfg, &d);
    let mut model = Model::build(mcfg, cfg.seed)?;
    model.load_state(&read_checkpoint(&ckpt)?)?;
    let tcfg = cfg.train_config();
    let mut csv = String::from("split,samples,accuracy,f1,iou,dsc\n");
    for (name, part) in [("test", d.test()), ("train", d.train())] {
        if part.is_empty() {
            continue;
        }
        let r = evaluate(&model, &part, tcfg.test_batch_size)?;
        let row = format!(
            "{name},{},{},{},{},{}",
            part.len(),
            r.accuracy,
            medpt::network::format_metric(r.f1),
            medpt::network::format_metric(r.headline_iou()),
            medpt::network::format_metric(r.headline_dsc())
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    write(out.join("metrics.csv"), &csv)
}

pub fn bench(common: &Common, n_list: Option<String>, mode: Option<String>) -> Result<(), CliError> {
    let cfg = load_config(common, &[("n_list", n_list), ("mode", mode)])?;
    if cfg.n_list.is_empty() || cfg.n_list.contains(&0) {
        return Err(CliError::Usage("--n-list needs positive point counts".into()));
    }
    let m = cfg.model_config(cfg.model_preset());
    let shape = BenchShape {
        k: m.k,
        c_k: m.c_k,
        c_v: m.c_v,
        heads: m.heads,
    };
    let mut csv = format!("{}\n", BenchRow::CSV_HEADER);
    println!("{}", BenchRow::CSV_HEADER);
    for &n in &cfg.n_list {
        let row = bench_attention(cfg.bench_mode, n, &shape, cfg.runs.max(1), cfg.seed)?;
        if row.flops != expected_flops(cfg.bench_mode, n, &shape) {
            return Err(CliError::Run(Error::Numeric(format!(
                "counted {} multiply-adds at N={n}, closed form says {}",
                row.flops,
                expected_flops(cfg.bench_mode, n, &shape)
            ))));
        }
        println!("{}", row.csv());
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    if let Some(out) = out_dir(common)? {
        write(out.join("bench.csv"), &csv)?;
    }
    Ok(())
}

fn gradcheck_clouds(cfg: &RunConfig) -> medpt::Result<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.gradcheck_clouds)
        .map(|i| match cfg.task {
            Task::Classify => {
                let class = i % cfg.shapes.len().max(1);
                let kind = *cfg.shapes.get(class).ok_or_else(|| Error::Config("no shapes configured".into()))?;
                Ok(shape_cloud(kind, cfg.gradcheck_points, cfg.noise, &mut rng)?.with_class(class as i32))
            }
            Task::Segment => vessel_cloud(cfg.gradcheck_points, &mut rng).map(|(c, _)| c),
        })
        .collect()
}

pub fn gradcheck(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common, &[])?;
    let mut mcfg = cfg.model_config(ModelConfig::tiny(cfg.task));
    if cfg.task == Task::Classify && cfg.model.num_classes.is_none() {
        mcfg.num_classes = cfg.shapes.len().max(2);
    }
    let model = Model::build(mcfg, cfg.seed)?;
    let clouds = gradcheck_clouds(&cfg)?;
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let report = model_gradient_check(&model, &refs, cfg.gradcheck_eps, 0.2, cfg.seed)?;
    let worst = report
        .worst
        .map(|(p, c)| format!("{}[{c}]", model.params().names()[p]))
        .unwrap_or_else(|| "none".into());
    let text = format!(
        "max_rel_error = {:e}\ncoordinates = {}\nworst = {worst}\neps = {:e}\ntolerance = {:e}\n",
        report.max_rel_error, report.coordinates, cfg.gradcheck_eps, cfg.gradcheck_tol
    );
    print!("{text}");
    if let Some(out) = out_dir(common)? {
        write(out.join("gradcheck.txt"), &text)?;
    }
    if !(report.max_rel_error < cfg.gradcheck_tol) {
        return Err(CliError::Run(Error::Numeric(format!(
            "max relative error {:e} at {worst} exceeds {:e}",
            report.max_rel_error, cfg.gradcheck_tol
        ))));
    }
    Ok(())
}
