//! Pipeline stages driven by a [`RunConfig`]. Each stage is a pure function of
//! its config and input artifacts, and echoes the effective config into
//! everything it writes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{LinearOptions, MlpOptions};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    load_dataset, pca_whiten, save_dataset, split_dataset, synth_mixture, DataFormat, DataSet, PcaFit, Representation,
    Split, SplitSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate, EvalReport, StandardLearner};
use crate::metalearn::{meta_train, LearnerKind, MetaConfig, Monitor};
use crate::partition::{
    generate_partitions, hyperplane_partitions, partition_from_labels, partition_from_text, partition_to_text,
    pixel_partition, random_partition_of, HyperplaneOptions, KMeansInit, KMeansOptions, Partition, ScalingMode,
};
use crate::seed::{self, streams};
use crate::taskgen::{
    make_task_stream, mix_task_streams, sample_supervised_task, supervised_tasks, tasks_fingerprint,
    tasks_from_manifest, tasks_to_manifest, EpisodeShape, Task, TaskStreamConfig,
};

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Sidecar holding the effective config of a binary artifact.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut text = String::new();
    for line in cfg.echo() {
        let _ = writeln!(text, "# {line}");
    }
    write_file(&sidecar_path(path), text.as_bytes())
}

fn required(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.path(key)
        .ok_or_else(|| Error::Config(format!("`{key}` must name a file")))
}

fn existing(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = required(cfg, key)?;
    if !p.exists() {
        return Err(Error::Data(format!("missing artifact `{key}`: {}", p.display())));
    }
    Ok(p)
}

pub fn load_config_dataset(cfg: &RunConfig) -> Result<DataSet> {
    let path = existing(cfg, "dataset")?;
    load_dataset(&path, DataFormat::from_path(&path))
}

fn shape(cfg: &RunConfig, queries_key: &str) -> Result<EpisodeShape> {
    EpisodeShape::new(cfg.get("way")?, cfg.get("shots")?, cfg.get(queries_key)?)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let spec = SynthSpec {
        num_classes: cfg.get("num_classes")?,
        per_class: cfg.get("per_class")?,
        d_in: cfg.get("d_in")?,
        d_z: cfg.get("d_z")?,
        noise: cfg.get("noise")?,
        emb_noise: cfg.get("emb_noise")?,
        center_scale: cfg.get("center_scale")?,
        seed: cfg.get("seed")?,
    };
    let mut ds = synth_mixture(&spec)?;
    let mut rng = seed::rng(seed::mix(spec.seed, streams::PARTITION, u64::MAX));
    ds = match cfg.str("split") {
        "none" => ds,
        "class" => {
            let counts: Vec<usize> = cfg.list("split_classes")?;
            if counts.len() != 3 || counts.iter().sum::<usize>() != spec.num_classes {
                return Err(Error::Config(format!(
                    "split_classes must give three counts summing to {}",
                    spec.num_classes
                )));
            }
            let (a, b) = (counts[0], counts[0] + counts[1]);
            let spec = SplitSpec::ByClass {
                train: (0..a).collect(),
                val: (a..b).collect(),
                test: (b..spec.num_classes).collect(),
            };
            split_dataset(&ds, &spec, &mut rng)?
        }
        "fraction" => {
            let f: Vec<f64> = cfg.list("split_fractions")?;
            if f.len() != 3 {
                return Err(Error::Config("split_fractions needs three values".into()));
            }
            split_dataset(&ds, &SplitSpec::ByFraction { train: f[0], val: f[1], test: f[2] }, &mut rng)?
        }
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let pca: usize = cfg.get("pca_dims")?;
    if pca > 0 {
        let fit = match cfg.str("pca_fit") {
            "meta-train" => PcaFit::MetaTrain,
            "all" => PcaFit::AllRows,
            other => return Err(Error::Config(format!("unknown pca_fit `{other}`"))),
        };
        ds = pca_whiten(&ds, pca, fit)?;
    }
    let out = required(cfg, "dataset")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&ds, &out, DataFormat::from_path(&out))?;
    write_sidecar(&out, cfg)?;
    Ok(out)
}

fn kmeans_options(cfg: &RunConfig) -> Result<KMeansOptions> {
    Ok(KMeansOptions {
        max_iter: cfg.get("kmeans_max_iter")?,
        init: match cfg.str("kmeans_init") {
            "random" => KMeansInit::RandomPoints,
            "plusplus" | "k-means++" => KMeansInit::PlusPlus,
            other => return Err(Error::Config(format!("unknown kmeans_init `{other}`"))),
        },
        ..KMeansOptions::default()
    })
}

/// Builds the partitions selected by `method` without writing them.
pub fn build_partitions(cfg: &RunConfig, ds: &DataSet) -> Result<Vec<Partition>> {
    let count: usize = cfg.get("partitions")?;
    let k: usize = cfg.get("k")?;
    let s: u64 = cfg.get("seed")?;
    let part_seed = |p: usize| seed::mix(s, streams::PARTITION, p as u64);
    if count == 0 {
        return Err(Error::Config("partitions must be positive".into()));
    }
    match cfg.str("method") {
        "kmeans" => {
            let scaling = match cfg.str("scaling") {
                "random" => ScalingMode::Random,
                "ones" => ScalingMode::Ones,
                other => return Err(Error::Config(format!("unknown scaling `{other}`"))),
            };
            generate_partitions(ds, count, k, s, scaling, &kmeans_options(cfg)?)
        }
        "hyperplane" => {
            let opts = HyperplaneOptions {
                pool_size: cfg.get("hyperplane_pool")?,
                retry_cap: cfg.get("retry_cap")?,
            };
            let min_size = cfg.get::<usize>("shots")? + cfg.get::<usize>("train_queries")?;
            hyperplane_partitions(ds, count, cfg.get("way")?, cfg.get("margin")?, min_size, s, &opts)
        }
        "random" => (0..count).map(|p| random_partition_of(ds, k, part_seed(p))).collect(),
        "pixel" => {
            let opts = kmeans_options(cfg)?;
            (0..count).map(|p| pixel_partition(ds, k, part_seed(p), &opts)).collect()
        }
        "labels" => Ok(vec![partition_from_labels(ds, Split::MetaTrain)?]),
        other => Err(Error::Config(format!("unknown partition method `{other}`"))),
    }
}

const MANIFEST: &str = "manifest.txt";

pub fn cmd_partition(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ds = load_config_dataset(cfg)?;
    let parts = build_partitions(cfg, &ds)?;
    let dir = required(cfg, "partitions_dir")?;
    let echo = cfg.echo();
    let mut manifest = String::from("# umeta partition manifest\n");
    for line in &echo {
        let _ = writeln!(manifest, "# {line}");
    }
    manifest.push_str("file,seed,provenance,clusters\n");
    let mut written = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let name = format!("partition_{i:03}.txt");
        let path = dir.join(&name);
        write_file(&path, partition_to_text(p, &echo).as_bytes())?;
        let _ = writeln!(manifest, "{name},{},{},{}", p.seed(), p.provenance(), p.num_clusters());
        written.push(path);
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(written)
}

/// Reads every partition listed in a directory's manifest.
pub fn load_partitions(dir: &Path) -> Result<Vec<Partition>> {
    let manifest = read_text(&dir.join(MANIFEST))?;
    manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("file,") && !l.trim().is_empty())
        .map(|l| {
            let name = l.split(',').next().unwrap_or_default();
            partition_from_text(&read_text(&dir.join(name))?)
        })
        .collect()
}

pub fn cmd_gen_tasks(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = load_config_dataset(cfg)?;
    let split: Split = cfg.get("task_split")?;
    let repr: Representation = cfg.get("repr")?;
    let tasks = supervised_tasks(&ds, split, shape(cfg, "queries")?, repr, cfg.get("num_tasks")?, cfg.get("seed")?)?;
    let out = required(cfg, "tasks")?;
    write_file(&out, tasks_to_manifest(&tasks, &cfg.echo()).as_bytes())?;
    Ok(out)
}

pub fn meta_config(cfg: &RunConfig) -> Result<MetaConfig> {
    let learner: LearnerKind = cfg.get("learner")?;
    let mc = MetaConfig {
        learner,
        outer_lr: cfg.get("outer_lr")?,
        inner_lr: cfg.get("inner_lr")?,
        task_batch_size: cfg.get("task_batch_size")?,
        inner_steps_train: cfg.get("inner_steps")?,
        adapt_steps_eval: cfg.get("adapt_steps")?,
        meta_iterations: cfg.get("iterations")?,
        shape: shape(cfg, "train_queries")?,
        first_order: cfg.get("first_order")?,
        hidden: cfg.list("hidden")?,
        seed: cfg.get("seed")?,
    };
    mc.validate()?;
    Ok(mc)
}

pub fn cmd_meta_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = load_config_dataset(cfg)?;
    let parts = load_partitions(&required(cfg, "partitions_dir")?)?;
    let mc = meta_config(cfg)?;
    let repr: Representation = cfg.get("repr")?;
    let in_dim = ds.features(repr)?.cols();
    let init = match cfg.path("init_checkpoint") {
        Some(p) => checkpoint::load(&p)?,
        None => mc.init_params(in_dim)?,
    };
    let total = mc.meta_iterations * mc.task_batch_size;
    let mut scfg = TaskStreamConfig::new(mc.shape, total, mc.seed);
    scfg.repr = repr;
    let stream = make_task_stream(scfg, &parts, &ds)?;
    let ratio: f64 = cfg.get("mix_ratio")?;
    let val_every: usize = cfg.get("val_every")?;
    let val_tasks = if val_every > 0 {
        let eval_shape = EpisodeShape::new(mc.shape.way, mc.shape.shots, 5)?;
        supervised_tasks(&ds, Split::MetaVal, eval_shape, repr, 100, seed::mix(mc.seed, streams::EVAL, 1))?
    } else {
        Vec::new()
    };
    let val_eval = |p: &crate::nn::ModelParams| -> Result<f64> {
        let learner = standard_learner(cfg, mc.learner, Some(p.clone()), repr)?;
        Ok(evaluate(&learner, &val_tasks, &ds, "meta-val", 0)?.mean())
    };
    let monitor = (val_every > 0).then(|| Monitor {
        every: val_every,
        evaluate: &val_eval,
    });
    let trained = if ratio < 1.0 {
        let shape = mc.shape;
        let ds = &ds;
        let labeled = (0..total).map(move |t| {
            let mut rng = seed::rng(seed::mix(mc.seed, streams::TASK_BLOCK, t as u64));
            sample_supervised_task(ds, Split::MetaTrain, shape, repr, &mut rng)
        });
        let mixed = mix_task_streams(stream, labeled, ratio, mc.seed)?.map(|(_, t)| t);
        meta_train(&mc, mixed, init, monitor)?
    } else {
        meta_train(&mc, stream, init, monitor)?
    };
    let out = required(cfg, "checkpoint")?;
    write_file(&out, &checkpoint::encode(&trained.params))?;
    write_sidecar(&out, cfg)?;
    if let Some(log_path) = cfg.path("train_log") {
        let mut text = String::new();
        for line in cfg.echo() {
            let _ = writeln!(text, "# {line}");
        }
        text.push_str(&trained.log.to_csv());
        write_file(&log_path, text.as_bytes())?;
    }
    Ok(out)
}

fn standard_learner(
    cfg: &RunConfig,
    kind: LearnerKind,
    params: Option<crate::nn::ModelParams>,
    repr: Representation,
) -> Result<StandardLearner> {
    let params = params.ok_or_else(|| Error::Config("learner needs a checkpoint".into()))?;
    Ok(match kind {
        LearnerKind::Maml => StandardLearner::Maml {
            params,
            inner_lr: cfg.get("inner_lr")?,
            steps: cfg.get("adapt_steps")?,
            repr,
        },
        LearnerKind::ProtoNet => StandardLearner::ProtoNet { params, repr },
    })
}

/// The learner named by `eval_learner`, with any artifact it needs loaded.
pub fn build_learner(cfg: &RunConfig, ds: &DataSet) -> Result<StandardLearner> {
    let repr: Representation = cfg.get("repr")?;
    let name = cfg.str("eval_learner");
    Ok(match name {
        "maml" | "protonet" => {
            let ckpt = checkpoint::load(existing(cfg, "checkpoint")?)?;
            standard_learner(cfg, name.parse()?, Some(ckpt), repr)?
        }
        "scratch" => StandardLearner::Scratch {
            hidden: cfg.list("hidden")?,
            inner_lr: cfg.get("inner_lr")?,
            steps: cfg.get("adapt_steps")?,
            repr,
            seed: cfg.get("seed")?,
        },
        "knn" => {
            let k: usize = cfg.get("knn_k")?;
            StandardLearner::Knn { k: (k > 0).then_some(k) }
        }
        "linear" => StandardLearner::Linear(LinearOptions {
            l2: cfg.get("linear_l2")?,
            max_iter: cfg.get("linear_max_iter")?,
            ..LinearOptions::default()
        }),
        "mlp" => StandardLearner::Mlp(MlpOptions {
            hidden: cfg.get("mlp_hidden")?,
            dropout: cfg.get("mlp_dropout")?,
            lr: cfg.get("mlp_lr")?,
            steps: cfg.get("mlp_steps")?,
            seed: cfg.get("seed")?,
        }),
        "cluster-match" => {
            let p = match cfg.path("cluster_partition") {
                Some(path) => partition_from_text(&read_text(&path)?)?,
                None => load_partitions(&required(cfg, "partitions_dir")?)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Data("partition manifest is empty".into()))?,
            };
            let space = p.space();
            StandardLearner::ClusterMatch(p.with_member_means(ds.features(space)?)?)
        }
        other => return Err(Error::Config(format!("unknown eval_learner `{other}`"))),
    })
}

pub fn load_tasks(cfg: &RunConfig, ds: &DataSet) -> Result<Vec<Task>> {
    tasks_from_manifest(&read_text(&existing(cfg, "tasks")?)?, ds)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = load_config_dataset(cfg)?;
    let tasks = load_tasks(cfg, &ds)?;
    let learner = build_learner(cfg, &ds)?;
    let report = evaluate(&learner, &tasks, &ds, &tasks_fingerprint(&tasks), cfg.get("seed")?)?;
    write_file(&required(cfg, "report")?, report.to_csv(&cfg.echo()).as_bytes())?;
    Ok(report)
}

/// Comparison table for the given report files.
pub fn cmd_compare(paths: &[PathBuf]) -> Result<String> {
    let reports = paths
        .iter()
        .map(|p| EvalReport::from_csv(&read_text(p)?))
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&reports)?;
    Ok(format!("# version={}\n{}", crate::config::VERSION, table.to_csv()))
}
