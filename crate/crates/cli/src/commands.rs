use std::path::{Path, PathBuf};

use clap::Args;
use lcz_core::eval::{classify_map, report, save_map, PatchClassifier};
use lcz_core::forest::{train_rf, RandomForest};
use lcz_core::nn::gradcheck::{gradient_check, Component};
use lcz_core::nn::io::{load_model, save_model, ModelKind};
use lcz_core::nn::train::{train_mscnn, History};
use lcz_core::nn::{Architecture, ChannelNorm, MscnnModel};
use lcz_core::raster::{compute_ndvi, load_raster, map_point_to_pixel, save_raster, RasterGrid};
use lcz_core::sampling::{
    augment_rebalance, build_dataset, load_dataset, parse_source_flags, read_points, rule_assist_label, save_dataset,
    stratified_split, summarize_site, write_points, LabeledPoint, SampleSet, SiteLayers, Split,
};
use lcz_core::synth::{generate_dataset, generate_scene, Scenario};
use lcz_core::transfer::{attach_heads, train_transfer};
use lcz_core::{write_atomic, Error, LczClass};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Command, Failure};

const GRADIENT_TOLERANCE: f64 = 1e-5;

fn parse_class(s: &str) -> Result<LczClass, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// means | texture | shifted
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Comma-separated classes, e.g. LCZ1,LCZ8,A,G
    #[arg(long, value_delimiter = ',', value_parser = parse_class)]
    pub classes: Option<Vec<LczClass>>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub blob_size_min: Option<usize>,
    #[arg(long)]
    pub blob_size_max: Option<usize>,
    /// Keep at most this many labeled points per scene
    #[arg(long)]
    pub blob_count: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Write a dataset with this many patches per class instead of a scene
    #[arg(long)]
    pub n_per_class: Option<usize>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown scenario {s:?} (means, texture, shifted)"))
}

#[derive(Args, Debug)]
pub struct NdviArgs {
    /// Multi-band raster header
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub nir_band: Option<usize>,
    #[arg(long)]
    pub red_band: Option<usize>,
}

#[derive(Args, Debug)]
pub struct LabelAssistArgs {
    /// Directory holding bands, ndvi, height, building_fraction, impervious
    /// and water rasters (`<name>.rawg`), as written by `synth`
    #[arg(long)]
    pub layers: PathBuf,
    /// CSV with x, y and optional lcz and source columns; flags travel in
    /// source as `flags=industrial|lightweight|shrub`
    #[arg(long)]
    pub points: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Multi-band raster header
    #[arg(long)]
    pub raster: PathBuf,
    /// Labeled points CSV (x, y, lcz, source)
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to the largest class count
    #[arg(long)]
    pub target_per_class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// train,val,test fractions summing to 1
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct TrainRfArgs {
    /// Split dataset; an untagged dataset is used whole
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainCnnArgs {
    /// Dataset with train and val split tags
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train for max_epochs regardless of validation loss
    #[arg(long)]
    pub no_early_stopping: bool,
    /// Finite-difference spot check of the model gradient before training
    #[arg(long)]
    pub gradient_check: bool,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Pretrained network
    #[arg(long)]
    pub backbone: PathBuf,
    /// Target-domain dataset with train and val split tags
    #[arg(long)]
    pub dataset: PathBuf,
    /// Last frozen layer: 0 is the multi-scale layer, 1..=5 the blocks,
    /// -1 freezes nothing; defaults to the last block
    #[arg(long, allow_negative_numbers = true)]
    pub freeze_through: Option<i64>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_early_stopping: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Random forest (JSON) or network file
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset; the test split is used when tagged
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Multi-band raster header
    #[arg(long)]
    pub raster: PathBuf,
    /// Output cell size in meters
    #[arg(long)]
    pub cell_size: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// all, conv, batchnorm, dense, pool, relu, softmax or model
    #[arg(long, default_value = "all")]
    pub component: String,
}

/// Folds subcommand flags into the configuration.
pub fn apply_overrides(command: &Command, cfg: &mut RunConfig) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => {
            let s = &mut cfg.scenario;
            set(&mut s.scenario, a.scenario);
            set(&mut s.classes, a.classes.clone());
            set(&mut s.width, a.width);
            set(&mut s.height, a.height);
            set(&mut s.blob_size_min, a.blob_size_min);
            set(&mut s.blob_size_max, a.blob_size_max);
            if a.blob_count.is_some() {
                s.blob_count = a.blob_count;
            }
            set(&mut s.noise_sigma, a.noise_sigma);
        }
        Command::Ndvi(a) => {
            set(&mut cfg.ndvi.nir_band, a.nir_band);
            set(&mut cfg.ndvi.red_band, a.red_band);
        }
        Command::Sample(a) => set(&mut cfg.patch_size, a.patch_size),
        Command::Augment(a) => {
            if a.target_per_class.is_some() {
                cfg.augment.target_per_class = a.target_per_class;
            }
        }
        Command::Split(a) => {
            if let Some(r) = &a.ratios {
                let [train, val, test] = r[..] else {
                    return Err(Failure::Usage(format!("--ratios takes three comma-separated values, got {}", r.len())));
                };
                cfg.split.ratios = [train, val, test];
            }
        }
        Command::TrainRf(a) => {
            set(&mut cfg.forest.n_trees, a.n_trees);
            set(&mut cfg.forest.max_depth, a.max_depth);
        }
        Command::TrainCnn(a) | Command::Pretrain(a) => {
            set(&mut cfg.train.max_epochs, a.max_epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.early_stop_patience, a.patience);
            if a.no_early_stopping {
                cfg.train.early_stopping = false;
            }
            if a.gradient_check {
                cfg.train.gradient_check = true;
            }
        }
        Command::Transfer(a) => {
            if a.freeze_through.is_some() {
                cfg.transfer.freeze_through = a.freeze_through;
            }
            set(&mut cfg.transfer.head_hidden, a.head_hidden);
            set(&mut cfg.train.max_epochs, a.max_epochs);
            set(&mut cfg.train.early_stop_patience, a.patience);
            if a.no_early_stopping {
                cfg.train.early_stopping = false;
            }
        }
        Command::Map(a) => set(&mut cfg.map.cell_size_m, a.cell_size),
        Command::LabelAssist(_) | Command::Eval(_) | Command::Gradcheck(_) => {}
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn out_path(out: Option<&Path>) -> Result<&Path, Failure> {
    out.ok_or_else(|| Failure::Usage("this subcommand needs --out".into()))
}

pub fn dispatch(command: &Command, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => synth(a, cfg, out_path(out)?),
        Command::Ndvi(a) => {
            let grid = load_raster(&a.input)?;
            let ndvi = compute_ndvi(&grid, cfg.ndvi.nir_band, cfg.ndvi.red_band)?;
            Ok(save_raster(&ndvi, out_path(out)?)?)
        }
        Command::LabelAssist(a) => label_assist(a, cfg, out_path(out)?),
        Command::Sample(a) => {
            let grid = load_raster(&a.raster)?;
            let points = read_points(&a.points)?;
            let (set, skipped) = build_dataset(&grid, &points, cfg.patch_size)?;
            for s in &skipped {
                log::warn!("skipped point {}: {}", s.index, s.reason);
            }
            log::info!("{} patches, {} points skipped", set.len(), skipped.len());
            Ok(save_dataset(&set, out_path(out)?)?)
        }
        Command::Augment(a) => {
            let set = load_dataset(&a.dataset)?;
            let target = match cfg.augment.target_per_class {
                Some(t) => t,
                None => set.histogram().into_iter().max().unwrap_or(0).max(1),
            };
            let augmented = augment_rebalance(&set, target, cfg.seed)?;
            log::info!("{} -> {} samples (target {target} per class)", set.len(), augmented.len());
            Ok(save_dataset(&augmented, out_path(out)?)?)
        }
        Command::Split(a) => {
            let set = load_dataset(&a.dataset)?;
            Ok(save_dataset(&stratified_split(&set, cfg.split.ratios, cfg.seed)?, out_path(out)?)?)
        }
        Command::TrainRf(a) => {
            let set = load_dataset(&a.dataset)?;
            let train = set.subset(Split::Train);
            let forest = train_rf(&train, &cfg.forest, cfg.seed)?;
            Ok(forest.save(out_path(out)?)?)
        }
        Command::TrainCnn(a) => train_cnn(a, cfg, out_path(out)?),
        Command::Pretrain(a) => train_cnn(a, cfg, out_path(out)?),
        Command::Transfer(a) => transfer(a, cfg, out_path(out)?),
        Command::Eval(a) => {
            let model = load_classifier(&a.model)?;
            let set = load_dataset(&a.dataset)?;
            let r = report(model.as_ref(), &set.subset(Split::Test))?;
            match out {
                Some(path) => r.save(path)?,
                None => println!("{}", String::from_utf8_lossy(&r.to_json()?)),
            }
            log::info!("overall accuracy {:.4}, kappa {:.4}", r.overall_accuracy, r.kappa);
            Ok(())
        }
        Command::Map(a) => {
            let model = load_classifier(&a.model)?;
            let grid = load_raster(&a.raster)?;
            let map = classify_map(model.as_ref(), &grid, cfg.map.cell_size_m)?;
            Ok(save_map(&map, out_path(out)?)?)
        }
        Command::Gradcheck(a) => gradcheck(a, cfg),
    }
}

fn synth(a: &SynthArgs, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    if let Some(n) = a.n_per_class {
        let set = generate_dataset(&cfg.scenario, n)?;
        return Ok(save_dataset(&set, out)?);
    }
    let scene = generate_scene(&cfg.scenario)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let layers: [(&str, &RasterGrid); 7] = [
        ("bands", &scene.bands),
        ("ndvi", &scene.ndvi),
        ("height", &scene.height),
        ("building_fraction", &scene.building_fraction),
        ("impervious", &scene.impervious),
        ("water", &scene.water),
        ("truth", &scene.truth),
    ];
    for (name, grid) in layers {
        save_raster(grid, out.join(format!("{name}.rawg")))?;
    }
    write_points(&scene.points, out.join("points.csv"))?;
    let mut spec = serde_json::to_vec_pretty(&cfg.scenario).map_err(Error::from)?;
    spec.push(b'\n');
    write_atomic(&out.join("scenario.json"), &spec)?;
    log::info!("{} blobs, {} labeled points", scene.blobs.len(), scene.points.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SiteRow {
    x: f64,
    y: f64,
    #[serde(default)]
    lcz: Option<String>,
    #[serde(default)]
    source: String,
}

#[derive(Serialize)]
struct LabelSummary {
    points: usize,
    labeled: usize,
    /// Points whose existing label matches the rule label.
    agree: usize,
    rules_fired: std::collections::BTreeMap<&'static str, usize>,
}

fn label_assist(a: &LabelAssistArgs, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let load = |name: &str| load_raster(a.layers.join(format!("{name}.rawg")));
    let (basemap, ndvi, height) = (load("bands")?, load("ndvi")?, load("height")?);
    let (building, impervious, water) = (load("building_fraction")?, load("impervious")?, load("water")?);
    let layers = SiteLayers {
        basemap: &basemap,
        ndvi: &ndvi,
        height: &height,
        building_fraction: &building,
        impervious: &impervious,
        water: &water,
    };
    let mut reader = csv::Reader::from_path(&a.points).map_err(Error::from)?;
    let mut labeled = Vec::new();
    let mut summary = LabelSummary {
        points: 0,
        labeled: 0,
        agree: 0,
        rules_fired: Default::default(),
    };
    for row in reader.deserialize::<SiteRow>() {
        let row = row.map_err(Error::from)?;
        summary.points += 1;
        let center = map_point_to_pixel(&basemap, row.x, row.y)?;
        let mut site = summarize_site(&layers, center, cfg.patch_size)?;
        site.flags = parse_source_flags(&row.source)?;
        let (class, rule) = rule_assist_label(&site, &cfg.rules)?;
        *summary.rules_fired.entry(rule).or_default() += 1;
        if let Some(existing) = row.lcz.as_deref().filter(|s| !s.trim().is_empty()) {
            summary.labeled += 1;
            if existing.trim().parse::<LczClass>()? == class {
                summary.agree += 1;
            }
        }
        let source = if row.source.is_empty() {
            format!("rule={rule}")
        } else {
            format!("{};rule={rule}", row.source)
        };
        labeled.push(LabeledPoint {
            x: row.x,
            y: row.y,
            label: class,
            source,
        });
    }
    write_points(&labeled, out)?;
    println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
    Ok(())
}

fn split_sets(path: &Path) -> Result<(SampleSet, SampleSet), Failure> {
    let set = load_dataset(path)?;
    if set.split_tags.is_none() {
        return Err(Failure::Usage(format!("{} has no split tags; run `split` first", path.display())));
    }
    Ok((set.subset(Split::Train), set.subset(Split::Val)))
}

fn save_history(history: &History, model_path: &Path) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(history).map_err(Error::from)?;
    bytes.push(b'\n');
    write_atomic(&model_path.with_extension("history.json"), &bytes)?;
    Ok(())
}

fn train_cnn(a: &TrainCnnArgs, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (train, val) = split_sets(&a.dataset)?;
    let arch = Architecture {
        in_channels: train.n_channels,
        patch_size: train.patch_size,
        ..cfg.architecture.clone()
    };
    let mut model = MscnnModel::<f32>::new(arch, cfg.seed)?;
    model.norm = ChannelNorm::fit(&train)?;
    let history = train_mscnn(&mut model, &train, &val, &cfg.train)?;
    log::info!("best epoch {} of {}", history.best_epoch, history.epochs.len());
    save_model(&model, ModelKind::Mscnn, out)?;
    save_history(&history, out)
}

#[derive(Serialize)]
struct TransferSummary {
    freeze_through: i64,
    trainable_params: usize,
    frozen_checksum_before: String,
    frozen_checksum_after: String,
    best_epoch: usize,
}

fn transfer(a: &TransferArgs, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (backbone, _) = load_model::<f32>(&a.backbone)?;
    let (train, val) = split_sets(&a.dataset)?;
    if train.n_channels != backbone.arch.in_channels || train.patch_size != backbone.arch.patch_size {
        return Err(Failure::Data(Error::ShapeMismatch(format!(
            "dataset has {} channels of {}px, backbone expects {} of {}px",
            train.n_channels, train.patch_size, backbone.arch.in_channels, backbone.arch.patch_size
        ))));
    }
    let freeze_through = cfg.transfer.freeze_through.unwrap_or(backbone.blocks.len() as i64);
    let mut model = attach_heads(&backbone, freeze_through, cfg.transfer.head_hidden, cfg.seed)?;
    let before = model.frozen_checksum();
    let history = train_transfer(&mut model, &train, &val, &cfg.train)?;
    let summary = TransferSummary {
        freeze_through,
        trainable_params: model.n_trainable_params(),
        frozen_checksum_before: before,
        frozen_checksum_after: model.frozen_checksum(),
        best_epoch: history.best_epoch,
    };
    model.save(out)?;
    save_history(&history, out)?;
    println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
    Ok(())
}

fn load_classifier(path: &Path) -> Result<Box<dyn PatchClassifier>, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.starts_with(b"LCZNN") {
        let (model, _) = lcz_core::nn::io::decode_model::<f32>(&bytes)?;
        Ok(Box::new(model))
    } else {
        Ok(Box::new(RandomForest::from_json(&bytes)?))
    }
}

#[derive(Serialize)]
struct GradcheckLine {
    component: &'static str,
    max_relative_error: f64,
    pass: bool,
}

fn gradcheck(a: &GradcheckArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let components: Vec<Component> = if a.component.eq_ignore_ascii_case("all") {
        Component::ALL.to_vec()
    } else {
        vec![a.component.parse().map_err(|_| {
            Failure::Usage(format!("unknown component {:?}; expected all or one of conv, batchnorm, dense, pool, relu, softmax, model", a.component))
        })?]
    };
    let mut failed = Vec::new();
    for c in components {
        let err = gradient_check(c, cfg.seed)?;
        let pass = err < GRADIENT_TOLERANCE;
        let line = GradcheckLine {
            component: c.name(),
            max_relative_error: err,
            pass,
        };
        println!("{}", serde_json::to_string(&line).map_err(Error::from)?);
        if !pass {
            failed.push(c.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "relative error >= {GRADIENT_TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}
