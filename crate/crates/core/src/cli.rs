//! The `clip3d` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::inference::Scorer;
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::io::config::PipelineConfig;
use crate::io::dataset::{data_root, load_test, load_train, sample_dir, write_sample, Split};
use crate::io::images::{load_map, load_mask, load_rgb, save_map16, save_mask, save_rgb};
use crate::io::pointgrid::read_point_grid;
use crate::metrics::{aupr, aupro, auroc, p_auroc};
use crate::model::{Clip3dModel, TextEmbeddings};
use crate::render::render_selected;
use crate::synth::{procedural_source, synthesize_anomaly};
use crate::training::{grad_check, Component, Trainer, RENDER_RADIUS};

#[derive(Debug, Parser)]
#[command(name = "clip3d", version, about = "Few-shot 3D anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (defaults to $CLIP3D_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    class: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Blend a synthetic anomaly into a normal image.
    Synth {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// Anomaly source texture; a procedural one is generated when absent.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `anomalous.png` and `mask.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render views of a textured point grid.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// 1-based view indices; defaults to the configured selection.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the first K normal samples of a class and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train without the multi-view fusion module.
        #[arg(long)]
        no_multiview: bool,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fpr_limit: Option<f64>,
        /// JSON report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write anomaly maps and scores for one sample or a whole test split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "points")]
        image: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        /// Map file format.
        #[arg(long, default_value = "png", value_parser = ["png", "pgm"])]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of the trainable components.
    Gradcheck {
        #[arg(long, conflicts_with = "component")]
        all: bool,
        #[arg(long)]
        component: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Metrics from a score CSV and, optionally, map and mask directories.
    Metrics {
        /// CSV with `name,label,score` columns (extra columns are ignored).
        #[arg(long)]
        scores: PathBuf,
        /// Directory of maps as written by `infer`.
        #[arg(long, requires = "masks")]
        maps: Option<PathBuf>,
        /// A test split directory (`<defect>/gt/<stem>.png`) or a flat directory
        /// of masks named like the maps. Samples without a mask count as normal.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_FPR_LIMIT)]
        fpr_limit: f64,
    },
    /// Write the procedural toy dataset in the on-disk layout.
    Toy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        shots: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root to write into.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command. Usage errors exit
/// with 2, runtime failures with 1.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn map_file_name(name: &str, ext: &str) -> String {
    format!("{}.{ext}", name.replace(['/', '\\'], "_"))
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            image,
            points,
            source,
            seed,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let x_plus = load_rgb(&image, None)?;
            let (h, w, _) = x_plus.dim();
            let cloud = read_point_grid(&points)?;
            let source = match source {
                Some(p) => load_rgb(&p, Some((h, w)))?,
                None => procedural_source(h, w, seed),
            };
            let sample = synthesize_anomaly(&x_plus, &cloud.depth_map(), &source, &cfg.train.synth, seed)?;
            create_dir(&out)?;
            save_rgb(&out.join("anomalous.png"), &sample.x_minus)?;
            save_mask(&out.join("mask.png"), &sample.mask)?;
            println!(
                "{}",
                json!({ "beta": sample.beta, "mask_pixels": sample.mask.iter().filter(|m| **m).count() })
            );
            Ok(0)
        }
        Command::Render {
            image,
            points,
            views,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let texture = load_rgb(&image, None)?;
            let cloud = read_point_grid(&points)?.normalized(RENDER_RADIUS);
            let indices = if views.is_empty() {
                cfg.render.selected_views.clone()
            } else {
                views
            };
            let rendered = render_selected(
                &cloud,
                &texture,
                &cfg.render.grid()?,
                &indices,
                &cfg.render.camera()?,
                &cfg.render,
            )?;
            create_dir(&out)?;
            for (i, v) in indices.iter().zip(&rendered) {
                save_rgb(&out.join(format!("view_{i:02}.png")), &v.image)?;
            }
            Ok(0)
        }
        Command::Train {
            common,
            shots,
            epochs,
            seed,
            no_multiview,
            out,
            log,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(c) = common.class {
                cfg.class_name = c;
            }
            if let Some(k) = shots {
                cfg.train.k_shot = k;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if no_multiview {
                cfg.model.multiview = false;
            }
            cfg.validate()?;
            let root = data_root(common.data.as_deref())?;
            let samples = load_train(&root, &cfg.class_name, cfg.image_size())?;
            let encoder = FrozenEncoder::new(cfg.model.encoder.clone())?;
            let text = TextEmbeddings::default_for(&encoder, &cfg.class_name)?;
            let trainer = Trainer::new(&encoder, cfg.render(), text, cfg.train.clone(), &samples)?;
            let mut model = Clip3dModel::new(cfg.model.clone())?;
            let per_epoch = cfg.train.k_shot;
            let report = trainer.run(&mut model, |r| {
                if r.shot + 1 == per_epoch {
                    eprintln!(
                        "epoch {:>4}  l_seg {:.5}  l_con {:.5}",
                        r.epoch + 1,
                        r.losses.l_seg,
                        r.losses.l_con
                    );
                }
            })?;
            let ck = Checkpoint::from_model(&model, &encoder, &cfg.class_name, cfg.render(), Some(&cfg.train));
            save_checkpoint(&out, &ck)?;
            if let Some(p) = log {
                write_json(&p, &report)?;
            }
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            fpr_limit,
            out,
            csv,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let ck = load_checkpoint(&checkpoint)?;
            let class_name = common.class.unwrap_or_else(|| ck.header.class_name.clone());
            let fpr_limit = fpr_limit.unwrap_or(cfg.fpr_limit);
            let model = ck.to_model()?;
            let encoder = ck.encoder()?;
            let text = TextEmbeddings::default_for(&encoder, &class_name)?;
            let root = data_root(common.data.as_deref())?;
            let samples = load_test(&root, &class_name, ck.header.model.encoder.image_size)?;
            let scorer = Scorer {
                model: &model,
                encoder: &encoder,
                render: ck.header.render.as_ref(),
                text: &text,
            };
            let echo = json!({
                "class_name": class_name,
                "checkpoint": checkpoint.display().to_string(),
                "model": ck.header.model,
                "render": ck.header.render,
                "train": ck.header.train,
            });
            let (report, _) = scorer.evaluate(&samples, fpr_limit, echo)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            if let Some(p) = csv {
                fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
            eprintln!(
                "I-AUROC {:.4}  AUPR {:.4}  P-AUROC {}  AUPRO {}",
                report.i_auroc,
                report.aupr,
                report.p_auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
                report.aupro.map_or("n/a".into(), |v| format!("{v:.4}")),
            );
            Ok(0)
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            points,
            format,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let class_name = common.class.unwrap_or_else(|| ck.header.class_name.clone());
            let model = ck.to_model()?;
            let encoder = ck.encoder()?;
            let text = TextEmbeddings::default_for(&encoder, &class_name)?;
            let size = ck.header.model.encoder.image_size;
            let scorer = Scorer {
                model: &model,
                encoder: &encoder,
                render: ck.header.render.as_ref(),
                text: &text,
            };
            let inputs = match (image, points) {
                (Some(img), Some(pts)) => {
                    let name = img
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let cloud = crate::io::pointgrid::resize_point_grid(&read_point_grid(&pts)?, size, size)?;
                    vec![(name, load_rgb(&img, Some((size, size)))?, cloud)]
                }
                _ => {
                    let root = data_root(common.data.as_deref())?;
                    load_test(&root, &class_name, size)?
                        .into_iter()
                        .map(|s| (s.name, s.image, s.cloud))
                        .collect()
                }
            };
            create_dir(&out)?;
            let mut scores = Vec::with_capacity(inputs.len());
            for (name, img, cloud) in &inputs {
                let p = scorer.predict(img, cloud)?;
                let file = map_file_name(name, &format);
                save_map16(&out.join(&file), &p.map.values)?;
                scores.push(json!({
                    "name": name,
                    "map": file,
                    "score": p.score.a_score,
                    "s_plus": p.score.s_plus,
                    "s_minus": p.score.s_minus,
                    "map_max": p.map.max(),
                }));
            }
            write_json(&out.join("scores.json"), &scores)?;
            Ok(0)
        }
        Command::Gradcheck {
            all,
            component,
            eps,
            tol,
            seed,
        } => {
            let components: Vec<Component> = match (all, component) {
                (_, Some(c)) => vec![c.parse()?],
                (true, None) => Component::TRAINABLE.to_vec(),
                (false, None) => return Err(Error::invalid("pass --all or --component <id>")),
            };
            let mut worst = 0.0f64;
            for c in components {
                let r = grad_check(c, eps, seed)?;
                println!(
                    "{:<12} max_rel_error {:.3e}  ({} entries)",
                    r.component, r.max_rel_error, r.entries
                );
                worst = worst.max(r.max_rel_error);
            }
            Ok(if worst <= tol { 0 } else { 1 })
        }
        Command::Metrics {
            scores,
            maps,
            masks,
            fpr_limit,
        } => {
            let rows = read_scores(&scores)?;
            let s: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let l: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let mut out = json!({ "i_auroc": auroc(&s, &l)?, "aupr": aupr(&s, &l)? });
            if let (Some(maps_dir), Some(masks_dir)) = (maps, masks) {
                let mut ms = Vec::new();
                let mut gts = Vec::new();
                for (name, _, _) in &rows {
                    let file = map_file_name(name, "png");
                    let map = load_map(&maps_dir.join(&file))?;
                    let gt = match find_mask(&masks_dir, name) {
                        Some(p) => load_mask(&p, Some(map.dim()))?,
                        None => crate::Mask::from_elem(map.dim(), false),
                    };
                    ms.push(map);
                    gts.push(gt);
                }
                out["p_auroc"] = json!(p_auroc(&ms, &gts)?);
                out["aupro"] = json!(aupro(&ms, &gts, fpr_limit)?);
                out["fpr_limit"] = json!(fpr_limit);
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(0)
        }
        Command::Toy {
            config,
            shots,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut toy = cfg.toy.clone();
            if let Some(s) = seed {
                toy.seed = s;
            }
            let class = crate::toy::TOY_CLASS;
            let good = sample_dir(&out, class, Split::Train, "good");
            for (i, s) in toy.train_samples(shots).iter().enumerate() {
                write_sample(&good, &format!("{i:03}"), &s.image, &s.cloud, None)?;
            }
            for s in toy.test_samples()? {
                let defect = if s.label { "blend" } else { "good" };
                let dir = sample_dir(&out, class, Split::Test, defect);
                write_sample(&dir, &s.name, &s.image, &s.cloud, s.mask.as_ref())?;
            }
            Ok(0)
        }
    }
}

fn find_mask(dir: &Path, name: &str) -> Option<PathBuf> {
    let mut candidates = Vec::new();
    if let Some((defect, stem)) = name.split_once('/') {
        for ext in ["png", "pgm"] {
            candidates.push(dir.join(defect).join("gt").join(format!("{stem}.{ext}")));
        }
    }
    for ext in ["png", "pgm"] {
        candidates.push(dir.join(map_file_name(name, ext)));
    }
    candidates.into_iter().find(|p| p.is_file())
}

/// `(name, label, score)` rows of a per-sample CSV.
fn read_scores(path: &Path) -> Result<Vec<(String, bool, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, 0, format!("missing `{name}` column")))
    };
    let (ni, li, si) = (col("name")?, col("label")?, col("score")?);
    let mut offset = text.lines().next().map_or(0, |l| l.len() + 1);
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::format(path, offset as u64, format!("bad {what}"));
        let name = fields.get(ni).ok_or_else(|| bad("row"))?.trim().to_string();
        let label = match fields.get(li).map(|s| s.trim()) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            _ => return Err(bad("label")),
        };
        let score = fields
            .get(si)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("score"))?;
        rows.push((name, label, score));
        offset += line.len() + 1;
    }
    Ok(rows)
}
