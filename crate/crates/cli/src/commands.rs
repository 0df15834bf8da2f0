//! Subcommand implementations. Results directory layout:
//!
//! ```text
//! config.toml  models/  training.json  odometry.tum  keyframes.json
//! k<k>_top<t>/cell.json slam.tum graph.g2o
//! ```
//!
//! Evaluation adds `report.json`, `table.txt`, `roc.svg`, `pr.svg` and, per
//! cell, `records.jsonl`, `roc.csv`, `pr.csv` and `trajectory.svg`.

use std::fs;
use std::io::Write;
use std::path::Path;

use radarloop::alignment::AlignmentClassifier;
use radarloop::evaluation::{sample_at, CurvePoint};
use radarloop::geometry::Trajectory;
use radarloop::keyframing::Keyframe;
use radarloop::loop_verification::LoopClassifier;
use radarloop::pose_graph::build_graph;

use crate::config::PipelineConfig;
use crate::dataset::{self, read_dataset, read_json, read_tum, write_json, write_tum};
use crate::error::{CliError, Result};
use crate::pipeline::{
    run_frontend, run_grid, simulate, train_alignment, train_loop, AlignmentTraining, CellResult, Frontend, Models,
    TrainingSummary,
};
use crate::plot::{curve_svg, trajectory_svg};
use crate::report::{build_report, RunReport};

pub const MODELS_DIR: &str = "models";
pub const ALIGNMENT_MODEL: &str = "alignment.json";
pub const TRAINING: &str = "training.json";
pub const KEYFRAMES: &str = "keyframes.json";
pub const ODOMETRY: &str = "odometry.tum";
pub const REPORT: &str = "report.json";

pub fn loop_model_name(k: usize) -> String {
    format!("loop_k{k}.json")
}

pub fn cell_dir_name(k: usize, top_k: usize) -> String {
    format!("k{k}_top{top_k}")
}

/// Layers: the dataset's stored config, then `--config`, then `--set`.
pub fn resolve_config(dataset: Option<&Path>, config: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut layers = Vec::new();
    if let Some(d) = dataset {
        let p = d.join(dataset::CONFIG);
        if p.exists() {
            layers.push(fs::read_to_string(&p)?);
        }
    }
    if let Some(p) = config {
        layers.push(fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?);
    }
    let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    PipelineConfig::from_layers(&refs, overrides)
}

pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<usize> {
    let seq = simulate(cfg, &cfg.sim.path, cfg.seed)?;
    dataset::write_dataset(out, &seq.scans, Some(&seq.ground_truth), Some(cfg))?;
    Ok(seq.scans.len())
}

/// Odometry trajectory plus one inlier cloud per scan.
pub fn cmd_odometry(dataset_dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Frontend> {
    let data = read_dataset(dataset_dir)?;
    let front = run_frontend(&data.scans, cfg)?;
    let inliers = out.join("inliers");
    fs::create_dir_all(&inliers)?;
    write_tum(&out.join(ODOMETRY), &front.odometry.trajectory)?;
    for (i, cloud) in front.odometry.inlier_clouds.iter().enumerate() {
        dataset::write_points_csv(&dataset::scan_file(&inliers, i), cloud)?;
    }
    Ok(front)
}

/// Self-supervised alignment training on the dataset itself.
pub fn cmd_train_align(dataset_dir: &Path, cfg: &PipelineConfig, models: &Path) -> Result<AlignmentTraining> {
    let data = read_dataset(dataset_dir)?;
    let front = run_frontend(&data.scans, cfg)?;
    let training = train_alignment(&front, cfg)?;
    fs::create_dir_all(models)?;
    write_json(&models.join(ALIGNMENT_MODEL), &training.classifier)?;
    write_json(&models.join("alignment_evaluation.json"), &training.evaluation)?;
    Ok(training)
}

/// Loop classifiers for every grid descriptor size; needs ground truth.
pub fn cmd_train_loop(dataset_dir: &Path, cfg: &PipelineConfig, models: &Path) -> Result<Vec<(usize, LoopClassifier)>> {
    let data = read_dataset(dataset_dir)?;
    let gt = data
        .ground_truth
        .ok_or_else(|| CliError::Data("loop training needs ground truth in the manifest".into()))?;
    let align: AlignmentClassifier = read_model(&models.join(ALIGNMENT_MODEL))?;
    let front = run_frontend(&data.scans, cfg)?;
    let mut out = Vec::new();
    for &k in &cfg.grid.keyframes {
        let (clf, _) = train_loop(&front, &gt, k, &align, cfg)?;
        write_json(&models.join(loop_model_name(k)), &clf)?;
        out.push((k, clf));
    }
    Ok(out)
}

fn read_model<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::Config(format!("missing model file {}", path.display())));
    }
    read_json(path)
}

pub fn load_models(dir: &Path, cfg: &PipelineConfig) -> Result<Models> {
    let alignment = read_model(&dir.join(ALIGNMENT_MODEL))?;
    let loops = cfg
        .grid
        .keyframes
        .iter()
        .map(|&k| Ok((k, read_model(&dir.join(loop_model_name(k)))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Models { alignment, loops })
}

fn save_models(dir: &Path, models: &Models) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(ALIGNMENT_MODEL), &models.alignment)?;
    for (k, clf) in &models.loops {
        write_json(&dir.join(loop_model_name(*k)), clf)?;
    }
    Ok(())
}

/// Full pipeline. Models come from `models_dir` or, when absent and
/// training is enabled, from the internal training sequence. Evaluation
/// runs when the dataset carries ground truth.
pub fn cmd_slam(
    dataset_dir: &Path,
    cfg: &PipelineConfig,
    models_dir: Option<&Path>,
    out: &Path,
) -> Result<Option<RunReport>> {
    let data = read_dataset(dataset_dir)?;
    let (models, training) = match models_dir {
        Some(d) => (load_models(d, cfg)?, None),
        None if cfg.loop_training.enabled => {
            let (m, s) = crate::pipeline::train_models(cfg)?;
            (m, Some(s))
        }
        None => {
            return Err(CliError::Config(
                "no model directory given and loop_training.enabled is false".into(),
            ))
        }
    };
    let front = run_frontend(&data.scans, cfg)?;
    let cells = run_grid(&front, &models, cfg)?;

    fs::create_dir_all(out)?;
    fs::write(out.join(dataset::CONFIG), cfg.to_toml())?;
    save_models(&out.join(MODELS_DIR), &models)?;
    if let Some(t) = &training {
        write_json(&out.join(TRAINING), t)?;
    }
    write_tum(&out.join(ODOMETRY), &front.odometry.trajectory)?;
    write_json(&out.join(KEYFRAMES), &front.keyframes)?;
    let poses: Vec<_> = front.keyframes.iter().map(|k| k.pose).collect();
    let lengths: Vec<f64> = front.keyframes.iter().map(|k| k.path_length).collect();
    for c in &cells {
        let dir = out.join(cell_dir_name(c.keyframes, c.top_k));
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("cell.json"), c)?;
        write_tum(&dir.join("slam.tum"), &c.slam)?;
        let graph =
            build_graph(&poses, &lengths, &c.loops, &cfg.graph).map_err(|e| CliError::Numerical(e.to_string()))?;
        fs::write(dir.join("graph.g2o"), graph.to_g2o(&c.slam.poses))?;
    }
    match data.ground_truth {
        Some(gt) => Ok(Some(evaluate_results(out, cfg, &front.keyframes, &cells, &gt, training.as_ref())?)),
        None => Ok(None),
    }
}

/// Re-evaluates a results directory against a ground-truth trajectory.
pub fn cmd_eval(results: &Path, gt_path: &Path) -> Result<RunReport> {
    let cfg = PipelineConfig::load(Some(&results.join(dataset::CONFIG)), &[])?;
    let keyframes: Vec<Keyframe> = read_json(&results.join(KEYFRAMES))?;
    let cells = cfg
        .grid
        .cells()
        .iter()
        .map(|&(k, t)| read_json(&results.join(cell_dir_name(k, t)).join("cell.json")))
        .collect::<Result<Vec<CellResult>>>()?;
    let training_path = results.join(TRAINING);
    let training: Option<TrainingSummary> =
        if training_path.exists() { Some(read_json(&training_path)?) } else { None };
    let gt = read_tum(gt_path)?;
    evaluate_results(results, &cfg, &keyframes, &cells, &gt, training.as_ref())
}

fn keyframe_trajectory(keyframes: &[Keyframe]) -> Result<Trajectory> {
    Trajectory::from_parts(
        keyframes.iter().map(|k| k.timestamp).collect(),
        keyframes.iter().map(|k| k.pose).collect(),
    )
    .map_err(|e| CliError::Data(e.to_string()))
}

fn evaluate_results(
    out: &Path,
    cfg: &PipelineConfig,
    keyframes: &[Keyframe],
    cells: &[CellResult],
    gt: &Trajectory,
    training: Option<&TrainingSummary>,
) -> Result<RunReport> {
    let odometry = keyframe_trajectory(keyframes)?;
    let scans = read_tum(&out.join(ODOMETRY)).map(|t| t.len()).unwrap_or(0);
    let mut report = build_report(cfg, scans, keyframes, &odometry, cells, gt)?;
    if let Some(t) = training {
        report.extra.insert("training".into(), serde_json::to_value(t)?);
    }
    write_json(&out.join(REPORT), &report)?;
    fs::write(out.join("table.txt"), report.table())?;

    // ground truth drawn in the estimate's frame, anchored at the first keyframe
    let gt_kf = sample_at(gt, &odometry.stamps).map_err(|e| CliError::Data(e.to_string()))?;
    let anchor = odometry.poses[0].compose(&gt_kf.poses[0].inverse());
    let gt_plot = Trajectory::from_parts(gt_kf.stamps.clone(), gt_kf.poses.iter().map(|p| anchor.compose(p)).collect())
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut roc_series = Vec::new();
    let mut pr_series = Vec::new();
    for (c, rep) in cells.iter().zip(&report.cells) {
        let dir = out.join(cell_dir_name(c.keyframes, c.top_k));
        fs::create_dir_all(&dir)?;
        let mut jsonl = Vec::new();
        for r in &rep.records {
            serde_json::to_writer(&mut jsonl, r)?;
            jsonl.push(b'\n');
        }
        fs::write(dir.join("records.jsonl"), jsonl)?;
        write_curve_csv(&dir.join("roc.csv"), &rep.roc_curve)?;
        write_curve_csv(&dir.join("pr.csv"), &rep.pr_curve)?;
        let name = cell_dir_name(c.keyframes, c.top_k);
        fs::write(
            dir.join("trajectory.svg"),
            trajectory_svg(&format!("trajectory {name}"), Some(&gt_plot), &odometry, &c.slam, &rep.records),
        )?;
        roc_series.push((name.clone(), rep.roc_curve.iter().map(|p| (p.fpr(), p.tpr())).collect()));
        pr_series.push((name, rep.pr_curve.iter().skip(1).map(|p| (p.recall(), p.precision())).collect()));
    }
    fs::write(out.join("roc.svg"), curve_svg("loop candidate ROC", "false positive rate", "true positive rate", &roc_series))?;
    fs::write(out.join("pr.svg"), curve_svg("loop detection precision-recall", "recall", "precision", &pr_series))?;
    Ok(report)
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "threshold,tp,fp,tn,fn,precision,recall,fpr")?;
    for p in curve {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            p.threshold,
            p.tp,
            p.fp,
            p.tn,
            p.fn_,
            p.precision(),
            p.recall(),
            p.fpr()
        )?;
    }
    Ok(())
}
