//! The experiment commands behind each CLI verb.
//!
//! Every command is a pure function of its [`ExperimentConfig`] and the
//! files it references: re-running a command writes byte-identical outputs,
//! with the single documented exception of timing (`timing.json` and the
//! `latency_ms` CSV column), which is measured wall-clock and therefore
//! excluded from the byte-identity guarantee.
//!
//! CSV schemas (header row first, one record per line, `,` separated,
//! floats in shortest round-trip decimal form):
//!
//! | file                   | columns                                        |
//! |------------------------|------------------------------------------------|
//! | `eval.csv`             | `bucket,range_min,range_max,ap`                |
//! | `train_loss.csv`       | `step,loss`                                    |
//! | `ablate_threshold.csv` | `tau,camera_points,radar_points,ap,latency_ms` |
//! | `fusion_grid.csv`      | `attention,dropout_trained,ap`                 |
//! | `rf_threshold.csv`     | `threshold,radar_points,ap`                    |
//! | `robustness.csv`       | `sigma,ap_plain,ap_dropout,gap`                |
//! | `hparams.csv`          | `param,value,ap`                               |

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use cramfuse::dataset::{
    load_dataset, load_heads, save_dataset, save_heads, synth_dataset, Dataset, DatasetFrame,
};
use cramfuse::error::{CramError, Result};
use cramfuse::pipeline::{
    evaluate_frames, run_frame, train_model, ModelHeads, RunOptions, TrainOptions,
};
use cramfuse::scene::{corrupt_camera, default_camera, default_radar};
use cramfuse::types::child_seed;

use crate::config::ExperimentConfig;
use crate::svg::{line_chart, Series};

/// Seed stream index reserved for evaluation-time camera corruption, so
/// paired runs (plain vs dropout model, attention on vs off) see identical
/// noise on identical frames.
const CORRUPT_STREAM: u64 = 0xC0FF;

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.iter().map(|r| r.len() + 1).sum::<usize>() + 64);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn load_eval_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(&cfg.dataset)
}

fn load_train_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(cfg.train_dataset.as_deref().unwrap_or(&cfg.dataset))
}

fn model_path(cfg: &ExperimentConfig) -> std::path::PathBuf {
    cfg.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.bin"))
}

fn load_model(path: &Path) -> Result<ModelHeads> {
    ModelHeads::from_vec(load_heads(path)?)
}

fn load_dropout_model(cfg: &ExperimentConfig) -> Result<ModelHeads> {
    let path = cfg
        .model_dropout
        .as_deref()
        .ok_or_else(|| CramError::Config("this command needs model_dropout set".into()))?;
    load_model(path)
}

/// Evaluation frames with camera noise applied, when `sigma > 0`. The noise
/// seed depends only on the root seed and the frame index.
fn eval_frames(ds: &Dataset, sigma: f64, root_seed: u64) -> Result<Vec<DatasetFrame>> {
    if sigma == 0.0 {
        return Ok(ds.frames.clone());
    }
    let stream = child_seed(root_seed, CORRUPT_STREAM);
    ds.frames
        .iter()
        .enumerate()
        .map(|(i, df)| {
            let frame = corrupt_camera(&df.frame, sigma, child_seed(stream, i as u64))?;
            Ok(DatasetFrame { frame, ..df.clone() })
        })
        .collect()
}

fn eval_ap(
    frames: &[DatasetFrame],
    ds: &Dataset,
    heads: &ModelHeads,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<f64> {
    let (_, eval) = evaluate_frames(frames, heads, &ds.camera, &ds.radar, &cfg.pipeline, opts)?;
    Ok(eval.ap)
}

/// Generate a dataset and save it under `config.dataset`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let seed = cfg.root_seed()?;
    let ds = synth_dataset(seed, cfg.frames, &cfg.scene, &default_camera(), &default_radar())?;
    save_dataset(&ds, &cfg.dataset)?;
    println!(
        "synth: wrote {} frames (seed {seed}) to {}",
        ds.frames.len(),
        cfg.dataset.display()
    );
    Ok(())
}

/// Train the five heads and save them, plus the loss trace.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_train_dataset(cfg)?;
    let topts = TrainOptions {
        dropout: cfg.dropout,
        use_modality_code: cfg.use_modality_code,
        ..cfg.train_options.clone()
    };
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.root_seed()?;
    let started = Instant::now();
    let (heads, trace) =
        train_model(&ds.frames, &ds.camera, &ds.radar, &cfg.pipeline, &topts, &tcfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    let path = model_path(cfg);
    save_heads(&heads.to_vec(), &path)?;
    let rows: Vec<String> =
        trace.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
    write_csv(&cfg.out_dir.join("train_loss.csv"), "step,loss", &rows)?;
    println!(
        "train: {} steps in {elapsed:.1}s, final loss {:.4}, model -> {}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FrameDetections<'a> {
    frame: usize,
    num_camera_points: usize,
    num_radar_points: usize,
    detections: &'a [cramfuse::types::Box3D],
}

/// Evaluate one configuration: writes `detections.json`, `eval.csv` with
/// the overall and per-range-bucket AP, and `timing.json`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let heads = load_model(&model_path(cfg))?;
    let frames = eval_frames(&ds, cfg.camera_sigma, cfg.root_seed()?)?;
    let opts = cfg.run_options();
    let started = Instant::now();
    let (outputs, eval) =
        evaluate_frames(&frames, &heads, &ds.camera, &ds.radar, &cfg.pipeline, &opts)?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;

    let dets: Vec<FrameDetections<'_>> = outputs
        .iter()
        .enumerate()
        .map(|(i, o)| FrameDetections {
            frame: i,
            num_camera_points: o.num_camera_points,
            num_radar_points: o.num_radar_points,
            detections: &o.detections,
        })
        .collect();
    let json = serde_json::to_string_pretty(&dets)
        .map_err(|e| CramError::Config(format!("detections serialization: {e}")))?;
    std::fs::write(cfg.out_dir.join("detections.json"), json + "\n")?;

    let mut rows = vec![format!("overall,0,inf,{}", eval.ap)];
    for (lo, hi, ap) in &eval.bucket_ap {
        rows.push(format!("range,{lo},{hi},{ap}"));
    }
    write_csv(&cfg.out_dir.join("eval.csv"), "bucket,range_min,range_max,ap", &rows)?;

    let timing = serde_json::json!({
        "total_ms": total_ms,
        "per_frame_ms": total_ms / frames.len().max(1) as f64,
    });
    std::fs::write(cfg.out_dir.join("timing.json"), timing.to_string() + "\n")?;
    println!("run: mode {} ap {:.4} over {} frames", opts.mode, eval.ap, frames.len());
    Ok(())
}

/// Sweep the stage-1 foreground threshold: selected point counts, AP, and
/// per-frame latency at each tau. Runs sequentially so latency is measured
/// on a quiet single-threaded path.
pub fn cmd_ablate_threshold(cfg: &ExperimentConfig, taus: &[f64]) -> Result<()> {
    for &t in taus {
        if !(0.0 < t && t < 1.0) {
            return Err(CramError::Config(format!("tau must be in (0,1), got {t}")));
        }
    }
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let heads = load_model(&model_path(cfg))?;
    let frames = eval_frames(&ds, cfg.camera_sigma, cfg.root_seed()?)?;
    let opts = cfg.run_options();
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);

    let mut rows = Vec::with_capacity(taus.len());
    let mut ap_pts = Vec::with_capacity(taus.len());
    let mut count_pts = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let mut pcfg = cfg.pipeline.clone();
        pcfg.tau = tau;
        let started = Instant::now();
        let mut cam_pts = 0usize;
        let mut radar_pts = 0usize;
        let mut dets = Vec::with_capacity(frames.len());
        let mut gts = Vec::with_capacity(frames.len());
        for df in &frames {
            let out = run_frame(&df.frame, &heads, &ds.camera, &ds.radar, &pcfg, &opts)?;
            cam_pts += out.num_camera_points;
            radar_pts += out.num_radar_points;
            dets.push(out.detections);
            gts.push(df.scene.boxes.clone());
        }
        let latency_ms = started.elapsed().as_secs_f64() * 1e3 / frames.len().max(1) as f64;
        let eval = cramfuse::metrics::bev_ap_frames(
            &dets,
            &gts,
            cramfuse::pipeline::EVAL_IOU,
            &cramfuse::pipeline::RANGE_BUCKETS,
        );
        rows.push(format!("{tau},{cam_pts},{radar_pts},{},{latency_ms}", eval.ap));
        ap_pts.push((tau, eval.ap));
        count_pts.push((tau, (cam_pts + radar_pts) as f64));
        println!("ablate-threshold: tau {tau} points {} ap {:.4}", cam_pts + radar_pts, eval.ap);
    }
    write_csv(
        &cfg.out_dir.join("ablate_threshold.csv"),
        "tau,camera_points,radar_points,ap,latency_ms",
        &rows,
    )?;
    line_chart(
        &cfg.out_dir.join("ablate_threshold_ap.svg"),
        "AP vs foreground threshold",
        "tau",
        "AP@0.5",
        &[Series { name: "ap", points: ap_pts }],
    )?;
    line_chart(
        &cfg.out_dir.join("ablate_threshold_points.svg"),
        "Selected points vs foreground threshold",
        "tau",
        "points",
        &[Series { name: "points", points: count_pts }],
    )?;
    Ok(())
}

/// 2x2 ablation grid: attention on/off crossed with the plain and the
/// dropout-trained model, all on identical frames and noise.
pub fn cmd_ablate_fusion(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let plain = load_model(&model_path(cfg))?;
    let dropout = load_dropout_model(cfg)?;
    let frames = eval_frames(&ds, cfg.camera_sigma, cfg.root_seed()?)?;

    let combos: Vec<(bool, bool)> =
        vec![(false, false), (false, true), (true, false), (true, true)];
    let rows: Vec<String> = combos
        .par_iter()
        .map(|&(attention, dropout_trained)| {
            let opts = RunOptions { attention, ..cfg.run_options() };
            let heads = if dropout_trained { &dropout } else { &plain };
            let ap = eval_ap(&frames, &ds, heads, cfg, &opts)?;
            Ok(format!("{attention},{dropout_trained},{ap}"))
        })
        .collect::<Result<_>>()?;
    for r in &rows {
        println!("ablate-fusion: {r}");
    }
    write_csv(&cfg.out_dir.join("fusion_grid.csv"), "attention,dropout_trained,ap", &rows)
}

/// Sweep the RF intensity pre-filter threshold.
pub fn cmd_ablate_rf(cfg: &ExperimentConfig, thresholds: &[f64]) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let heads = load_model(&model_path(cfg))?;
    let frames = eval_frames(&ds, cfg.camera_sigma, cfg.root_seed()?)?;
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);

    let results: Vec<(f64, usize, f64)> = ts
        .par_iter()
        .map(|&t| {
            let opts = RunOptions { rf_threshold: Some(t), ..cfg.run_options() };
            let mut radar_pts = 0usize;
            let mut dets = Vec::with_capacity(frames.len());
            let mut gts = Vec::with_capacity(frames.len());
            for df in &frames {
                let out = run_frame(&df.frame, &heads, &ds.camera, &ds.radar, &cfg.pipeline, &opts)?;
                radar_pts += out.num_radar_points;
                dets.push(out.detections);
                gts.push(df.scene.boxes.clone());
            }
            let eval = cramfuse::metrics::bev_ap_frames(
                &dets,
                &gts,
                cramfuse::pipeline::EVAL_IOU,
                &cramfuse::pipeline::RANGE_BUCKETS,
            );
            Ok((t, radar_pts, eval.ap))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<String> =
        results.iter().map(|(t, n, ap)| format!("{t},{n},{ap}")).collect();
    for r in &rows {
        println!("ablate-rf: {r}");
    }
    write_csv(&cfg.out_dir.join("rf_threshold.csv"), "threshold,radar_points,ap", &rows)?;
    line_chart(
        &cfg.out_dir.join("rf_threshold.svg"),
        "AP vs RF intensity threshold",
        "threshold",
        "AP@0.5",
        &[Series { name: "ap", points: results.iter().map(|&(t, _, ap)| (t, ap)).collect() }],
    )
}

/// Paired camera-noise sweep: the plain model against the dropout-trained
/// model on identically corrupted frames at each sigma.
pub fn cmd_robustness(cfg: &ExperimentConfig, sigmas: &[f64]) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let plain = load_model(&model_path(cfg))?;
    let dropout = load_dropout_model(cfg)?;
    let root = cfg.root_seed()?;
    let opts = cfg.run_options();
    let mut sigmas = sigmas.to_vec();
    sigmas.sort_by(f64::total_cmp);

    let results: Vec<(f64, f64, f64)> = sigmas
        .par_iter()
        .map(|&sigma| {
            let frames = eval_frames(&ds, sigma, root)?;
            let ap_plain = eval_ap(&frames, &ds, &plain, cfg, &opts)?;
            let ap_dropout = eval_ap(&frames, &ds, &dropout, cfg, &opts)?;
            Ok((sigma, ap_plain, ap_dropout))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<String> = results
        .iter()
        .map(|(s, p, d)| format!("{s},{p},{d},{}", d - p))
        .collect();
    for r in &rows {
        println!("robustness: {r}");
    }
    write_csv(&cfg.out_dir.join("robustness.csv"), "sigma,ap_plain,ap_dropout,gap", &rows)?;
    line_chart(
        &cfg.out_dir.join("robustness.svg"),
        "AP vs camera noise",
        "sigma",
        "AP@0.5",
        &[
            Series { name: "plain", points: results.iter().map(|&(s, p, _)| (s, p)).collect() },
            Series {
                name: "dropout-trained",
                points: results.iter().map(|&(s, _, d)| (s, d)).collect(),
            },
        ],
    )
}

/// One-factor-at-a-time hyperparameter sensitivity table.
///
/// `epsilon` (attention depth band), `s` (ray samples per side), and the
/// modality-code toggle are evaluation-time knobs swept with the trained
/// model. `p_drop` changes training, so each value retrains on the training
/// dataset before evaluating; pass an empty list to skip the retrains.
pub fn cmd_ablate_hparams(
    cfg: &ExperimentConfig,
    epsilons: &[f64],
    scales: &[usize],
    p_drops: &[f64],
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ds = load_eval_dataset(cfg)?;
    let heads = load_model(&model_path(cfg))?;
    let frames = eval_frames(&ds, cfg.camera_sigma, cfg.root_seed()?)?;

    enum Knob {
        Epsilon(f64),
        Scale(usize),
        ModalityCode(bool),
    }
    let mut knobs: Vec<Knob> = Vec::new();
    let mut eps = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    knobs.extend(eps.into_iter().map(Knob::Epsilon));
    let mut sc = scales.to_vec();
    sc.sort_unstable();
    knobs.extend(sc.into_iter().map(Knob::Scale));
    knobs.push(Knob::ModalityCode(false));
    knobs.push(Knob::ModalityCode(true));

    let mut rows: Vec<String> = knobs
        .par_iter()
        .map(|knob| {
            let mut pcfg = cfg.pipeline.clone();
            let mut opts = cfg.run_options();
            let (param, value) = match *knob {
                Knob::Epsilon(e) => {
                    pcfg.epsilon = e;
                    ("epsilon", format!("{e}"))
                }
                Knob::Scale(s) => {
                    pcfg.s = s;
                    ("s", format!("{s}"))
                }
                Knob::ModalityCode(on) => {
                    opts.use_modality_code = on;
                    ("modality_code", if on { "on".into() } else { "off".into() })
                }
            };
            let (_, eval) =
                evaluate_frames(&frames, &heads, &ds.camera, &ds.radar, &pcfg, &opts)?;
            Ok(format!("{param},{value},{}", eval.ap))
        })
        .collect::<Result<_>>()?;

    if !p_drops.is_empty() {
        let train_ds = load_train_dataset(cfg)?;
        let mut pd = p_drops.to_vec();
        pd.sort_by(f64::total_cmp);
        for p in pd {
            let mut pcfg = cfg.pipeline.clone();
            pcfg.p_drop = p;
            let topts = TrainOptions {
                dropout: Some(
                    cfg.dropout.unwrap_or(cramfuse::fusion::DropoutLocation::PointCloud),
                ),
                use_modality_code: cfg.use_modality_code,
                ..cfg.train_options.clone()
            };
            let mut tcfg = cfg.train.clone();
            tcfg.seed = cfg.root_seed()?;
            let (h, _) =
                train_model(&train_ds.frames, &train_ds.camera, &train_ds.radar, &pcfg, &topts, &tcfg)?;
            let (_, eval) =
                evaluate_frames(&frames, &h, &ds.camera, &ds.radar, &pcfg, &cfg.run_options())?;
            rows.push(format!("p_drop,{p},{}", eval.ap));
        }
    }
    for r in &rows {
        println!("ablate-hparams: {r}");
    }
    write_csv(&cfg.out_dir.join("hparams.csv"), "param,value,ap", &rows)
}
