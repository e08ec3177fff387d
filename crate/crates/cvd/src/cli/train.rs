//! The training loop and the shared evaluation pass behind `train`,
//! `eval`, and `ablate`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngSnapshot};
use crate::cli::config::RunConfig;
use crate::error::{CvdError, Result};
use crate::eval::{
    azimuth_bin, evaluate_retrieval, psnr, similarity_matrix, ssim, viewpoint_probe, Direction,
    RetrievalReport,
};
use crate::losses::{flatten_factors, loss_iic, loss_infonce, loss_irc, loss_total, LossValues};
use crate::model::{CvdModel, Optimizer, View};
use crate::synthdata::{filter_by_scene, read_dataset, split_scene_ids, Dataset, ViewKind};
use crate::tensor::{Graph, Tensor};

/// Separate stream from the graph rng so batch sampling and on-tape
/// randomness (projections, derangements) never interleave.
const LOOP_SEED_SALT: u64 = 0x7472_6169_6e5f_6c6f;

pub const AZIMUTH_BINS: usize = 8;
const EVAL_BATCH: usize = 16;

pub const METRICS_HEADER: &str = "step,loss_total,loss_loc,loss_iic_d,loss_iic_s,loss_irc_d,loss_irc_s,r1_ds,r5_ds,r10_ds,r1pct_ds,ap_ds,r1_sd,ap_sd,psnr,ssim,probe_c,probe_v";

/// Test-split metrics from one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub ds: RetrievalReport,
    pub sd: RetrievalReport,
    pub psnr: f64,
    pub ssim: f64,
    pub probe_c: f64,
    pub probe_v: f64,
}

impl EvalSummary {
    /// The metric columns of a CSV row, in header order.
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.ds.recall(1),
            self.ds.recall(5),
            self.ds.recall(10),
            self.ds.r_at_1pct,
            self.ds.ap,
            self.sd.recall(1),
            self.sd.ap,
            self.psnr,
            self.ssim,
            self.probe_c,
            self.probe_v
        )
    }
}

pub struct TrainResult {
    pub losses: LossValues,
    pub summary: EvalSummary,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn images_tensor(graph: &Rc<Graph>, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let c = ds.channels as usize;
    let s = ds.size as usize;
    let mut data = Vec::with_capacity(indices.len() * c * s * s);
    for &i in indices {
        data.extend(ds.records[i].pixels.iter().map(|&p| p as f64));
    }
    graph.tensor(data, &[indices.len(), c, s, s], false)
}

/// Split a dataset into the deterministic train/test scene partition.
pub fn split_dataset(ds: &Dataset) -> (Dataset, Dataset) {
    let (train_ids, test_ids) = split_scene_ids(ds.n_scenes());
    (filter_by_scene(ds, &train_ids), filter_by_scene(ds, &test_ids))
}

fn per_image_quality(orig: &[f64], recon: &[f64], channels: usize, side: usize) -> Result<(f64, f64)> {
    let p = psnr(orig, recon)?;
    let plane = side * side;
    let mut s = 0.0;
    for ch in 0..channels {
        s += ssim(&orig[ch * plane..(ch + 1) * plane], &recon[ch * plane..(ch + 1) * plane], side)?;
    }
    Ok((p, s / channels as f64))
}

/// Full evaluation pass on a (test) split: both retrieval directions,
/// cross-reconstruction quality, and azimuth probes on both factor maps.
pub fn evaluate_model(model: &CvdModel, test: &Dataset) -> Result<EvalSummary> {
    let graph = model.graph();
    let side = test.size as usize;
    let channels = test.channels as usize;
    let (d_c, _) = model.cfg.factor_widths()?;

    // Satellite gallery: pooled content rows plus the factor maps the
    // reconstruction pass needs.
    let sat_idx: Vec<usize> = test
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.view_kind == ViewKind::Satellite)
        .map(|(i, _)| i)
        .collect();
    if sat_idx.is_empty() {
        return Err(CvdError::Data("no satellite records in the test split".into()));
    }
    let mut gal_of_scene = BTreeMap::new();
    for (g, &i) in sat_idx.iter().enumerate() {
        gal_of_scene.insert(test.records[i].scene_id, g);
    }
    let mut sat_rows: Vec<f64> = Vec::with_capacity(sat_idx.len() * d_c);
    let mut zc_s_maps: Vec<Vec<f64>> = Vec::with_capacity(sat_idx.len());
    let mut zv_s_maps: Vec<Vec<f64>> = Vec::with_capacity(sat_idx.len());
    let mut map_shape = (0usize, 0usize, 0usize);
    for chunk in sat_idx.chunks(EVAL_BATCH) {
        let imgs = images_tensor(graph, test, chunk)?;
        let z = model.encode(&imgs, View::Satellite)?;
        let (zc, zv) = model.disentangle(&z, View::Satellite)?;
        let pooled = model.pool_content(&zc)?;
        sat_rows.extend(pooled.data());
        let shape = zc.shape().to_vec();
        map_shape = (shape[1], shape[2], shape[3]);
        let per = shape[1] * shape[2] * shape[3];
        let (zc_d_, zv_d_) = (zc.data(), zv.data());
        let per_v = zv.numel() / chunk.len();
        for b in 0..chunk.len() {
            zc_s_maps.push(zc_d_[b * per..(b + 1) * per].to_vec());
            zv_s_maps.push(zv_d_[b * per_v..(b + 1) * per_v].to_vec());
        }
        graph.reset();
    }

    // Drone queries, probe features, and paired reconstructions.
    let pairs = test.pairs();
    if pairs.is_empty() {
        return Err(CvdError::Data("no drone records in the test split".into()));
    }
    let mut drone_rows: Vec<f64> = Vec::with_capacity(pairs.len() * d_c);
    let mut probe_c_feat: Vec<f64> = Vec::new();
    let mut probe_v_feat: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::with_capacity(pairs.len());
    let mut scene_of_query: Vec<u32> = Vec::with_capacity(pairs.len());
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut n_images = 0usize;
    for chunk in pairs.chunks(EVAL_BATCH) {
        let d_indices: Vec<usize> = chunk.iter().map(|p| p.drone).collect();
        let imgs = images_tensor(graph, test, &d_indices)?;
        let z = model.encode(&imgs, View::Drone)?;
        let (zc, zv) = model.disentangle(&z, View::Drone)?;
        let pooled = model.pool_content(&zc)?;
        drone_rows.extend(pooled.data());
        probe_c_feat.extend(zc.data());
        probe_v_feat.extend(zv.data());
        for p in chunk {
            labels.push(azimuth_bin(test.records[p.drone].vp.azimuth, AZIMUTH_BINS));
            scene_of_query.push(p.scene_id);
        }

        // Rebuild the paired satellite factor maps as constants.
        let (cc, ch, cw) = map_shape;
        let b = chunk.len();
        let mut zc_s_data = Vec::with_capacity(b * cc * ch * cw);
        let mut zv_s_data = Vec::new();
        for p in chunk {
            let g = gal_of_scene[&p.scene_id];
            zc_s_data.extend_from_slice(&zc_s_maps[g]);
            zv_s_data.extend_from_slice(&zv_s_maps[g]);
        }
        let zc_s = graph.tensor(zc_s_data, &[b, cc, ch, cw], false)?;
        let zv_c = zv_s_maps[0].len() / (ch * cw);
        let zv_s = graph.tensor(zv_s_data, &[b, zv_c, ch, cw], false)?;
        let recon_d = model.cross_reconstruct(&zc_s, &zv, View::Drone)?;
        let recon_s = model.cross_reconstruct(&zc, &zv_s, View::Satellite)?;
        let (rd, rs) = (recon_d.data(), recon_s.data());
        let npix = channels * side * side;
        for (bi, p) in chunk.iter().enumerate() {
            let od: Vec<f64> = test.records[p.drone].pixels.iter().map(|&v| v as f64).collect();
            let os: Vec<f64> = test.records[p.satellite].pixels.iter().map(|&v| v as f64).collect();
            let (pd, sd) = per_image_quality(&od, &rd[bi * npix..(bi + 1) * npix], channels, side)?;
            let (ps, ss) = per_image_quality(&os, &rs[bi * npix..(bi + 1) * npix], channels, side)?;
            psnr_acc += pd + ps;
            ssim_acc += sd + ss;
            n_images += 2;
        }
        graph.reset();
    }

    // drone -> satellite: one relevant gallery item per query.
    let sim_ds = similarity_matrix(&drone_rows, &sat_rows, d_c)?;
    let rel_ds: Vec<Vec<usize>> = scene_of_query
        .iter()
        .map(|s| vec![gal_of_scene[s]])
        .collect();
    let ds_report = evaluate_retrieval(&sim_ds, sat_idx.len(), &rel_ds, Direction::DroneToSatellite)?;

    // satellite -> drone: every drone view of the scene is relevant.
    let sim_sd = similarity_matrix(&sat_rows, &drone_rows, d_c)?;
    let rel_sd: Vec<Vec<usize>> = sat_idx
        .iter()
        .map(|&i| {
            let scene = test.records[i].scene_id;
            scene_of_query
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == scene)
                .map(|(q, _)| q)
                .collect()
        })
        .collect();
    let sd_report = evaluate_retrieval(&sim_sd, pairs.len(), &rel_sd, Direction::SatelliteToDrone)?;

    let (cc, ch, cw) = map_shape;
    let probe_c = viewpoint_probe(&probe_c_feat, cc * ch * cw, &labels, AZIMUTH_BINS)?;
    let zv_width = probe_v_feat.len() / labels.len();
    let probe_v = viewpoint_probe(&probe_v_feat, zv_width, &labels, AZIMUTH_BINS)?;

    Ok(EvalSummary {
        ds: ds_report,
        sd: sd_report,
        psnr: psnr_acc / n_images as f64,
        ssim: ssim_acc / n_images as f64,
        probe_c,
        probe_v,
    })
}

/// Rebuild a model (and optimizer state) from a checkpoint.
pub fn restore_model(ck: &Checkpoint) -> Result<(RunConfig, CvdModel, Optimizer)> {
    let cfg = RunConfig::parse(&ck.config_text)?;
    let model = CvdModel::new(cfg.model.clone())?;
    for name in model.param_names() {
        let (shape, data) = ck
            .tensors
            .get(&name)
            .ok_or_else(|| CvdError::Data(format!("checkpoint is missing tensor '{name}'")))?;
        let p = model.param(&name).unwrap();
        if shape != p.shape() {
            return Err(CvdError::Shape(format!(
                "checkpoint tensor '{name}' is {:?}, model expects {:?}",
                shape,
                p.shape()
            )));
        }
        model.graph().set_node_data(p.id(), data.clone());
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    if let Some((_, t)) = ck.tensors.get("opt.t") {
        opt.t = t[0] as u64;
    }
    for (name, (_, data)) in &ck.tensors {
        if let Some(p) = name.strip_prefix("opt.m.") {
            opt.m.insert(p.to_string(), data.clone());
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            opt.v.insert(p.to_string(), data.clone());
        }
    }
    model
        .graph()
        .set_rng_state(ck.rng.graph_seed, ck.rng.graph_pos);
    Ok((cfg, model, opt))
}

fn snapshot(model: &CvdModel, opt: &Optimizer, loop_rng: &ChaCha8Rng, step: u64, cfg: &RunConfig) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (name, p) in model.params() {
        tensors.insert(name.clone(), (p.shape().to_vec(), p.data()));
    }
    tensors.insert("opt.t".to_string(), (vec![1], vec![opt.t as f64]));
    for (name, m) in &opt.m {
        tensors.insert(format!("opt.m.{name}"), (vec![m.len()], m.clone()));
    }
    for (name, v) in &opt.v {
        tensors.insert(format!("opt.v.{name}"), (vec![v.len()], v.clone()));
    }
    let (graph_seed, graph_pos) = model.graph().rng_state();
    Checkpoint {
        step,
        tensors,
        rng: RngSnapshot {
            graph_seed,
            graph_pos,
            loop_seed: loop_rng.get_seed(),
            loop_pos: loop_rng.get_word_pos(),
        },
        config_text: cfg.snapshot_text(),
    }
}

fn check_resume_compat(cfg: &RunConfig, snap: &RunConfig) -> Result<()> {
    if snap.model != cfg.model
        || snap.batch_size != cfg.batch_size
        || snap.learning_rate != cfg.learning_rate
        || snap.optimizer != cfg.optimizer
        || snap.eval_every != cfg.eval_every
    {
        return Err(CvdError::Config(
            "checkpoint was written under a different run configuration".into(),
        ));
    }
    Ok(())
}

/// Run (or resume) one training run; returns the final losses and
/// test-split metrics, and leaves `metrics.csv` and `checkpoint.cvdc`
/// in the output directory.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    let full = read_dataset(&cfg.dataset_path)?;
    if full.size as usize != cfg.model.image_size || full.channels as usize != cfg.model.channels {
        return Err(CvdError::Config(format!(
            "dataset is {}x{} px, {} ch; config expects {} px, {} ch",
            full.size, full.size, full.channels, cfg.model.image_size, cfg.model.channels
        )));
    }
    let (train_ds, test_ds) = split_dataset(&full);
    let train_pairs = train_ds.pairs();
    if train_pairs.len() < cfg.batch_size {
        return Err(CvdError::Config(format!(
            "{} training pairs cannot fill batches of {}",
            train_pairs.len(),
            cfg.batch_size
        )));
    }

    let (model, mut opt, mut loop_rng, start_step);
    match resume {
        None => {
            model = CvdModel::new(cfg.model.clone())?;
            opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
            loop_rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ LOOP_SEED_SALT);
            start_step = 0;
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let (snap_cfg, m, o) = restore_model(&ck)?;
            check_resume_compat(cfg, &snap_cfg)?;
            if ck.step >= cfg.steps {
                return Err(CvdError::Config(format!(
                    "checkpoint is already at step {} of {}",
                    ck.step, cfg.steps
                )));
            }
            model = m;
            opt = o;
            loop_rng = ChaCha8Rng::from_seed(ck.rng.loop_seed);
            loop_rng.set_word_pos(ck.rng.loop_pos);
            start_step = ck.step;
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    let graph = model.graph();
    let mut last_losses = None;
    let mut last_summary = None;
    for step in start_step + 1..=cfg.steps {
        // Without-replacement batch: shuffle the first `batch_size`
        // positions of the pair index list.
        let mut idx: Vec<usize> = (0..train_pairs.len()).collect();
        for i in 0..cfg.batch_size {
            let j = loop_rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let batch = &idx[..cfg.batch_size];
        let d_indices: Vec<usize> = batch.iter().map(|&i| train_pairs[i].drone).collect();
        let s_indices: Vec<usize> = batch.iter().map(|&i| train_pairs[i].satellite).collect();

        let losses = (|| -> Result<LossValues> {
            let drone = images_tensor(graph, &train_ds, &d_indices)?;
            let sat = images_tensor(graph, &train_ds, &s_indices)?;
            // Zero-weighted components cannot move the parameters, so
            // their (expensive) subgraphs are skipped outright.
            let zero = || graph.tensor(vec![0.0], &[1], false);
            let f = model.forward_factors(&drone, &sat)?;
            let (iic_d, iic_s) = if cfg.model.lambda1 != 0.0 {
                let (fc_d, fv_d) = flatten_factors(&f.zc_d, &f.zv_d)?;
                let (fc_s, fv_s) = flatten_factors(&f.zc_s, &f.zv_s)?;
                let k = cfg.model.n_projections;
                (loss_iic(&fc_d, &fv_d, k)?, loss_iic(&fc_s, &fv_s, k)?)
            } else {
                (zero()?, zero()?)
            };
            let (irc_d, irc_s) = if cfg.model.lambda2 != 0.0 {
                let recon_d = model.cross_reconstruct(&f.zc_s, &f.zv_d, View::Drone)?;
                let recon_s = model.cross_reconstruct(&f.zc_d, &f.zv_s, View::Satellite)?;
                (loss_irc(&drone, &recon_d)?, loss_irc(&sat, &recon_s)?)
            } else {
                (zero()?, zero()?)
            };
            let loc = loss_infonce(&f.pooled_c_d, &f.pooled_c_s, cfg.model.tau, cfg.model.bi_infonce)?;
            let report = loss_total(iic_d, iic_s, irc_d, irc_s, loc, cfg.model.lambda1, cfg.model.lambda2)?;
            if !report.total.item().is_finite() {
                return Err(CvdError::Domain("non-finite total loss".into()));
            }
            report.total.backward()?;
            Ok(report.values())
        })()
        .map_err(|e| match e {
            // The tape rejects non-finite values at the op that produced
            // them; during training that is a divergence, not bad input.
            CvdError::Domain(msg) => CvdError::Diverged(format!("at step {step}: {msg}")),
            other => other,
        })?;
        opt.step(&model);
        graph.zero_grads();
        graph.reset();
        last_losses = Some(losses);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let summary = evaluate_model(&model, &test_ds)?;
            graph.reset();
            writeln!(
                metrics,
                "{step},{},{},{},{},{},{},{}",
                losses.total,
                losses.loc,
                losses.iic_d,
                losses.iic_s,
                losses.irc_d,
                losses.irc_s,
                summary.csv_fields()
            )?;
            last_summary = Some(summary);
        }
    }
    metrics.flush()?;

    let checkpoint_path = cfg.out_dir.join("checkpoint.cvdc");
    save_checkpoint(&snapshot(&model, &opt, &loop_rng, cfg.steps, cfg), &checkpoint_path)?;
    Ok(TrainResult {
        losses: last_losses.expect("at least one step runs"),
        summary: last_summary.expect("final step always evaluates"),
        checkpoint_path,
        metrics_path,
    })
}
