//! Command implementations: thin orchestration over the library modules.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gapfill::baselines::{impute_baseline, BaselineMethod};
use gapfill::datamodel::{
    save_sample, ChannelRole, DatasetManifest, SampleRecord,
};
use gapfill::gapsim::{
    derive_seed, generate_synthetic_scene, imprint, sample_gap_pattern, GapSpec, MaskPool,
    SyntheticSceneParams,
};
use gapfill::infer::impute_sequence;
use gapfill::metrics::{evaluate_sequence, EvalReport};
use gapfill::model::checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint};
use gapfill::model::{upsample_attention, TemporalUnet};
use gapfill::train::{fit, load_train_state, FitResult};

use crate::config::ResolvedConfig;
use crate::render;

fn gap_spec(rc: &ResolvedConfig) -> GapSpec {
    GapSpec {
        max_masked_frame_ratio: rc.config.gaps.max_masked_frame_ratio,
        min_masked_frames: rc.config.gaps.min_masked_frames,
        seed: rc.config.seed,
    }
}

/// Build the mask pool from the configured manifest, or generate blobs.
fn build_pool(rc: &ResolvedConfig, height: usize, width: usize) -> Result<MaskPool> {
    let masks = &rc.config.masks;
    if let Some(manifest_path) = &masks.pool_manifest {
        let path = rc.existing_path(manifest_path, "mask pool manifest")?;
        let manifest = DatasetManifest::load(&path)?;
        let pool = MaskPool::from_manifest(&manifest)?;
        if pool.is_empty() {
            bail!(
                "mask pool from {} is empty (no frames with invalid pixels); \
                 configure blob generation instead",
                path.display()
            );
        }
        if (pool.height(), pool.width()) != (height, width) {
            bail!(
                "mask pool size {}×{} does not match dataset {height}×{width}",
                pool.height(),
                pool.width()
            );
        }
        Ok(pool)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rc.config.seed, "pool", 0));
        Ok(MaskPool::generate_blobs(
            height,
            width,
            masks.blob_count,
            (masks.blob_coverage_min, masks.blob_coverage_max),
            masks.full_frame_fraction,
            &mut rng,
        )?)
    }
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let manifest = DatasetManifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))?;
    let mut records = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        records.push(
            manifest
                .load_sample(id)
                .with_context(|| format!("loading sample {id}"))?,
        );
    }
    Ok((manifest, records))
}

pub fn cmd_synth(rc: &ResolvedConfig) -> Result<()> {
    let synth = rc
        .config
        .synth
        .as_ref()
        .context("config has no [synth] section")?;
    if synth.n_samples == 0 {
        bail!("synth.n_samples must be >= 1");
    }
    if synth.t_len_min > synth.t_len_max || synth.t_len_min == 0 {
        bail!("synth.t_len_min/t_len_max invalid");
    }

    let out_root = rc.path(&synth.out);
    let mut manifest =
        DatasetManifest::new(&synth.split, synth.channels + synth.aux_channels, synth.height, synth.width);

    for i in 0..synth.n_samples {
        let seed = derive_seed(rc.config.seed, &format!("synth-{}", synth.split), i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_len = rng.gen_range(synth.t_len_min..=synth.t_len_max);
        let params = SyntheticSceneParams {
            segments: synth.segments,
            amplitude_range: (synth.amplitude_min, synth.amplitude_max),
            event_probability: synth.event_probability,
            noise_sigma: synth.noise_sigma,
            brightness_jitter: synth.brightness_jitter,
            t_len,
            channels: synth.channels,
            aux_channels: synth.aux_channels,
            height: synth.height,
            width: synth.width,
            first_day_range: (synth.first_day_min, synth.first_day_max),
            day_spacing_range: (synth.day_spacing_min, synth.day_spacing_max),
            seed,
        };
        let id = format!("{}-{i:05}", synth.split);
        let record = generate_synthetic_scene(&params, &id, &mut rng)
            .with_context(|| format!("generating scene {id}"))?;
        save_sample(&record, &out_root.join("samples").join(&id))?;
        manifest.samples.push(id);
    }
    manifest.save(&out_root)?;
    println!(
        "synth: wrote {} samples to {} (manifest-{}.json)",
        synth.n_samples,
        out_root.display(),
        synth.split
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairingIndex {
    pub clean_manifest: PathBuf,
    pub masked_manifest: PathBuf,
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Pair {
    pub masked: String,
    pub clean: String,
}

pub fn cmd_simulate(rc: &ResolvedConfig) -> Result<()> {
    let sim = rc
        .config
        .simulate
        .as_ref()
        .context("config has no [simulate] section")?;
    let input_path = rc.existing_path(&sim.input_manifest, "clean dataset manifest")?;
    let (clean_manifest, records) = load_dataset(&input_path)?;
    let pool = build_pool(rc, clean_manifest.height, clean_manifest.width)?;
    let spec = gap_spec(rc);

    let out_root = rc.out_dir.clone();
    let mut masked_manifest = DatasetManifest::new(
        &sim.split,
        clean_manifest.channels,
        clean_manifest.height,
        clean_manifest.width,
    );
    let mut pairs = Vec::new();

    for record in &records {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &record.sample_id, 0));
        let pattern = sample_gap_pattern(&spec, &pool, record.t_len(), &mut rng)?;
        let gaps = pattern.to_dense(&pool, record.t_len());
        let mut masked = imprint(record, &gaps)?;
        let masked_id = format!("{}-gapped", record.sample_id);
        masked.sample_id = masked_id.clone();
        save_sample(&masked, &out_root.join("samples").join(&masked_id))?;
        masked_manifest.samples.push(masked_id.clone());
        pairs.push(Pair {
            masked: masked_id,
            clean: record.sample_id.clone(),
        });
    }
    masked_manifest.save(&out_root)?;

    let pairing = PairingIndex {
        clean_manifest: input_path,
        masked_manifest: out_root.join(DatasetManifest::file_name(&sim.split)),
        pairs,
    };
    let pairing_path = out_root.join("pairing.json");
    fs::write(
        &pairing_path,
        serde_json::to_string_pretty(&pairing).expect("pairing serializes"),
    )
    .with_context(|| format!("writing {}", pairing_path.display()))?;

    println!(
        "simulate: wrote {} gap-simulated samples to {} (pairing.json links clean sources)",
        records.len(),
        out_root.display()
    );
    Ok(())
}

fn write_training_log(path: &Path, result: &FitResult) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,val_loss,lr,wall_time_s\n");
    for row in &result.log {
        csv.push_str(&format!(
            "{},{:.10},{:.10},{:.10e},{:.3}\n",
            row.epoch, row.train_loss, row.val_loss, row.lr, row.wall_time_s
        ));
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(
    rc: &ResolvedConfig,
    max_epochs: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let section = rc
        .config
        .train
        .as_ref()
        .context("config has no [train] section")?;
    let mut params = section.params.clone();
    params.seed = rc.config.seed;
    if let Some(me) = max_epochs {
        params.max_epochs = me;
    }

    let train_path = rc.existing_path(&section.train_manifest, "train manifest")?;
    let val_path = rc.existing_path(&section.val_manifest, "val manifest")?;
    let (train_manifest, train_records) = load_dataset(&train_path)?;
    let (_, val_records) = load_dataset(&val_path)?;
    let pool = build_pool(rc, train_manifest.height, train_manifest.width)?;
    let spec = gap_spec(rc);

    let (mut model, state) = match resume {
        Some(path) => {
            let full = rc.existing_path(&path, "train state")?;
            let (model, state) = load_train_state(&full)?;
            println!("resuming from epoch {}", state.epoch);
            (model, Some(state))
        }
        None => {
            let mut model_config = rc.config.model.clone();
            if model_config.in_channels != train_manifest.channels {
                model_config.in_channels = train_manifest.channels;
            }
            let rec_count = train_records[0].reconstruct_indices().len();
            if model_config.out_channels != rec_count {
                model_config.out_channels = rec_count;
            }
            (
                TemporalUnet::new(model_config, derive_seed(rc.config.seed, "init", 0))?,
                None,
            )
        }
    };

    fs::create_dir_all(&rc.out_dir)
        .with_context(|| format!("creating {}", rc.out_dir.display()))?;
    let state_path = rc.out_dir.join("train_state.bin");
    let (_, result) = fit(
        &mut model,
        &train_records,
        &val_records,
        &pool,
        &spec,
        &params,
        state,
        Some(&state_path),
    )?;

    let ckpt_path = rc.out_dir.join("checkpoint.bin");
    save_checkpoint(&model, &ckpt_path)?;
    write_training_log(&rc.out_dir.join("training_log.csv"), &result)?;

    println!(
        "train: {} epochs, best val loss {:.6} at epoch {} -> {}",
        result.log.len(),
        result.best_val_loss,
        result.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Provenance {
    source_sample: String,
    checkpoint_sha256: String,
    windows: Vec<(usize, usize)>,
    frame_to_window: Vec<usize>,
}

fn resolve_checkpoint(
    rc: &ResolvedConfig,
    section_path: Option<&PathBuf>,
    flag: Option<PathBuf>,
) -> Result<PathBuf> {
    let path = flag
        .or_else(|| section_path.cloned())
        .context("no checkpoint configured (set it in the config or pass --checkpoint)")?;
    rc.existing_path(&path, "checkpoint")
}

pub fn cmd_impute(rc: &ResolvedConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let section = rc
        .config
        .impute
        .as_ref()
        .context("config has no [impute] section")?;
    let ckpt_path = resolve_checkpoint(rc, section.checkpoint.as_ref(), checkpoint)?;
    let model = load_checkpoint(&ckpt_path)?;
    let digest = checkpoint_digest(&ckpt_path)?;

    let input_path = rc.existing_path(&section.input_manifest, "input manifest")?;
    let (input_manifest, records) = load_dataset(&input_path)?;

    let out_root = rc.out_dir.clone();
    let mut out_manifest = DatasetManifest::new(
        "imputed",
        model.config.out_channels,
        input_manifest.height,
        input_manifest.width,
    );

    for record in &records {
        let imputed = impute_sequence(&model, record, section.window)?;
        let (t, c, h, w) = imputed.volume.dim();
        let mut images = ndarray::Array4::<f32>::zeros((t, c, h, w));
        for (dst, src) in images.iter_mut().zip(imputed.volume.iter()) {
            *dst = *src as f32;
        }
        let out_record = SampleRecord {
            images,
            mask: ndarray::Array4::ones((t, 1, h, w)),
            days: record.days.clone(),
            channel_roles: vec![ChannelRole::Reconstruct; c],
            sample_id: record.sample_id.clone(),
        };
        let dir = out_root.join("samples").join(&record.sample_id);
        save_sample(&out_record, &dir)?;
        out_manifest.samples.push(record.sample_id.clone());

        let provenance = Provenance {
            source_sample: record.sample_id.clone(),
            checkpoint_sha256: digest.clone(),
            windows: imputed.plan.windows.clone(),
            frame_to_window: imputed.plan.assignment.clone(),
        };
        fs::write(
            dir.join("provenance.json"),
            serde_json::to_string_pretty(&provenance).expect("provenance serializes"),
        )
        .with_context(|| format!("writing provenance for {}", record.sample_id))?;

        if section.attention_panels {
            for (wi, attn) in imputed.window_attention.iter().enumerate() {
                let Some(attn) = attn else { continue };
                let up = upsample_attention(attn, h, w);
                for head in 0..up.heads() {
                    let img = render::attention_panel(&up, head);
                    let path = dir.join(format!("attention-w{wi}-head{head}.png"));
                    img.save(&path)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
    }
    out_manifest.save(&out_root)?;
    println!(
        "impute: wrote {} imputed sequences to {} (checkpoint {})",
        records.len(),
        out_root.display(),
        &digest[..12]
    );
    Ok(())
}

pub fn cmd_evaluate(rc: &ResolvedConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let section = rc
        .config
        .evaluate
        .as_ref()
        .context("config has no [evaluate] section")?;
    let pairing_path = rc.existing_path(&section.pairing, "pairing index")?;
    let pairing: PairingIndex = serde_json::from_slice(
        &fs::read(&pairing_path).with_context(|| format!("reading {}", pairing_path.display()))?,
    )
    .with_context(|| format!("parsing {}", pairing_path.display()))?;

    let clean_manifest = DatasetManifest::load(&pairing.clean_manifest)?;
    let masked_manifest = DatasetManifest::load(&pairing.masked_manifest)?;

    let wants_model = section.methods.iter().any(|m| m == "model");
    let model = if wants_model {
        let ckpt_path = resolve_checkpoint(rc, section.checkpoint.as_ref(), checkpoint)?;
        Some(load_checkpoint(&ckpt_path)?)
    } else {
        None
    };

    let mut reports: Vec<EvalReport> = section
        .methods
        .iter()
        .map(|m| EvalReport::new(m, &masked_manifest.split))
        .collect();

    for pair in &pairing.pairs {
        let masked = masked_manifest.load_sample(&pair.masked)?;
        let clean = clean_manifest.load_sample(&pair.clean)?;
        let rec_idx = clean.reconstruct_indices();
        let (t, h, w) = (clean.t_len(), clean.height(), clean.width());
        let mut target = ndarray::Array4::zeros((t, rec_idx.len(), h, w));
        for (ci, &src) in rec_idx.iter().enumerate() {
            target
                .slice_mut(s![.., ci, .., ..])
                .assign(&clean.images.slice(s![.., src, .., ..]).mapv(f64::from));
        }

        for (mi, method) in section.methods.iter().enumerate() {
            let volume = match method.as_str() {
                "model" => {
                    let model = model.as_ref().expect("model loaded above");
                    impute_sequence(model, &masked, section.window)?.volume
                }
                name => {
                    let baseline = BaselineMethod::parse(name)
                        .with_context(|| format!("unknown method `{name}`"))?;
                    impute_baseline(baseline, &masked)?.volume
                }
            };
            let outcome =
                evaluate_sequence(&volume, &target, &masked.mask, Some(&clean.mask))?;
            reports[mi].push(&pair.masked, outcome);
        }
    }

    fs::create_dir_all(&rc.out_dir)
        .with_context(|| format!("creating {}", rc.out_dir.display()))?;

    let mut summary = String::from(
        "split,method,mae,rmse,sam_deg,psnr_db,ssim,mae_valid,ssim_valid,sequences,excluded\n",
    );
    println!(
        "{:<10} {:>9} {:>9} {:>8} {:>8} {:>7} {:>10} {:>7}",
        "method", "MAE", "RMSE", "SAM", "PSNR", "SSIM", "MAE_valid", "SSIM_v"
    );
    let mut chart_entries: Vec<(String, f64, f64, f64)> = Vec::new();
    for report in &reports {
        let agg = report
            .aggregate()
            .with_context(|| format!("method {} evaluated no sequences", report.method))?;
        summary.push_str(&format!(
            "{},{},{:.6},{:.6},{:.4},{:.4},{:.5},{:.6},{:.5},{},{}\n",
            report.split,
            report.method,
            agg.mae,
            agg.rmse,
            agg.sam_deg,
            agg.psnr_db,
            agg.ssim,
            agg.mae_valid,
            agg.ssim_valid,
            agg.sequences,
            agg.excluded
        ));
        println!(
            "{:<10} {:>9.5} {:>9.5} {:>8.3} {:>8.2} {:>7.4} {:>10.6} {:>7.4}",
            report.method,
            agg.mae,
            agg.rmse,
            agg.sam_deg,
            agg.psnr_db,
            agg.ssim,
            agg.mae_valid,
            agg.ssim_valid
        );
        chart_entries.push((report.method.clone(), agg.mae, agg.psnr_db, agg.ssim));

        let mut details = String::from(
            "sample,mae,rmse,sam_deg,psnr_db,ssim,mae_valid,ssim_valid,omega_px,valid_px\n",
        );
        for (id, e) in &report.rows {
            details.push_str(&format!(
                "{},{:.6},{:.6},{:.4},{:.4},{:.5},{:.6},{:.5},{},{}\n",
                id,
                e.mae,
                e.rmse,
                e.sam_deg,
                e.psnr_db,
                e.ssim,
                e.mae_valid,
                e.ssim_valid,
                e.omega_count,
                e.valid_count
            ));
        }
        for id in &report.excluded {
            details.push_str(&format!("{id},excluded: empty imputed domain\n"));
        }
        let details_path = rc.out_dir.join(format!("details-{}.csv", report.method));
        fs::write(&details_path, details)
            .with_context(|| format!("writing {}", details_path.display()))?;
    }
    let report_path = rc.out_dir.join("report.csv");
    fs::write(&report_path, summary)
        .with_context(|| format!("writing {}", report_path.display()))?;

    for (metric, pick) in [
        ("mae", 0usize),
        ("psnr", 1),
        ("ssim", 2),
    ] {
        let entries: Vec<(String, f64)> = chart_entries
            .iter()
            .map(|(name, mae, psnr, ssim)| {
                (name.clone(), [*mae, *psnr, *ssim][pick])
            })
            .collect();
        let title = format!("{} ({})", metric.to_uppercase(), masked_manifest.split);
        let img = render::bar_chart(&title, &entries);
        let path = rc.out_dir.join(format!("comparison-{metric}.png"));
        img.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    println!("evaluate: report written to {}", report_path.display());
    Ok(())
}

pub fn cmd_export_attention(
    rc: &ResolvedConfig,
    checkpoint: Option<PathBuf>,
    sample: &str,
) -> Result<()> {
    let section = rc
        .config
        .impute
        .as_ref()
        .context("config has no [impute] section (needed for the input manifest and window)")?;
    let ckpt_path = resolve_checkpoint(rc, section.checkpoint.as_ref(), checkpoint)?;
    let model = load_checkpoint(&ckpt_path)?;
    if !model.config.temporal_encoder {
        bail!("checkpoint has no temporal encoder; there is no attention to export");
    }

    let input_path = rc.existing_path(&section.input_manifest, "input manifest")?;
    let manifest = DatasetManifest::load(&input_path)?;
    let record = manifest.load_sample(sample)?;
    let imputed = impute_sequence(&model, &record, section.window)?;

    fs::create_dir_all(&rc.out_dir)
        .with_context(|| format!("creating {}", rc.out_dir.display()))?;
    let (h, w) = (record.height(), record.width());
    let mut written = 0;
    for (wi, attn) in imputed.window_attention.iter().enumerate() {
        let attn = attn.as_ref().expect("temporal encoder checked above");
        let up = upsample_attention(attn, h, w);
        let deviation = up.max_key_sum_deviation();
        for head in 0..up.heads() {
            let img = render::attention_panel(&up, head);
            let path = rc
                .out_dir
                .join(format!("attention-{sample}-w{wi}-head{head}.png"));
            img.save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            written += 1;
        }
        println!(
            "window {wi}: key sums within {deviation:.2e} of 1 after upsampling"
        );
    }
    println!(
        "export-attention: {written} panels for sample {sample} in {}",
        rc.out_dir.display()
    );
    Ok(())
}
