use std::path::{Path, PathBuf};

use crystvox_core::ingest::{build_manifest, parse_crystal_file, ManifestOptions};
use crystvox_core::io::{atoms_from_text, atoms_to_json, atoms_to_text, write_atomic, GridFile, GridPayload};
use crystvox_core::lattice::PlacedAtom;
use crystvox_core::metrics::{evaluate, DistanceMode};
use crystvox_core::segmenter::{segment_with_density, CentroidMode, SegmentOptions};
use crystvox_core::voxelizer::one_hot_species;
use crystvox_core::{AtomRecord, ClassProbGrid, GridSpec, Representation, Split, NUM_CLASSES};
use crystvox_models::discriminator::{score_grids, DiscriminatorTrainer};
use crystvox_models::toy::toy_samples;
use crystvox_models::unet::segment_logits;
use crystvox_models::vae::{decode_latents, encode_means};
use crystvox_models::{
    condition_scale, dataset_max_density, latent_interpolate, sample_prior, ModelConfig, SegLoss, TrainConfig,
    TrainSample, Trainer,
};
use crystvox_tensor::selfcheck::layer_suite;
use crystvox_tensor::Element;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{
    density_batch, grid_from_batch, grid_spec, load_manifest, load_model, read_density, resolve, save_model,
    stem, train_samples, voxelize_manifest, write_density, write_json, ModelCard,
};
use crate::error::{CliError, CliResult};
use crate::record::RunRecord;
use crate::{
    CentroidArg, Cli, Command, DataSource, DiscriminateArgs, EvaluateArgs, GradcheckArgs, InterpolateArgs,
    ManifestBuildArgs, ManifestCmd, Precision, ReconstructArgs, Rep, SampleArgs, SegLossArg, SegmentArgs,
    SplitArg, TrainArgs, TrainDiscArgs, VoxelizeArgs,
};

/// Shared per-invocation settings.
pub struct Ctx {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub precision: Precision,
}

impl Ctx {
    fn record(&self, command: &str) -> RunRecord {
        let p = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        RunRecord::new(command, self.seed, self.threads, p)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

macro_rules! with_precision {
    ($ctx:expr, $f:ident($($arg:expr),*)) => {
        match $ctx.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    let ctx = Ctx { seed: cli.seed, threads: cli.threads, out: cli.out.clone(), precision: cli.precision };
    std::fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", ctx.out.display())))?;
    match &cli.command {
        Command::Manifest(ManifestCmd::Build(a)) => manifest_build(&ctx, a),
        Command::Voxelize(a) => voxelize(&ctx, a),
        Command::Train(a) => with_precision!(ctx, train(&ctx, a)),
        Command::TrainDisc(a) => with_precision!(ctx, train_disc(&ctx, a)),
        Command::Reconstruct(a) => with_precision!(ctx, reconstruct(&ctx, a)),
        Command::Segment(a) => with_precision!(ctx, segment(&ctx, a)),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Interpolate(a) => with_precision!(ctx, interpolate(&ctx, a)),
        Command::Sample(a) => with_precision!(ctx, sample(&ctx, a)),
        Command::Discriminate(a) => with_precision!(ctx, discriminate(&ctx, a)),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Selftest => crate::selftest::run(&ctx),
    }
}

fn representation(rep: Rep) -> Representation {
    match rep {
        Rep::Single => Representation::SingleCell,
        Rep::Repeated => Representation::RepeatedLattice,
    }
}

fn collect_cif_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("cif")))
                .collect();
            found.sort();
            paths.extend(found);
        } else if input.is_file() {
            paths.push(input.clone());
        } else {
            return Err(CliError::Data(format!("no such file or directory: {}", input.display())));
        }
    }
    Ok(paths)
}

fn manifest_build(ctx: &Ctx, a: &ManifestBuildArgs) -> CliResult<()> {
    let mut rec = ctx.record("manifest build");
    let mut files = Vec::new();
    for path in collect_cif_paths(&a.inputs)? {
        let text = std::fs::read_to_string(&path)?;
        let file = parse_crystal_file(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        rec.input(&path)?;
        let abs = std::fs::canonicalize(&path)?;
        files.push((abs.display().to_string(), file));
    }
    let opts = ManifestOptions {
        train_fraction: a.train_fraction,
        seed: ctx.seed,
        representation: representation(a.rep),
        rotations_per_cell: a.rotations,
        offsets_per_cell: a.offsets,
        max_side: a.max_side,
    };
    let manifest = build_manifest(&files, &opts)?;
    let path = ctx.out_file("manifest.json");
    write_atomic(&path, manifest.to_json().as_bytes())?;
    rec.output(&path);
    let n_train = manifest.split(Split::Train).count();
    rec.config = json!({ "cells": manifest.entries.len(), "train": n_train, "dropped": files.len() - manifest.entries.len() });
    println!("{} cells ({} train, {} test) -> {}", manifest.entries.len(), n_train, manifest.entries.len() - n_train, path.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn voxelize(ctx: &Ctx, a: &VoxelizeArgs) -> CliResult<()> {
    let mut rec = ctx.record("voxelize");
    rec.input(&a.manifest)?;
    let (manifest, base) = load_manifest(&a.manifest)?;
    for e in &manifest.entries {
        rec.input(&resolve(&base, e))?;
    }
    let rep = a.rep.map(representation).unwrap_or(manifest.representation);
    let spec = grid_spec(30);
    let keep = |s: Split| match a.split {
        SplitArg::All => true,
        SplitArg::Train => s == Split::Train,
        SplitArg::Test => s == Split::Test,
    };
    let samples = voxelize_manifest(&manifest, &base, rep, &spec, keep)?;
    let mut index = Vec::with_capacity(samples.len());
    for s in &samples {
        let density = ctx.out_file(&format!("{}.density.vxgr", s.name));
        let species = ctx.out_file(&format!("{}.species.vxgr", s.name));
        let truth = ctx.out_file(&format!("{}.truth.json", s.name));
        write_density(&density, &s.density)?;
        GridFile::from_species(&s.species).save(&species)?;
        write_json(&truth, &s.truth)?;
        index.push(json!({
            "name": s.name, "id": s.id, "split": s.split, "seed": s.seed, "atoms": s.truth.len(),
            "density": density, "species": species, "truth": truth,
        }));
    }
    let index_path = ctx.out_file("index.json");
    write_json(&index_path, &index)?;
    rec.output(&index_path);
    rec.config = json!({ "representation": rep, "grid": spec, "samples": samples.len() });
    println!("{} samples -> {}", samples.len(), ctx.out.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn load_training(ctx: &Ctx, src: &DataSource, model: &ModelConfig, rec: &mut RunRecord) -> CliResult<Vec<TrainSample>> {
    let spec = grid_spec(model.grid_side);
    match (&src.manifest, src.toy) {
        (Some(path), None) => {
            rec.input(path)?;
            let (manifest, base) = load_manifest(path)?;
            for e in manifest.split(Split::Train) {
                rec.input(&resolve(&base, e))?;
            }
            let samples = voxelize_manifest(&manifest, &base, manifest.representation, &spec, |s| s == Split::Train)?;
            if samples.is_empty() {
                return Err(CliError::Data("manifest has no training samples".into()));
            }
            train_samples(&samples)
        }
        (None, Some(n)) if n > 0 => Ok(toy_samples(n, ctx.seed, &spec)?),
        _ => Err(CliError::Usage("give --manifest <file> or --toy <n> with n > 0".into())),
    }
}

fn preset(name: &str) -> CliResult<ModelConfig> {
    match ModelConfig::preset(name) {
        Some(m) if m.grid_side == GridSpec::default().side_voxels && m.num_classes == NUM_CLASSES => Ok(m),
        _ => Err(CliError::Usage(format!("unknown model preset `{name}` (paper, desk)"))),
    }
}

fn train<T: Element>(ctx: &Ctx, a: &TrainArgs) -> CliResult<()> {
    let mut rec = ctx.record("train");
    let model = preset(&a.model)?;
    let samples = load_training(ctx, &a.data, &model, &mut rec)?;
    let config = TrainConfig {
        beta: a.beta,
        gamma: a.gamma,
        lr: a.lr,
        batch: a.batch,
        seed: ctx.seed,
        conditioned: a.conditioned,
        density_scale: dataset_max_density(&samples),
        seg_loss: match a.seg_loss {
            SegLossArg::Bce => SegLoss::Bce,
            SegLossArg::SoftmaxCe => SegLoss::SoftmaxCe,
        },
    };
    let mut trainer = Trainer::<T>::new(model.clone(), config.clone())?;
    let mut log = String::new();
    let result = trainer.train(&samples, a.steps, |r| {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == a.steps) {
            eprintln!("step {:>6}  L_RE {:.6e}  KL {:.4e}  L_BCE {:.5e}  total {:.6e}", r.step, r.l_re, r.kl, r.l_bce, r.total);
        }
    });
    let log_path = ctx.out_file("train_log.jsonl");
    write_atomic(&log_path, log.as_bytes())?;
    rec.output(&log_path);
    result?;
    let ckpt = ctx.out_file(&a.ckpt_out);
    let card = ModelCard { model, train: config, steps: trainer.steps_done() };
    save_model(&trainer.store, &card, &ckpt)?;
    rec.output(&ckpt);
    rec.config = serde_json::to_value(&card)?;
    rec.config["samples"] = json!(samples.len());
    println!("trained {} steps on {} samples -> {}", a.steps, samples.len(), ckpt.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn load_card_model<T: Element>(path: &Path, rec: &mut RunRecord) -> CliResult<(crystvox_tensor::ParamStore<T>, ModelCard)> {
    rec.input(path)?;
    let loaded = load_model::<T>(path)?;
    rec.config["model"] = serde_json::to_value(&loaded.1)?;
    Ok(loaded)
}

fn train_disc<T: Element>(ctx: &Ctx, a: &TrainDiscArgs) -> CliResult<()> {
    let mut rec = ctx.record("train-disc");
    rec.config = json!({});
    let (mut vae, card) = load_card_model::<T>(&a.ckpt, &mut rec)?;
    let samples = load_training(ctx, &a.data, &card.model, &mut rec)?;
    let mut real = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(4) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let (density, _) = crystvox_models::batch_tensors::<T>(&refs, card.model.num_classes)?;
        real.extend(encode_means(&mut vae, &card.model, density)?);
    }
    let mut trainer = DiscriminatorTrainer::<T>::new(card.model.clone(), a.lr, a.batch, ctx.seed);
    let mut losses = Vec::with_capacity(a.steps as usize);
    for step in 0..a.steps {
        let loss = trainer.step(&vae, &real)?;
        if step % 10 == 0 || step + 1 == a.steps {
            eprintln!("step {step:>6}  mse {loss:.6e}");
        }
        losses.push(loss);
    }
    let path = ctx.out_file(&a.disc_out);
    let disc_card = ModelCard { model: card.model, train: card.train, steps: a.steps };
    save_model(&trainer.store, &disc_card, &path)?;
    let log = ctx.out_file("disc_log.json");
    write_json(&log, &losses)?;
    rec.output(&path);
    rec.output(&log);
    rec.config["disc"] = json!({ "lr": a.lr, "batch": a.batch, "steps": a.steps });
    println!("discriminator trained {} steps -> {}", a.steps, path.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn reconstruct<T: Element>(ctx: &Ctx, a: &ReconstructArgs) -> CliResult<()> {
    let mut rec = ctx.record("reconstruct");
    rec.config = json!({});
    let (mut store, card) = load_card_model::<T>(&a.ckpt, &mut rec)?;
    for input in &a.inputs {
        rec.input(input)?;
        let grid = read_density(input)?;
        let mu = encode_means(&mut store, &card.model, density_batch::<T>(std::slice::from_ref(&grid))?)?;
        let out = decode_latents(&store, &card.model, &mu)?;
        let path = ctx.out_file(&format!("{}.recon.vxgr", stem(input)));
        write_density(&path, &grid_from_batch(&out, 0, &grid.spec))?;
        rec.output(&path);
    }
    println!("{} reconstructions -> {}", a.inputs.len(), ctx.out.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn segment<T: Element>(ctx: &Ctx, a: &SegmentArgs) -> CliResult<()> {
    let mut rec = ctx.record("segment");
    rec.config = json!({ "min_cluster": a.min_cluster });
    let opts = SegmentOptions {
        min_cluster_voxels: a.min_cluster,
        centroid: match a.centroid {
            CentroidArg::Unweighted => CentroidMode::Unweighted,
            CentroidArg::Density => CentroidMode::DensityWeighted,
        },
    };
    let mut model = match &a.ckpt {
        Some(p) => Some(load_card_model::<T>(p, &mut rec)?),
        None => None,
    };
    for input in &a.inputs {
        rec.input(input)?;
        let file = GridFile::load(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
        let atoms = match (&file.payload, model.as_mut()) {
            (GridPayload::U16(_), _) => {
                let species = file.into_species()?;
                let spec = grid_spec(species.side_voxels);
                let probs = one_hot_species(&species, crystvox_core::NUM_CLASSES)?;
                segment_with_density(&probs, &spec, None, &opts)
            }
            (GridPayload::F32(_), Some((store, card))) => {
                let density = file.into_density(grid_spec(card.model.grid_side))?;
                let logits = segment_logits(store, &card.model, density_batch::<T>(std::slice::from_ref(&density))?)?;
                let probs = ClassProbGrid {
                    num_classes: card.model.num_classes,
                    side_voxels: density.spec.side_voxels,
                    values: logits.data().iter().map(|v| v.as_f64() as f32).collect(),
                };
                segment_with_density(&probs, &density.spec, Some(&density), &opts)
            }
            (GridPayload::F32(_), None) => {
                return Err(CliError::Usage(format!("{} is a density grid; pass --ckpt to segment it", input.display())))
            }
        };
        let base = stem(input);
        let txt = ctx.out_file(&format!("{base}.atoms.txt"));
        let js = ctx.out_file(&format!("{base}.atoms.json"));
        write_atomic(&txt, atoms_to_text(&atoms).as_bytes())?;
        write_atomic(&js, atoms_to_json(&atoms).as_bytes())?;
        rec.output(&txt);
        println!("{}: {} atoms", input.display(), atoms.len());
    }
    rec.finish(&ctx.out)?;
    Ok(())
}

fn read_truth(path: &Path) -> CliResult<Vec<PlacedAtom>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        if let Ok(atoms) = serde_json::from_str::<Vec<PlacedAtom>>(&text) {
            return Ok(atoms);
        }
        let records: Vec<AtomRecord> = serde_json::from_str(&text)?;
        return Ok(records.iter().map(|r| PlacedAtom { atomic_number: r.atomic_number, cart: r.position }).collect());
    }
    Ok(atoms_from_text(&text)?.iter().map(|r| PlacedAtom { atomic_number: r.atomic_number, cart: r.position }).collect())
}

fn read_pred(path: &Path) -> CliResult<Vec<AtomRecord>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(atoms_from_text(&text)?)
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> CliResult<()> {
    if a.pred.len() != a.truth.len() {
        return Err(CliError::Usage(format!("{} prediction files but {} truth files", a.pred.len(), a.truth.len())));
    }
    let mode = match a.period {
        Some(period) if period > 0.0 => DistanceMode::MinimumImage { period },
        Some(period) => return Err(CliError::Usage(format!("period must be positive, got {period}"))),
        None => DistanceMode::Euclidean,
    };
    let mut rec = ctx.record("evaluate");
    let mut samples = Vec::with_capacity(a.pred.len());
    for (p, t) in a.pred.iter().zip(&a.truth) {
        rec.input(p)?;
        rec.input(t)?;
        samples.push((stem(t), read_pred(p)?, read_truth(t)?));
    }
    let report = evaluate(&samples, mode)?;
    let path = ctx.out_file("eval.json");
    write_atomic(&path, report.to_json().as_bytes())?;
    rec.output(&path);
    if a.csv {
        for (name, table) in report.csv_tables() {
            let p = ctx.out_file(name);
            write_atomic(&p, table.as_bytes())?;
            rec.output(&p);
        }
    }
    rec.config = json!({ "mode": mode, "samples": samples.len() });
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    rec.finish(&ctx.out)?;
    Ok(())
}

fn interpolate<T: Element>(ctx: &Ctx, a: &InterpolateArgs) -> CliResult<()> {
    if a.frames < 2 {
        return Err(CliError::Usage("--frames must be at least 2".into()));
    }
    let mut rec = ctx.record("interpolate");
    rec.config = json!({ "frames": a.frames });
    let (mut store, card) = load_card_model::<T>(&a.ckpt, &mut rec)?;
    rec.input(&a.a)?;
    rec.input(&a.b)?;
    let ga = read_density(&a.a)?;
    let gb = read_density(&a.b)?;
    let za = encode_means(&mut store, &card.model, density_batch::<T>(std::slice::from_ref(&ga))?)?.remove(0);
    let zb = encode_means(&mut store, &card.model, density_batch::<T>(std::slice::from_ref(&gb))?)?.remove(0);
    let mut frames = Vec::with_capacity(a.frames);
    for i in 0..a.frames {
        let t = i as f64 / (a.frames - 1) as f64;
        let z = latent_interpolate(&za, &zb, t)?;
        let out = decode_latents(&store, &card.model, std::slice::from_ref(&z))?;
        let path = ctx.out_file(&format!("frame_{i:03}.vxgr"));
        write_density(&path, &grid_from_batch(&out, 0, &ga.spec))?;
        rec.output(&path);
        frames.push(json!({ "t": t, "file": path }));
    }
    write_json(&ctx.out_file("frames.json"), &frames)?;
    println!("{} frames -> {}", a.frames, ctx.out.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn sample<T: Element>(ctx: &Ctx, a: &SampleArgs) -> CliResult<()> {
    let mut rec = ctx.record("sample");
    rec.config = json!({ "n": a.n, "alpha": a.alpha });
    let (store, card) = load_card_model::<T>(&a.ckpt, &mut rec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let spec = grid_spec(card.model.grid_side);
    let mut summary = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let mut z = sample_prior(&mut rng, card.model.latent_dim);
        if let Some(alpha) = a.alpha {
            z = condition_scale(&z, alpha)?;
        }
        let out = decode_latents(&store, &card.model, std::slice::from_ref(&z))?;
        let grid = grid_from_batch(&out, 0, &spec);
        let path = ctx.out_file(&format!("sample_{i:03}.vxgr"));
        write_density(&path, &grid)?;
        rec.output(&path);
        summary.push(json!({
            "file": path,
            "max_density": grid.max_value(),
            "normalized_max": grid.max_value() / card.train.density_scale,
        }));
    }
    write_json(&ctx.out_file("samples.json"), &summary)?;
    println!("{} samples -> {}", a.n, ctx.out.display());
    rec.finish(&ctx.out)?;
    Ok(())
}

fn discriminate<T: Element>(ctx: &Ctx, a: &DiscriminateArgs) -> CliResult<()> {
    let mut rec = ctx.record("discriminate");
    rec.config = json!({});
    let (_, card) = load_card_model::<T>(&a.ckpt, &mut rec)?;
    rec.input(&a.disc_ckpt)?;
    let (mut disc, _) = load_model::<T>(&a.disc_ckpt)?;
    let mut scores = Vec::with_capacity(a.inputs.len());
    for input in &a.inputs {
        rec.input(input)?;
        let grid = read_density(input)?;
        let s = score_grids(&mut disc, &card.model, density_batch::<T>(std::slice::from_ref(&grid))?)?;
        scores.push(json!({ "file": input, "score": s[0] }));
        println!("{}\t{:.6}", input.display(), s[0]);
    }
    let path = ctx.out_file("scores.json");
    write_json(&path, &scores)?;
    rec.output(&path);
    rec.finish(&ctx.out)?;
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> CliResult<()> {
    let mut rec = ctx.record("gradcheck");
    let reports = layer_suite(a.cases, ctx.seed)?;
    let mut rows = Vec::with_capacity(reports.len());
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} cases {:>3}  max rel {:.3e}  tol {:.0e}  {status}",
            r.layer, r.cases, r.worst.max_rel_error, r.tolerance
        );
        if !r.passed() {
            failed.push(r.layer);
        }
        rows.push(json!({
            "layer": r.layer, "cases": r.cases, "max_rel_error": r.worst.max_rel_error,
            "max_abs_error": r.worst.max_abs_error, "tolerance": r.tolerance, "passed": r.passed(),
        }));
    }
    let path = ctx.out_file("gradcheck.json");
    write_json(&path, &rows)?;
    rec.output(&path);
    rec.config = json!({ "cases": a.cases });
    rec.finish(&ctx.out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
