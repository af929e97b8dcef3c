//! Subcommand implementations.
//!
//! Shared conventions: `--jobs` sizes the process-wide worker pool (0 keeps
//! the all-cores default) and covers both whole-scan fan-out and the
//! data-parallel tensor kernels; every per-scan result is collected in input
//! order, so outputs are byte-identical across job counts; errors keep their
//! exit-code class and gain stage or file context on the way up.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use sgda_core::ct::{
    annotations_to_string, apply_mask_padding, crop_to_mask, hu_window, read_annotations,
    read_mhd, resample_isotropic, write_mhd, Annotation, AnnotationFormat, Sidecar, Volume,
    CROP_MARGIN,
};
use sgda_core::domain_attention::AssignmentRecord;
use sgda_core::froc::{candidates_to_string, emit_curve, froc, parse_candidates, Candidate,
    MatchOptions};
use sgda_core::gradcheck::standard_suite;
use sgda_core::sgda::{parameter_count, Fuse, SgdaConfig};
use sgda_core::sgdt::{write_sgdt, Sgdt, SgdtData};
use sgda_core::sgse::Direction;
use sgda_core::synth::{generate_volume, SyntheticDomainSpec};
use sgda_core::toy::{
    decode_candidates, detections_to_candidates, infer_volume, load_toy, save_toy,
    to_voxel_nodules, volume_to_input, DomainData, ToyNet, ToyNetConfig, TrainConfig,
    TrainVolume,
};
use sgda_core::{Error, Result};

use crate::config::{Layers, Resolved};
use crate::{
    AssignmentsArgs, DetectArgs, EvalArgs, GradcheckArgs, ParamsArgs, PreprocessArgs, SynthArgs,
    TrainArgs,
};

/// Attributes an error to a pipeline stage without changing its exit-code
/// class.
fn with_stage(e: Error, stage: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        Error::Usage(m) => Error::Usage(format!("{stage}: {m}")),
        Error::Parse(m) => Error::Parse(format!("{stage}: {m}")),
        Error::Data(m) => Error::Data(format!("{stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{stage}: {m}")),
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{stage}: {io}"))),
        Error::Json(m) => Error::Parse(format!("{stage}: {m}")),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    with_stage(e, &path.display().to_string())
}

/// Sizes the process-global worker pool; 0 keeps the all-cores default.
/// Must run before the first parallel operation.
fn init_pool(jobs: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global();
}

/// Runs `work(0..n)` on the worker pool and returns results in index order;
/// on failure the error with the lowest index wins, independent of
/// scheduling.
fn scan_parallel<T, F>(n: usize, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(work).collect();
    results.into_iter().collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| with_path(Error::Io(e), path))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(Error::Io(e), path))
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::usage(format!("{}: path has no file stem", path.display())))
}

/// `config.resolved.json` lands next to a file output (its parent directory).
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| with_path(Error::Io(e), dir))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            out.push((file_stem(&path)?, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::data(format!(
            "{}: no domain subdirectories",
            dir.display()
        )));
    }
    Ok(out)
}

fn sorted_mhd_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| with_path(Error::Io(e), dir))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "mhd"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::data(format!("{}: no .mhd volumes", dir.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------- preprocess

#[derive(Serialize)]
struct PreprocessOptions {
    jobs: usize,
}

/// The library's preprocessing chain, stage by stage, so a failure names the
/// stage it happened in. Kept in lockstep with `ct::preprocess_volume` by a
/// unit test below.
fn run_stages(v: &Volume) -> Result<(Volume, Sidecar)> {
    let resampled = resample_isotropic(v, 1.0).map_err(|e| with_stage(e, "resample"))?;
    let windowed = hu_window(&resampled);
    if windowed.mask.is_none() {
        let sidecar = Sidecar {
            spacing_mm: windowed.spacing_mm,
            offset_mm: windowed.offset_mm,
            crop_corner: [0, 0, 0],
        };
        return Ok((windowed, sidecar));
    }
    let (cropped, corner) = crop_to_mask(&windowed, CROP_MARGIN).map_err(|e| with_stage(e, "crop"))?;
    let padded = apply_mask_padding(&cropped).map_err(|e| with_stage(e, "pad"))?;
    let sidecar = Sidecar {
        spacing_mm: padded.spacing_mm,
        offset_mm: padded.offset_mm,
        crop_corner: corner,
    };
    Ok((padded, sidecar))
}

fn preprocess_one(scan: &Path, mask: &Path, out: &Path, stem: &str) -> Result<String> {
    let volume = read_mhd(scan).map_err(|e| with_path(e, scan))?;
    let mask_vol = read_mhd(mask).map_err(|e| with_path(e, mask))?;
    if mask_vol.shape != volume.shape {
        return Err(Error::shape(format!(
            "{}: mask grid {:?} does not match scan grid {:?}",
            mask.display(),
            mask_vol.shape,
            volume.shape
        )));
    }
    let mask_bytes: Vec<u8> = (0..mask_vol.numel())
        .map(|i| u8::from(mask_vol.voxels.get_f64(i) >= 0.5))
        .collect();
    let volume = volume.with_mask(mask_bytes)?;
    let (processed, sidecar) = run_stages(&volume)?;
    let tensor = Sgdt {
        shape: processed.shape.to_vec(),
        data: SgdtData::U8(processed.windowed()?.to_vec()),
    };
    write_sgdt(&out.join(format!("{stem}.sgdt")), &tensor)?;
    write_json_pretty(&out.join(format!("{stem}.sidecar.json")), &sidecar)?;
    Ok(format!(
        "{stem}: {}x{}x{} voxels, spacing {} {} {} mm",
        processed.shape[0],
        processed.shape[1],
        processed.shape[2],
        sidecar.spacing_mm[0],
        sidecar.spacing_mm[1],
        sidecar.spacing_mm[2]
    ))
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["jobs"])?;
    let jobs = layers.resolve("jobs", a.jobs, 0usize)?;
    init_pool(jobs);

    let pairs: Vec<(PathBuf, PathBuf, String)> = if a.input.is_dir() {
        if !a.mask.is_dir() {
            return Err(Error::usage(format!(
                "--input {} is a directory, so --mask must be a directory of \
                 masks with matching file names",
                a.input.display()
            )));
        }
        sorted_mhd_files(&a.input)?
            .into_iter()
            .map(|scan| {
                let name = scan.file_name().expect("mhd files have names").to_owned();
                let stem = file_stem(&scan)?;
                Ok((scan.clone(), a.mask.join(name), stem))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(a.input.clone(), a.mask.clone(), file_stem(&a.input)?)]
    };

    std::fs::create_dir_all(&a.out)?;
    Resolved::new(
        "preprocess",
        &[("input", &a.input), ("mask", &a.mask), ("out", &a.out)],
        PreprocessOptions { jobs },
    )
    .write(&a.out)?;

    let lines = scan_parallel(pairs.len(), |i| {
        let (scan, mask, stem) = &pairs[i];
        preprocess_one(scan, mask, &a.out, stem)
    })?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalOptions {
    scans: usize,
    format: String,
    jobs: usize,
}

fn annotation_format(name: &str) -> Result<AnnotationFormat> {
    match name {
        "center_diameter" => Ok(AnnotationFormat::CenterDiameter),
        "corner_pair" => Ok(AnnotationFormat::CornerPair),
        other => Err(Error::usage(format!(
            "unknown annotation format `{other}` (expected center_diameter or corner_pair)"
        ))),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["scans", "format", "jobs"])?;
    let scans = layers.resolve_required("scans", a.scans)?;
    let format_name = layers.resolve("format", a.format, "center_diameter".to_string())?;
    let format = annotation_format(&format_name)?;
    let jobs = layers.resolve("jobs", a.jobs, 0usize)?;
    init_pool(jobs);

    let cands = parse_candidates(&read_text(&a.candidates)?)
        .map_err(|e| with_path(e, &a.candidates))?;
    let anns =
        read_annotations(&a.annotations, format).map_err(|e| with_path(e, &a.annotations))?;
    let result = froc(&cands, &anns, scans, &MatchOptions::default())?;

    Resolved::new(
        "eval",
        &[
            ("candidates", &a.candidates),
            ("annotations", &a.annotations),
            ("out", &a.out),
        ],
        EvalOptions {
            scans,
            format: format_name,
            jobs,
        },
    )
    .write(&parent_dir(&a.out))?;
    emit_curve(&result, &a.out).map_err(|e| with_path(e, &a.out))?;

    for (op, sens) in result.operating_points.iter().zip(&result.sensitivities) {
        println!("{op} {sens:.5}");
    }
    println!("average {:.5}", result.average);
    Ok(())
}

// --------------------------------------------------------------------- synth

#[derive(Serialize)]
struct SynthOptions {
    volumes: usize,
    seed: u64,
    jobs: usize,
    domains: Vec<SyntheticDomainSpec>,
}

/// Three sites with distinct intensity, noise, vessel and slice-thickness
/// profiles, mirroring the kind of scanner and protocol drift the adapter
/// bank is meant to absorb. Nodule counts and radii are kept high enough
/// that random training crops regularly contain a positive.
fn builtin_domains() -> Vec<SyntheticDomainSpec> {
    let site_a = SyntheticDomainSpec {
        nodule_count: [2, 4],
        nodule_radius: [3.0, 5.0],
        ..SyntheticDomainSpec::named("site_a")
    };
    let site_b = SyntheticDomainSpec {
        intensity_offset: 25.0,
        contrast_gain: 1.15,
        noise_sigma: 2.0,
        vessel_count: 8,
        nodule_count: [2, 4],
        nodule_radius: [3.5, 5.5],
        ..SyntheticDomainSpec::named("site_b")
    };
    let site_c = SyntheticDomainSpec {
        intensity_offset: -20.0,
        contrast_gain: 0.85,
        noise_sigma: 7.0,
        vessel_count: 4,
        nodule_count: [2, 4],
        nodule_radius: [2.5, 4.5],
        blur_level: 2,
        ..SyntheticDomainSpec::named("site_c")
    };
    vec![site_a, site_b, site_c]
}

fn load_domain_specs(a: &SynthArgs, layers: &Layers) -> Result<Vec<SyntheticDomainSpec>> {
    let from_file = |path: &Path| -> Result<Vec<SyntheticDomainSpec>> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    };
    let specs = if let Some(path) = &a.domains {
        from_file(path)?
    } else if let Some(raw) = Layers::env("domains") {
        from_file(Path::new(&raw))?
    } else if let Some(value) = layers.json_value("domains") {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::config(format!("config option `domains`: {e}")))?
    } else {
        builtin_domains()
    };
    if specs.is_empty() {
        return Err(Error::config("domain list is empty"));
    }
    let mut ids = BTreeSet::new();
    for spec in &specs {
        spec.validate()
            .map_err(|e| with_stage(e, &spec.domain_id))?;
        if !ids.insert(spec.domain_id.clone()) {
            return Err(Error::config(format!(
                "duplicate domain id `{}`",
                spec.domain_id
            )));
        }
    }
    Ok(specs)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["volumes", "seed", "jobs", "domains"])?;
    let volumes = layers.resolve("volumes", a.volumes, 20usize)?;
    let seed = layers.resolve("seed", a.seed, 0u64)?;
    let jobs = layers.resolve("jobs", a.jobs, 0usize)?;
    let domains = load_domain_specs(&a, &layers)?;
    if volumes == 0 {
        return Err(Error::usage("--volumes must be >= 1"));
    }
    init_pool(jobs);

    // one fixed-order seed stream, so workers share nothing and the output
    // is independent of the job count
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<(usize, usize, u64)> = (0..domains.len())
        .flat_map(|di| (0..volumes).map(move |vi| (di, vi)))
        .map(|(di, vi)| (di, vi, seeder.gen()))
        .collect();

    for spec in &domains {
        std::fs::create_dir_all(a.out.join(&spec.domain_id))?;
    }
    Resolved::new(
        "synth",
        &[("out", &a.out)],
        SynthOptions {
            volumes,
            seed,
            jobs,
            domains: domains.clone(),
        },
    )
    .write(&a.out)?;

    let annotations = scan_parallel(tasks.len(), |t| {
        let (di, vi, vol_seed) = tasks[t];
        let spec = &domains[di];
        let series = format!("vol_{vi:03}");
        let (volume, anns) = generate_volume(spec, &series, vol_seed)
            .map_err(|e| with_stage(e, &format!("{}/{series}", spec.domain_id)))?;
        write_mhd(
            &volume,
            &a.out.join(&spec.domain_id).join(format!("{series}.mhd")),
        )?;
        Ok(anns)
    })?;

    for (di, spec) in domains.iter().enumerate() {
        let mine: Vec<Annotation> = tasks
            .iter()
            .zip(&annotations)
            .filter(|((tdi, _, _), _)| *tdi == di)
            .flat_map(|(_, anns)| anns.clone())
            .collect();
        write_text(
            &a.out.join(&spec.domain_id).join("annotations.csv"),
            &annotations_to_string(&mine),
        )?;
        println!(
            "{}: {} volumes of {} voxels cubed, {} nodules",
            spec.domain_id,
            volumes,
            spec.extent,
            mine.len()
        );
    }
    Ok(())
}

// --------------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainOptions {
    channels: Vec<usize>,
    adapters: usize,
    sgda: bool,
    epochs: usize,
    steps: usize,
    batch: usize,
    patch: usize,
    lr: f64,
    lr_drops: Vec<usize>,
    momentum: f64,
    weight_decay: f64,
    seed: u64,
}

/// One training domain per subdirectory: `vol_*.mhd` plus an
/// `annotations.csv` whose series ids are the volume file stems.
fn load_training_data(dir: &Path) -> Result<Vec<DomainData>> {
    let mut out = Vec::new();
    for (domain_id, dpath) in sorted_subdirs(dir)? {
        let ann_path = dpath.join("annotations.csv");
        let anns = read_annotations(&ann_path, AnnotationFormat::CenterDiameter)
            .map_err(|e| with_path(e, &ann_path))?;
        let mut volumes = Vec::new();
        for path in sorted_mhd_files(&dpath)? {
            let series = file_stem(&path)?;
            let volume = read_mhd(&path).map_err(|e| with_path(e, &path))?;
            let input = volume_to_input(&volume).map_err(|e| with_path(e, &path))?;
            let mine: Vec<Annotation> = anns
                .iter()
                .filter(|a| a.series_id == series)
                .cloned()
                .collect();
            let nodules = to_voxel_nodules(&mine, &volume)?;
            volumes.push(TrainVolume { input, nodules });
        }
        out.push(DomainData { domain_id, volumes });
    }
    Ok(out)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&[
        "channels",
        "adapters",
        "sgda",
        "epochs",
        "steps",
        "batch",
        "patch",
        "lr",
        "lr_drops",
        "momentum",
        "weight_decay",
        "seed",
    ])?;
    let channels = layers.resolve_list("channels", a.channels, &[8, 16, 32])?;
    let adapters = layers.resolve("adapters", a.adapters, 3usize)?;
    let sgda = layers.resolve("sgda", a.sgda, true)?;
    let epochs = layers.resolve("epochs", a.epochs, 10usize)?;
    let steps = layers.resolve("steps", a.steps, 5usize)?;
    let batch = layers.resolve("batch", a.batch, 2usize)?;
    let patch = layers.resolve("patch", a.patch, 16usize)?;
    let lr = layers.resolve("lr", a.lr, 0.01f64)?;
    let lr_drops = layers.resolve_list("lr_drops", a.lr_drops, &[])?;
    let momentum = layers.resolve("momentum", a.momentum, 0.9f64)?;
    let weight_decay = layers.resolve("weight_decay", a.weight_decay, 1e-4f64)?;
    let seed = layers.resolve("seed", a.seed, 0u64)?;

    let stage_channels: [usize; 3] = channels.clone().try_into().map_err(|_| {
        Error::config(format!("channels needs 3 stage widths, got {channels:?}"))
    })?;

    let data = load_training_data(&a.data)?;
    let datasets: Vec<String> = data.iter().map(|d| d.domain_id.clone()).collect();
    let net_cfg = ToyNetConfig {
        channels: stage_channels,
        datasets,
        sgda,
        adapters,
    };
    let train_cfg = TrainConfig {
        epochs,
        steps_per_epoch: steps,
        batch_size: batch,
        patch_extent: patch,
        base_lr: lr,
        lr_stage_epochs: lr_drops.clone(),
        momentum,
        weight_decay,
        seed,
    };

    std::fs::create_dir_all(&a.out)?;
    Resolved::new(
        "train",
        &[("data", &a.data), ("out", &a.out)],
        TrainOptions {
            channels,
            adapters,
            sgda,
            epochs,
            steps,
            batch,
            patch,
            lr,
            lr_drops,
            momentum,
            weight_decay,
            seed,
        },
    )
    .write(&a.out)?;

    let net = ToyNet::new(&net_cfg, seed)?;
    let report = sgda_core::toy::train(&net, &data, &train_cfg)?;

    write_text(&a.out.join("loss.csv"), &report.to_csv())?;
    let ckpt = a.out.join("checkpoint");
    save_toy(&ckpt, &net)?;

    for epoch in 0..epochs {
        if let Some(mean) = report.epoch_mean_loss(epoch) {
            println!(
                "epoch {epoch} lr {} mean loss {mean:.6}",
                train_cfg.lr_at(epoch)
            );
        }
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ----------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradcheckOptions {
    seed: u64,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["seed"])?;
    let seed = layers.resolve("seed", a.seed, 0u64)?;
    if let Some(out) = &a.out {
        Resolved::new("gradcheck", &[("out", out)], GradcheckOptions { seed }).write(out)?;
    }
    let report = standard_suite(seed)?;
    print!("{report}");
    if report.passed() {
        println!(
            "all {} checks passed, max rel err {:.3e}",
            report.checks.len(),
            report.max_rel_err()
        );
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed()).count();
        Err(Error::numeric(format!(
            "{failed} of {} finite-difference checks failed",
            report.checks.len()
        )))
    }
}

// -------------------------------------------------------------------- params

#[derive(Serialize)]
struct ParamsOptions {
    channels: usize,
    groups: usize,
    adapters: usize,
    reduction: usize,
    directions: String,
    fuse: String,
    grouped_ca: bool,
}

pub fn params(a: ParamsArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&[
        "channels",
        "groups",
        "adapters",
        "reduction",
        "directions",
        "fuse",
        "grouped_ca",
    ])?;
    let channels = layers.resolve_required("channels", a.channels)?;
    let groups = layers.resolve("groups", a.groups, 4usize)?;
    let adapters = layers.resolve("adapters", a.adapters, 3usize)?;
    let reduction = layers.resolve("reduction", a.reduction, 16usize)?;
    let directions_raw = layers.resolve(
        "directions",
        a.directions,
        "axial,coronal,sagittal".to_string(),
    )?;
    let fuse_raw = layers.resolve("fuse", a.fuse, "cross_attention".to_string())?;
    let grouped_ca = layers.resolve("grouped_ca", a.grouped_ca, true)?;

    let directions: Vec<Direction> = directions_raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Direction::from_label)
        .collect::<Result<_>>()?;
    let fuse = match fuse_raw.as_str() {
        "cross_attention" => Fuse::CrossAttention,
        "mean_only" => Fuse::MeanOnly,
        other => {
            return Err(Error::usage(format!(
                "unknown fuse `{other}` (expected cross_attention or mean_only)"
            )))
        }
    };
    let cfg = SgdaConfig {
        channels,
        groups,
        adapters,
        reduction,
        directions,
        fuse,
        grouped_ca,
    };
    cfg.validate()?;
    if let Some(out) = &a.out {
        Resolved::new(
            "params",
            &[("out", out)],
            ParamsOptions {
                channels,
                groups,
                adapters,
                reduction,
                directions: directions_raw,
                fuse: fuse_raw,
                grouped_ca,
            },
        )
        .write(out)?;
    }
    println!("{}", parameter_count(&cfg));
    Ok(())
}

// ------------------------------------------------------- detect, assignments

struct DomainDetections {
    domain_id: String,
    volume_count: usize,
    candidates: Vec<Candidate>,
}

/// Tiled inference over every volume of every domain subdirectory.
/// Candidates come back in volume order and assignment records merge in
/// volume order, so both are byte-stable across job counts.
fn run_inference(
    net: &ToyNet,
    data: &Path,
    tile: usize,
    prob_floor: Option<f64>,
    record: bool,
) -> Result<(Vec<DomainDetections>, AssignmentRecord)> {
    let mut merged = AssignmentRecord::new();
    let mut out = Vec::new();
    for (domain_id, dpath) in sorted_subdirs(data)? {
        let files = sorted_mhd_files(&dpath)?;
        let per_volume = scan_parallel(files.len(), |i| {
            let path = &files[i];
            let volume = read_mhd(path).map_err(|e| with_path(e, path))?;
            let input = volume_to_input(&volume).map_err(|e| with_path(e, path))?;
            let mut rec = record.then(AssignmentRecord::new);
            let (heat, rad) = infer_volume(net, &input, &domain_id, tile, rec.as_mut())
                .map_err(|e| with_path(e, path))?;
            let candidates = match prob_floor {
                Some(floor) => {
                    let dets = decode_candidates(&heat, &rad, floor)?;
                    detections_to_candidates(&dets, &file_stem(path)?, &volume)
                }
                None => Vec::new(),
            };
            Ok((candidates, rec))
        })?;
        let mut candidates = Vec::new();
        for (c, rec) in per_volume {
            candidates.extend(c);
            if let Some(r) = rec {
                merged.merge(r);
            }
        }
        out.push(DomainDetections {
            domain_id,
            volume_count: files.len(),
            candidates,
        });
    }
    Ok((out, merged))
}

#[derive(Serialize)]
struct DetectOptions {
    tile: usize,
    prob_floor: f64,
    jobs: usize,
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["tile", "prob_floor", "jobs"])?;
    let tile = layers.resolve("tile", a.tile, 16usize)?;
    let prob_floor = layers.resolve("prob_floor", a.prob_floor, 0.05f64)?;
    let jobs = layers.resolve("jobs", a.jobs, 0usize)?;
    init_pool(jobs);

    let net = load_toy(&a.checkpoint).map_err(|e| with_path(e, &a.checkpoint))?;
    std::fs::create_dir_all(&a.out)?;
    let mut paths: Vec<(&str, &Path)> = vec![
        ("checkpoint", &a.checkpoint),
        ("data", &a.data),
        ("out", &a.out),
    ];
    if let Some(p) = &a.assignments {
        paths.push(("assignments", p));
    }
    Resolved::new(
        "detect",
        &paths,
        DetectOptions {
            tile,
            prob_floor,
            jobs,
        },
    )
    .write(&a.out)?;

    let (domains, record) =
        run_inference(&net, &a.data, tile, Some(prob_floor), a.assignments.is_some())?;
    for d in &domains {
        let dir = a.out.join(&d.domain_id);
        std::fs::create_dir_all(&dir)?;
        write_text(&dir.join("candidates.csv"), &candidates_to_string(&d.candidates))?;
        println!(
            "{}: {} candidates from {} volumes",
            d.domain_id,
            d.candidates.len(),
            d.volume_count
        );
    }
    if let Some(path) = &a.assignments {
        let rows = record.export();
        write_json_pretty(path, &rows)?;
        println!("assignments: {} rows -> {}", rows.len(), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AssignmentsOptions {
    tile: usize,
    jobs: usize,
}

pub fn assignments(a: AssignmentsArgs) -> Result<()> {
    let layers = Layers::load(a.config.as_deref())?;
    layers.check_keys(&["tile", "jobs"])?;
    let tile = layers.resolve("tile", a.tile, 16usize)?;
    let jobs = layers.resolve("jobs", a.jobs, 0usize)?;
    init_pool(jobs);

    let net = load_toy(&a.checkpoint).map_err(|e| with_path(e, &a.checkpoint))?;
    Resolved::new(
        "assignments",
        &[
            ("checkpoint", &a.checkpoint),
            ("data", &a.data),
            ("out", &a.out),
        ],
        AssignmentsOptions { tile, jobs },
    )
    .write(&parent_dir(&a.out))?;

    let (domains, record) = run_inference(&net, &a.data, tile, None, true)?;
    let rows = record.export();
    write_json_pretty(&a.out, &rows)?;
    let volumes: usize = domains.iter().map(|d| d.volume_count).sum();
    println!(
        "{} mean-assignment rows from {} volumes over {} domains -> {}",
        rows.len(),
        volumes,
        domains.len(),
        a.out.display()
    );
    Ok(())
}
