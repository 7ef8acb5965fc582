use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use densemarks::image::{GrayImage, RgbImage};
use densemarks::matcher::{self, RegionSpec};
use densemarks::pose::{self, RigidPose};
use densemarks::stereo::{self, StereoConfig};
use densemarks::synth::io::{read_file, read_tracks, write_file};
use densemarks::synth::sequence::{MAX_TRACKS, MIN_TRACKS};
use densemarks::synth::{generate_sequence, Camera, HeadTemplate, MotionParams, SequenceData};
use densemarks::train::{self, evaluate_matching};
use densemarks::{EmbedMode, LossWeights, ModelConfig, ModelF64, TrainConfig, UvwMap};
use log::info;

use crate::config::RunConfig;
use crate::{CliError, Command};

type CliResult<T> = Result<T, CliError>;

/// Runs `command`, writes its outputs and the resolved config under `out`,
/// and returns the one-line summary.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> CliResult<String> {
    fs::create_dir_all(out).map_err(|e| densemarks::Error::from(e).in_file(out))?;
    let fields = match command {
        Command::Synth => synth(cfg, out)?,
        Command::Train => train(cfg, out)?,
        Command::Embed => embed(cfg, out)?,
        Command::Warp => warp(cfg, out)?,
        Command::Query => query(cfg, out)?,
        Command::Triangulate => triangulate(cfg, out)?,
        Command::Fit => fit(cfg, out)?,
        Command::Eval => eval(cfg, out)?,
    };
    let text = cfg.render();
    write_file(&out.join("config.txt"), |w| Ok(w.write_all(text.as_bytes())?))?;
    let name = format!("{command:?}").to_lowercase();
    let mut line = format!("command={name}");
    for (k, v) in fields {
        line.push_str(&format!(" {k}={v}"));
    }
    Ok(line)
}

type Fields = Vec<(&'static str, String)>;

fn field(k: &'static str, v: impl Display) -> (&'static str, String) {
    (k, v.to_string())
}

fn read<T>(path: &Path, parse: impl FnOnce(BufReader<File>) -> densemarks::Result<T>) -> CliResult<T> {
    Ok(read_file(path, parse)?)
}

fn read_map(path: &Path) -> CliResult<UvwMap> {
    read(path, UvwMap::read_from)
}

fn read_model(path: &Path) -> CliResult<ModelF64> {
    read(path, ModelF64::read_checkpoint)
}

/// `path` itself if it is a sequence directory, else its sequence
/// subdirectories in name order.
fn load_dataset(path: &Path) -> CliResult<Vec<SequenceData>> {
    if path.join("camera.txt").is_file() {
        return Ok(vec![SequenceData::read_dir(path)?]);
    }
    let entries = fs::read_dir(path).map_err(|e| densemarks::Error::from(e).in_file(path))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("camera.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no sequence directories", path.display())));
    }
    dirs.iter().map(|d| Ok(SequenceData::read_dir(d)?)).collect()
}

fn model_config(cfg: &RunConfig) -> CliResult<ModelConfig> {
    Ok(ModelConfig {
        frequencies: cfg.get("model.frequencies")?,
        hidden: cfg.get("model.hidden")?,
        grid_resolution: cfg.get("model.grid_resolution")?,
        feature_dim: cfg.get("model.feature_dim")?,
        sigma: cfg.get("model.sigma")?,
    })
}

fn stereo_config(cfg: &RunConfig) -> CliResult<StereoConfig> {
    Ok(StereoConfig {
        downsample_factor: cfg.get("stereo.downsample_factor")?,
        min_track_len: cfg.get("stereo.min_track_len")?,
        uvw_tol: cfg.get("stereo.uvw_tol")?,
        track_tol: cfg.get("stereo.track_tol")?,
        reproj_thresh_px: cfg.get("stereo.reproj_thresh_px")?,
    })
}

/// `"x y; x y; ..."`.
fn parse_pixels(key: &str, text: &str) -> CliResult<Vec<[usize; 2]>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("{key}: bad pixel {p:?}")))?;
            match v[..] {
                [x, y] => Ok([x, y]),
                _ => Err(CliError::Usage(format!("{key}: pixel {p:?} needs two coordinates"))),
            }
        })
        .collect()
}

fn synth(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let seed: u64 = cfg.get("seed")?;
    let sequences: usize = cfg.get("synth.sequences")?;
    let frames: usize = cfg.get("synth.frames")?;
    let size: usize = cfg.get("synth.size")?;
    let budget: usize = cfg.get("synth.tracks")?;
    if sequences == 0 {
        return Err(CliError::Usage("synth.sequences must be >= 1".into()));
    }
    if !(MIN_TRACKS..=MAX_TRACKS).contains(&budget) {
        return Err(CliError::Usage(format!("synth.tracks must lie in {MIN_TRACKS}..={MAX_TRACKS}")));
    }
    let motion = MotionParams {
        yaw: cfg.get("synth.yaw")?,
        pitch: cfg.get("synth.pitch")?,
        roll: cfg.get("synth.roll")?,
        translation: cfg.get("synth.translation")?,
        deform: cfg.get("synth.deform")?,
    };
    let camera = Camera::frontal(size);
    let (mut pairs, mut tracks) = (0, 0);
    for k in 0..sequences {
        let s = seed.wrapping_add(k as u64);
        let seq = generate_sequence(s, frames, size, &camera, &motion)?;
        let data = SequenceData::from_sequence(&seq, budget, s)?;
        pairs += data.tracks.len();
        tracks += data.tracks.iter().map(|(_, t)| t.len()).sum::<usize>();
        data.write_dir(&out.join(format!("seq_{k:04}")))?;
        info!("sequence {k}: {} track pairs", data.tracks.len());
    }
    Ok(vec![
        field("sequences", sequences),
        field("frames", frames),
        field("size", size),
        field("pairs", pairs),
        field("tracks", tracks),
    ])
}

fn train(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let data = load_dataset(&cfg.path("train.data")?)?;
    let mode: EmbedMode = cfg
        .str("train.mode")
        .parse()
        .map_err(|_| CliError::Usage(format!("train.mode = {:?} is not a mode", cfg.str("train.mode"))))?;
    let tc = TrainConfig {
        steps: cfg.get("train.steps")?,
        batch_pairs: cfg.get("train.batch_pairs")?,
        lr_embedder: cfg.get("train.lr_embedder")?,
        lr_grid: cfg.get("train.lr_grid")?,
        lr_seghead: cfg.get("train.lr_seghead")?,
        warmup_steps: cfg.get("train.warmup_steps")?,
        weight_decay: cfg.get("train.weight_decay")?,
        seed: cfg.get("seed")?,
        mode,
        weights: LossWeights {
            lambda_lmks: cfg.get("train.lambda_lmks")?,
            lambda_segm: cfg.get("train.lambda_segm")?,
        },
        augment: cfg.bool("train.augment")?,
    };
    info!("training on {} sequences", data.len());
    let (model, report) = train::train::<f64>(&data, &model_config(cfg)?, &tc)?;
    write_file(&out.join("model.dmn"), |w| model.write_checkpoint(w))?;
    write_file(&out.join("loss.csv"), |w| report.write_csv(w))?;
    let window = tc.steps.min(100);
    let mut fields = vec![field("mode", mode.name()), field("steps", tc.steps), field("sequences", data.len())];
    if let Some(last) = report.curve.last() {
        fields.push(field("final_loss", last.loss.total));
        fields.push(field("contrastive_first", report.mean_contrastive(0..window)));
        fields.push(field("contrastive_last", report.mean_contrastive(tc.steps - window..tc.steps)));
    }
    fields.push(field("skipped_pairs", report.skipped_pairs));
    Ok(fields)
}

fn embed(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let model = read_model(&cfg.path("embed.checkpoint")?)?;
    if model.mode() != EmbedMode::Canonical {
        return Err(CliError::Usage("embed needs a canonical-mode checkpoint".into()));
    }
    let image_path = cfg.path("embed.image")?;
    let image = read(&image_path, RgbImage::read_ppm)?;
    let mask = read(&cfg.path("embed.mask")?, GrayImage::read_pgm)?;
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(CliError::Usage("embed.mask and embed.image differ in size".into()));
    }
    let map = model.embed(&image, &mask.to_mask())?;
    write_file(&out.join("uvw.dmv"), |w| map.write_to(w))?;
    Ok(vec![
        field("width", map.width),
        field("height", map.height),
        field("valid", map.valid_count()),
    ])
}

fn warp(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let source = read_map(&cfg.path("warp.source_map")?)?;
    let source_rgb = read(&cfg.path("warp.source_image")?, RgbImage::read_ppm)?;
    let target = read_map(&cfg.path("warp.target_map")?)?;
    if (source_rgb.width, source_rgb.height) != (source.width, source.height) {
        return Err(CliError::Usage("warp.source_image and warp.source_map differ in size".into()));
    }
    let (warped, field_map) = matcher::nn_warp(&source, &source_rgb, &target)?;
    write_file(&out.join("warped.ppm"), |w| warped.write_ppm(w))?;
    write_file(&out.join("field.dmc"), |w| field_map.write_to(w))?;

    let mut fields = vec![field("matched", field_map.matched_count())];
    let tracks_paths = cfg.paths("warp.tracks");
    if let Some(path) = tracks_paths.first() {
        // Track files list the source pixel first.
        let gt = read_tracks(path, target.width, target.height)?.swapped();
        let m = matcher::match_metrics(&field_map, &gt)?;
        fields.push(field("reference", "tracks"));
        fields.extend([field("mae", m.mae), field("rmse", m.rmse), field("count", m.count)]);
    } else {
        // Displacement from the identity mapping.
        let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
        for (i, m) in field_map.matches.iter().enumerate() {
            let Some(([sx, sy], _)) = m else { continue };
            let (x, y) = ((i % field_map.width) as f64, (i / field_map.width) as f64);
            let d = ((*sx as f64 - x).powi(2) + (*sy as f64 - y).powi(2)).sqrt();
            sum += d;
            sum_sq += d * d;
            n += 1;
        }
        let n_f = n.max(1) as f64;
        fields.push(field("reference", "identity"));
        fields.extend([field("mae", sum / n_f), field("rmse", (sum_sq / n_f).sqrt()), field("count", n)]);
    }
    Ok(fields)
}

fn query(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let map_paths = cfg.paths("query.maps");
    let pixels = parse_pixels("query.pixels", cfg.str("query.pixels"))?;
    if map_paths.is_empty() {
        return Err(CliError::Usage("query.maps is required".into()));
    }
    if pixels.len() != map_paths.len() {
        return Err(CliError::Usage(format!(
            "query.pixels has {} pixels for {} maps",
            pixels.len(),
            map_paths.len()
        )));
    }
    let maps: Vec<UvwMap> = map_paths.iter().map(|p| read_map(p)).collect::<CliResult<_>>()?;
    let refs: Vec<(&UvwMap, [usize; 2])> = maps.iter().zip(pixels).collect();
    let point = matcher::query_point(&refs)?;
    let [u, v, w] = point.to_array();
    let radius: f64 = cfg.get("query.radius")?;
    if !(radius >= 0.0) {
        return Err(CliError::Usage("query.radius must be >= 0".into()));
    }

    let mut lines = vec![format!("point {u} {v} {w}")];
    let targets = cfg.paths("query.targets");
    for (k, path) in targets.iter().enumerate() {
        let map = read_map(path)?;
        let ([x, y], d) = matcher::find_point(&map, &point)?;
        let mut line = format!("target {k} {x} {y} {d}");
        if radius > 0.0 {
            let region = RegionSpec::Ball {
                center: [u, v, w],
                radius,
            };
            let mask = matcher::region_select(&map, &region);
            line.push_str(&format!(" {}", mask.iter().filter(|&&m| m).count()));
            let img = GrayImage::from_mask(map.width, map.height, &mask);
            write_file(&out.join(format!("region_{k:04}.pgm")), |w| img.write_pgm(w))?;
        }
        lines.push(line);
    }
    write_file(&out.join("query.txt"), |f| {
        for l in &lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    })?;
    Ok(vec![
        field("u", u),
        field("v", v),
        field("w", w),
        field("targets", targets.len()),
    ])
}

fn triangulate(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let map_paths = cfg.paths("triangulate.maps");
    if map_paths.len() < 2 {
        return Err(CliError::Usage(format!(
            "triangulate needs at least 2 views, got {}",
            map_paths.len()
        )));
    }
    let maps: Vec<UvwMap> = map_paths.iter().map(|p| read_map(p)).collect::<CliResult<_>>()?;
    let cameras: Vec<Camera> = cfg
        .paths("triangulate.cameras")
        .iter()
        .map(|p| read(p, Camera::read_text))
        .collect::<CliResult<_>>()?;
    let images: Vec<RgbImage> = cfg
        .paths("triangulate.images")
        .iter()
        .map(|p| read(p, RgbImage::read_ppm))
        .collect::<CliResult<_>>()?;
    let sc = stereo_config(cfg)?;
    sc.validate()?;
    let cloud = stereo::reconstruct(&maps, &images, &cameras, &sc)?;
    write_file(&out.join("cloud.ply"), |w| cloud.write_ply(w))?;
    write_file(&out.join("stats.txt"), |w| cloud.write_stats(w))?;
    let s = cloud.stats;
    Ok(vec![
        field("views", maps.len()),
        field("seeds", s.seeds),
        field("tracks", s.tracks_validated),
        field("triangulated", s.triangulated),
        field("filtered", s.filtered),
        field("points", s.points),
    ])
}

fn fit(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let map = read_map(&cfg.path("fit.map")?)?;
    let camera = read(&cfg.path("fit.camera")?, Camera::read_text)?;
    let init: Vec<f64> = cfg
        .str("fit.init")
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage("fit.init must hold 7 numbers".into()))?;
    let init: [f64; 7] = init
        .try_into()
        .map_err(|_| CliError::Usage("fit.init must hold 7 numbers".into()))?;
    let free = if cfg.bool("fit.free_scale")? {
        pose::ALL_PARAMETERS
    } else {
        pose::RIGID_ONLY
    };
    let result = pose::fit_pose_masked(
        HeadTemplate::standard(),
        &camera,
        &map,
        &RigidPose::from_params(&init),
        cfg.get("fit.iters")?,
        free,
    )?;
    write_file(&out.join("pose.txt"), |w| result.pose.write_line(w, result.cost, result.iterations))?;
    write_file(&out.join("trace.csv"), |w| {
        writeln!(w, "iteration,cost,lambda,accepted")?;
        for (k, t) in result.trace.iter().enumerate() {
            writeln!(w, "{},{},{},{}", k + 1, t.cost, t.lambda, t.accepted)?;
        }
        Ok(())
    })?;
    let p = result.pose.params();
    Ok(vec![
        field("cost", result.cost),
        field("iterations", result.iterations),
        field("rotation", format!("{},{},{}", p[0], p[1], p[2])),
        field("translation", format!("{},{},{}", p[3], p[4], p[5])),
        field("log_scale", p[6]),
    ])
}

fn eval(cfg: &RunConfig, out: &Path) -> CliResult<Fields> {
    let model = read_model(&cfg.path("eval.checkpoint")?)?;
    let data = load_dataset(&cfg.path("eval.data")?)?;
    let m = evaluate_matching(&model, &data)?;
    write_file(&out.join("metrics.txt"), |w| {
        writeln!(w, "mae {}", m.mae)?;
        writeln!(w, "rmse {}", m.rmse)?;
        writeln!(w, "count {}", m.count)?;
        Ok(())
    })?;
    Ok(vec![
        field("mode", model.mode().name()),
        field("sequences", data.len()),
        field("mae", m.mae),
        field("rmse", m.rmse),
        field("count", m.count),
    ])
}
