//! Sequence directories: the on-disk form of a rendered sequence with its
//! supervision (tracks, landmarks, region labels).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::augment::FrameBundle;
use super::camera::Camera;
use super::sequence::{sample_track_pairs, FramePose, Sequence, TrackPairs};
use super::template::LANDMARK_COUNT;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::text;
use crate::uvw::UvwMap;

/// Everything the trainer and the downstream tools read for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub camera: Camera,
    pub frames: Vec<FrameBundle>,
    pub poses: Vec<FramePose>,
    /// Track pairs for frame pairs `(i, j)`, `i < j`, that passed the
    /// co-visibility rule.
    pub tracks: Vec<((usize, usize), TrackPairs)>,
}

fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((i as u64) << 32 | j as u64)
}

impl SequenceData {
    /// Collects frames and samples tracks for every frame pair. Pairs with
    /// too few co-visible points are left out.
    pub fn from_sequence(seq: &Sequence, budget: usize, seed: u64) -> Result<Self> {
        let frames = seq
            .frames
            .iter()
            .map(|f| FrameBundle {
                rgb: f.rgb.clone(),
                uvw: f.uvw.clone(),
                labels: f.labels.clone(),
                landmarks: f.landmarks.clone(),
            })
            .collect();
        let mut tracks = Vec::new();
        let n = seq.frames.len();
        for i in 0..n {
            for j in i + 1..n {
                match sample_track_pairs(seq, i, j, budget, pair_seed(seed, i, j)) {
                    Ok(t) => tracks.push(((i, j), t)),
                    Err(Error::TooFewTracks { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            camera: seq.camera.clone(),
            frames,
            poses: seq.frames.iter().map(|f| f.pose).collect(),
            tracks,
        })
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (w, h) = (self.width(), self.height());
        for (k, f) in self.frames.iter().enumerate() {
            write_file(&dir.join(format!("frame_{k:04}.ppm")), |out| f.rgb.write_ppm(out))?;
            write_file(&dir.join(format!("mask_{k:04}.pgm")), |out| {
                GrayImage::from_mask(w, h, &f.uvw.valid).write_pgm(out)
            })?;
            write_file(&dir.join(format!("uvw_{k:04}.dmv")), |out| f.uvw.write_to(out))?;
            let labels = GrayImage {
                width: w,
                height: h,
                data: f.labels.clone(),
            };
            write_file(&dir.join(format!("labels_{k:04}.pgm")), |out| labels.write_pgm(out))?;
        }
        write_file(&dir.join("landmarks.txt"), |out| {
            for f in &self.frames {
                for (k, lm) in f.landmarks.iter().enumerate() {
                    match lm {
                        Some([x, y]) => writeln!(out, "{k} {x} {y}")?,
                        None => writeln!(out, "{k} -1 -1")?,
                    }
                }
            }
            Ok(())
        })?;
        for ((i, j), t) in &self.tracks {
            write_file(&dir.join(format!("tracks_{i}_{j}.txt")), |out| {
                for (a, b) in t.pixels_a.iter().zip(&t.pixels_b) {
                    writeln!(out, "{} {} {} {}", a[0], a[1], b[0], b[1])?;
                }
                Ok(())
            })?;
        }
        write_file(&dir.join("camera.txt"), |out| self.camera.write_text(out))?;
        write_file(&dir.join("poses.txt"), |out| {
            for p in &self.poses {
                let t = p.translation;
                writeln!(out, "{} {} {} {} {} {} {}", p.yaw, p.pitch, p.roll, t[0], t[1], t[2], p.deform)?;
            }
            Ok(())
        })
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::arg(format!("{} is not a sequence directory", dir.display())));
        }
        let camera = read_file(&dir.join("camera.txt"), Camera::read_text)?;
        let (w, h) = (camera.width, camera.height);
        let mut frames = Vec::new();
        for k in 0.. {
            let rgb_path = dir.join(format!("frame_{k:04}.ppm"));
            if !rgb_path.exists() {
                break;
            }
            let rgb = read_file(&rgb_path, RgbImage::read_ppm)?;
            let uvw = read_file(&dir.join(format!("uvw_{k:04}.dmv")), UvwMap::read_from)?;
            let labels = read_file(&dir.join(format!("labels_{k:04}.pgm")), GrayImage::read_pgm)?;
            for (name, dims) in [
                ("frame", (rgb.width, rgb.height)),
                ("uvw", (uvw.width, uvw.height)),
                ("labels", (labels.width, labels.height)),
            ] {
                if dims != (w, h) {
                    return Err(Error::arg(format!(
                        "{name}_{k:04} is {}x{}, camera says {w}x{h}",
                        dims.0, dims.1
                    )));
                }
            }
            frames.push(FrameBundle {
                rgb,
                uvw,
                labels: labels.data,
                landmarks: Vec::new(),
            });
        }
        if frames.len() < 2 {
            return Err(Error::arg(format!("{} holds fewer than 2 frames", dir.display())));
        }

        let lm_path = dir.join("landmarks.txt");
        parse_landmarks(&read_text(&lm_path)?, &mut frames, w, h).map_err(|e| e.in_file(&lm_path))?;
        let pose_path = dir.join("poses.txt");
        let poses = parse_poses(&read_text(&pose_path)?, frames.len()).map_err(|e| e.in_file(&pose_path))?;

        let mut tracks = Vec::new();
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                let path = dir.join(format!("tracks_{i}_{j}.txt"));
                if !path.exists() {
                    continue;
                }
                let t = parse_tracks(&read_text(&path)?, w, h).map_err(|e| e.in_file(&path))?;
                tracks.push(((i, j), t));
            }
        }
        Ok(Self {
            camera,
            frames,
            poses,
            tracks,
        })
    }
}

fn parse_landmarks(body: &str, frames: &mut [FrameBundle], w: usize, h: usize) -> Result<()> {
    let lines = text::lines(body);
    if lines.len() != frames.len() * LANDMARK_COUNT {
        return Err(Error::format(
            "landmarks file",
            body.len() as u64,
            format!("expected {} lines, found {}", frames.len() * LANDMARK_COUNT, lines.len()),
        ));
    }
    for (n, line) in lines.iter().enumerate() {
        let [k, x, y] = line.fields::<i64, 3>("landmarks file")?;
        if k != (n % LANDMARK_COUNT) as i64 {
            return Err(Error::format("landmarks file", line.offset, "landmark index out of order"));
        }
        let lm = match (x, y) {
            (-1, -1) => None,
            (x, y) if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) => Some([x as usize, y as usize]),
            _ => return Err(Error::format("landmarks file", line.offset, "landmark outside the image")),
        };
        frames[n / LANDMARK_COUNT].landmarks.push(lm);
    }
    Ok(())
}

fn parse_poses(body: &str, frames: usize) -> Result<Vec<FramePose>> {
    let mut poses = Vec::new();
    for line in text::lines(body) {
        let [yaw, pitch, roll, tx, ty, tz, deform] = line.fields::<f64, 7>("poses file")?;
        poses.push(FramePose {
            yaw,
            pitch,
            roll,
            translation: [tx, ty, tz],
            deform,
        });
    }
    if poses.len() != frames {
        return Err(Error::format("poses file", body.len() as u64, "one pose per frame expected"));
    }
    Ok(poses)
}

/// A `tracks_i_j.txt` file: one `x1 y1 x2 y2` pair per line.
pub fn read_tracks(path: &Path, w: usize, h: usize) -> Result<TrackPairs> {
    parse_tracks(&read_text(path)?, w, h).map_err(|e| e.in_file(path))
}

fn parse_tracks(body: &str, w: usize, h: usize) -> Result<TrackPairs> {
    let mut t = TrackPairs::default();
    for (n, line) in text::lines(body).iter().enumerate() {
        let [x1, y1, x2, y2] = line.fields::<usize, 4>("tracks file")?;
        if x1 >= w || x2 >= w || y1 >= h || y2 >= h {
            return Err(Error::format("tracks file", line.offset, "track outside the image"));
        }
        t.push([x1, y1], [x2, y2], n as u32);
    }
    Ok(t)
}

/// Reads one file with `parse`, tagging any failure with its path.
pub fn read_file<T>(path: &Path, parse: impl FnOnce(BufReader<File>) -> Result<T>) -> Result<T> {
    File::open(path)
        .map_err(Error::from)
        .and_then(|f| parse(BufReader::new(f)))
        .map_err(|e| e.in_file(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))
}

pub fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let run = || -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        body(&mut out)?;
        out.flush()?;
        Ok(())
    };
    run().map_err(|e| e.in_file(path))
}
