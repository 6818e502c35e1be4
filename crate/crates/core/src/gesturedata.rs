//! Dataset ingestion for the two gesture modalities, stratified splitting,
//! and seeded synthetic generators that stand in for the real recordings at
//! desk scale.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame payload of one gesture sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FrameData {
    /// `frames x channels x height x width`, row-major, values in [0, 1].
    Image { frames: usize, channels: usize, height: usize, width: usize, data: Vec<f64> },
    /// One 3-axis accelerometer row per timestep, in g units.
    Accel(Vec<[f64; 3]>),
}

/// One labeled gesture sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub id: String,
    pub label: usize,
    pub frames: FrameData,
}

impl SequenceSample {
    /// Number of timesteps.
    pub fn len(&self) -> usize {
        match &self.frames {
            FrameData::Image { frames, .. } => *frames,
            FrameData::Accel(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stratified train/valid/test split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub valid: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

/// Loads `root/<class>/<sequence>/<frame>.{png,jpg}` into image sequences:
/// frames sorted by filename, decoded, bilinearly resized to
/// `target x target`, and scaled to [0, 1]. Class indices follow sorted
/// class-directory order.
pub fn load_image_dataset(root: &Path, target: u32) -> Result<Vec<SequenceSample>> {
    let class_dirs = sorted_dirs(root)?;
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut samples = Vec::new();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let class_name = file_name(class_dir);
        for seq_dir in sorted_dirs(class_dir)? {
            let seq_name = file_name(&seq_dir);
            let mut frame_paths: Vec<_> = fs::read_dir(&seq_dir)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            frame_paths.sort();
            if frame_paths.is_empty() {
                return Err(Error::Data(format!("empty sequence {}", seq_dir.display())));
            }
            let mut data = Vec::with_capacity(frame_paths.len() * 3 * (target * target) as usize);
            for path in &frame_paths {
                let ext = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .unwrap_or_default();
                if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                    return Err(Error::Data(format!("unknown frame extension: {}", path.display())));
                }
                let img = image::open(path)
                    .map_err(|e| Error::Data(format!("unreadable frame {}: {e}", path.display())))?;
                let resized = image::imageops::resize(
                    &img.to_rgb8(),
                    target,
                    target,
                    image::imageops::FilterType::Triangle,
                );
                // Channel-major per frame: all R, then G, then B.
                for c in 0..3usize {
                    for px in resized.pixels() {
                        data.push(px.0[c] as f64 / 255.0);
                    }
                }
            }
            samples.push(SequenceSample {
                id: format!("{class_name}/{seq_name}"),
                label,
                frames: FrameData::Image {
                    frames: frame_paths.len(),
                    channels: 3,
                    height: target as usize,
                    width: target as usize,
                    data,
                },
            });
        }
    }
    Ok(samples)
}

/// Default accelerometer gesture subset: ids 1 through 8.
pub fn default_gesture_subset() -> Vec<u32> {
    (1..=8).collect()
}

/// Loads `root/<user>/<gesture>/<rep>.csv` accelerometer sequences. Rows are
/// `t,ax,ay,az`. `gestures` selects the target classes by the integer id at
/// the end of each gesture directory name (defaults to 1..=8); labels are
/// re-indexed over the retained subset in ascending id order. Non-monotone
/// timestamps produce a warning on stderr but the rows are kept.
pub fn load_accel_dataset(root: &Path, gestures: Option<&[u32]>) -> Result<Vec<SequenceSample>> {
    let retained: Vec<u32> = match gestures {
        Some(g) => {
            let mut g = g.to_vec();
            g.sort_unstable();
            g.dedup();
            g
        }
        None => default_gesture_subset(),
    };
    let user_dirs = sorted_dirs(root)?;
    if user_dirs.is_empty() {
        return Err(Error::Data(format!("no user directories under {}", root.display())));
    }
    let mut samples = Vec::new();
    for user_dir in &user_dirs {
        let user = file_name(user_dir);
        for gesture_dir in sorted_dirs(user_dir)? {
            let gname = file_name(&gesture_dir);
            let gid = trailing_int(&gname).ok_or_else(|| {
                Error::Data(format!("gesture directory '{gname}' has no trailing integer id"))
            })?;
            let Some(label) = retained.iter().position(|&g| g == gid) else {
                continue;
            };
            let mut reps: Vec<_> = fs::read_dir(&gesture_dir)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            reps.sort();
            for rep in reps {
                if rep.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
                    != Some("csv".into())
                {
                    return Err(Error::Data(format!("unexpected file {}", rep.display())));
                }
                let text = fs::read_to_string(&rep)?;
                let mut rows: Vec<[f64; 3]> = Vec::new();
                let mut last_t = f64::NEG_INFINITY;
                for (ln, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() {
                        continue;
                    }
                    let fields: Vec<&str> = line.split(',').collect();
                    if fields.len() != 4 {
                        return Err(Error::Data(format!(
                            "{}:{}: expected t,ax,ay,az",
                            rep.display(),
                            ln + 1
                        )));
                    }
                    let mut parsed = [0.0f64; 4];
                    for (slot, field) in parsed.iter_mut().zip(&fields) {
                        *slot = field.trim().parse().map_err(|_| {
                            Error::Data(format!(
                                "{}:{}: malformed number '{field}'",
                                rep.display(),
                                ln + 1
                            ))
                        })?;
                    }
                    if parsed[0] < last_t {
                        eprintln!(
                            "warning: non-monotone timestamp at {}:{} (kept)",
                            rep.display(),
                            ln + 1
                        );
                    }
                    last_t = parsed[0];
                    rows.push([parsed[1], parsed[2], parsed[3]]);
                }
                if rows.is_empty() {
                    return Err(Error::Data(format!("empty sequence {}", rep.display())));
                }
                samples.push(SequenceSample {
                    id: format!("{user}/{gname}/{}", file_name(&rep)),
                    label,
                    frames: FrameData::Accel(rows),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("no sequences matched the gesture subset".into()));
    }
    Ok(samples)
}

/// Splits samples per class with the given ratios: each class is shuffled
/// with the seed and cut proportionally, so class ratios match across the
/// three sets within one sample.
pub fn stratified_split(
    samples: Vec<SequenceSample>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!("split ratios must be nonnegative and sum to 1: {ratios:?}")));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<SequenceSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (label, mut class_samples) in by_class {
        class_samples.shuffle(&mut rng);
        let n = class_samples.len();
        let c1 = (n as f64 * ratios[0]).round() as usize;
        let c2 = ((n as f64 * (ratios[0] + ratios[1])).round() as usize).max(c1);
        let c2 = c2.min(n);
        let c1 = c1.min(c2);
        let counts = [c1, c2 - c1, n - c2];
        for (count, ratio) in counts.iter().zip(&ratios) {
            if *ratio > 0.0 && *count == 0 {
                return Err(Error::Data(format!(
                    "class {label} has too few samples ({n}) for ratios {ratios:?}"
                )));
            }
        }
        let mut it = class_samples.into_iter();
        train.extend(it.by_ref().take(counts[0]));
        valid.extend(it.by_ref().take(counts[1]));
        test.extend(it);
    }
    Ok(DatasetSplit { train, valid, test, ratios, seed })
}

/// Noise-free trajectory of one synthetic accelerometer class: a half-sine
/// pulse along a class-specific direction in the x/y plane plus constant
/// gravity on z.
pub fn accel_prototype(class: usize, classes: usize, steps: usize) -> Vec<[f64; 3]> {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    let (dy, dx) = angle.sin_cos();
    (0..steps)
        .map(|t| {
            let u = if steps > 1 { t as f64 / (steps - 1) as f64 } else { 0.0 };
            let pulse = (std::f64::consts::PI * u).sin();
            [dx * pulse, dy * pulse, 1.0]
        })
        .collect()
}

/// Synthetic accelerometer gestures: each class is a pulse along a distinct
/// direction (evenly spaced angles), with white noise `sigma` added per axis.
/// Sequence lengths are drawn uniformly from `t_range`.
pub fn synth_accel(
    classes: usize,
    per_class: usize,
    t_range: (usize, usize),
    sigma: f64,
    seed: u64,
) -> Vec<SequenceSample> {
    assert!(classes >= 1 && per_class >= 1);
    let (t_min, t_max) = t_range;
    assert!(t_min >= 1 && t_min <= t_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for k in 0..per_class {
            let steps = rng.gen_range(t_min..=t_max);
            let proto = accel_prototype(class, classes, steps);
            let rows: Vec<[f64; 3]> = proto
                .iter()
                .map(|row| {
                    let mut out = *row;
                    for v in out.iter_mut() {
                        let n: f64 = rng.sample(StandardNormal);
                        *v += sigma * n;
                    }
                    out
                })
                .collect();
            samples.push(SequenceSample {
                id: format!("synth-accel-c{class}-{k}"),
                label: class,
                frames: FrameData::Accel(rows),
            });
        }
    }
    samples
}

const VIDEO_SIZE: usize = 32;
const SHAPE_COLORS: [[f64; 3]; 3] = [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9]];
const VIDEO_BG: f64 = 0.05;

fn glyph_mask(shape: usize, dx: f64, dy: f64) -> bool {
    let half = 8.5;
    match shape {
        // Vertical bar.
        0 => dx.abs() <= 2.5 && dy.abs() <= half,
        // Fan: triangle widening downward.
        1 => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
        // V: two arms widening downward.
        _ => dy.abs() <= half && (dx.abs() - (dy + half) / 2.0).abs() <= 1.5,
    }
}

/// Synthetic image-sequence gestures on a 32x32 canvas: 9 classes from
/// 3 glyph shapes (bar, fan, V) times 3 motions (left, right, contract).
/// Left and right trajectories mirror each other exactly, so with zero noise
/// the two motions of a shape are frame-by-frame horizontal flips.
pub fn synth_video(per_class: usize, frames: usize, sigma: f64, seed: u64) -> Vec<SequenceSample> {
    assert!(per_class >= 1 && frames >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = VIDEO_SIZE;
    let mut samples = Vec::with_capacity(9 * per_class);
    for shape in 0..3 {
        for motion in 0..3 {
            let label = shape * 3 + motion;
            for k in 0..per_class {
                let mut data = Vec::with_capacity(frames * 3 * size * size);
                for t in 0..frames {
                    let progress = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
                    let offset = (14.0 * progress).round() as i64;
                    let (cx, scale) = match motion {
                        0 => (23 - offset, 1.0),         // left
                        1 => (8 + offset, 1.0),          // right
                        _ => (16, 1.0 - 0.5 * progress), // contract
                    };
                    let cy = 16i64;
                    for c in 0..3usize {
                        for y in 0..size {
                            for x in 0..size {
                                let dx = (x as i64 - cx) as f64 / scale;
                                let dy = (y as i64 - cy) as f64 / scale;
                                let base = if glyph_mask(shape, dx, dy) {
                                    SHAPE_COLORS[shape][c]
                                } else {
                                    VIDEO_BG
                                };
                                let n: f64 = rng.sample(StandardNormal);
                                data.push((base + sigma * n).clamp(0.0, 1.0));
                            }
                        }
                    }
                }
                samples.push(SequenceSample {
                    id: format!("synth-video-c{label}-{k}"),
                    label,
                    frames: FrameData::Image {
                        frames,
                        channels: 3,
                        height: size,
                        width: size,
                        data,
                    },
                });
            }
        }
    }
    samples
}

/// Writes one `id,label,length` line per sample.
pub fn write_manifest(samples: &[SequenceSample], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for s in samples {
        writeln!(out, "{},{},{}", s.id, s.label, s.len())?;
    }
    Ok(())
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn trailing_int(name: &str) -> Option<u32> {
    let digits: String = name.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accel_rows(s: &SequenceSample) -> &Vec<[f64; 3]> {
        match &s.frames {
            FrameData::Accel(rows) => rows,
            _ => panic!("expected accel sample"),
        }
    }

    #[test]
    fn split_examples() {
        let samples = synth_accel(9, 100, (4, 4), 0.0, 0);
        let split = stratified_split(samples, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(split.train.len(), 540);
        assert_eq!(split.valid.len(), 180);
        assert_eq!(split.test.len(), 180);

        let samples = synth_accel(2, 5, (4, 4), 0.0, 0);
        let split = stratified_split(samples, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(split.train.len(), 10);
        assert!(split.valid.is_empty() && split.test.is_empty());
    }

    #[test]
    fn split_is_stratified_and_covers_everything() {
        let samples = synth_accel(3, 10, (4, 6), 0.0, 2);
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let split = stratified_split(samples, [0.5, 0.2, 0.3], 9).unwrap();
        let mut seen: Vec<String> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .map(|s| s.id.clone())
            .collect();
        seen.sort();
        let mut want = ids;
        want.sort();
        assert_eq!(seen, want);
        for label in 0..3 {
            assert_eq!(split.train.iter().filter(|s| s.label == label).count(), 5);
            assert_eq!(split.valid.iter().filter(|s| s.label == label).count(), 2);
            assert_eq!(split.test.iter().filter(|s| s.label == label).count(), 3);
        }
    }

    #[test]
    fn split_seeds_change_membership_not_counts() {
        let mk = || synth_accel(2, 10, (4, 4), 0.0, 5);
        let a = stratified_split(mk(), [0.5, 0.25, 0.25], 1).unwrap();
        let b = stratified_split(mk(), [0.5, 0.25, 0.25], 2).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.valid.len(), b.valid.len());
        let ids = |v: &[SequenceSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_ne!(ids(&a.train), ids(&b.train));
    }

    #[test]
    fn split_rejects_too_small_classes() {
        let samples = synth_accel(1, 2, (4, 4), 0.0, 0);
        assert!(stratified_split(samples, [0.6, 0.2, 0.2], 0).is_err());
        let samples = synth_accel(1, 2, (4, 4), 0.0, 0);
        assert!(stratified_split(samples, [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn synth_accel_is_deterministic_without_noise() {
        let samples = synth_accel(4, 3, (8, 8), 0.0, 7);
        // Same class, equal length: identical.
        assert_eq!(accel_rows(&samples[0]), accel_rows(&samples[1]));
        let rerun = synth_accel(4, 3, (8, 8), 0.0, 7);
        assert_eq!(samples, rerun);
    }

    #[test]
    fn synth_accel_prototypes_are_distinct() {
        let classes = 8;
        let mut min_dist = f64::INFINITY;
        for a in 0..classes {
            for b in (a + 1)..classes {
                let pa = accel_prototype(a, classes, 16);
                let pb = accel_prototype(b, classes, 16);
                let d: f64 = pa
                    .iter()
                    .zip(&pb)
                    .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)))
                    .sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist > 0.1, "prototypes too close: {min_dist}");
    }

    #[test]
    fn nearest_prototype_classifies_noisy_samples() {
        let classes = 8;
        let steps = 16;
        let samples = synth_accel(classes, 10, (steps, steps), 0.05, 3);
        let protos: Vec<Vec<[f64; 3]>> =
            (0..classes).map(|c| accel_prototype(c, classes, steps)).collect();
        for s in &samples {
            let rows = accel_rows(s);
            let mut best = (f64::INFINITY, 0usize);
            for (c, p) in protos.iter().enumerate() {
                let d: f64 = rows
                    .iter()
                    .zip(p)
                    .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assert_eq!(best.1, s.label, "sample {} misclassified", s.id);
        }
    }

    #[test]
    fn synth_video_basics() {
        let samples = synth_video(1, 4, 0.0, 0);
        assert_eq!(samples.len(), 9);
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, (0..9).collect::<Vec<_>>());
        for s in &samples {
            match &s.frames {
                FrameData::Image { data, .. } => {
                    assert!(data.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
                _ => panic!("expected image sample"),
            }
        }
    }

    #[test]
    fn left_and_right_motions_mirror() {
        let samples = synth_video(1, 6, 0.0, 0);
        for shape in 0..3 {
            let left = &samples[shape * 3];
            let right = &samples[shape * 3 + 1];
            let (FrameData::Image { data: ld, frames, height, width, .. }, FrameData::Image { data: rd, .. }) =
                (&left.frames, &right.frames)
            else {
                panic!("expected image samples")
            };
            for t in 0..*frames {
                for c in 0..3 {
                    for y in 0..*height {
                        for x in 0..*width {
                            let idx = ((t * 3 + c) * height + y) * width + x;
                            let mirror = ((t * 3 + c) * height + y) * width + (width - 1 - x);
                            assert_eq!(ld[idx], rd[mirror], "mismatch at t={t} c={c} y={y} x={x}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_lines() {
        let samples = synth_accel(2, 1, (4, 4), 0.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_manifest(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("synth-accel-c0-0,0,"));
    }

    #[test]
    fn image_loader_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        // Two classes, one sequence each, two constant-gray frames.
        for (class, shade) in [("a_class", 100u8), ("b_class", 200u8)] {
            let seq = dir.path().join(class).join("seq0");
            fs::create_dir_all(&seq).unwrap();
            let img = image::RgbImage::from_pixel(320, 240, image::Rgb([shade, shade, shade]));
            img.save(seq.join("frame0.png")).unwrap();
            img.save(seq.join("frame1.png")).unwrap();
        }
        let samples = load_image_dataset(dir.path(), 32).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, 0);
        assert_eq!(samples[1].label, 1);
        match &samples[0].frames {
            FrameData::Image { frames, channels, height, width, data } => {
                assert_eq!((*frames, *channels, *height, *width), (2, 3, 32, 32));
                // Constant image resizes to the same constant.
                let want = 100.0 / 255.0;
                assert!(data.iter().all(|&v| (v - want).abs() < 1e-12));
            }
            _ => panic!("expected image"),
        }
    }

    #[test]
    fn image_loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_dataset(dir.path(), 32).is_err()); // empty root

        let seq = dir.path().join("c0/seq0");
        fs::create_dir_all(&seq).unwrap();
        fs::write(seq.join("frame0.txt"), "nope").unwrap();
        assert!(load_image_dataset(dir.path(), 32).is_err()); // unknown extension
    }

    #[test]
    fn accel_loader_parses_layout() {
        let dir = tempfile::tempdir().unwrap();
        let gdir = dir.path().join("U01").join("G03");
        fs::create_dir_all(&gdir).unwrap();
        fs::write(gdir.join("rep0.csv"), "0.0,0.0,0.0,9.8\n").unwrap();
        let samples = load_accel_dataset(dir.path(), None).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 2); // gesture id 3 within subset 1..=8
        assert_eq!(accel_rows(&samples[0]), &vec![[0.0, 0.0, 9.8]]);
    }

    #[test]
    fn accel_loader_counts_filtered_layout() {
        let dir = tempfile::tempdir().unwrap();
        for user in 0..2 {
            for gesture in 1..=10u32 {
                let gdir = dir.path().join(format!("U{user}")).join(format!("G{gesture:02}"));
                fs::create_dir_all(&gdir).unwrap();
                for rep in 0..3 {
                    fs::write(
                        gdir.join(format!("{rep}.csv")),
                        "0,0.1,0.2,1.0\n1,0.2,0.3,1.0\n",
                    )
                    .unwrap();
                }
            }
        }
        let samples = load_accel_dataset(dir.path(), None).unwrap();
        // 2 users x 8 retained gestures x 3 reps.
        assert_eq!(samples.len(), 48);
        assert!(samples.iter().all(|s| s.label < 8));
        assert!(samples.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn accel_loader_rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let gdir = dir.path().join("U01").join("G01");
        fs::create_dir_all(&gdir).unwrap();
        fs::write(gdir.join("rep0.csv"), "0.0,0.1,0.2\n").unwrap();
        assert!(load_accel_dataset(dir.path(), None).is_err());
        fs::write(gdir.join("rep0.csv"), "0.0,a,0.2,0.3\n").unwrap();
        assert!(load_accel_dataset(dir.path(), None).is_err());
    }
}
