//! Dataset ingestion: binary PPM decoding, bilinear resizing, directory
//! tree loading, and seeded synthetic datasets for desk-scale experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image, pixels in `[0,1]`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub label: usize,
    pub source: String,
}

/// Ordered samples plus the class-name table.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.label >= self.class_names.len() {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes ({})",
                    s.label,
                    self.class_names.len(),
                    s.source
                )));
            }
        }
        Ok(())
    }

    /// JSON export: classes, per-class counts, file list.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "classes": self.class_names,
            "per_class_counts": self.per_class_counts(),
            "samples": self.samples.iter().map(|s| {
                serde_json::json!({ "source": s.source, "label": s.label })
            }).collect::<Vec<_>>(),
        })
    }
}

// ── PPM / PGM ─────────────────────────────────────────────────────────────

fn is_ppm_whitespace(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Read the next header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && is_ppm_whitespace(bytes[*pos]) {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !is_ppm_whitespace(bytes[*pos]) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    let token = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Format("non-ASCII PPM header".into()))?;
    token
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad PPM header token {token:?}")))
}

/// Decode a binary PPM (P6, maxval 255) into an `[H,W,3]` tensor scaled
/// to `[0,1]`. Comments are allowed anywhere in the header.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("unsupported format: expected P6 PPM".into()));
    }
    let mut pos = 2;
    let width = next_token(bytes, &mut pos)?;
    let height = next_token(bytes, &mut pos)?;
    let maxval = next_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from pixel data
    if pos >= bytes.len() || !is_ppm_whitespace(bytes[pos]) {
        return Err(Error::Format("missing separator before PPM pixel data".into()));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(Error::Format(format!(
            "truncated PPM pixel data: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let data: Vec<f32> = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[height, width, 3], data)
}

/// Encode an `[H,W,3]` tensor with values in `[0,1]` as binary PPM.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::Shape(format!("encode_ppm expects [H,W,3], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Encode an `[H,W]` grayscale buffer with values in `[0,1]` as binary PGM
/// (P5, 8-bit, max-scaled by the caller).
pub fn encode_pgm(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "encode_pgm got {} values for {height}x{width}",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

// ── Resize ────────────────────────────────────────────────────────────────

/// Bilinear resize with corner-aligned sampling; bitwise identity when the
/// sizes already match.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!("resize expects [H,W,C], got {:?}", img.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize target dimensions must be >= 1".into()));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let scale_h = if out_h > 1 { (h - 1) as f32 / (out_h - 1) as f32 } else { 0.0 };
    let scale_w = if out_w > 1 { (w - 1) as f32 / (out_w - 1) as f32 } else { 0.0 };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oi in 0..out_h {
        let fy = oi as f32 * scale_h;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f32;
        for oj in 0..out_w {
            let fx = oj as f32 * scale_w;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f32;
            for ch in 0..c {
                let p00 = src[(y0 * w + x0) * c + ch];
                let p01 = src[(y0 * w + x1) * c + ch];
                let p10 = src[(y1 * w + x0) * c + ch];
                let p11 = src[(y1 * w + x1) * c + ch];
                let top = p00 + (p01 - p00) * dx;
                let bottom = p10 + (p11 - p10) * dx;
                out.push(top + (bottom - top) * dy);
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, c], out)
}

// ── Directory loading ─────────────────────────────────────────────────────

/// Load `root/<class_name>/*.ppm`, classes sorted lexicographically into
/// label ids, files sorted within each class. Undecodable files are skipped
/// with a warning when `skip_bad` is set, otherwise abort the load.
pub fn load_dataset(
    root: &Path,
    image_size: usize,
    skip_bad: bool,
) -> Result<(DatasetManifest, Vec<String>)> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read dataset root {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();

    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
            .collect();
        files.sort();
        for file in files {
            let bytes = std::fs::read(&file)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?;
            match decode_ppm(&bytes).and_then(|img| resize_bilinear(&img, image_size, image_size)) {
                Ok(pixels) => samples.push(ImageSample {
                    pixels,
                    label,
                    source: file.display().to_string(),
                }),
                Err(e) if skip_bad => warnings.push(format!("{}: {e}", file.display())),
                Err(e) => return Err(Error::Data(format!("{}: {e}", file.display()))),
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no decodable .ppm files under {}", root.display())));
    }
    Ok((DatasetManifest { samples, class_names }, warnings))
}

/// Write a manifest out as a `root/<class_name>/<index>.ppm` tree.
pub fn write_dataset_tree(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    for name in &manifest.class_names {
        std::fs::create_dir_all(root.join(name))?;
    }
    let mut counters = vec![0usize; manifest.class_names.len()];
    for s in &manifest.samples {
        let class = &manifest.class_names[s.label];
        let idx = counters[s.label];
        counters[s.label] += 1;
        let path = root.join(class).join(format!("{idx:04}.ppm"));
        std::fs::write(path, encode_ppm(&s.pixels)?)?;
    }
    Ok(())
}

// ── Synthetic data ────────────────────────────────────────────────────────

/// Spec of a synthetic dataset: each class is a bright class-colored square
/// at a class-specific position over low-amplitude noise, so classes are
/// learnable and saliency methods have a planted region to find.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// The class cell: the image region a class's blob always stays inside,
/// as `(row0, row1, col0, col1)` half-open ranges. Independent of the seed.
pub fn synth_blob_rect(image_size: usize, class: usize, classes: usize) -> (usize, usize, usize, usize) {
    let grid = (classes as f64).sqrt().ceil() as usize;
    let rows = classes.div_ceil(grid);
    let cell_r = image_size / rows;
    let cell_c = image_size / grid;
    let ci = class / grid;
    let cj = class % grid;
    (ci * cell_r, (ci + 1) * cell_r, cj * cell_c, (cj + 1) * cell_c)
}

fn blob_side(image_size: usize) -> usize {
    (image_size * 3 / 10).max(2)
}

/// The planted blob of one sample: a seeded jitter of the blob inside the
/// class cell. Recomputable without generating pixels.
pub fn synth_sample_blob_rect(
    spec: &SynthSpec,
    class: usize,
    index: usize,
) -> (usize, usize, usize, usize) {
    let (r0, r1, c0, c1) = synth_blob_rect(spec.image_size, class, spec.classes);
    let side = blob_side(spec.image_size).min(r1 - r0).min(c1 - c0);
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (class as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ (index as u64) << 17,
    );
    let jr = ((r1 - r0 - side) as f64 * rng.random::<f64>()) as usize;
    let jc = ((c1 - c0 - side) as f64 * rng.random::<f64>()) as usize;
    (r0 + jr, r0 + jr + side, c0 + jc, c0 + jc + side)
}

fn class_color(class: usize) -> [f32; 3] {
    // maximally separated hues: R, G, B, white, then mixed pairs
    const PALETTE: [[f32; 3]; 8] = [
        [1.0, 0.1, 0.1],
        [0.1, 1.0, 0.1],
        [0.1, 0.1, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [0.6, 0.6, 0.6],
    ];
    PALETTE[class % PALETTE.len()]
}

/// Deterministic synthetic dataset; identical seeds give bit-identical
/// pixels. Labels are balanced and samples are ordered class-major.
pub fn synth_dataset(spec: &SynthSpec) -> Result<DatasetManifest> {
    if spec.classes < 2 {
        return Err(Error::Invalid("synthetic dataset needs at least 2 classes".into()));
    }
    if spec.per_class == 0 || spec.image_size < 8 {
        return Err(Error::Invalid("per_class must be >= 1 and image_size >= 8".into()));
    }
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let color = class_color(class);
        for idx in 0..spec.per_class {
            let (r0, r1, c0, c1) = synth_sample_blob_rect(spec, class, idx);
            let brightness = 0.85 + 0.1 * rng.random::<f32>();
            let mut pixels = vec![0.0f32; s * s * 3];
            for r in 0..s {
                for c in 0..s {
                    let inside = r >= r0 && r < r1 && c >= c0 && c < c1;
                    if inside {
                        for ch in 0..3 {
                            let v = color[ch] * brightness + 0.05 * rng.random::<f32>();
                            pixels[(r * s + c) * 3 + ch] = v.clamp(0.0, 1.0);
                        }
                    } else {
                        let v = (0.15 + 0.2 * rng.random::<f32>()).clamp(0.0, 1.0);
                        for ch in 0..3 {
                            pixels[(r * s + c) * 3 + ch] = v;
                        }
                    }
                }
            }
            // small class-uninformative colored decoys scattered over the
            // background, so clutter exists but only the blob carries label
            let decoy_side = (s / 16).max(2);
            for d in 0..6 {
                let dr = (rng.random::<f64>() * (s - decoy_side) as f64) as usize;
                let dc = (rng.random::<f64>() * (s - decoy_side) as f64) as usize;
                let dcolor = class_color((class + 1 + d) % 8);
                for r in dr..dr + decoy_side {
                    for c in dc..dc + decoy_side {
                        let in_blob = r >= r0 && r < r1 && c >= c0 && c < c1;
                        if in_blob {
                            continue;
                        }
                        for ch in 0..3 {
                            pixels[(r * s + c) * 3 + ch] = (dcolor[ch] * 0.8).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            samples.push(ImageSample {
                pixels: Tensor::from_vec(&[s, s, 3], pixels)?,
                label: class,
                source: format!("synth:{class}:{idx}"),
            });
        }
    }
    let class_names = (0..spec.classes).map(|c| format!("class_{c}")).collect();
    Ok(DatasetManifest { samples, class_names })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_single_red_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x00";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 3]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_two_pixels_byte_fixture() {
        let bytes = b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn decode_rejects_wrong_magic_maxval_truncation() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn decode_allows_comments() {
        let bytes = b"P6\n# made by hand\n2 # width\n1\n255\n\x10\x20\x30\x40\x50\x60";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
    }

    #[test]
    fn ppm_round_trip_is_bitwise() {
        let bytes: Vec<u8> = {
            let mut b = b"P6\n3 2\n255\n".to_vec();
            b.extend((0u8..18).map(|v| v.wrapping_mul(13)));
            b
        };
        let img = decode_ppm(&bytes).unwrap();
        let encoded = encode_ppm(&img).unwrap();
        let again = decode_ppm(&encoded).unwrap();
        assert_eq!(img, again);
        // pixel payload identical byte for byte
        assert_eq!(&encoded[encoded.len() - 18..], &bytes[bytes.len() - 18..]);
    }

    #[test]
    fn resize_identity_and_corners() {
        let img = Tensor::from_vec(&[2, 2, 3], (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let same = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(img, same);

        let up = resize_bilinear(&img, 4, 4).unwrap();
        for ch in 0..3 {
            assert_eq!(up.data()[ch], img.data()[ch]); // top-left
            assert_eq!(up.data()[(3) * 3 + ch], img.data()[3 + ch]); // top-right
            assert_eq!(up.data()[(3 * 4) * 3 + ch], img.data()[(2) * 3 + ch]); // bottom-left
            assert_eq!(up.data()[(3 * 4 + 3) * 3 + ch], img.data()[(3) * 3 + ch]); // bottom-right
        }
    }

    #[test]
    fn resize_constant_stays_constant_and_in_range() {
        let img = Tensor::filled(&[3, 5, 3], 0.42f32).unwrap();
        let out = resize_bilinear(&img, 7, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.42));

        let noisy = Tensor::new(&[4, 4, 3], crate::tensor::Init::Uniform { lo: 0.2, hi: 0.8, seed: 3 }).unwrap();
        let out = resize_bilinear(&noisy, 9, 9).unwrap();
        let lo = noisy.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = noisy.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = Tensor::filled(&[2, 2, 3], 0.5f32).unwrap();
        assert!(resize_bilinear(&img, 0, 4).is_err());
    }

    #[test]
    fn load_dataset_sorted_classes_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { classes: 4, per_class: 3, image_size: 16, seed: 1 };
        let ds = synth_dataset(&spec).unwrap();
        // rename classes so directory order differs from creation order
        let named = DatasetManifest {
            samples: ds.samples.clone(),
            class_names: vec!["rust".into(), "healthy".into(), "scab".into(), "multiple".into()],
        };
        write_dataset_tree(&named, dir.path()).unwrap();
        let (loaded, warnings) = load_dataset(dir.path(), 16, false).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(loaded.len(), 12);
        assert_eq!(loaded.class_names, vec!["healthy", "multiple", "rust", "scab"]);
        assert_eq!(loaded.per_class_counts(), vec![3, 3, 3, 3]);
    }

    #[test]
    fn load_dataset_skip_flag_for_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { classes: 2, per_class: 3, image_size: 12, seed: 2 };
        let ds = synth_dataset(&spec).unwrap();
        write_dataset_tree(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("class_0/zzz.ppm"), b"P6 not really").unwrap();

        let err = load_dataset(dir.path(), 12, false);
        assert!(matches!(err, Err(Error::Data(_))));

        let (loaded, warnings) = load_dataset(dir.path(), 12, true).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("zzz.ppm"));
    }

    #[test]
    fn load_dataset_empty_root_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 8, false), Err(Error::Data(_))));
    }

    #[test]
    fn synth_dataset_balanced_and_deterministic() {
        let spec = SynthSpec { classes: 4, per_class: 16, image_size: 64, seed: 7 };
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a.per_class_counts(), vec![16; 4]);
        let b = synth_dataset(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.pixels, y.pixels);
        }
        assert!(a.samples.iter().all(|s| s.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn synth_blobs_are_planted_inside_their_cells() {
        let spec = SynthSpec { classes: 4, per_class: 2, image_size: 64, seed: 3 };
        let ds = synth_dataset(&spec).unwrap();
        for class in 0..4 {
            let cell = synth_blob_rect(64, class, 4);
            for idx in 0..2 {
                let (r0, r1, c0, c1) = synth_sample_blob_rect(&spec, class, idx);
                // blob stays inside the class cell
                assert!(r0 >= cell.0 && r1 <= cell.1 && c0 >= cell.2 && c1 <= cell.3);
                let img = &ds.samples[class * 2 + idx].pixels;
                // mean brightness inside the blob far exceeds the outside
                let mut inside = 0.0f32;
                let mut outside = 0.0f32;
                let mut n_in = 0;
                let mut n_out = 0;
                for r in 0..64 {
                    for c in 0..64 {
                        let v: f32 = (0..3).map(|ch| img.data()[(r * 64 + c) * 3 + ch]).sum();
                        if r >= r0 && r < r1 && c >= c0 && c < c1 {
                            inside += v;
                            n_in += 1;
                        } else {
                            outside += v;
                            n_out += 1;
                        }
                    }
                }
                assert!(inside / n_in as f32 > 1.2 * (outside / n_out as f32));
            }
        }
        // distinct classes occupy distinct cells
        let rects: Vec<_> = (0..4).map(|c| synth_blob_rect(64, c, 4)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(rects[i], rects[j]);
            }
        }
    }
}
