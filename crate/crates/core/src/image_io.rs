//! Binary PGM (P5) / PPM (P6) images, corpus discovery and augmented crop sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor4};

/// Random crop / flip settings for training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub crop_size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            crop_size: 64,
            flip_h: true,
            flip_v: true,
            batch: 4,
        }
    }
}

/// Decodes a P5/P6 byte stream into a `(1, c, h, w)` tensor with values in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor4> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported magic {:?}, expected P5 or P6",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let payload = &bytes[cursor.pos..];
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            expected
        )));
    }
    // interleaved RGB -> planar
    Ok(Tensor4::from_fn([1, channels, height, width], |_, c, y, x| {
        payload[(y * width + x) * channels + c] as f64 / 255.0
    }))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Format(format!(
                    "malformed {what}: {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Quantizes a value in `[0, 1]` to a byte: clamp, scale by 255, round half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes a `(1, c, h, w)` tensor, `c` in {1, 3}, as P5/P6 bytes.
pub fn encode_pnm(t: &Tensor4) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::InvalidShape(format!(
            "can only save (1, 1|3, h, w) images, got {:?}",
            t.shape()
        )));
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(t.at(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn save_image(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pnm(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// The tensor obtained by saving and reloading `t`.
pub fn quantized(t: &Tensor4) -> Tensor4 {
    t.map(|v| quantize(v) as f64 / 255.0)
}

/// Image files of a corpus directory, by extension, in lexicographic order.
pub fn list_corpus(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Tensor4>> {
    let files = list_corpus(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    files.iter().map(load_image).collect()
}

/// Draws `cfg.batch` random crops from `corpus`.
///
/// Per sample the rng is consumed in a fixed order: image index, crop row,
/// crop column, then one coin per enabled flip (horizontal before vertical).
pub fn sample_batch(corpus: &[Tensor4], cfg: &SampleConfig, rng: &mut Rng) -> Result<Tensor4> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let channels = first.c();
    for img in corpus {
        if img.c() != channels {
            return Err(Error::InvalidShape(format!(
                "corpus mixes {} and {} channel images",
                channels,
                img.c()
            )));
        }
        if img.h() < cfg.crop_size || img.w() < cfg.crop_size {
            return Err(Error::InvalidShape(format!(
                "crop {} larger than image {}x{}",
                cfg.crop_size,
                img.h(),
                img.w()
            )));
        }
    }
    if cfg.batch == 0 || cfg.crop_size == 0 {
        return Err(Error::InvalidShape("batch and crop size must be positive".into()));
    }
    let mut samples = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let img = &corpus[rng.below(corpus.len())];
        let top = rng.below(img.h() - cfg.crop_size + 1);
        let left = rng.below(img.w() - cfg.crop_size + 1);
        let mut crop = img.select(0).crop(top, left, cfg.crop_size, cfg.crop_size)?;
        if cfg.flip_h && rng.coin() {
            crop = crop.flip_horizontal();
        }
        if cfg.flip_v && rng.coin() {
            crop = crop.flip_vertical();
        }
        samples.push(crop);
    }
    Tensor4::stack(&samples)
}

/// Synthetic RGB texture: a colour gradient, oriented sinusoids, flat
/// rectangles and discs.
///
/// Wave frequencies reach 0.2 cycles per pixel and the shapes add hard edges,
/// so a bicubic down-up round trip loses detail much as it does on photographs.
/// Values are clamped to `[0, 1]` and quantized to 8-bit levels so the image
/// survives a save/load cycle unchanged.
pub fn synthetic_texture(rng: &mut Rng, height: usize, width: usize) -> Tensor4 {
    let base: [f64; 3] = [rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6)];
    let grad: [(f64, f64); 3] = [
        (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
        (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
        (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
    ];

    struct Wave {
        fy: f64,
        fx: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let angle = rng.uniform(0.0, std::f64::consts::PI);
            // cycles per pixel, below Nyquist
            let freq = rng.uniform(0.02, 0.2);
            Wave {
                fy: freq * angle.sin(),
                fx: freq * angle.cos(),
                phase: rng.uniform(0.0, 2.0 * std::f64::consts::PI),
                amp: [rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08)],
            }
        })
        .collect();

    enum Shape {
        Rect { top: f64, left: f64, bottom: f64, right: f64 },
        Disc { cy: f64, cx: f64, r2: f64 },
    }
    let (hf, wf) = (height.max(1) as f64, width.max(1) as f64);
    let shapes: Vec<(Shape, [f64; 3])> = (0..12)
        .map(|i| {
            let shift = [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)];
            let (cy, cx) = (rng.uniform(0.0, hf), rng.uniform(0.0, wf));
            let size = rng.uniform(1.0, hf.min(wf) / 4.0);
            let shape = if i % 3 == 2 {
                Shape::Disc { cy, cx, r2: size * size }
            } else {
                let aspect = rng.uniform(0.3, 3.0);
                Shape::Rect {
                    top: cy,
                    left: cx,
                    bottom: cy + size * aspect.sqrt(),
                    right: cx + size / aspect.sqrt(),
                }
            };
            (shape, shift)
        })
        .collect();

    let img = Tensor4::from_fn([1, 3, height, width], |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + grad[c].0 * yf / hf + grad[c].1 * xf / wf;
        for wave in &waves {
            let arg = 2.0 * std::f64::consts::PI * (wave.fy * yf + wave.fx * xf) + wave.phase;
            v += wave.amp[c] * arg.sin();
        }
        for (shape, shift) in &shapes {
            let inside = match *shape {
                Shape::Rect { top, left, bottom, right } => yf >= top && yf < bottom && xf >= left && xf < right,
                Shape::Disc { cy, cx, r2 } => (yf - cy).powi(2) + (xf - cx).powi(2) < r2,
            };
            if inside {
                v += shift[c];
            }
        }
        v
    });
    quantized(&img)
}

/// Writes `count` synthetic textures as `synth_NNN.ppm` into `dir`.
pub fn write_synthetic_corpus(
    dir: impl AsRef<Path>,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = Rng::new(seed);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synthetic_texture(&mut rng, size, size);
        let path = dir.join(format!("synth_{i:03}.ppm"));
        save_image(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_p5() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 2]);
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
        assert!((t.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn decodes_p6_pixel() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[0.2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let err = |b: &[u8]| decode_pnm(b).unwrap_err().to_string();
        assert!(err(b"P3\n1 1\n255\n0 0 0").contains("magic"));
        assert!(err(b"P5\n1 1\n65535\n\0\0").contains("maxval"));
        assert!(err(b"P5\n2 2\n255\n\0\0").contains("truncated"));
        assert!(err(b"P5\nxx 2\n255\n").contains("width"));
        assert!(err(b"P5\n2").contains("truncated"));
    }

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.3), 0);
        let ones = Tensor4::full([1, 1, 3, 2], 1.0);
        let bytes = encode_pnm(&ones).unwrap();
        assert!(bytes.ends_with(&[255; 6]));
        assert!(encode_pnm(&Tensor4::zeros([2, 3, 2, 2])).is_err());
        assert!(encode_pnm(&Tensor4::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(11);
        let payload: Vec<u8> = (0..5 * 7 * 3).map(|_| rng.below(256) as u8).collect();
        let mut file = b"P6\n7 5\n255\n".to_vec();
        file.extend_from_slice(&payload);
        let t = decode_pnm(&file).unwrap();
        assert_eq!(encode_pnm(&t).unwrap(), file);
        // load . save . load is idempotent
        let again = decode_pnm(&encode_pnm(&t).unwrap()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn full_size_crop_without_flips_returns_images() {
        let mut rng = Rng::new(2);
        let corpus = vec![synthetic_texture(&mut rng, 16, 16)];
        let cfg = SampleConfig {
            crop_size: 16,
            flip_h: false,
            flip_v: false,
            batch: 3,
        };
        let batch = sample_batch(&corpus, &cfg, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(batch.select(i), corpus[0]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = Rng::new(4);
        let corpus: Vec<_> = (0..3).map(|_| synthetic_texture(&mut rng, 40, 40)).collect();
        let cfg = SampleConfig {
            crop_size: 16,
            ..SampleConfig::default()
        };
        let a = sample_batch(&corpus, &cfg, &mut Rng::new(99)).unwrap();
        let b = sample_batch(&corpus, &cfg, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [4, 3, 16, 16]);
    }

    #[test]
    fn image_choice_is_uniform() {
        let corpus = vec![Tensor4::full([1, 1, 4, 4], 0.0), Tensor4::full([1, 1, 4, 4], 1.0)];
        let cfg = SampleConfig {
            crop_size: 2,
            flip_h: true,
            flip_v: true,
            batch: 10_000,
        };
        let batch = sample_batch(&corpus, &cfg, &mut Rng::new(17)).unwrap();
        let ones = (0..cfg.batch).filter(|&i| batch.item(i)[0] == 1.0).count();
        let freq = ones as f64 / cfg.batch as f64;
        assert!((0.45..=0.55).contains(&freq), "{freq}");
    }

    #[test]
    fn crops_stay_inside_source() {
        // every pixel encodes its source coordinates; a crop is valid iff it is a contiguous window
        let img = Tensor4::from_fn([1, 1, 12, 9], |_, _, y, x| (y * 100 + x) as f64);
        let cfg = SampleConfig {
            crop_size: 5,
            flip_h: false,
            flip_v: false,
            batch: 200,
        };
        let batch = sample_batch(&[img], &cfg, &mut Rng::new(8)).unwrap();
        for i in 0..cfg.batch {
            let s = batch.item(i);
            let origin = s[0] as usize;
            let (top, left) = (origin / 100, origin % 100);
            assert!(top + 5 <= 12 && left + 5 <= 9);
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(s[y * 5 + x] as usize, (top + y) * 100 + left + x);
                }
            }
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let cfg = SampleConfig::default();
        assert!(matches!(
            sample_batch(&[], &cfg, &mut Rng::new(0)),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn synthetic_textures_are_quantized_and_in_range() {
        let img = synthetic_texture(&mut Rng::new(12), 32, 48);
        assert_eq!(img.shape(), [1, 3, 32, 48]);
        assert_eq!(quantized(&img), img);
    }
}
