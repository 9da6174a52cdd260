//! Deterministic synthetic aerial-like scenes: many small filled rectangles
//! and ellipses, clustered around a few centres, over a noisy background.
//!
//! Randomness comes from SplitMix64 (`state += 0x9E3779B97F4A7C15`, then the
//! mix `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//! z *= 0x94D049BB133111EB; z ^= z >> 31`), so any implementation of the same
//! steps reproduces the same scenes byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::{AreaRange, GroundTruthBox};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

pub const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next_u64() % (hi - lo + 1)
    }

    /// Approximately standard normal: centred, rescaled sum of four uniforms.
    pub fn normal(&mut self) -> f64 {
        let s: f64 = (0..4).map(|_| self.unit()).sum();
        (s - 2.0) * 3f64.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub num_clusters: usize,
    /// Standard deviation of object placement around its cluster centre.
    pub cluster_spread: f64,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 64x64 canvases with objects of 6 to 16 pixels.
    Small,
    /// 256x256 canvases with objects of 8 to 64 pixels.
    Mixed,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Profile::Small),
            "mixed" => Ok(Profile::Mixed),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected small or mixed)"
            ))),
        }
    }
}

impl Profile {
    pub fn spec(self, seed: u64) -> SceneSpec {
        match self {
            Profile::Small => SceneSpec {
                height: 64,
                width: 64,
                num_objects: 6,
                size_min: 6,
                size_max: 16,
                num_clusters: 2,
                cluster_spread: 10.0,
                num_classes: 3,
                seed,
            },
            Profile::Mixed => SceneSpec {
                height: 256,
                width: 256,
                num_objects: 12,
                size_min: 8,
                size_max: 64,
                num_clusters: 3,
                cluster_spread: 40.0,
                num_classes: 3,
                seed,
            },
        }
    }

    /// Specs for `count` scenes with seeds `seed, seed + 1, ...`.
    pub fn specs(self, count: usize, seed: u64) -> Vec<SceneSpec> {
        (0..count as u64).map(|i| self.spec(seed.wrapping_add(i))).collect()
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let short = self.height.min(self.width);
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene canvas must be non-empty".into()));
        }
        if self.size_min == 0 || self.size_min > self.size_max || self.size_max > short / 4 {
            return Err(Error::Config(format!(
                "object sizes {}..={} must be positive and at most a quarter of {short}",
                self.size_min, self.size_max
            )));
        }
        if self.num_classes == 0 || (self.num_objects > 0 && self.num_clusters == 0) {
            return Err(Error::Config("scenes need at least one class and one cluster".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config(format!("invalid cluster spread {}", self.cluster_spread)));
        }
        Ok(())
    }
}

/// An 8-bit RGB image (row-major, interleaved) with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub boxes: Vec<GroundTruthBox>,
}

impl Scene {
    /// `1 x 3 x h x w` with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let (h, w) = (self.height, self.width);
        Tensor4::from_fn(Dims::new(1, 3, h, w), |_, c, y, x| {
            T::lit(f64::from(self.pixels[(y * w + x) * 3 + c]) / 255.0)
        })
    }
}

pub fn class_color(class_id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [
        [230, 40, 40],
        [40, 90, 235],
        [245, 225, 40],
        [245, 245, 245],
        [200, 40, 220],
        [30, 225, 215],
    ];
    let base = PALETTE[class_id % PALETTE.len()];
    let shade = (class_id / PALETTE.len()) as u8;
    base.map(|v| v.saturating_sub(shade.saturating_mul(37)))
}

fn overlaps(a: &BBox, others: &[GroundTruthBox]) -> bool {
    // a one-pixel margin keeps rendered shapes from touching
    let grown = BBox::new(a.x - 1.0, a.y - 1.0, a.w + 2.0, a.h + 2.0);
    others.iter().any(|o| grown.intersection(&o.bbox) > 0.0)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SplitMix64::new(spec.seed);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let stripe = ((x / 8 + y / 8) % 2) as i32 * 6;
            for base in [78i32, 92, 70] {
                let noise = rng.range(0, 30) as i32 - 15;
                pixels.push((base + stripe + noise).clamp(0, 255) as u8);
            }
        }
    }
    let centres: Vec<(f64, f64)> = (0..spec.num_clusters)
        .map(|_| (rng.unit() * w as f64, rng.unit() * h as f64))
        .collect();
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(spec.num_objects);
    for obj in 0..spec.num_objects {
        let class_id = rng.range(0, spec.num_classes as u64 - 1) as usize;
        let ellipse = rng.next_u64() & 1 == 1;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let bw = rng.range(spec.size_min as u64, spec.size_max as u64) as usize;
            let bh = rng.range(spec.size_min as u64, spec.size_max as u64) as usize;
            let (cx, cy) = centres[rng.range(0, spec.num_clusters as u64 - 1) as usize];
            let px = (cx + rng.normal() * spec.cluster_spread - bw as f64 / 2.0).round();
            let py = (cy + rng.normal() * spec.cluster_spread - bh as f64 / 2.0).round();
            if px < 0.0 || py < 0.0 || px as usize + bw > w || py as usize + bh > h {
                continue;
            }
            let candidate = BBox::new(px, py, bw as f64, bh as f64);
            if !overlaps(&candidate, &boxes) {
                placed = Some(candidate);
                break;
            }
        }
        let Some(b) = placed else {
            return Err(Error::Generation(format!(
                "could not place object {obj} of {} within {PLACEMENT_RETRIES} attempts",
                spec.num_objects
            )));
        };
        let tight = render(&mut pixels, w, &b, ellipse, class_color(class_id));
        boxes.push(GroundTruthBox {
            image_id: 0,
            bbox: tight,
            class_id,
        });
    }
    Ok(Scene {
        height: h,
        width: w,
        pixels,
        boxes,
    })
}

/// Fills the shape and returns the bounding box of the pixels it covered.
fn render(pixels: &mut [u8], width: usize, b: &BBox, ellipse: bool, color: [u8; 3]) -> BBox {
    let (x0, y0, bw, bh) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            if ellipse {
                let dx = (x as f64 + 0.5 - b.x - rx) / rx;
                let dy = (y as f64 + 0.5 - b.y - ry) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            pixels[(y * width + x) * 3..][..3].copy_from_slice(&color);
            lo_x = lo_x.min(x);
            lo_y = lo_y.min(y);
            hi_x = hi_x.max(x);
            hi_y = hi_y.max(y);
        }
    }
    BBox::new(
        lo_x as f64,
        lo_y as f64,
        (hi_x - lo_x + 1) as f64,
        (hi_y - lo_y + 1) as f64,
    )
}

/// Ground-truth counts in the small, medium and large strata.
pub fn stratum_counts<'a>(boxes: impl IntoIterator<Item = &'a GroundTruthBox>) -> [usize; 3] {
    let mut counts = [0; 3];
    for b in boxes {
        let i = AreaRange::STRATA
            .iter()
            .position(|r| r.contains(b.bbox.area()))
            .unwrap_or(2);
        counts[i] += 1;
    }
    counts
}

/// Scenes sharing one canvas size, annotated with their index as image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPEC_FILE: &str = "spec.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image: String,
    boxes: Vec<(f64, f64, f64, f64, usize)>,
}

pub fn image_path(index: usize) -> String {
    format!("{IMAGES_DIR}/{index:06}.ppm")
}

impl Dataset {
    pub fn generate(specs: &[SceneSpec]) -> Result<Self> {
        let mut scenes = specs.par_iter().map(generate_scene).collect::<Result<Vec<_>>>()?;
        for (i, s) in scenes.iter_mut().enumerate() {
            s.boxes.iter_mut().for_each(|b| b.image_id = i);
        }
        Ok(Dataset { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthBox> {
        self.scenes.iter().flat_map(|s| s.boxes.iter().copied()).collect()
    }

    /// Stacks every image into `(n, 3, h, w)` and returns per-image boxes.
    pub fn batch<T: Scalar>(&self) -> Result<(Tensor4<T>, Vec<Vec<GroundTruthBox>>)> {
        let first = self
            .scenes
            .first()
            .ok_or_else(|| Error::Config("empty dataset".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(s) = self.scenes.iter().find(|s| (s.height, s.width) != (h, w)) {
            return Err(Error::shape(format!(
                "dataset mixes {h}x{w} and {}x{} images",
                s.height, s.width
            )));
        }
        let tensors: Vec<Tensor4<T>> = self.scenes.iter().map(Scene::to_tensor).collect();
        let mut data = Vec::with_capacity(tensors.len() * 3 * h * w);
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        let images = Tensor4::from_vec(Dims::new(self.scenes.len(), 3, h, w), data)?;
        Ok((images, self.scenes.iter().map(|s| s.boxes.clone()).collect()))
    }

    /// Writes `images/NNNNNN.ppm`, `annotations.jsonl` and `spec.json`.
    pub fn write(&self, specs: &[SceneSpec], dir: &Path) -> Result<()> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut lines = Vec::new();
        for (i, s) in self.scenes.iter().enumerate() {
            let rel = image_path(i);
            let path = dir.join(&rel);
            fs::write(&path, encode_ppm(s)).map_err(|e| Error::io(&path, e))?;
            let line = AnnotationLine {
                image: rel,
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h, b.class_id))
                    .collect(),
            };
            serde_json::to_writer(&mut lines, &line).expect("serialising plain data");
            lines.push(b'\n');
        }
        let ann = dir.join(ANNOTATIONS_FILE);
        let mut f = fs::File::create(&ann).map_err(|e| Error::io(&ann, e))?;
        f.write_all(&lines).map_err(|e| Error::io(&ann, e))?;
        let spec_path = dir.join(SPEC_FILE);
        let spec_json = serde_json::to_string_pretty(specs).expect("serialising plain data");
        fs::write(&spec_path, spec_json + "\n").map_err(|e| Error::io(&spec_path, e))
    }

    /// Reads a dataset written by [`Dataset::write`]. A directory without an
    /// annotation file is an empty dataset.
    pub fn load(dir: &Path) -> Result<Self> {
        let ann = dir.join(ANNOTATIONS_FILE);
        if !ann.exists() {
            if dir.is_dir() {
                return Ok(Dataset::default());
            }
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let text = fs::read(&ann).map_err(|e| Error::io(&ann, e))?;
        let mut scenes = Vec::new();
        let mut offset = 0;
        for raw in text.split_inclusive(|&b| b == b'\n') {
            let line_start = offset;
            offset += raw.len();
            let trimmed = raw.strip_suffix(b"\n").unwrap_or(raw);
            if trimmed.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let parsed: AnnotationLine = serde_json::from_slice(trimmed).map_err(|e| Error::Parse {
                file: ann.clone(),
                offset: line_start + e.column().saturating_sub(1),
                msg: e.to_string(),
            })?;
            let path = dir.join(&parsed.image);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (width, height, pixels) = decode_ppm(&bytes, &path)?;
            let image_id = scenes.len();
            let boxes = parsed
                .boxes
                .iter()
                .map(|&(x, y, w, h, class_id)| {
                    if !(w > 0.0 && h > 0.0) {
                        return Err(Error::Parse {
                            file: ann.clone(),
                            offset: line_start,
                            msg: format!("box with non-positive size {w}x{h}"),
                        });
                    }
                    Ok(GroundTruthBox {
                        image_id,
                        bbox: BBox::new(x, y, w, h),
                        class_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scenes.push(Scene {
                height,
                width,
                pixels,
                boxes,
            });
        }
        Ok(Dataset { scenes })
    }
}

pub fn encode_ppm(scene: &Scene) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", scene.width, scene.height).into_bytes();
    out.extend_from_slice(&scene.pixels);
    out
}

/// Parses a binary 8-bit PPM into `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8], file: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, msg: &str| Error::Parse {
        file: file.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, "only 8-bit PPM (maxval 255) is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after the header"));
    }
    pos += 1;
    let need = width * height * 3;
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(err(pos, &format!("expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((width, height, body.to_vec()))
}

pub fn write_dataset(specs: &[SceneSpec], dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(specs)?;
    ds.write(specs, dir)?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}
