//! Synthetic multi-view skill videos, their Bayes-optimal accuracy, frame
//! sampling, preprocessing and the `SKFD` dataset file.
//!
//! Every sample draws a latent `z ∈ [0,1]^V`; view `v` renders only `z_v`,
//! as the brightness and horizontal speed of a gaussian blob. The label is
//! `floor(4 * mean(z))` clamped to 3, so no single view determines it.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::ViewBatch;
use crate::numerics::Tensor;

pub const NUM_CLASSES: usize = 4;
/// Per-channel normalization constants applied after rescaling to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.45;
pub const PIXEL_STD: f64 = 0.225;

const BACKGROUND: f64 = 0.1;
const SKEW_WEIGHTS: [f64; NUM_CLASSES] = [0.5, 0.5, 1.0, 1.0];

/// Rendering regime shared by a subset of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Multiplier on the base pixel noise.
    pub noise_scale: f64,
    /// Side of a gray occluding square, as a fraction of the frame side.
    pub occlusion: f64,
}

impl Scenario {
    pub fn new(name: &str, noise_scale: f64, occlusion: f64) -> Self {
        Self {
            name: name.into(),
            noise_scale,
            occlusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub views: usize,
    /// Raw frames per clip before sampling.
    pub frames: usize,
    /// Raw frame side; frames are center-cropped to the model's size.
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub scenarios: Vec<Scenario>,
    /// Reweight toward the two upper classes.
    #[serde(default)]
    pub skew: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            views: 5,
            frames: 8,
            image_size: 40,
            channels: 1,
            noise_sigma: 0.05,
            scenarios: vec![
                Scenario::new("studio", 1.0, 0.0),
                Scenario::new("outdoor", 2.0, 0.0),
                Scenario::new("cluttered", 1.0, 0.2),
            ],
            skew: false,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse {
            location: e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "unknown location".into()),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.frames == 0 || self.image_size < 4 || self.channels == 0 {
            return Err(Error::Config("views, frames, channels must be positive and image_size >= 4".into()));
        }
        if self.scenarios.is_empty() || self.scenarios.len() > 256 {
            return Err(Error::Config("need between 1 and 256 scenarios".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn pixels_per_view(&self) -> usize {
        self.frames * self.channels * self.image_size * self.image_size
    }
}

/// One multi-view clip set with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[V, T, C, H, W]` raw values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub label: u8,
    pub scenario: u8,
    /// Generating latent; absent for samples read from disk.
    pub latent: Option<Vec<f64>>,
}

/// In-memory dataset with shared clip geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<LabeledSample>,
}

/// `floor(4 * mean(z))`, clamped to the top class.
pub fn label_from_latent(z: &[f64]) -> usize {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    ((NUM_CLASSES as f64 * mean).floor().max(0.0) as usize).min(NUM_CLASSES - 1)
}

/// Deterministically generate `n` samples. Sample `i` draws from its own
/// ChaCha stream `(seed, i)`, so the result is independent of `exec`.
pub fn generate(spec: &SyntheticSpec, n: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("cannot generate an empty dataset".into()));
    }
    let samples = exec.map(n, |i| generate_sample(spec, seed, i));
    Ok(Dataset {
        views: spec.views,
        frames: spec.frames,
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        samples,
    })
}

fn generate_sample(spec: &SyntheticSpec, seed: u64, index: usize) -> LabeledSample {
    let mut rng = crate::rng::stream(seed, index as u64);
    let (z, label) = loop {
        let z: Vec<f64> = (0..spec.views).map(|_| rng.gen::<f64>()).collect();
        let label = label_from_latent(&z);
        if !spec.skew || rng.gen::<f64>() < SKEW_WEIGHTS[label] {
            break (z, label);
        }
    };
    let scenario_id = index % spec.scenarios.len();
    let scenario = &spec.scenarios[scenario_id];
    let mut pixels = Vec::with_capacity(spec.views * spec.pixels_per_view());
    for &zv in &z {
        render_view(&mut pixels, zv, spec, scenario, &mut rng);
    }
    LabeledSample {
        pixels,
        label: label as u8,
        scenario: scenario_id as u8,
        latent: Some(z),
    }
}

/// Gaussian blob of brightness `0.25 + 0.6 z` drifting right at
/// `0.5 + 2.5 z` px/frame (wrapping), over a dark background.
fn render_view<R: Rng>(out: &mut Vec<f32>, z: f64, spec: &SyntheticSpec, scenario: &Scenario, rng: &mut R) {
    let s = spec.image_size;
    let sf = s as f64;
    let amp = 0.25 + 0.6 * z;
    let speed = 0.5 + 2.5 * z;
    let radius = sf / 10.0;
    let x0 = rng.gen::<f64>() * sf;
    let y0 = sf / 2.0 + (rng.gen::<f64>() - 0.5) * sf * 0.3;
    let occ_side = (scenario.occlusion * sf).round() as usize;
    let (ox, oy) = if occ_side > 0 && occ_side <= s {
        (rng.gen_range(0..=s - occ_side), rng.gen_range(0..=s - occ_side))
    } else {
        (0, 0)
    };
    let sigma = spec.noise_sigma * scenario.noise_scale;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let inv = 1.0 / (2.0 * radius * radius);
    for t in 0..spec.frames {
        let cx = (x0 + speed * t as f64).rem_euclid(sf);
        for _c in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let occluded = occ_side > 0 && (ox..ox + occ_side).contains(&x) && (oy..oy + occ_side).contains(&y);
                    let mut v = if occluded {
                        0.5
                    } else {
                        let dx = (x as f64 - cx).abs();
                        let dx = dx.min(sf - dx);
                        let dy = y as f64 - y0;
                        BACKGROUND + amp * (-(dx * dx + dy * dy) * inv).exp()
                    };
                    if let Some(n) = &noise {
                        v += n.sample(rng);
                    }
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
}

/// `target` frame indices evenly spaced over `[0, raw - 1]`, rounded to
/// nearest (halves up).
pub fn sample_frames(raw: usize, target: usize) -> Result<Vec<usize>> {
    if raw == 0 || target == 0 {
        return Err(Error::Contract("frame counts must be positive".into()));
    }
    if target == 1 {
        return Ok(vec![0]);
    }
    let step = (raw - 1) as f64 / (target - 1) as f64;
    Ok((0..target).map(|i| ((i as f64 * step) + 0.5).floor() as usize).collect())
}

/// Raw frame values, either 8-bit or already in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub enum Pixels<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

impl Pixels<'_> {
    fn len(&self) -> usize {
        match self {
            Pixels::U8(p) => p.len(),
            Pixels::F32(p) => p.len(),
        }
    }

    fn unit(&self, i: usize) -> f64 {
        match self {
            Pixels::U8(p) => p[i] as f64 / 255.0,
            Pixels::F32(p) => p[i] as f64,
        }
    }
}

/// Center-crop frames `[T, C, H, W]` to `crop x crop`, rescale to `[0, 1]`
/// and normalize with mean 0.45 / std 0.225.
///
/// Float input outside `[0, 1]` is rejected, which also catches frames that
/// were already normalized once.
pub fn preprocess(pixels: Pixels<'_>, frames: usize, channels: usize, height: usize, width: usize, crop: usize) -> Result<Tensor> {
    if pixels.len() != frames * channels * height * width {
        return Err(Error::Dimension(format!(
            "{} pixels for [{frames}, {channels}, {height}, {width}]",
            pixels.len()
        )));
    }
    if height < crop || width < crop {
        return Err(Error::Data(format!("frame {height}x{width} smaller than crop {crop}")));
    }
    let (y0, x0) = ((height - crop) / 2, (width - crop) / 2);
    let mut out = Vec::with_capacity(frames * channels * crop * crop);
    for plane in 0..frames * channels {
        for y in y0..y0 + crop {
            let base = (plane * height + y) * width;
            for x in x0..x0 + crop {
                let v = pixels.unit(base + x);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "pixel value {v} outside [0, 1]; frames already normalized?"
                    )));
                }
                out.push((v - PIXEL_MEAN) / PIXEL_STD);
            }
        }
    }
    Tensor::new([frames, channels, crop, crop], out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn view_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn scenarios(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.scenario).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header_only()
        }
    }

    fn header_only(&self) -> Dataset {
        Dataset {
            views: self.views,
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            samples: Vec::new(),
        }
    }

    /// Model-ready batch `[B, |views|, frames, C, crop, crop]` for the given
    /// samples and view subset.
    pub fn view_batch(&self, indices: &[usize], views: &[usize], frames: usize, crop: usize) -> Result<ViewBatch> {
        if let Some(&v) = views.iter().find(|&&v| v >= self.views) {
            return Err(Error::Config(format!("view {v} not in a {}-view dataset", self.views)));
        }
        let picks = sample_frames(self.frames, frames)?;
        let plane = self.channels * self.height * self.width;
        let per_clip = frames * self.channels * crop * crop;
        let mut data = Vec::with_capacity(indices.len() * views.len() * per_clip);
        let mut raw = vec![0f32; frames * plane];
        for &i in indices {
            let s = &self.samples[i];
            for &v in views {
                let clip = &s.pixels[v * self.view_len()..(v + 1) * self.view_len()];
                for (k, &t) in picks.iter().enumerate() {
                    raw[k * plane..(k + 1) * plane].copy_from_slice(&clip[t * plane..(t + 1) * plane]);
                }
                let t = preprocess(Pixels::F32(&raw), frames, self.channels, self.height, self.width, crop)?;
                data.extend_from_slice(t.data());
            }
        }
        Ok(ViewBatch {
            clips: Tensor::new(
                vec![indices.len(), views.len(), frames, self.channels, crop, crop],
                data,
            )?,
            labels: indices.iter().map(|&i| self.samples[i].label as usize).collect(),
            scenarios: indices.iter().map(|&i| self.samples[i].scenario).collect(),
        })
    }

    /// Serialize as `SKFD` v1: header of little-endian u32 fields
    /// `(version, V, T, H, W, C, n)` after the magic, then per sample
    /// `label: u8, scenario: u8, pixels: f32 LE`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [
            DATASET_VERSION as usize,
            self.views,
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.samples.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(2 + self.views * self.view_len() * 4);
        for s in &self.samples {
            buf.clear();
            buf.push(s.label);
            buf.push(s.scenario);
            for p in &s.pixels {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = crate::checkpoint::Cursor::new(bytes);
        if cur.take(4)? != DATASET_MAGIC {
            return Err(cur.error("bad magic, expected SKFD"));
        }
        let version = cur.u32()?;
        if version != DATASET_VERSION {
            return Err(cur.error(&format!("unsupported dataset version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let [views, frames, height, width, channels, n] = dims;
        if dims[..5].contains(&0) {
            return Err(cur.error("zero extent in dataset header"));
        }
        let record = (views * frames * channels)
            .checked_mul(height * width)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(2));
        match record.and_then(|r| r.checked_mul(n)) {
            Some(total) if total == cur.remaining() => {}
            _ => return Err(cur.error("record count does not match file size")),
        }
        let mut ds = Dataset {
            views,
            frames,
            height,
            width,
            channels,
            samples: Vec::with_capacity(n),
        };
        let count = views * ds.view_len();
        for _ in 0..n {
            let label = cur.u8()?;
            if label as usize >= NUM_CLASSES {
                return Err(cur.error(&format!("label {label} outside 0..4")));
            }
            let scenario = cur.u8()?;
            let raw = cur.take(count * 4)?;
            let pixels = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ds.samples.push(LabeledSample {
                pixels,
                label,
                scenario,
                latent: None,
            });
        }
        if !cur.is_at_end() {
            return Err(cur.error("trailing bytes after last sample"));
        }
        Ok(ds)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"SKFD";
const DATASET_VERSION: u32 = 1;

/// Monte-Carlo accuracy estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEstimate {
    pub accuracy: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// `P(S < x)` for `S` the sum of `k` independent uniforms (Irwin–Hall).
fn irwin_hall_cdf(k: usize, x: f64) -> f64 {
    if k == 0 {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return 0.0;
    }
    if x >= k as f64 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut binom = 1.0;
    let mut fact = 1.0;
    for i in 1..=k {
        fact *= i as f64;
    }
    for j in 0..=(x.floor() as usize).min(k) {
        if j > 0 {
            binom = binom * (k - j + 1) as f64 / j as f64;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binom * (x - j as f64).powi(k as i32);
    }
    (sum / fact).clamp(0.0, 1.0)
}

/// Class posterior given the sum of `observed` view latents, with `hidden`
/// further latents uniform on `[0, 1]`.
pub fn label_posterior(views: usize, observed_sum: f64, hidden: usize) -> [f64; NUM_CLASSES] {
    let v = views as f64;
    let mut p = [0.0; NUM_CLASSES];
    for (y, slot) in p.iter_mut().enumerate() {
        let lo = y as f64 * v / NUM_CLASSES as f64 - observed_sum;
        let hi = if y == NUM_CLASSES - 1 {
            f64::INFINITY
        } else {
            (y + 1) as f64 * v / NUM_CLASSES as f64 - observed_sum
        };
        *slot = irwin_hall_cdf(hidden, hi) - irwin_hall_cdf(hidden, lo);
    }
    p
}

/// Exact class prior under uniform latents.
pub fn class_priors(views: usize) -> [f64; NUM_CLASSES] {
    label_posterior(views, 0.0, views)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Best achievable accuracy when only the latents of `subset` are visible,
/// estimated from `m` draws. The decision for each draw is the exact
/// posterior arg-max.
pub fn bayes_oracle(views: usize, subset: &[usize], m: usize, seed: u64, exec: Exec) -> Result<OracleEstimate> {
    if m < 10_000 {
        return Err(Error::Contract(format!("oracle needs m >= 10000 draws, got {m}")));
    }
    if let Some(&v) = subset.iter().find(|&&v| v >= views) {
        return Err(Error::Config(format!("view {v} not among {views} views")));
    }
    let mut mask = vec![false; views];
    for &v in subset {
        mask[v] = true;
    }
    let hidden = mask.iter().filter(|&&b| !b).count();
    const CHUNK: usize = 4096;
    let chunks = m.div_ceil(CHUNK);
    let correct: usize = exec
        .map(chunks, |c| {
            let mut rng = crate::rng::stream(seed, c as u64);
            let n = CHUNK.min(m - c * CHUNK);
            let mut z = vec![0.0; views];
            (0..n)
                .filter(|_| {
                    z.iter_mut().for_each(|v| *v = rng.gen::<f64>());
                    let observed: f64 = z.iter().zip(&mask).filter(|(_, &o)| o).map(|(v, _)| v).sum();
                    argmax(&label_posterior(views, observed, hidden)) == label_from_latent(&z)
                })
                .count()
        })
        .into_iter()
        .sum();
    let p = correct as f64 / m as f64;
    Ok(OracleEstimate {
        accuracy: p,
        std_error: (p * (1.0 - p) / m as f64).sqrt(),
        samples: m,
    })
}
