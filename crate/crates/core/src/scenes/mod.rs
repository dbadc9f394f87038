//! Synthetic video with exact labels and motion.
//!
//! Sprites move over horizontal background bands. Each sprite's center
//! follows `p0 + v*t + a*t^2/2` rounded to the pixel grid, so every
//! frame-to-frame displacement is an integer and ground-truth warps are
//! exact. Sprite texture lives in sprite-local coordinates and moves with
//! the sprite.

mod flow;
mod io;

pub use flow::{compose_sampling, downscale_flow, forward_to_sampling};
pub use io::{
    read_dataset, read_flo, read_pgm, read_ppm, read_sequence, write_dataset, write_flo,
    write_pgm, write_ppm, write_sequence, Dataset, DATASET_MANIFEST, SEQUENCE_MANIFEST,
    SPEC_FILE,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::segmap::LabelMap;
use crate::tensor::Tensor;

/// Role of a class in generated scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneClass {
    /// Static horizontal band behind everything.
    Band,
    StaticSprite,
    MovingSprite,
}

impl SceneClass {
    pub fn is_moving(self) -> bool {
        self == SceneClass::MovingSprite
    }

    fn as_str(self) -> &'static str {
        match self {
            SceneClass::Band => "band",
            SceneClass::StaticSprite => "static",
            SceneClass::MovingSprite => "moving",
        }
    }
}

impl FromStr for SceneClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band" => Ok(SceneClass::Band),
            "static" => Ok(SceneClass::StaticSprite),
            "moving" => Ok(SceneClass::MovingSprite),
            _ => Err(Error::Config(format!("unknown scene class role {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Rectangle,
    Disc,
    /// Each sprite picks one of the two at random.
    Mixed,
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Disc => "disc",
            ShapeFamily::Mixed => "mixed",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(ShapeFamily::Rectangle),
            "disc" => Ok(ShapeFamily::Disc),
            "mixed" => Ok(ShapeFamily::Mixed),
            _ => Err(Error::Config(format!("unknown shape family {s:?}"))),
        }
    }
}

/// Everything that determines a generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Role per dense class id.
    pub classes: Vec<SceneClass>,
    pub sprites: usize,
    pub shape: ShapeFamily,
    /// Speed range in px/frame along the dominant (horizontal) axis.
    pub velocity: (f64, f64),
    /// Acceleration magnitude range in px/frame^2 along the dominant axis.
    pub acceleration: (f64, f64),
    /// Half-extent range of sprites in pixels.
    pub sprite_size: (usize, usize),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 128,
            height: 64,
            num_frames: 20,
            classes: vec![
                SceneClass::Band,
                SceneClass::Band,
                SceneClass::MovingSprite,
                SceneClass::MovingSprite,
                SceneClass::StaticSprite,
                SceneClass::StaticSprite,
            ],
            sprites: 6,
            shape: ShapeFamily::Mixed,
            velocity: (0.5, 2.0),
            acceleration: (0.05, 0.2),
            sprite_size: (5, 9),
        }
    }
}

/// Minimum share of pixels every class must cover in the last frame.
pub const MIN_CLASS_SHARE: f64 = 0.005;

const MAX_ATTEMPTS: usize = 200;

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn moving_classes(&self) -> Vec<u8> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_moving())
            .map(|(k, _)| k as u8)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width < 4 || self.height < 4 {
            return fail(format!("scene extent {}x{} too small", self.width, self.height));
        }
        if self.num_frames < 2 {
            return fail(format!("num_frames must be >= 2, got {}", self.num_frames));
        }
        if self.classes.len() >= usize::from(crate::segmap::VOID) {
            return fail(format!("at most 254 classes, got {}", self.classes.len()));
        }
        let count = |role| self.classes.iter().filter(|&&c| c == role).count();
        if count(SceneClass::Band) == 0 {
            return fail("need at least one background band class".into());
        }
        if count(SceneClass::MovingSprite) < 2 {
            return fail("need at least two moving classes".into());
        }
        let sprite_classes = self.classes.len() - count(SceneClass::Band);
        if self.sprites < sprite_classes {
            return fail(format!(
                "{} sprites cannot cover {sprite_classes} sprite classes",
                self.sprites
            ));
        }
        let (v0, v1) = self.velocity;
        let (a0, a1) = self.acceleration;
        if !(0.0 <= v0 && v0 <= v1 && v1.is_finite()) || !(0.0 <= a0 && a0 <= a1 && a1.is_finite()) {
            return fail("velocity and acceleration ranges must be 0 <= min <= max".into());
        }
        let (s0, s1) = self.sprite_size;
        if s0 == 0 || s0 > s1 || 2 * s1 + 1 > self.height {
            return fail(format!("sprite size range {s0}..{s1} invalid for height {}", self.height));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let roles: Vec<&str> = self.classes.iter().map(|c| c.as_str()).collect();
        format!(
            "seed={}\nwidth={}\nheight={}\nnum_frames={}\nclasses={}\nsprites={}\nshape={}\n\
             velocity={},{}\nacceleration={},{}\nsprite_size={},{}\n",
            self.seed,
            self.width,
            self.height,
            self.num_frames,
            roles.join(","),
            self.sprites,
            self.shape,
            self.velocity.0,
            self.velocity.1,
            self.acceleration.0,
            self.acceleration.1,
            self.sprite_size.0,
            self.sprite_size.1,
        )
    }

    /// Apply one `key=value` setting. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn pair<T: FromStr>(key: &str, v: &str) -> Result<(T, T)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("{key} expects two comma-separated values")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "num_frames" => self.num_frames = num(key, value)?,
            "classes" => {
                self.classes = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "sprites" => self.sprites = num(key, value)?,
            "shape" => self.shape = value.trim().parse()?,
            "velocity" => self.velocity = pair(key, value)?,
            "acceleration" => self.acceleration = pair(key, value)?,
            "sprite_size" => self.sprite_size = pair(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if !spec.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown scene key {k:?}")));
            }
        }
        Ok(spec)
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("pixel mask", "length does not match extent"));
        }
        Ok(PixelMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Frames, labels, forward flows and disocclusion masks of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub spec: SceneSpec,
    /// `[3, H, W]` in `[0, 1]`, multiples of 1/255.
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    /// `flows[t]` is `[1, 2, H, W]`: where each pixel of frame `t` moves
    /// in frame `t + 1`.
    pub flows: Vec<Tensor>,
    /// `disocclusions[t]`: pixels of frame `t + 1` with no source in frame `t`.
    pub disocclusions: Vec<PixelMask>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// Frame `t` as a `[1, 3, H, W]` batch.
    pub fn frame_batch(&self, t: usize) -> Tensor {
        let f = &self.frames[t];
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape());
        f.clone().reshape(&shape).expect("frame has three axes")
    }

    /// Sampling field from frame `t` to frame `t + s`: warping frame `t`
    /// along it reproduces frame `t + s` away from disocclusions.
    pub fn sampling_flow(&self, t: usize, s: usize) -> Result<Tensor> {
        if s == 0 || t + s >= self.len() {
            return Err(Error::Usage(format!(
                "no flow from frame {t} over {s} frames in a {}-frame sequence",
                self.len()
            )));
        }
        let step = |k: usize| {
            forward_to_sampling(&self.flows[k], Some(&self.labels[k]), Some(&self.labels[k + 1]))
        };
        let mut acc = step(t)?;
        for k in t + 1..t + s {
            acc = compose_sampling(&acc, &step(k)?)?;
        }
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rectangle,
    Disc,
}

#[derive(Clone, Debug)]
struct Sprite {
    class: u8,
    shape: Shape,
    half: (i64, i64),
    origin: (i64, i64),
    velocity: (f64, f64),
    acceleration: (f64, f64),
}

impl Sprite {
    fn offset(&self, t: usize) -> (i64, i64) {
        let t = t as f64;
        let o = |v: f64, a: f64| (v * t + 0.5 * a * t * t + 0.5).floor() as i64;
        (
            o(self.velocity.0, self.acceleration.0),
            o(self.velocity.1, self.acceleration.1),
        )
    }

    fn center(&self, t: usize) -> (i64, i64) {
        let (dx, dy) = self.offset(t);
        (self.origin.0 + dx, self.origin.1 + dy)
    }

    fn contains(&self, dx: i64, dy: i64) -> bool {
        let (hx, hy) = self.half;
        match self.shape {
            Shape::Rectangle => dx.abs() <= hx && dy.abs() <= hy,
            Shape::Disc => dx * dx + dy * dy <= hx * hx,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value in `[-1, 1]`.
fn noise(a: u64, b: i64, c: i64) -> f64 {
    let h = mix64(mix64(mix64(a) ^ b as u64) ^ c as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Seed for the `index`-th sequence derived from a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)) ^ index)
}

const TEXTURE: f64 = 0.05;

fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.55, 0.70, 0.90],
        [0.35, 0.35, 0.38],
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.85],
        [0.20, 0.70, 0.25],
        [0.90, 0.80, 0.20],
        [0.75, 0.30, 0.75],
        [0.20, 0.75, 0.75],
    ];
    match PALETTE.get(usize::from(class)) {
        Some(c) => *c,
        None => {
            let c = |k| 0.2 + 0.3 * (noise(u64::from(class), k, 0) + 1.0);
            [c(0), c(1), c(2)]
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Layout {
    /// Row where each band after the first starts.
    band_starts: Vec<usize>,
    band_classes: Vec<u8>,
    /// In paint order, back to front.
    sprites: Vec<Sprite>,
}

/// Owner index per pixel: bands first, then sprites in paint order.
fn owners(spec: &SceneSpec, layout: &Layout, t: usize) -> Vec<usize> {
    let (w, h) = (spec.width, spec.height);
    let nb = layout.band_classes.len();
    let mut owner = vec![0usize; w * h];
    for i in 0..h {
        let band = layout.band_starts.iter().filter(|&&s| i >= s).count();
        owner[i * w..(i + 1) * w].fill(band);
    }
    for (k, s) in layout.sprites.iter().enumerate() {
        let (cx, cy) = s.center(t);
        let (hx, hy) = s.half;
        for y in (cy - hy).max(0)..=(cy + hy).min(h as i64 - 1) {
            for x in (cx - hx).max(0)..=(cx + hx).min(w as i64 - 1) {
                if s.contains(x - cx, y - cy) {
                    owner[y as usize * w + x as usize] = nb + k;
                }
            }
        }
    }
    owner
}

fn sample_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let nb = spec.classes.iter().filter(|&&c| c == SceneClass::Band).count();
    let band_classes: Vec<u8> = spec
        .classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == SceneClass::Band)
        .map(|(k, _)| k as u8)
        .collect();
    let mut band_starts = Vec::new();
    for b in 1..nb {
        let nominal = spec.height * b / nb;
        let jitter = (spec.height / (4 * nb)).max(1) as i64;
        let row = nominal as i64 + rng.gen_range(-jitter..=jitter);
        band_starts.push(row.clamp(1, spec.height as i64 - 1) as usize);
    }
    band_starts.sort_unstable();

    let sprite_classes: Vec<u8> = spec
        .classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != SceneClass::Band)
        .map(|(k, _)| k as u8)
        .collect();
    let mut classes = sprite_classes.clone();
    while classes.len() < spec.sprites {
        classes.push(sprite_classes[rng.gen_range(0..sprite_classes.len())]);
    }

    let mut sprites = Vec::with_capacity(classes.len());
    for class in classes {
        sprites.push(sample_sprite(spec, class, rng)?);
    }
    // moving sprites are painted over static ones
    sprites.sort_by_key(|s| spec.classes[usize::from(s.class)].is_moving());
    Ok(Layout {
        band_starts,
        band_classes,
        sprites,
    })
}

fn sample_sprite(spec: &SceneSpec, class: u8, rng: &mut ChaCha8Rng) -> Result<Sprite> {
    let moving = spec.classes[usize::from(class)].is_moving();
    let shape = match spec.shape {
        ShapeFamily::Rectangle => Shape::Rectangle,
        ShapeFamily::Disc => Shape::Disc,
        ShapeFamily::Mixed => {
            if rng.gen_bool(0.5) {
                Shape::Rectangle
            } else {
                Shape::Disc
            }
        }
    };
    let (s0, s1) = spec.sprite_size;
    for _ in 0..MAX_ATTEMPTS {
        let hx = rng.gen_range(s0..=s1) as i64;
        let hy = match shape {
            Shape::Rectangle => rng.gen_range(s0..=s1) as i64,
            Shape::Disc => hx,
        };
        let (velocity, acceleration) = if moving {
            let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let speed = rng.gen_range(spec.velocity.0..=spec.velocity.1);
            let accel = rng.gen_range(spec.acceleration.0..=spec.acceleration.1);
            let vy = rng.gen_range(-1.0..=1.0) * spec.velocity.1 / 4.0;
            let ay = rng.gen_range(-1.0..=1.0) * spec.acceleration.1 / 4.0;
            ((sign(rng) * speed, vy), (sign(rng) * accel, ay))
        } else {
            ((0.0, 0.0), (0.0, 0.0))
        };
        let probe = Sprite {
            class,
            shape,
            half: (hx, hy),
            origin: (0, 0),
            velocity,
            acceleration,
        };
        // centers stay inside horizontally and the sprite stays fully
        // inside vertically, so at least half of it is always visible
        let (mut x_lo, mut x_hi) = (0i64, spec.width as i64 - 1);
        let (mut y_lo, mut y_hi) = (hy, spec.height as i64 - 1 - hy);
        for t in 0..spec.num_frames {
            let (dx, dy) = probe.offset(t);
            x_lo = x_lo.max(-dx);
            x_hi = x_hi.min(spec.width as i64 - 1 - dx);
            y_lo = y_lo.max(hy - dy);
            y_hi = y_hi.min(spec.height as i64 - 1 - hy - dy);
        }
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        return Ok(Sprite {
            origin: (rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi)),
            ..probe
        });
    }
    Err(Error::Generation(format!(
        "no trajectory for class {class} keeps the sprite in frame over {} frames",
        spec.num_frames
    )))
}

fn class_shares_ok(spec: &SceneSpec, labels: &LabelMap) -> bool {
    let total = (spec.width * spec.height) as f64;
    (0..spec.classes.len()).all(|k| labels.count(k as u8) as f64 >= MIN_CLASS_SHARE * total)
}

/// Render a sequence. Pure function of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let layout = sample_layout(spec, &mut rng)?;
        let last_owner = owners(spec, &layout, spec.num_frames - 1);
        let last = labels_of(spec, &layout, &last_owner)?;
        if class_shares_ok(spec, &last) {
            return Ok(render(spec, &layout));
        }
    }
    Err(Error::Generation(format!(
        "could not place sprites so that every class covers {}% of the last frame",
        MIN_CLASS_SHARE * 100.0
    )))
}

fn owner_class(layout: &Layout, owner: usize) -> u8 {
    let nb = layout.band_classes.len();
    if owner < nb {
        layout.band_classes[owner]
    } else {
        layout.sprites[owner - nb].class
    }
}

fn labels_of(spec: &SceneSpec, layout: &Layout, owner: &[usize]) -> Result<LabelMap> {
    LabelMap::new(
        spec.height,
        spec.width,
        owner.iter().map(|&o| owner_class(layout, o)).collect(),
    )
}

fn render(spec: &SceneSpec, layout: &Layout) -> SceneSequence {
    let (w, h) = (spec.width, spec.height);
    let nb = layout.band_classes.len();
    let owner_maps: Vec<Vec<usize>> = (0..spec.num_frames).map(|t| owners(spec, layout, t)).collect();

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut labels = Vec::with_capacity(spec.num_frames);
    for (t, owner) in owner_maps.iter().enumerate() {
        let mut frame = Tensor::zeros(&[3, h, w]);
        for i in 0..h {
            for j in 0..w {
                let o = owner[i * w + j];
                let class = owner_class(layout, o);
                let (key, lx, ly) = if o < nb {
                    (o as u64, j as i64, i as i64)
                } else {
                    let (cx, cy) = layout.sprites[o - nb].center(t);
                    (1000 + o as u64, j as i64 - cx, i as i64 - cy)
                };
                let base = class_color(class);
                let n = TEXTURE * noise(spec.seed ^ key, lx, ly);
                for (c, b) in base.iter().enumerate() {
                    frame.data_mut()[(c * h + i) * w + j] = quantize(b + n);
                }
            }
        }
        frames.push(frame);
        labels.push(labels_of(spec, layout, owner).expect("extent matches"));
    }

    let mut flows = Vec::with_capacity(spec.num_frames - 1);
    let mut disocclusions = Vec::with_capacity(spec.num_frames - 1);
    for t in 0..spec.num_frames - 1 {
        let step = |o: usize| -> (i64, i64) {
            if o < nb {
                (0, 0)
            } else {
                let s = &layout.sprites[o - nb];
                let (a, b) = (s.center(t), s.center(t + 1));
                (b.0 - a.0, b.1 - a.1)
            }
        };
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        for (p, &o) in owner_maps[t].iter().enumerate() {
            let (dx, dy) = step(o);
            flow.plane_mut(0, 0)[p] = dx as f64;
            flow.plane_mut(0, 1)[p] = dy as f64;
        }
        let mut bits = vec![false; w * h];
        for i in 0..h {
            for j in 0..w {
                let o = owner_maps[t + 1][i * w + j];
                let (dx, dy) = step(o);
                let (si, sj) = (i as i64 - dy, j as i64 - dx);
                bits[i * w + j] = si < 0
                    || sj < 0
                    || si >= h as i64
                    || sj >= w as i64
                    || owner_maps[t][si as usize * w + sj as usize] != o;
            }
        }
        flows.push(flow);
        disocclusions.push(PixelMask::new(h, w, bits).expect("extent matches"));
    }

    SceneSequence {
        spec: spec.clone(),
        frames,
        labels,
        flows,
        disocclusions,
    }
}

/// `train` + `val` sequences sharing `base` except for derived seeds.
pub fn generate_dataset(base: &SceneSpec, train: usize, val: usize) -> Result<Dataset> {
    base.validate()?;
    let split = |stream: u64, count: usize| {
        (0..count)
            .map(|k| {
                generate(&SceneSpec {
                    seed: derive_seed(base.seed, stream, k as u64),
                    ..base.clone()
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(Dataset {
        train: split(0, train)?,
        val: split(1, val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{warp_label_map, warp_tensor};

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec {
            seed: 11,
            ..SceneSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SceneSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(other.frames[0], generate(&SceneSpec::default()).unwrap().frames[0]);
    }

    #[test]
    fn zero_motion_gives_identical_frames() {
        let spec = SceneSpec {
            velocity: (0.0, 0.0),
            acceleration: (0.0, 0.0),
            ..SceneSpec::default()
        };
        let seq = generate(&spec).unwrap();
        for t in 1..seq.len() {
            assert_eq!(seq.frames[t], seq.frames[0]);
            assert_eq!(seq.flows[t - 1].max_abs(), 0.0);
        }
    }

    #[test]
    fn labels_and_rgb_follow_ground_truth_flow() {
        for seed in 0..4 {
            let seq = generate(&SceneSpec {
                seed,
                ..SceneSpec::default()
            })
            .unwrap();
            for t in 0..seq.len() - 1 {
                let g = seq.sampling_flow(t, 1).unwrap();
                let warped = warp_label_map(&seq.labels[t], &g).unwrap();
                let (rgb, _) = warp_tensor(&seq.frame_batch(t), &g).unwrap();
                let next = seq.frame_batch(t + 1);
                let mask = &seq.disocclusions[t];
                let (mut err, mut n) = (0.0, 0);
                for p in 0..mask.bits().len() {
                    if mask.bits()[p] {
                        continue;
                    }
                    assert_eq!(warped.labels()[p], seq.labels[t + 1].labels()[p]);
                    for c in 0..3 {
                        err += (rgb.plane(0, c)[p] - next.plane(0, c)[p]).abs();
                    }
                    n += 3;
                }
                assert!(err / n as f64 <= 0.02, "seed {seed} t {t}: {}", err / n as f64);
            }
        }
    }

    #[test]
    fn every_class_is_present_at_the_end() {
        let spec = SceneSpec::default();
        for seed in 0..8 {
            let seq = generate(&SceneSpec { seed, ..spec.clone() }).unwrap();
            assert!(class_shares_ok(&spec, seq.labels.last().unwrap()));
        }
    }

    #[test]
    fn impossible_margins_fail_before_rendering() {
        let spec = SceneSpec {
            velocity: (50.0, 60.0),
            ..SceneSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
        let spec = SceneSpec {
            num_frames: 1,
            ..SceneSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn spec_text_round_trips() {
        let spec = SceneSpec {
            seed: 99,
            velocity: (0.25, 1.5),
            shape: ShapeFamily::Disc,
            ..SceneSpec::default()
        };
        assert_eq!(SceneSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(SceneSpec::from_text("bogus=1").is_err());
    }

    #[test]
    fn rigid_translation_flow_is_exact() {
        let spec = SceneSpec {
            classes: vec![SceneClass::Band, SceneClass::MovingSprite, SceneClass::MovingSprite],
            sprites: 2,
            velocity: (1.0, 1.0),
            acceleration: (0.0, 0.0),
            shape: ShapeFamily::Rectangle,
            ..SceneSpec::default()
        };
        let seq = generate(&spec).unwrap();
        for flow in &seq.flows {
            for p in 0..flow.plane(0, 0).len() {
                let dx = flow.plane(0, 0)[p];
                assert!(dx == 0.0 || dx.abs() == 1.0);
            }
        }
    }
}
