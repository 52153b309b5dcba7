//! Procedural multi-layer videos: soft-edged sprites over drifting
//! patterns, with captions from a closed vocabulary.
//!
//! Three dataset tiers are produced from one base set of clean quadruples:
//! `coarse` (degraded, for base training), `frozen` (frozen copy-paste
//! composites, for the motion adapter) and `joint` (mostly frozen clean
//! quadruples plus a minority of dynamic copy-paste composites, for the
//! content adapter).

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerpack::{
    composite, read_quadruple_file, write_quadruple_file, LayerQuadruple, LayerVideos, Video,
};
use crate::textcond::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f32; 3],
}

pub const SPRITE_COLORS: [NamedColor; 6] = [
    NamedColor { name: "red", rgb: [0.9, 0.15, 0.15] },
    NamedColor { name: "green", rgb: [0.15, 0.8, 0.2] },
    NamedColor { name: "blue", rgb: [0.2, 0.3, 0.95] },
    NamedColor { name: "yellow", rgb: [0.95, 0.9, 0.15] },
    NamedColor { name: "magenta", rgb: [0.9, 0.2, 0.85] },
    NamedColor { name: "cyan", rgb: [0.15, 0.85, 0.9] },
];

pub const BACKGROUND_COLORS: [NamedColor; 4] = [
    NamedColor { name: "white", rgb: [0.92, 0.92, 0.92] },
    NamedColor { name: "gray", rgb: [0.55, 0.55, 0.55] },
    NamedColor { name: "black", rgb: [0.08, 0.08, 0.08] },
    NamedColor { name: "brown", rgb: [0.55, 0.35, 0.2] },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Center at frame `f` is `start + f·velocity` (pixels).
    Linear { start: [f32; 2], velocity: [f32; 2] },
    /// Center at frame `f` is `center + radius·(cos, sin)(phase + f·rate)`.
    Circular {
        center: [f32; 2],
        radius: f32,
        rate: f32,
        phase: f32,
    },
}

impl Trajectory {
    pub fn position(&self, f: usize) -> [f32; 2] {
        let f = f as f32;
        match *self {
            Trajectory::Linear { start, velocity } => {
                [start[0] + f * velocity[0], start[1] + f * velocity[1]]
            }
            Trajectory::Circular {
                center,
                radius,
                rate,
                phase,
            } => {
                let a = phase + f * rate;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    /// Caption word(s) for the motion.
    pub fn words(&self) -> &'static str {
        match *self {
            Trajectory::Circular { .. } => "circling",
            Trajectory::Linear { velocity, .. } => direction_words(velocity, "moving", "still"),
        }
    }
}

fn direction_words(v: [f32; 2], verb: &'static str, none: &'static str) -> &'static str {
    if v[0] == 0.0 && v[1] == 0.0 {
        return none;
    }
    let horizontal = v[0].abs() >= v[1].abs();
    match (verb, horizontal, v[0] > 0.0, v[1] > 0.0) {
        ("moving", true, true, _) => "moving right",
        ("moving", true, false, _) => "moving left",
        ("moving", false, _, true) => "moving down",
        ("moving", false, _, false) => "moving up",
        (_, true, true, _) => "drifting right",
        (_, true, false, _) => "drifting left",
        (_, false, _, true) => "drifting down",
        (_, false, _, false) => "drifting up",
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpriteSpec {
    pub shape: ShapeKind,
    pub color: NamedColor,
    /// Radius as a fraction of the shorter frame side.
    pub size: f32,
    pub trajectory: Trajectory,
    /// Width of the alpha ramp in pixels.
    pub soft_edge: f32,
}

impl SpriteSpec {
    fn radius(&self, h: usize, w: usize) -> f32 {
        self.size * h.min(w) as f32
    }

    /// Distance from the center beyond which alpha is zero.
    fn extent(&self, h: usize, w: usize) -> f32 {
        self.radius(h, w) + self.soft_edge
    }

    pub fn validate(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        if !(self.soft_edge >= 1.0) || !(self.size > 0.0) {
            return Err(Error::invalid("sprite needs size > 0 and soft edge >= 1 px"));
        }
        let e = self.extent(h, w);
        for f in 0..frames {
            let [x, y] = self.trajectory.position(f);
            if x - e < 0.0 || y - e < 0.0 || x + e > w as f32 || y + e > h as f32 {
                return Err(Error::invalid(format!(
                    "sprite leaves the {h}x{w} frame at frame {f} (center {x:.2},{y:.2})"
                )));
            }
        }
        Ok(())
    }

    /// Coverage in `[0, 1]` of the pixel centered at `(px, py)` in frame `f`.
    fn alpha(&self, f: usize, px: f32, py: f32, h: usize, w: usize) -> f32 {
        let [cx, cy] = self.trajectory.position(f);
        let (dx, dy) = (px - cx, py - cy);
        let r = self.radius(h, w);
        let d = match self.shape {
            ShapeKind::Disc => (dx * dx + dy * dy).sqrt() - r,
            ShapeKind::Square => dx.abs().max(dy.abs()) - r * 0.85,
            ShapeKind::Triangle => {
                // apex up; max of the three edge-plane distances
                let inr = r * 0.5;
                (0..3)
                    .map(|k| {
                        let a = PI / 2.0 + k as f32 * 2.0 * PI / 3.0;
                        -(dx * a.cos() - dy * a.sin()) - inr
                    })
                    .fold(f32::MIN, f32::max)
            }
        };
        (0.5 - d / self.soft_edge).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Gradient,
    Stripes,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Gradient, Pattern::Stripes, Pattern::Checker];

    pub fn word(self) -> &'static str {
        match self {
            Pattern::Gradient => "gradient",
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
        }
    }
}

const PATTERN_PERIOD: f32 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundSpec {
    pub pattern: Pattern,
    pub colors: [NamedColor; 2],
    /// Pixels per frame.
    pub drift: [f32; 2],
}

impl BackgroundSpec {
    pub fn validate(&self, frames: usize) -> Result<()> {
        let travel = (self.drift[0].hypot(self.drift[1])) * frames as f32;
        if travel > PATTERN_PERIOD / 2.0 {
            return Err(Error::invalid(format!(
                "background drift {travel:.1} px over the clip is too large for the pattern period"
            )));
        }
        Ok(())
    }

    /// Mixing weight of the second color at a pixel.
    fn weight(&self, f: usize, px: f32, py: f32, w: usize) -> f32 {
        let x = px - self.drift[0] * f as f32;
        let y = py - self.drift[1] * f as f32;
        let k = 2.0 * PI / PATTERN_PERIOD;
        match self.pattern {
            Pattern::Gradient => 0.5 + 0.5 * ((x + 0.5 * y) * PI / (1.5 * w as f32)).sin(),
            Pattern::Stripes => {
                let u = if self.drift[1].abs() > self.drift[0].abs() { y } else { x };
                0.5 + 0.5 * (k * u).sin()
            }
            Pattern::Checker => 0.5 + 0.5 * (k * x).sin() * (k * y).sin(),
        }
    }
}

/// Deterministic captions over the closed vocabulary.
pub struct CaptionRule;

impl CaptionRule {
    pub fn foreground(s: &SpriteSpec) -> String {
        format!("a {} {} {}", s.color.name, s.shape.word(), s.trajectory.words())
    }

    pub fn background(b: &BackgroundSpec) -> String {
        format!(
            "{} and {} {} {}",
            b.colors[0].name,
            b.colors[1].name,
            b.pattern.word(),
            direction_words(b.drift, "drifting", "static")
        )
    }

    pub fn blended(fg: &str, bg: &str) -> String {
        format!("{fg} over {bg}")
    }

    pub fn prompts(s: &SpriteSpec, b: &BackgroundSpec) -> [String; 3] {
        let fg = Self::foreground(s);
        let bg = Self::background(b);
        let bl = Self::blended(&fg, &bg);
        [fg, bg, bl]
    }
}

/// Every word a caption can contain, plus the layer-index prefixes.
pub fn caption_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec!["1,", "2,", "3,", "a", "and", "over"];
    words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    words.extend(SPRITE_COLORS.iter().map(|c| c.name));
    words.extend(BACKGROUND_COLORS.iter().map(|c| c.name));
    words.extend(Pattern::ALL.iter().map(|p| p.word()));
    words.extend([
        "moving", "drifting", "left", "right", "up", "down", "circling", "still", "static",
    ]);
    Vocabulary::new(words)
}

/// Renders one clean quadruple. `seed` drives a faint static texture on the
/// background.
pub fn gen_quadruple(
    sprite: &SpriteSpec,
    bg: &BackgroundSpec,
    frames: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<LayerQuadruple> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("video extents must be positive"));
    }
    sprite.validate(frames, h, w)?;
    bg.validate(frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.02..0.02)).collect();
    let mut fg = Video::filled(frames, h, w, 3, 0.0);
    let mut alpha = Video::filled(frames, h, w, 1, 0.0);
    let mut back = Video::filled(frames, h, w, 3, 0.0);
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let a = sprite.alpha(f, px, py, h, w);
                alpha.set(f, y, x, 0, a);
                let k = bg.weight(f, px, py, w);
                for c in 0..3 {
                    if a > 0.0 {
                        fg.set(f, y, x, c, sprite.color.rgb[c]);
                    }
                    let v = (1.0 - k) * bg.colors[0].rgb[c] + k * bg.colors[1].rgb[c];
                    back.set(f, y, x, c, (v + texture[y * w + x]).clamp(0.0, 1.0));
                }
            }
        }
    }
    let blended = composite(&fg, &alpha, &back)?;
    LayerQuadruple::new(
        LayerVideos {
            foreground: fg,
            alpha,
            background: back,
            blended,
        },
        CaptionRule::prompts(sprite, bg),
    )
}

/// The frame index [`freeze`] repeats.
pub fn freeze_index(frames: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..frames)
}

/// Repeats one randomly chosen frame across the whole clip in every layer.
pub fn freeze(q: &LayerQuadruple, seed: u64) -> LayerQuadruple {
    let f = freeze_index(q.dims().0, seed);
    let v = &q.videos;
    LayerQuadruple {
        videos: LayerVideos {
            foreground: v.foreground.repeat_frame(f),
            alpha: v.alpha.repeat_frame(f),
            background: v.background.repeat_frame(f),
            blended: v.blended.repeat_frame(f),
        },
        prompts: q.prompts.clone(),
    }
}

/// Pastes the matted foreground of `fg_source` onto the background of
/// `bg_source`.
pub fn copy_paste(fg_source: &LayerQuadruple, bg_source: &LayerQuadruple) -> Result<LayerQuadruple> {
    if fg_source.dims() != bg_source.dims() {
        let (a, b) = (fg_source.dims(), bg_source.dims());
        return Err(Error::shape("copy_paste", &[a.0, a.1, a.2], &[b.0, b.1, b.2]));
    }
    let fg = fg_source.videos.foreground.clone();
    let alpha = fg_source.videos.alpha.clone();
    let background = bg_source.videos.background.clone();
    let blended = composite(&fg, &alpha, &background)?;
    let fg_prompt = fg_source.prompts[0].clone();
    let bg_prompt = bg_source.prompts[1].clone();
    let bl = CaptionRule::blended(&fg_prompt, &bg_prompt);
    LayerQuadruple::new(
        LayerVideos {
            foreground: fg,
            alpha,
            background,
            blended,
        },
        [fg_prompt, bg_prompt, bl],
    )
}

/// Simulates coarse training data: binary alpha, temporally smeared blended
/// video, noisy background.
pub fn degrade(q: &LayerQuadruple, seed: u64) -> LayerQuadruple {
    let v = &q.videos;
    let mut alpha = v.alpha.clone();
    for a in alpha.data_mut() {
        *a = if *a >= 0.5 { 1.0 } else { 0.0 };
    }
    let frames = v.blended.frames();
    let mut blended = v.blended.clone();
    for f in 0..frames {
        let prev = v.blended.frame(f.saturating_sub(1));
        let cur = v.blended.frame(f);
        let next = v.blended.frame((f + 1).min(frames - 1));
        for (i, o) in blended.frame_mut(f).iter_mut().enumerate() {
            *o = (prev[i] + cur[i] + next[i]) / 3.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut background = v.background.clone();
    for b in background.data_mut() {
        *b = (*b + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    LayerQuadruple {
        videos: LayerVideos {
            foreground: v.foreground.clone(),
            alpha,
            background,
            blended,
        },
        prompts: q.prompts.clone(),
    }
}

/// Discrete spec coordinates; the continuous parameters are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub shape: usize,
    pub color: usize,
    pub motion: usize,
    pub pattern: usize,
    pub bg_colors: usize,
    pub drift: usize,
}

pub const MOTIONS: usize = 5;
const BG_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
const DRIFTS: usize = 3;

impl GridCoord {
    /// Coordinates of sample `index`; the sprite part is injective for the
    /// first 90 indices.
    pub fn of_index(index: usize) -> Self {
        let k = index * 7 + 3;
        GridCoord {
            shape: index % 3,
            color: (index / 3) % SPRITE_COLORS.len(),
            motion: (index / 18) % MOTIONS,
            pattern: k % 3,
            bg_colors: (k / 3) % BG_PAIRS.len(),
            drift: (k / 18) % DRIFTS,
        }
    }
}

impl fmt::Display for GridCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}-{}-{}-{}",
            self.shape, self.color, self.motion, self.pattern, self.bg_colors, self.drift
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_tier: usize,
    /// Share of frozen clean samples in the joint tier.
    pub joint_frozen_fraction: f64,
    /// Sprite speed in pixels per frame.
    pub sprite_speed: f32,
    /// Background drift in pixels per frame.
    pub background_drift: f32,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            frames: 4,
            height: 16,
            width: 16,
            samples_per_tier: 64,
            joint_frozen_fraction: 0.8,
            sprite_speed: 1.5,
            background_drift: 0.25,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 8 || self.width < 8 || self.samples_per_tier == 0 {
            return Err(Error::Config(
                "data needs frames >= 1, frames at least 8x8 and samples_per_tier >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.joint_frozen_fraction) {
            return Err(Error::Config("joint_frozen_fraction must lie in [0, 1]".into()));
        }
        if !(self.sprite_speed >= 0.0) || !(self.background_drift >= 0.0) {
            return Err(Error::Config("speeds must be non-negative".into()));
        }
        Ok(())
    }

    fn sample_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

/// Specs of base sample `index`.
pub fn spec_for(index: usize, cfg: &DataConfig) -> Result<(SpriteSpec, BackgroundSpec, GridCoord)> {
    let g = GridCoord::of_index(index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed(index).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = (cfg.height as f32, cfg.width as f32);
    let size = rng.random_range(0.14..0.2);
    let soft_edge = rng.random_range(1.0..1.6);
    let e = size * h.min(w) + soft_edge;
    let travel = cfg.sprite_speed * cfg.frames.saturating_sub(1) as f32;
    if 2.0 * e > h.min(w) {
        return Err(Error::Config(format!(
            "a {}x{} frame is too small for the sprites",
            cfg.height, cfg.width
        )));
    }
    let trajectory = if g.motion == 4 {
        let radius = (cfg.sprite_speed / 0.6).min(0.5 * (h.min(w) - 2.0 * e).max(0.0));
        let cx = rng.random_range(e + radius..=w - e - radius);
        let cy = rng.random_range(e + radius..=h - e - radius);
        Trajectory::Circular {
            center: [cx, cy],
            radius,
            rate: 0.6,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    } else {
        let dir = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]][g.motion];
        let span = |len: f32, d: f32| {
            let lo = e + if d < 0.0 { travel } else { 0.0 };
            let hi = len - e - if d > 0.0 { travel } else { 0.0 };
            (lo, hi)
        };
        let (xl, xh) = span(w, dir[0]);
        let (yl, yh) = span(h, dir[1]);
        if xl > xh || yl > yh {
            return Err(Error::Config(format!(
                "sprite speed {} is too fast for a {}x{} frame over {} frames",
                cfg.sprite_speed, cfg.height, cfg.width, cfg.frames
            )));
        }
        Trajectory::Linear {
            start: [rng.random_range(xl..=xh), rng.random_range(yl..=yh)],
            velocity: [dir[0] * cfg.sprite_speed, dir[1] * cfg.sprite_speed],
        }
    };
    let sprite = SpriteSpec {
        shape: ShapeKind::ALL[g.shape],
        color: SPRITE_COLORS[g.color],
        size,
        trajectory,
        soft_edge,
    };
    let (c0, c1) = BG_PAIRS[g.bg_colors];
    let d = cfg.background_drift;
    let background = BackgroundSpec {
        pattern: Pattern::ALL[g.pattern],
        colors: [BACKGROUND_COLORS[c0], BACKGROUND_COLORS[c1]],
        drift: [[-d, 0.0], [d, 0.0], [0.0, 0.0]][g.drift],
    };
    Ok((sprite, background, g))
}

/// Clean base quadruple `index`.
pub fn base_quadruple(index: usize, cfg: &DataConfig) -> Result<(LayerQuadruple, GridCoord)> {
    let (s, b, g) = spec_for(index, cfg)?;
    let q = gen_quadruple(&s, &b, cfg.frames, cfg.height, cfg.width, cfg.sample_seed(index))?;
    Ok((q, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Coarse,
    Frozen,
    Joint,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Coarse, Tier::Frozen, Tier::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Coarse => "coarse",
            Tier::Frozen => "frozen",
            Tier::Joint => "joint",
        }
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tier `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub quadruple: LayerQuadruple,
    pub tier: Tier,
    /// Every frame identical (frozen-video data).
    pub frozen: bool,
    pub grid: GridCoord,
    pub seed: u64,
}

/// Whether joint-tier sample `i` is a frozen clean sample; spreads the
/// frozen share evenly over the index range.
pub fn joint_is_frozen(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

fn partner(i: usize, n: usize) -> usize {
    if n == 1 {
        0
    } else {
        (i + 1 + n / 2) % n
    }
}

/// Generates the samples of one tier.
pub fn generate_tier(tier: Tier, cfg: &DataConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let n = cfg.samples_per_tier;
    let base: Vec<(LayerQuadruple, GridCoord)> =
        (0..n).map(|i| base_quadruple(i, cfg)).collect::<Result<_>>()?;
    let salt = |i: usize, k: u64| cfg.sample_seed(i).wrapping_add(k.wrapping_mul(0xA076_1D64_78BD_642F));
    let mut out = Vec::with_capacity(n);
    for (i, (q, g)) in base.iter().enumerate() {
        let seed = cfg.sample_seed(i);
        let (quadruple, frozen) = match tier {
            Tier::Coarse => (degrade(q, salt(i, 1)), cfg.frames == 1),
            Tier::Frozen => (freeze(&copy_paste(q, &base[partner(i, n)].0)?, salt(i, 2)), true),
            Tier::Joint => {
                if joint_is_frozen(i, cfg.joint_frozen_fraction) {
                    (freeze(q, salt(i, 3)), true)
                } else {
                    (copy_paste(q, &base[partner(i, n)].0)?, cfg.frames == 1)
                }
            }
        };
        out.push(Sample {
            quadruple,
            tier,
            frozen,
            grid: *g,
            seed,
        });
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.csv";
pub const VOCABULARY_FILE: &str = "vocab.txt";

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub tier: Tier,
    pub frozen: bool,
    pub grid: String,
    pub seed: u64,
}

/// Writes all tiers, the vocabulary and the manifest below `dir`.
pub fn write_dataset(dir: &Path, cfg: &DataConfig) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for tier in Tier::ALL {
        let sub = dir.join(tier.name());
        fs::create_dir_all(&sub)?;
        for (i, s) in generate_tier(tier, cfg)?.into_iter().enumerate() {
            let file = format!("{}/{i:04}.lfq", tier.name());
            write_quadruple_file(&s.quadruple, &dir.join(&file))?;
            rows.push(ManifestEntry {
                file,
                tier,
                frozen: s.frozen,
                grid: s.grid.to_string(),
                seed: s.seed,
            });
        }
    }
    caption_vocabulary().save(&dir.join(VOCABULARY_FILE))?;
    let mut text = String::from("file,tier,frozen,grid,seed\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.file,
            r.tier.name(),
            u8::from(r.frozen),
            r.grid,
            r.seed
        ));
    }
    fs::write(dir.join(MANIFEST), text)?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::MissingPrerequisite(format!("dataset manifest {}: {e}", path.display()))
    })?;
    let mut lines = text.lines();
    if lines.next() != Some("file,tier,frozen,grid,seed") {
        return Err(Error::format("manifest header mismatch"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(format!("manifest row {} is malformed", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                file: f[0].to_string(),
                tier: f[1].parse()?,
                frozen: match f[2] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
                grid: f[3].to_string(),
                seed: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads every sample of `tier` listed in the manifest of `dir`.
pub fn load_tier(dir: &Path, tier: Tier) -> Result<Vec<(LayerQuadruple, bool)>> {
    let rows = read_manifest(dir)?;
    let out: Vec<_> = rows
        .iter()
        .filter(|r| r.tier == tier)
        .map(|r| Ok((read_quadruple_file(&dir.join(&r.file))?, r.frozen)))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "dataset {} has no {} samples",
            dir.display(),
            tier.name()
        )));
    }
    Ok(out)
}

pub fn tier_dir(dir: &Path, tier: Tier) -> PathBuf {
    dir.join(tier.name())
}

#[cfg(test)]
mod tests;
