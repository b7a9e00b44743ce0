//! Seeded synthetic handwriting and dataset ingestion.
//!
//! Words are drawn from 26 stroke glyphs (lines and arcs in a unit box);
//! a writer's style shears, thickens, scales and perturbs those strokes.
//! Writer identity is therefore purely geometric and independent of the
//! text. Glyph-class corpora for pretraining use one random stroke shape
//! per class.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image, write_pgm, GrayImage, WHITE};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stroke {
    Line {
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
    },
    /// Counter-clockwise from `a0` to `a1` degrees; `y` grows downwards.
    Arc {
        cx: f32,
        cy: f32,
        r: f32,
        a0: f32,
        a1: f32,
    },
}

const fn l(x0: f32, y0: f32, x1: f32, y1: f32) -> Stroke {
    Stroke::Line { x0, y0, x1, y1 }
}

const fn a(cx: f32, cy: f32, r: f32, a0: f32, a1: f32) -> Stroke {
    Stroke::Arc { cx, cy, r, a0, a1 }
}

/// Glyph box is `advance` wide and 1 tall; the baseline is `y = 1`.
pub struct Glyph {
    pub strokes: &'static [Stroke],
    pub advance: f32,
}

const fn g(advance: f32, strokes: &'static [Stroke]) -> Glyph {
    Glyph { strokes, advance }
}

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

static GLYPHS: [Glyph; 26] = [
    g(
        0.7,
        &[a(0.32, 0.72, 0.24, 0.0, 360.0), l(0.56, 0.46, 0.58, 1.0)],
    ),
    g(
        0.7,
        &[l(0.1, 0.0, 0.1, 1.0), a(0.34, 0.74, 0.24, 0.0, 360.0)],
    ),
    g(0.6, &[a(0.36, 0.72, 0.26, 50.0, 310.0)]),
    g(
        0.7,
        &[a(0.32, 0.74, 0.24, 0.0, 360.0), l(0.56, 0.0, 0.56, 1.0)],
    ),
    g(
        0.65,
        &[l(0.1, 0.72, 0.6, 0.72), a(0.35, 0.72, 0.26, 0.0, 320.0)],
    ),
    g(
        0.5,
        &[
            a(0.4, 0.2, 0.16, 20.0, 180.0),
            l(0.24, 0.2, 0.24, 1.0),
            l(0.06, 0.46, 0.44, 0.46),
        ],
    ),
    g(
        0.7,
        &[
            a(0.32, 0.66, 0.22, 0.0, 360.0),
            l(0.54, 0.44, 0.54, 1.1),
            a(0.32, 1.1, 0.22, 180.0, 360.0),
        ],
    ),
    g(
        0.7,
        &[
            l(0.1, 0.0, 0.1, 1.0),
            a(0.34, 0.7, 0.24, 0.0, 180.0),
            l(0.58, 0.7, 0.58, 1.0),
        ],
    ),
    g(0.3, &[l(0.15, 0.46, 0.15, 1.0), l(0.13, 0.22, 0.17, 0.26)]),
    g(
        0.4,
        &[
            l(0.25, 0.46, 0.25, 1.05),
            a(0.08, 1.05, 0.17, 180.0, 360.0),
            l(0.23, 0.22, 0.27, 0.26),
        ],
    ),
    g(
        0.6,
        &[
            l(0.1, 0.0, 0.1, 1.0),
            l(0.5, 0.46, 0.12, 0.76),
            l(0.22, 0.68, 0.52, 1.0),
        ],
    ),
    g(0.3, &[l(0.15, 0.0, 0.15, 1.0)]),
    g(
        1.0,
        &[
            l(0.1, 0.46, 0.1, 1.0),
            a(0.3, 0.68, 0.2, 0.0, 180.0),
            a(0.7, 0.68, 0.2, 0.0, 180.0),
            l(0.5, 0.68, 0.5, 1.0),
            l(0.9, 0.68, 0.9, 1.0),
        ],
    ),
    g(
        0.7,
        &[
            l(0.1, 0.46, 0.1, 1.0),
            a(0.34, 0.7, 0.24, 0.0, 180.0),
            l(0.58, 0.7, 0.58, 1.0),
        ],
    ),
    g(0.65, &[a(0.33, 0.73, 0.25, 0.0, 360.0)]),
    g(
        0.7,
        &[l(0.1, 0.46, 0.1, 1.25), a(0.34, 0.72, 0.24, 0.0, 360.0)],
    ),
    g(
        0.7,
        &[
            a(0.32, 0.72, 0.24, 0.0, 360.0),
            l(0.56, 0.46, 0.56, 1.25),
            l(0.56, 1.25, 0.7, 1.15),
        ],
    ),
    g(
        0.5,
        &[l(0.1, 0.46, 0.1, 1.0), a(0.32, 0.68, 0.22, 20.0, 180.0)],
    ),
    g(
        0.55,
        &[
            a(0.28, 0.6, 0.14, 20.0, 270.0),
            a(0.28, 0.86, 0.14, 200.0, 450.0),
        ],
    ),
    g(
        0.5,
        &[
            l(0.22, 0.12, 0.22, 0.9),
            a(0.36, 0.9, 0.14, 180.0, 330.0),
            l(0.04, 0.46, 0.44, 0.46),
        ],
    ),
    g(
        0.7,
        &[
            l(0.1, 0.46, 0.1, 0.76),
            a(0.34, 0.76, 0.24, 180.0, 360.0),
            l(0.58, 0.46, 0.58, 1.0),
        ],
    ),
    g(0.65, &[l(0.06, 0.46, 0.33, 1.0), l(0.33, 1.0, 0.6, 0.46)]),
    g(
        0.95,
        &[
            l(0.05, 0.46, 0.25, 1.0),
            l(0.25, 1.0, 0.46, 0.6),
            l(0.46, 0.6, 0.67, 1.0),
            l(0.67, 1.0, 0.88, 0.46),
        ],
    ),
    g(0.6, &[l(0.08, 0.46, 0.52, 1.0), l(0.52, 0.46, 0.08, 1.0)]),
    g(0.65, &[l(0.06, 0.46, 0.33, 0.95), l(0.6, 0.46, 0.18, 1.25)]),
    g(
        0.6,
        &[
            l(0.08, 0.46, 0.52, 0.46),
            l(0.52, 0.46, 0.08, 1.0),
            l(0.08, 1.0, 0.54, 1.0),
        ],
    ),
];

pub fn glyph(c: char) -> Result<&'static Glyph> {
    ALPHABET
        .find(c)
        .map(|i| &GLYPHS[i])
        .ok_or(Error::UnknownGlyph(c))
}

/// Geometric signature of one synthetic writer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    /// Shear angle in radians, positive leans right.
    pub slant: f32,
    /// Pen diameter in pixels.
    pub stroke_width: f32,
    /// Standard deviation of per-glyph control-point noise, in glyph heights.
    pub curvature_jitter: f32,
    /// Baseline oscillation amplitude in pixels.
    pub baseline_wobble: f32,
    pub size_scale: f32,
}

/// Documented parameter ranges (inclusive).
pub mod ranges {
    pub const SLANT: (f32, f32) = (-0.35, 0.35);
    pub const STROKE_WIDTH: (f32, f32) = (1.0, 4.0);
    pub const JITTER: (f32, f32) = (0.0, 0.06);
    pub const WOBBLE: (f32, f32) = (0.0, 3.0);
    pub const SIZE: (f32, f32) = (0.8, 1.25);
}

/// Glyph height in pixels at `size_scale == 1`.
pub const GLYPH_HEIGHT: f32 = 28.0;

// fractional parts of √2, √3, √5, √7, √11: per-field additive recurrences
// that spread consecutive writer ids evenly over each range
const STEPS: [f64; 5] = [
    0.414_213_562_373_095,
    0.732_050_807_568_877,
    0.236_067_977_499_790,
    0.645_751_311_064_591,
    0.316_624_790_355_400,
];

pub fn gen_writer_style(seed: u64, writer_id: usize) -> WriterStyle {
    let mut base = Rng::derive(seed, 0x5717_1e);
    let u: Vec<f32> = STEPS
        .iter()
        .map(|step| {
            let offset = base.uniform_f64();
            ((offset + step * (writer_id as f64 + 1.0)).fract()) as f32
        })
        .collect();
    let lerp = |(lo, hi): (f32, f32), t: f32| lo + (hi - lo) * t;
    WriterStyle {
        slant: lerp(ranges::SLANT, u[0]),
        stroke_width: lerp(ranges::STROKE_WIDTH, u[1]),
        curvature_jitter: lerp(ranges::JITTER, u[2]),
        baseline_wobble: lerp(ranges::WOBBLE, u[3]),
        size_scale: lerp(ranges::SIZE, u[4]),
    }
}

/// A pen segment in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Seg {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
}

const ARC_STEP_DEG: f32 = 15.0;

/// Places strokes (glyph units) at `origin_x` with the style's geometry.
fn place_strokes(
    strokes: &[Stroke],
    origin_x: f32,
    style: &WriterStyle,
    phase: f32,
    rng: &mut Rng,
    out: &mut Vec<Seg>,
) {
    let h = GLYPH_HEIGHT * style.size_scale;
    let shear = style.slant.tan();
    let mut jit = || style.curvature_jitter * rng.normal();
    let to_px = |u: f32, v: f32| -> (f32, f32) {
        let x = origin_x + u * h + (1.0 - v) * h * shear;
        let wobble = style.baseline_wobble * (x / (1.7 * h) + phase).sin();
        (x, v * h + wobble)
    };
    for s in strokes {
        match *s {
            Stroke::Line { x0, y0, x1, y1 } => {
                let (ax, ay) = to_px(x0 + jit(), y0 + jit());
                let (bx, by) = to_px(x1 + jit(), y1 + jit());
                out.push(Seg {
                    x0: ax,
                    y0: ay,
                    x1: bx,
                    y1: by,
                });
            }
            Stroke::Arc { cx, cy, r, a0, a1 } => {
                let (cx, cy, r) = (cx + jit(), cy + jit(), (r * (1.0 + jit())).max(0.02));
                let steps = ((a1 - a0).abs() / ARC_STEP_DEG).ceil().max(1.0) as usize;
                let point = |k: usize| {
                    let t = (a0 + (a1 - a0) * k as f32 / steps as f32).to_radians();
                    to_px(cx + r * t.cos(), cy - r * t.sin())
                };
                let mut prev = point(0);
                for k in 1..=steps {
                    let p = point(k);
                    out.push(Seg {
                        x0: prev.0,
                        y0: prev.1,
                        x1: p.0,
                        y1: p.1,
                    });
                    prev = p;
                }
            }
        }
    }
}

/// Rasterizes segments onto a white canvas fitted to their extent plus a
/// margin, with coverage-based anti-aliasing.
fn rasterize(segs: &[Seg], width: f32) -> GrayImage {
    let margin = 4.0 + width;
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for s in segs {
        lo_x = lo_x.min(s.x0.min(s.x1));
        lo_y = lo_y.min(s.y0.min(s.y1));
        hi_x = hi_x.max(s.x0.max(s.x1));
        hi_y = hi_y.max(s.y0.max(s.y1));
    }
    if segs.is_empty() {
        return GrayImage::filled(1, 1, WHITE);
    }
    let (ox, oy) = (lo_x - margin, lo_y - margin);
    let w = (hi_x - lo_x + 2.0 * margin).ceil() as usize;
    let h = (hi_y - lo_y + 2.0 * margin).ceil() as usize;
    let mut ink = vec![0f32; w * h];
    let half = width / 2.0;
    for s in segs {
        let (x0, y0, x1, y1) = (s.x0 - ox, s.y0 - oy, s.x1 - ox, s.y1 - oy);
        let reach = half + 1.0;
        let bx0 = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let by0 = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let bx1 = ((x0.max(x1) + reach).ceil() as usize).min(w - 1);
        let by1 = ((y0.max(y1) + reach).ceil() as usize).min(h - 1);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = dx * dx + dy * dy;
        for py in by0..=by1 {
            for px in bx0..=bx1 {
                let (cx, cy) = (px as f32 + 0.5, py as f32 + 0.5);
                let t = if len2 > 0.0 {
                    (((cx - x0) * dx + (cy - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = ((cx - x0 - t * dx).powi(2) + (cy - y0 - t * dy).powi(2)).sqrt();
                let cover = (half + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut ink[py * w + px];
                *cell = cell.max(cover);
            }
        }
    }
    let pixels = ink
        .iter()
        .map(|&c| (255.0 * (1.0 - c)).round() as u8)
        .collect();
    GrayImage::new(w, h, pixels).expect("canvas size matches")
}

/// Renders `text` (1 to 10 glyphs from [`ALPHABET`]) in the given style.
/// `rng` drives the per-glyph jitter and the wobble phase.
pub fn render_word(style: &WriterStyle, text: &str, rng: &mut Rng) -> Result<GrayImage> {
    let n = text.chars().count();
    if !(1..=10).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "word length {n} not in 1..=10"
        )));
    }
    let glyphs: Vec<&Glyph> = text.chars().map(glyph).collect::<Result<_>>()?;
    let h = GLYPH_HEIGHT * style.size_scale;
    let phase = rng.range(0.0, std::f32::consts::TAU);
    let mut segs = Vec::new();
    let mut x = 0.0;
    for gl in glyphs {
        place_strokes(gl.strokes, x, style, phase, rng, &mut segs);
        x += (gl.advance + 0.12) * h;
    }
    Ok(rasterize(&segs, style.stroke_width))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub image: GrayImage,
    pub label: usize,
    pub split: Split,
    /// Relative path in the directory layout.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    Directory { root: PathBuf },
}

/// Word images labeled by writer, split train/val/test.
#[derive(Clone, Debug)]
pub struct WriterDataset {
    pub num_writers: usize,
    pub items: Vec<Item>,
    pub provenance: Provenance,
}

impl WriterDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.split == split)
    }

    /// `[train, val, test]` counts per writer.
    pub fn counts(&self) -> Vec<[usize; 3]> {
        let mut c = vec![[0; 3]; self.num_writers];
        for it in &self.items {
            c[it.label][it.split as usize] += 1;
        }
        c
    }

    /// One `path,writer_id,split` line per item.
    pub fn manifest(&self) -> String {
        self.items
            .iter()
            .map(|it| format!("{},{},{}\n", it.path, it.label, it.split))
            .collect()
    }

    /// Writes every image under `root` in the ingestible layout (validation
    /// items go under `train/`) plus `manifest.csv`.
    pub fn export(&self, root: &Path) -> Result<()> {
        for it in &self.items {
            let path = root.join(&it.path);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_pgm(&path, &it.image)?;
        }
        let manifest = root.join("manifest.csv");
        fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))
    }
}

fn random_text(rng: &mut Rng) -> String {
    let n = 3 + rng.below(5);
    (0..n)
        .map(|_| ALPHABET.as_bytes()[rng.below(26)] as char)
        .collect()
}

/// Per-writer split sizes: 20% test and 10% validation (each at least one
/// word), the rest training.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    [n - test - val, val, test]
}

/// `num_writers × words_per_writer` synthetic words. Each writer gets
/// distinct texts, so the splits never share a text within a writer.
pub fn gen_identification_dataset(
    num_writers: usize,
    words_per_writer: usize,
    seed: u64,
) -> Result<WriterDataset> {
    if num_writers < 2 || words_per_writer < 4 {
        return Err(Error::Dataset(format!(
            "need at least 2 writers and 4 words each, got {num_writers} x {words_per_writer}"
        )));
    }
    let [n_train, n_val, _] = split_sizes(words_per_writer);
    let mut items = Vec::with_capacity(num_writers * words_per_writer);
    for w in 0..num_writers {
        let style = gen_writer_style(seed, w);
        let mut rng = Rng::derive(seed, 1 + w as u64);
        let mut texts: Vec<String> = Vec::with_capacity(words_per_writer);
        while texts.len() < words_per_writer {
            let t = random_text(&mut rng);
            if !texts.contains(&t) {
                texts.push(t);
            }
        }
        let mut order: Vec<usize> = (0..words_per_writer).collect();
        rng.shuffle(&mut order);
        for (rank, &i) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let mut word_rng = Rng::derive(seed ^ 0xA11CE, (w * words_per_writer + i) as u64);
            let image = render_word(&style, &texts[i], &mut word_rng)?;
            let dir = if split == Split::Test {
                "test"
            } else {
                "train"
            };
            items.push(Item {
                image,
                label: w,
                split,
                path: format!("{dir}/writer_{w:03}/{i:04}_{}.pgm", texts[i]),
            });
        }
    }
    Ok(WriterDataset {
        num_writers,
        items,
        provenance: Provenance::Synthetic { seed },
    })
}

/// Glyph images labeled by class.
#[derive(Clone, Debug)]
pub struct GlyphDataset {
    pub num_classes: usize,
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
}

fn random_shape(rng: &mut Rng) -> Vec<Stroke> {
    let n = 2 + rng.below(3);
    let mut p = || rng.range(0.1, 0.9);
    (0..n)
        .map(|_| {
            if p() < 0.5 {
                l(p(), p(), p(), p())
            } else {
                let (a0, span) = (360.0 * p(), 120.0 + 240.0 * p());
                a(p(), p(), 0.15 + 0.2 * p(), a0, a0 + span)
            }
        })
        .collect()
}

/// `num_classes` random stroke shapes, each drawn `samples_per_class`
/// times under random small style perturbations.
pub fn gen_glyph_dataset(
    num_classes: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<GlyphDataset> {
    if num_classes < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 glyph classes, got {num_classes}"
        )));
    }
    let mut images = Vec::with_capacity(num_classes * samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..num_classes {
        let shape = random_shape(&mut Rng::derive(seed, 0x6_1f00 + c as u64));
        for s in 0..samples_per_class {
            let mut rng = Rng::derive(seed ^ 0x5A3, (c * samples_per_class + s) as u64);
            let style = WriterStyle {
                slant: rng.range(-0.2, 0.2),
                stroke_width: rng.range(1.5, 3.5),
                curvature_jitter: rng.range(0.01, 0.04),
                baseline_wobble: 0.0,
                size_scale: rng.range(1.6, 2.0),
            };
            let mut segs = Vec::new();
            place_strokes(&shape, 0.0, &style, 0.0, &mut rng, &mut segs);
            images.push(rasterize(&segs, style.stroke_width));
            labels.push(c);
        }
    }
    Ok(GlyphDataset {
        num_classes,
        images,
        labels,
    })
}

/// Where a dataset comes from on the command line: `synth:K,W,SEED` or a
/// directory path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        seed: u64,
    },
    Directory(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(spec) = s.strip_prefix("synth:") else {
            return Ok(DataSource::Directory(PathBuf::from(s)));
        };
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let parse = |i: usize| -> Result<u64> {
            parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(|| {
                Error::Config(format!("expected synth:COUNT,PER_COUNT,SEED, got `{s}`"))
            })
        };
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "expected synth:COUNT,PER_COUNT,SEED, got `{s}`"
            )));
        }
        Ok(DataSource::Synthetic {
            classes: parse(0)? as usize,
            per_class: parse(1)? as usize,
            seed: parse(2)?,
        })
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic {
                classes,
                per_class,
                seed,
            } => write!(f, "synth:{classes},{per_class},{seed}"),
            DataSource::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

impl DataSource {
    /// Writer corpus: generated, or ingested with `seed` driving the
    /// validation draw.
    pub fn writers(&self, seed: u64) -> Result<WriterDataset> {
        match self {
            DataSource::Synthetic {
                classes,
                per_class,
                seed,
            } => gen_identification_dataset(*classes, *per_class, *seed),
            DataSource::Directory(root) => ingest_directory(root, seed),
        }
    }

    /// Glyph corpus for pretraining.
    pub fn glyphs(&self) -> Result<GlyphDataset> {
        match self {
            DataSource::Synthetic {
                classes,
                per_class,
                seed,
            } => gen_glyph_dataset(*classes, *per_class, *seed),
            DataSource::Directory(root) => ingest_glyph_directory(root),
        }
    }
}

impl TryFrom<String> for DataSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        d.to_string()
    }
}

fn is_image(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("pgm"))
        || (cfg!(feature = "png") && ext.as_deref() == Some("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Writer directories sort by their numeric suffix when every name has
/// one, otherwise by name.
fn writer_key(name: &str) -> (u64, String) {
    let id = name
        .strip_prefix("writer_")
        .and_then(|s| s.parse().ok())
        .unwrap_or(u64::MAX);
    (id, name.to_string())
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.is_file() && is_image(&p) {
            out.push(p);
        } else {
            log::warn!("skipping {}: not a supported image", p.display());
        }
    }
    Ok(out)
}

/// Reads `root/{train,test}/writer_<id>/*.pgm`. Writers are labeled
/// `0..K` in sorted directory order; 10% of each writer's training words
/// (seeded draw) become validation words.
pub fn ingest_directory(root: &Path, seed: u64) -> Result<WriterDataset> {
    let mut per_split: Vec<Vec<(String, PathBuf)>> = Vec::new();
    for split in ["train", "test"] {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "missing directory {}",
                dir.display()
            )));
        }
        let mut writers = Vec::new();
        for p in sorted_entries(&dir)? {
            if p.is_dir() {
                let name = p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                writers.push((name, p));
            }
        }
        writers.sort_by_key(|(n, _)| writer_key(n));
        per_split.push(writers);
    }
    let (train, test) = (&per_split[0], &per_split[1]);
    let train_names: Vec<&str> = train.iter().map(|(n, _)| n.as_str()).collect();
    let test_names: Vec<&str> = test.iter().map(|(n, _)| n.as_str()).collect();
    for n in &train_names {
        if !test_names.contains(n) {
            return Err(Error::Dataset(format!(
                "writer `{n}` appears only under train/"
            )));
        }
    }
    for n in &test_names {
        if !train_names.contains(n) {
            return Err(Error::Dataset(format!(
                "writer `{n}` appears only under test/"
            )));
        }
    }
    if train_names.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 writers, found {}",
            train_names.len()
        )));
    }

    let mut items = Vec::new();
    for (label, ((name, train_dir), (_, test_dir))) in train.iter().zip(test).enumerate() {
        for (split_name, dir) in [("train", train_dir), ("test", test_dir)] {
            let files = images_in(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!(
                    "writer directory {} has no images",
                    dir.display()
                )));
            }
            let mut splits = vec![
                if split_name == "test" {
                    Split::Test
                } else {
                    Split::Train
                };
                files.len()
            ];
            if split_name == "train" {
                let n_val = (files.len() as f64 * 0.1).round() as usize;
                let n_val = n_val.min(files.len() - 1);
                let mut order: Vec<usize> = (0..files.len()).collect();
                Rng::derive(seed, label as u64).shuffle(&mut order);
                for &i in &order[..n_val] {
                    splits[i] = Split::Val;
                }
            }
            for (path, split) in files.iter().zip(splits) {
                let file = path.file_name().unwrap_or_default().to_string_lossy();
                items.push(Item {
                    image: read_image(path)?,
                    label,
                    split,
                    path: format!("{split_name}/{name}/{file}"),
                });
            }
        }
    }
    let ds = WriterDataset {
        num_writers: train_names.len(),
        items,
        provenance: Provenance::Directory {
            root: root.to_path_buf(),
        },
    };
    for (name, c) in train_names.iter().zip(ds.counts()) {
        log::info!("{name}: {} train, {} val, {} test", c[0], c[1], c[2]);
    }
    Ok(ds)
}

/// Reads `root/<class>/*.pgm` glyph images, classes labeled in sorted order.
pub fn ingest_glyph_directory(root: &Path) -> Result<GlyphDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut num_classes = 0;
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let files = images_in(&dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} has no images",
                dir.display()
            )));
        }
        for f in files {
            images.push(read_image(&f)?);
            labels.push(num_classes);
        }
        num_classes += 1;
    }
    if num_classes < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 glyph classes under {}",
            root.display()
        )));
    }
    Ok(GlyphDataset {
        num_classes,
        images,
        labels,
    })
}
