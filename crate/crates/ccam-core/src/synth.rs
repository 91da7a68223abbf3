//! Procedural scene generation: class-keyed background textures, a glyph
//! foreground per class, and a controllable foreground/background
//! co-occurrence matrix. Backgrounds are trivially classifiable (distinct
//! cool hue plus a sinusoidal pattern) while foregrounds share a warm color
//! range and differ mainly by shape, so a lazily trained classifier is
//! rewarded for leaning on the background pairing it saw during training.

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Row-stochastic foreground -> background co-occurrence probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix {
    pub k_fg: usize,
    pub k_bg: usize,
    probs: Vec<f32>,
}

impl CoocMatrix {
    pub fn row(&self, fg: usize) -> &[f32] {
        &self.probs[fg * self.k_bg..(fg + 1) * self.k_bg]
    }

    /// The background class holding the row's dominant probability mass.
    pub fn dominant_bg(&self, fg: usize) -> usize {
        fg % self.k_bg
    }
}

/// Row `i` puts probability `bias` on its dominant background (`i mod k_bg`)
/// and spreads the rest evenly. `bias` must lie in [1/k_bg, 1].
pub fn build_cooc_matrix(k_fg: usize, k_bg: usize, bias: f32) -> Result<CoocMatrix> {
    if k_fg < 2 || k_bg < 2 {
        return Err(Error::Config(format!(
            "cooc matrix: need k_fg >= 2 and k_bg >= 2, got {k_fg}/{k_bg}"
        )));
    }
    let lo = 1.0 / k_bg as f32;
    if !(bias >= lo && bias <= 1.0) {
        return Err(Error::Config(format!(
            "cooc matrix: bias {bias} outside [{lo}, 1]"
        )));
    }
    let off = (1.0 - bias) / (k_bg as f32 - 1.0);
    let mut probs = vec![off; k_fg * k_bg];
    for i in 0..k_fg {
        probs[i * k_bg + i % k_bg] = bias;
    }
    Ok(CoocMatrix { k_fg, k_bg, probs })
}

/// The unbiased matrix used for the test split.
pub fn uniform_cooc_matrix(k_fg: usize, k_bg: usize) -> Result<CoocMatrix> {
    build_cooc_matrix(k_fg, k_bg, 1.0 / k_bg as f32)
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub fg_class: usize,
    pub bg_class: usize,
    /// glyph center in pixels
    pub fg_center: (f32, f32),
    /// glyph radius as a fraction of the image side, in [0.25, 0.45] (the
    /// glyph diameter then spans 0.25..0.45 of the side)
    pub fg_scale: f32,
    pub rotation: f32,
    pub seed: u64,
}

pub const FG_SCALE_RANGE: (f32, f32) = (0.25, 0.45);

/// Worst-case glyph extent multiplier over all shapes (cross arms poke past
/// the unit disk).
const GLYPH_OUTER: f32 = 1.06;

fn glyph_radius(fg_scale: f32, size: usize) -> f32 {
    // fg_scale measures the glyph footprint relative to the image side; the
    // shape fits a disk of this radius (up to GLYPH_OUTER).
    0.5 * fg_scale * size as f32
}

/// Sample a spec: uniform foreground class, background from the matrix row,
/// geometry inside invariant-respecting bounds for `size`.
pub fn sample_scene_spec(cooc: &CoocMatrix, size: usize, rng: &mut CounterRng) -> SceneSpec {
    let fg_class = rng.below(cooc.k_fg);
    let bg_class = rng.categorical(cooc.row(fg_class));
    let (center, scale, rotation) = sample_geometry(size, rng);
    SceneSpec {
        fg_class,
        bg_class,
        fg_center: center,
        fg_scale: scale,
        rotation,
        seed: rng.next_u64(),
    }
}

fn sample_geometry(size: usize, rng: &mut CounterRng) -> ((f32, f32), f32, f32) {
    let scale = rng.uniform(FG_SCALE_RANGE.0, FG_SCALE_RANGE.1);
    let margin = glyph_radius(scale, size) * GLYPH_OUTER + 2.0;
    let cx = rng.uniform(margin, size as f32 - margin);
    let cy = rng.uniform(margin, size as f32 - margin);
    let rotation = rng.uniform(0.0, std::f32::consts::TAU);
    ((cx, cy), scale, rotation)
}

/// One rendered scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// [3,S,S] in [0,1]
    pub image: Tensor,
    /// [S,S], exactly 1.0 on glyph pixels and 0.0 elsewhere
    pub mask: Tensor,
    /// tight box of the mask
    pub bbox: BBox,
    pub fg_class: usize,
    pub bg_class: usize,
    pub id: String,
}

impl Scene {
    /// Reconstruct the 8-bit interleaved RGB raster (exact, since image
    /// values are quantized multiples of 1/255).
    pub fn rgb_bytes(&self) -> Vec<u8> {
        let s = self.mask.shape()[0];
        let data = self.image.data();
        let plane = s * s;
        let mut out = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = (data[c * plane + p] * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn mask_bytes(&self) -> Vec<u8> {
        self.mask
            .data()
            .iter()
            .map(|&v| if v >= 0.5 { 255 } else { 0 })
            .collect()
    }
}

fn rotate_into(dx: f32, dy: f32, rotation: f32) -> (f32, f32) {
    let (s, c) = rotation.sin_cos();
    // inverse rotation: world -> glyph frame
    (c * dx + s * dy, -s * dx + c * dy)
}

fn inside_glyph(shape_kind: usize, ux: f32, uy: f32) -> bool {
    match shape_kind {
        // disk
        0 => ux * ux + uy * uy <= 1.0,
        // equilateral triangle pointing up (vertices on the unit circle)
        1 => {
            let verts = [
                (0.0f32, -1.0f32),
                (0.866_025_4, 0.5),
                (-0.866_025_4, 0.5),
            ];
            let mut sign = 0i8;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let cross = (bx - ax) * (uy - ay) - (by - ay) * (ux - ax);
                let s = if cross >= 0.0 { 1i8 } else { -1i8 };
                if sign == 0 {
                    sign = s;
                } else if s != sign {
                    return false;
                }
            }
            true
        }
        // cross / plus sign
        2 => (ux.abs() <= 0.32 && uy.abs() <= 1.0) || (uy.abs() <= 0.32 && ux.abs() <= 1.0),
        // ring
        _ => {
            let r2 = ux * ux + uy * uy;
            (0.55 * 0.55..=1.0).contains(&r2)
        }
    }
}

/// Warm, red-dominant foreground base colors; backgrounds stay cool so a
/// "warmth" direction separates any foreground from any background.
fn fg_base_color(class: usize) -> [f32; 3] {
    const FAMS: [[f32; 3]; 4] = [
        [0.85, 0.20, 0.20], // red
        [0.90, 0.55, 0.15], // orange
        [0.93, 0.85, 0.20], // yellow
        [0.88, 0.30, 0.55], // pink
    ];
    let mut c = FAMS[class % 4];
    // distinguish higher classes reusing a family
    if class >= 4 {
        c[1] = (c[1] + 0.12 * (class / 4) as f32).min(0.9);
    }
    c
}

struct BgStyle {
    color_a: [f32; 3],
    color_b: [f32; 3],
    // direction of the sinusoidal pattern; (0,0) selects the checker variant
    dir: (f32, f32),
    cycles: f32,
}

fn bg_style(class: usize) -> BgStyle {
    match class % 4 {
        0 => BgStyle {
            color_a: [0.16, 0.32, 0.62],
            color_b: [0.08, 0.18, 0.42],
            dir: (0.0, 1.0),
            cycles: 5.0,
        },
        1 => BgStyle {
            color_a: [0.16, 0.52, 0.24],
            color_b: [0.08, 0.32, 0.14],
            dir: (1.0, 0.0),
            cycles: 6.0,
        },
        2 => BgStyle {
            color_a: [0.12, 0.48, 0.50],
            color_b: [0.05, 0.28, 0.33],
            dir: (0.707, 0.707),
            cycles: 5.0,
        },
        _ => BgStyle {
            color_a: [0.38, 0.28, 0.52],
            color_b: [0.22, 0.16, 0.34],
            dir: (0.0, 0.0),
            cycles: 4.0,
        },
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tight box of the nonzero mask pixels.
pub fn tight_bbox(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then_some(BBox { x0, y0, x1, y1 })
}

/// Render a scene at `size` pixels (>= 32). Geometry that would clip the
/// glyph against the border or produce an empty mask is resampled from the
/// spec's seed stream up to 16 times before giving up.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Scene> {
    if size < 32 {
        return Err(Error::Config(format!(
            "render_scene: size must be >= 32, got {size}"
        )));
    }
    let s = size;
    let plane = s * s;
    let mut rng = CounterRng::new(spec.seed);

    // Background first; the glyph paints over it.
    let style = bg_style(spec.bg_class);
    let phase = rng.uniform(0.0, std::f32::consts::TAU);
    let phase2 = rng.uniform(0.0, std::f32::consts::TAU);
    let noise_seed = rng.next_u64();
    let mut rgb = vec![0u8; plane * 3];
    let freq = style.cycles * std::f32::consts::TAU / s as f32;
    for y in 0..s {
        for x in 0..s {
            let t = if style.dir == (0.0, 0.0) {
                let a = (freq * x as f32 + phase).sin();
                let b = (freq * y as f32 + phase2).sin();
                0.5 + 0.5 * a * b
            } else {
                let proj = style.dir.0 * x as f32 + style.dir.1 * y as f32;
                0.5 + 0.5 * (freq * proj + phase).sin()
            };
            let noise = pixel_noise(noise_seed, x, y);
            let p = (y * s + x) * 3;
            for c in 0..3 {
                let v = style.color_a[c] * t + style.color_b[c] * (1.0 - t) + noise;
                rgb[p + c] = quantize(v);
            }
        }
    }

    // Foreground color: class family plus jitter.
    let base = fg_base_color(spec.fg_class);
    let jitter: [f32; 3] = [
        rng.uniform(-0.06, 0.06),
        rng.uniform(-0.06, 0.06),
        rng.uniform(-0.06, 0.06),
    ];
    let fg_rgb: [u8; 3] = [
        quantize(base[0] + jitter[0]),
        quantize(base[1] + jitter[1]),
        quantize(base[2] + jitter[2]),
    ];

    let shape_kind = spec.fg_class % 4;
    let mut center = spec.fg_center;
    let mut scale = spec.fg_scale;
    let mut rotation = spec.rotation;
    let mut mask = vec![false; plane];
    let mut bbox = None;
    for attempt in 0..16 {
        if attempt > 0 {
            let (c, sc, rot) = sample_geometry(s, &mut rng);
            center = c;
            scale = sc;
            rotation = rot;
        }
        let radius = glyph_radius(scale, s);
        mask.iter_mut().for_each(|m| *m = false);
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f32 + 0.5 - center.0) / radius;
                let dy = (y as f32 + 0.5 - center.1) / radius;
                if dx * dx + dy * dy > GLYPH_OUTER * GLYPH_OUTER {
                    continue;
                }
                let (ux, uy) = rotate_into(dx, dy, rotation);
                if inside_glyph(shape_kind, ux, uy) {
                    mask[y * s + x] = true;
                }
            }
        }
        if let Some(b) = tight_bbox(&mask, s, s) {
            let clipped = b.x0 == 0 || b.y0 == 0 || b.x1 == s - 1 || b.y1 == s - 1;
            if !clipped {
                bbox = Some(b);
                break;
            }
        }
    }
    let bbox = bbox.ok_or_else(|| {
        Error::Data(format!(
            "render_scene: glyph for class {} would clip after 16 retries",
            spec.fg_class
        ))
    })?;

    for (p, &m) in mask.iter().enumerate() {
        if m {
            rgb[p * 3] = fg_rgb[0];
            rgb[p * 3 + 1] = fg_rgb[1];
            rgb[p * 3 + 2] = fg_rgb[2];
        }
    }

    // Planar float image and binary mask tensors.
    let mut img = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            img[c * plane + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    let mask_f: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    Ok(Scene {
        image: Tensor::new(vec![3, s, s], img)?,
        mask: Tensor::new(vec![s, s], mask_f)?,
        bbox,
        fg_class: spec.fg_class,
        bg_class: spec.bg_class,
        id: String::new(),
    })
}

fn pixel_noise(seed: u64, x: usize, y: usize) -> f32 {
    // one-shot counter-RNG draw keyed by pixel position
    let mut r = CounterRng::new(seed ^ ((x as u64) << 32 | y as u64));
    (r.next_f32() - 0.5) * 0.06
}
