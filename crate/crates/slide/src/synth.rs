//! Procedural slides: glass background, elliptical tissue with smooth stroma
//! texture and a jittered lattice of dark nuclei.
//!
//! A planted lesion has two parts that no single representation sees at once:
//! a core of enlarged, elongated nuclei (same stain coverage as normal tissue,
//! so invisible at thumbnail scale) and an adjacent nucleus-free tinted block
//! (flat, so it is sifted away before patch encoding). Decoy slides carry one
//! part without the other.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlideError};
use crate::manifest::{Lesion, SlideManifest};
use crate::source::SlideSource;

pub const GLASS: [u8; 3] = [236, 236, 236];
const STROMA: [f64; 3] = [200.0, 130.0, 170.0];
const NUCLEUS: [f64; 3] = [70.0, 40.0, 110.0];
const TINT: [f64; 3] = [215.0, 105.0, 150.0];
const PALE: [f64; 3] = [225.0, 165.0, 195.0];
/// Amplitude and lattice spacing of the stroma value noise.
const STROMA_NOISE: f64 = 8.0;
const NOISE_CELL: f64 = 512.0;
/// Normal nuclei: lattice pitch, radius, elongation.
const NORMAL: NucleusKind = NucleusKind {
    pitch: 32,
    radius: 8.0,
    elongation: 1.15,
    jitter: 6.0,
};
/// Atypical nuclei: twice the pitch and radius, so the covered fraction and
/// therefore the mean color match normal tissue.
const ATYPICAL: NucleusKind = NucleusKind {
    pitch: 64,
    radius: 16.0,
    elongation: 1.4,
    jitter: 12.0,
};
/// Block features are aligned to this grid (the default patch size).
const BLOCK_GRID: f64 = 256.0;

#[derive(Clone, Copy)]
struct NucleusKind {
    pitch: u32,
    radius: f64,
    elongation: f64,
    jitter: f64,
}

/// Label-independent look-alike planted on a slide.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoy {
    #[default]
    None,
    /// Atypical core next to a pale block.
    CoreWithPaleBlock,
    /// Tinted block without any atypical core.
    TintWithoutCore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub seed: u64,
    /// Number of planted lesions; zero gives a negative slide.
    pub lesion_density: u32,
    pub decoy: Decoy,
}

impl SynthConfig {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32, seed: u64) -> Self {
        SynthConfig {
            slide_id: slide_id.into(),
            width,
            height,
            tile_size: 512,
            seed,
            lesion_density: 0,
            decoy: Decoy::None,
        }
    }
}

#[derive(Clone, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
}

impl Block {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn polygon(&self) -> Lesion {
        Lesion::Polygon {
            points: vec![(self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)],
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    seed: u64,
    tissue: Vec<Ellipse>,
    cores: Vec<Disk>,
    blocks: Vec<Block>,
    /// Value-noise lattice, `(noise_cols + 1) * (noise_rows + 1)` entries in [-1, 1].
    noise: Vec<f64>,
    noise_cols: usize,
    /// The first `lesions` cores and blocks form planted lesions.
    lesions: usize,
}

/// A slide rendered tile by tile on demand; never materialized in full.
#[derive(Clone, Debug)]
pub struct SynthSlide {
    manifest: SlideManifest,
    layout: Layout,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(seed: u64, a: i64, b: i64, salt: u64) -> u64 {
    mix(seed ^ mix((a as u64) ^ mix((b as u64) ^ mix(salt))))
}

/// Uniform in [0, 1) from the top 53 bits.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn signed(h: u64) -> f64 {
    2.0 * unit(h) - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Layout {
    fn generate(cfg: &SynthConfig) -> Layout {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let scale = w.min(h) / 4096.0;
        let n_ellipses = rng.gen_range(2..=4);
        let tissue = (0..n_ellipses)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cx: rng.gen_range(0.35..0.65) * w,
                    cy: rng.gen_range(0.35..0.65) * h,
                    a: rng.gen_range(800.0..1800.0) * scale,
                    b: rng.gen_range(800.0..1800.0) * scale,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let noise_cols = (w / NOISE_CELL).ceil() as usize + 1;
        let noise_rows = (h / NOISE_CELL).ceil() as usize + 1;
        let noise = (0..(noise_cols + 1) * (noise_rows + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut layout = Layout {
            seed: cfg.seed,
            tissue,
            cores: Vec::new(),
            blocks: Vec::new(),
            noise,
            noise_cols,
            lesions: 0,
        };
        for _ in 0..cfg.lesion_density {
            if layout.place(&mut rng, cfg, true, Some(TINT)) {
                layout.lesions += 1;
            }
        }
        match cfg.decoy {
            Decoy::None => {}
            Decoy::CoreWithPaleBlock => {
                layout.place(&mut rng, cfg, true, Some(PALE));
            }
            Decoy::TintWithoutCore => {
                layout.place(&mut rng, cfg, false, Some(TINT));
            }
        }
        layout
    }

    fn in_tissue(&self, x: f64, y: f64) -> bool {
        self.tissue.iter().any(|e| e.contains(x, y))
    }

    /// Places a core and/or block fully inside tissue, clear of earlier
    /// features. Returns false if no spot was found.
    fn place(&mut self, rng: &mut ChaCha8Rng, cfg: &SynthConfig, core: bool, block: Option<[f64; 3]>) -> bool {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let scale = (w.min(h) / 4096.0).max(0.25);
        for _ in 0..2000 {
            let r = rng.gen_range(300.0..450.0) * scale;
            let cx = rng.gen_range(0.0..w);
            let cy = rng.gen_range(0.0..h);
            let n = rng.gen_range(2..=3) as f64 * BLOCK_GRID;
            let side = rng.gen_range(0..4);
            let disk = Disk { cx, cy, r };
            // block sits on the grid just beyond the disk on one side
            let (bx0, by0) = match side {
                0 => ((((cx + r) / BLOCK_GRID).ceil()) * BLOCK_GRID, ((cy - n / 2.0) / BLOCK_GRID).round() * BLOCK_GRID),
                1 => ((((cx - r) / BLOCK_GRID).floor()) * BLOCK_GRID - n, ((cy - n / 2.0) / BLOCK_GRID).round() * BLOCK_GRID),
                2 => (((cx - n / 2.0) / BLOCK_GRID).round() * BLOCK_GRID, (((cy + r) / BLOCK_GRID).ceil()) * BLOCK_GRID),
                _ => (((cx - n / 2.0) / BLOCK_GRID).round() * BLOCK_GRID, (((cy - r) / BLOCK_GRID).floor()) * BLOCK_GRID - n),
            };
            let blk = block.map(|color| Block {
                x0: bx0,
                y0: by0,
                x1: bx0 + n,
                y1: by0 + n,
                color,
            });
            let margin = 96.0;
            let disk_ok = (0..24).all(|i| {
                let t = i as f64 / 24.0 * std::f64::consts::TAU;
                self.in_tissue(cx + (r + margin) * t.cos(), cy + (r + margin) * t.sin())
            }) && self.in_tissue(cx, cy);
            if !disk_ok {
                continue;
            }
            if let Some(b) = &blk {
                let steps = 8;
                let inside = (0..=steps).all(|i| {
                    (0..=steps).all(|j| {
                        let x = b.x0 - margin + (b.x1 - b.x0 + 2.0 * margin) * i as f64 / steps as f64;
                        let y = b.y0 - margin + (b.y1 - b.y0 + 2.0 * margin) * j as f64 / steps as f64;
                        self.in_tissue(x, y)
                    })
                });
                if !inside || b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > w || b.y1 > h {
                    continue;
                }
                // keep the block off the core (nearest point of the box to the center)
                let nx = cx.clamp(b.x0, b.x1);
                let ny = cy.clamp(b.y0, b.y1);
                if (nx - cx).powi(2) + (ny - cy).powi(2) < (r + 32.0).powi(2) {
                    continue;
                }
            }
            let clear = self.cores.iter().all(|c| {
                (c.cx - cx).powi(2) + (c.cy - cy).powi(2) > (c.r + r + 3.0 * BLOCK_GRID).powi(2)
            }) && self.blocks.iter().all(|o| {
                let pad = BLOCK_GRID;
                blk.map_or(true, |b| b.x1 + pad <= o.x0 || o.x1 + pad <= b.x0 || b.y1 + pad <= o.y0 || o.y1 + pad <= b.y0)
                    && (cx + r + pad <= o.x0 || o.x1 + pad <= cx - r || cy + r + pad <= o.y0 || o.y1 + pad <= cy - r)
            });
            if !clear {
                continue;
            }
            if core {
                self.cores.push(disk);
            }
            if let Some(b) = blk {
                self.blocks.push(b);
            }
            return true;
        }
        log::warn!("synthetic slide seed {}: could not place a feature", cfg.seed);
        false
    }

    fn stroma_offset(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / NOISE_CELL, y / NOISE_CELL);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let at = |i: usize, j: usize| self.noise[j * (self.noise_cols + 1) + i];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        STROMA_NOISE * (top * (1.0 - fy) + bottom * fy)
    }

    fn block_at(&self, x: f64, y: f64) -> Option<&Block> {
        self.blocks.iter().find(|b| b.contains(x, y))
    }

    fn atypical_cell(&self, gx: i64, gy: i64) -> bool {
        let p = ATYPICAL.pitch as f64;
        let (x, y) = ((gx as f64 + 0.5) * p, (gy as f64 + 0.5) * p);
        self.cores.iter().any(|c| c.contains(x, y))
    }

    /// Draws every nucleus of `kind` whose footprint may reach the tile.
    fn draw_nuclei(&self, img: &mut RgbImage, x0: u32, y0: u32, kind: NucleusKind, atypical: bool) {
        let p = kind.pitch as i64;
        let reach = (kind.radius * kind.elongation + kind.jitter).ceil() as i64 + 1;
        let (tw, th) = (img.width() as i64, img.height() as i64);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let salt = if atypical { 2 } else { 1 };
        for gy in (y0 - reach).div_euclid(p)..=(y0 + th + reach).div_euclid(p) {
            for gx in (x0 - reach).div_euclid(p)..=(x0 + tw + reach).div_euclid(p) {
                let is_atypical = if atypical {
                    self.atypical_cell(gx, gy)
                } else {
                    self.atypical_cell(gx.div_euclid(2), gy.div_euclid(2))
                };
                if is_atypical != atypical {
                    continue;
                }
                let h = |k: u64| hash(self.seed, gx, gy, salt * 16 + k);
                let cx = (gx as f64 + 0.5) * p as f64 + kind.jitter * signed(h(0));
                let cy = (gy as f64 + 0.5) * p as f64 + kind.jitter * signed(h(1));
                if !self.in_tissue(cx, cy) || self.block_at(cx, cy).is_some() {
                    continue;
                }
                let theta = unit(h(2)) * std::f64::consts::PI;
                let (cos, sin) = (theta.cos(), theta.sin());
                let a = kind.radius * kind.elongation;
                let b = kind.radius / kind.elongation;
                let tone = 10.0 * signed(h(3));
                let base = NUCLEUS.map(|c| c + tone);
                let r = a.ceil() as i64 + 1;
                let (px0, px1) = ((cx as i64 - r).max(x0), (cx as i64 + r + 1).min(x0 + tw));
                let (py0, py1) = ((cy as i64 - r).max(y0), (cy as i64 + r + 1).min(y0 + th));
                for py in py0..py1 {
                    for px in px0..px1 {
                        let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                        let u = dx * cos + dy * sin;
                        let v = -dx * sin + dy * cos;
                        if (u / a).powi(2) + (v / b).powi(2) > 1.0 {
                            continue;
                        }
                        let speckle = 12.0 * signed(hash(self.seed, px, py, 7));
                        let c = base.map(|c| (c + speckle).round().clamp(0.0, 255.0) as u8);
                        img.put_pixel((px - x0) as u32, (py - y0) as u32, Rgb(c));
                    }
                }
            }
        }
    }

    fn render(&self, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(w, h, Rgb(GLASS));
        for py in 0..h {
            for px in 0..w {
                let (x, y) = ((x0 + px) as f64 + 0.5, (y0 + py) as f64 + 0.5);
                if !self.in_tissue(x, y) {
                    continue;
                }
                let off = self.stroma_offset(x, y);
                let base = self.block_at(x, y).map_or(STROMA, |b| b.color);
                img.put_pixel(px, py, Rgb(base.map(|c| (c + off).round().clamp(0.0, 255.0) as u8)));
            }
        }
        self.draw_nuclei(&mut img, x0, y0, NORMAL, false);
        self.draw_nuclei(&mut img, x0, y0, ATYPICAL, true);
        img
    }
}

impl SynthSlide {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        if cfg.tile_size == 0 || cfg.width == 0 || cfg.height == 0 {
            return Err(SlideError::Invalid("synthetic slide needs positive extent and tile size".into()));
        }
        if cfg.width % cfg.tile_size != 0 || cfg.height % cfg.tile_size != 0 {
            return Err(SlideError::Invalid(format!(
                "extent {}x{} is not a multiple of tile size {}",
                cfg.width, cfg.height, cfg.tile_size
            )));
        }
        let layout = Layout::generate(cfg);
        // decoys are never recorded as lesions
        let mut lesions = Vec::new();
        for (core, block) in layout.cores.iter().zip(&layout.blocks).take(layout.lesions) {
            lesions.push(Lesion::Disk {
                cx: core.cx,
                cy: core.cy,
                r: core.r,
            });
            lesions.push(block.polygon());
        }
        let manifest = SlideManifest {
            slide_id: cfg.slide_id.clone(),
            width: cfg.width,
            height: cfg.height,
            tile_size: cfg.tile_size,
            magnification: "synthetic".into(),
            label: Some(u8::from(!lesions.is_empty())),
            lesions,
            tiles: SlideManifest::default_tiles(cfg.width, cfg.height, cfg.tile_size),
        };
        Ok(SynthSlide { manifest, layout })
    }

    /// Renders an arbitrary in-extent region directly.
    pub fn render_region(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        self.layout.render(x, y, w, h)
    }
}

impl SlideSource for SynthSlide {
    fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    fn read_tile(&self, row: u32, col: u32) -> Result<RgbImage> {
        let m = &self.manifest;
        if row >= m.tile_rows() || col >= m.tile_cols() {
            return Err(SlideError::UnreadableTile {
                slide: m.slide_id.clone(),
                row,
                col,
                reason: "outside tile grid".into(),
            });
        }
        let (w, h) = self.tile_extent(row, col);
        Ok(self.layout.render(col * m.tile_size, row * m.tile_size, w, h))
    }
}
