use gigaslide_slide::grid::{otsu_threshold, rle_token_count, CellState, PatchGrid};
use gigaslide_slide::source::MANIFEST_FILE;
use gigaslide_slide::thumbnail::slide_thumbnail;
use gigaslide_slide::*;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

/// In-memory slide from a pixel function, for exact expectations.
struct FnSlide {
    manifest: SlideManifest,
    f: fn(u32, u32) -> [u8; 3],
}

impl FnSlide {
    fn new(w: u32, h: u32, tile: u32, f: fn(u32, u32) -> [u8; 3]) -> Self {
        FnSlide {
            manifest: SlideManifest {
                slide_id: "fn".into(),
                width: w,
                height: h,
                tile_size: tile,
                magnification: "test".into(),
                label: None,
                lesions: vec![],
                tiles: SlideManifest::default_tiles(w, h, tile),
            },
            f,
        }
    }
}

impl SlideSource for FnSlide {
    fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    fn read_tile(&self, row: u32, col: u32) -> Result<RgbImage> {
        let ts = self.manifest.tile_size;
        let (w, h) = self.tile_extent(row, col);
        Ok(RgbImage::from_fn(w, h, |x, y| Rgb((self.f)(col * ts + x, row * ts + y))))
    }
}

fn synth(id: &str, size: u32, seed: u64, lesions: u32) -> SynthSlide {
    let mut cfg = SynthConfig::new(id, size, size, seed);
    cfg.lesion_density = lesions;
    SynthSlide::new(&cfg).unwrap()
}

#[test]
fn synthetic_tiling_covers_extent() {
    let s = synth("a", 2048, 1, 1);
    let m = s.manifest();
    assert_eq!(m.tiles.len(), 16);
    m.validate(Some(256)).unwrap();
    let covered: u64 = m.tiles.iter().map(|t| {
        let (w, h) = s.tile_extent(t.row, t.col);
        (w * h) as u64
    }).sum();
    assert_eq!(covered, 2048 * 2048);
}

#[test]
fn zero_density_is_negative() {
    let s = synth("neg", 2048, 3, 0);
    assert_eq!(s.label(), Some(0));
    assert!(s.lesions().is_empty());
    let p = synth("pos", 4096, 3, 1);
    assert_eq!(p.label(), Some(1));
    assert_eq!(p.lesions().iter().filter(|l| l.is_disk()).count(), 1);
}

#[test]
fn same_seed_same_bytes() {
    let a = synth("x", 2048, 42, 1);
    let b = synth("x", 2048, 42, 1);
    for (r, c) in [(0, 0), (1, 2), (3, 3)] {
        assert_eq!(a.read_tile(r, c).unwrap().into_raw(), b.read_tile(r, c).unwrap().into_raw());
    }
    let c = synth("x", 2048, 43, 1);
    assert_ne!(a.read_tile(1, 1).unwrap().into_raw(), c.read_tile(1, 1).unwrap().into_raw());
}

#[test]
fn extent_must_be_tile_multiple() {
    let cfg = SynthConfig::new("bad", 1000, 1024, 0);
    assert!(SynthSlide::new(&cfg).is_err());
}

#[test]
fn rle_of_constant_and_checkerboard() {
    let flat = RgbImage::from_pixel(256, 256, Rgb([120, 80, 200]));
    assert_eq!(rle_token_count(&flat), 256);
    let checker = RgbImage::from_fn(256, 256, |x, y| if (x + y) % 2 == 0 { Rgb([0; 3]) } else { Rgb([255; 3]) });
    assert_eq!(rle_token_count(&checker), 256 * 256);
}

#[test]
fn constant_patch_sifted_checkerboard_kept() {
    // left half checkerboard, right half constant
    let s = FnSlide::new(1024, 512, 512, |x, y| {
        if x < 512 && (x + y) % 2 == 0 {
            [0; 3]
        } else if x < 512 {
            [255; 3]
        } else {
            [200; 3]
        }
    });
    let g = sift_patches(&s, 256).unwrap();
    assert_eq!((g.rows, g.cols), (2, 4));
    for r in 0..2 {
        for c in 0..4 {
            let expected = if c < 2 { CellState::Kept } else { CellState::Sifted };
            assert_eq!(g.state(r, c), expected);
            assert_eq!(g.tokens[r * 4 + c], if c < 2 { 65536 } else { 256 });
        }
    }
}

#[test]
fn uniform_slide_has_no_kept_patch() {
    let s = FnSlide::new(512, 512, 512, |_, _| [230; 3]);
    let g = sift_patches(&s, 256).unwrap();
    assert_eq!(g.kept_count(), 0);
    assert!(matches!(g.crop_bounding_box("u"), Err(SlideError::EmptySlide(_))));
}

#[test]
fn otsu_splits_two_clusters() {
    let counts = [256, 256, 260, 300, 9000, 9500, 10000];
    assert_eq!(otsu_threshold(&counts), Some(300));
    assert_eq!(otsu_threshold(&[7, 7, 7]), None);
    assert_eq!(otsu_threshold(&[]), None);
}

#[test]
fn lesion_disks_fall_in_kept_patches() {
    for seed in 0..3 {
        let s = synth("l", 4096, 100 + seed, 1);
        let g = sift_patches(&s, 256).unwrap();
        let (mut inside, mut kept) = (0u64, 0u64);
        for lesion in s.lesions().iter().filter(|l| l.is_disk()) {
            let (x0, y0, x1, y1) = lesion.bounds();
            for y in (y0.max(0.0) as u32..y1.min(4095.0) as u32).step_by(4) {
                for x in (x0.max(0.0) as u32..x1.min(4095.0) as u32).step_by(4) {
                    if lesion.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        inside += 1;
                        if g.is_kept((y / 256) as usize, (x / 256) as usize) {
                            kept += 1;
                        }
                    }
                }
            }
        }
        assert!(inside > 0);
        assert!(kept as f64 >= 0.9 * inside as f64, "seed {seed}: {kept}/{inside}");
    }
}

#[test]
fn partial_edge_patches_are_padded() {
    let s = FnSlide::new(300, 200, 128, |_, _| [10, 20, 30]);
    let g = sift_patches(&s, 256).unwrap();
    assert_eq!((g.rows, g.cols), (1, 2));
    // rows past the bottom edge are single white runs; the right patch has
    // a colored run and a white run on every in-extent row
    assert_eq!(g.tokens[0], 200 + 56);
    assert_eq!(g.tokens[1], 200 * 2 + 56);
}

fn grid_from(states: Vec<CellState>, rows: usize, cols: usize) -> PatchGrid {
    PatchGrid {
        rows,
        cols,
        patch_size: 256,
        mean_intensity: (0..rows * cols).map(|i| i as f32).collect(),
        tokens: (0..rows * cols).map(|i| i as u32).collect(),
        states,
    }
}

#[test]
fn crop_examples() {
    let all = grid_from(vec![CellState::Kept; 12], 3, 4);
    let (c, off) = all.crop_bounding_box("g").unwrap();
    assert_eq!(off, (0, 0));
    assert_eq!(c, all);

    let mut states = vec![CellState::Sifted; 12];
    states[2 * 4 + 1] = CellState::Kept;
    let (c, off) = grid_from(states, 3, 4).crop_bounding_box("g").unwrap();
    assert_eq!((c.rows, c.cols, off), (1, 1, (2, 1)));
    assert_eq!(c.tokens, vec![9]);
}

proptest! {
    #[test]
    fn crop_is_tight_and_idempotent(rows in 1usize..12, cols in 1usize..12, bits in prop::collection::vec(prop::bool::weighted(0.2), 144)) {
        let states: Vec<CellState> = (0..rows * cols).map(|i| if bits[i] { CellState::Kept } else { CellState::Sifted }).collect();
        let grid = grid_from(states, rows, cols);
        match grid.crop_bounding_box("p") {
            Err(_) => prop_assert_eq!(grid.kept_count(), 0),
            Ok((c, (r0, c0))) => {
                prop_assert_eq!(c.kept_count(), grid.kept_count());
                for r in 0..rows {
                    for cc in 0..cols {
                        if grid.is_kept(r, cc) {
                            prop_assert!(r >= r0 && r < r0 + c.rows && cc >= c0 && cc < c0 + c.cols);
                            prop_assert!(c.is_kept(r - r0, cc - c0));
                        }
                    }
                }
                prop_assert!((0..c.cols).any(|j| c.is_kept(0, j)));
                prop_assert!((0..c.cols).any(|j| c.is_kept(c.rows - 1, j)));
                prop_assert!((0..c.rows).any(|i| c.is_kept(i, 0)));
                prop_assert!((0..c.rows).any(|i| c.is_kept(i, c.cols - 1)));
                let (again, off) = c.crop_bounding_box("p").unwrap();
                prop_assert_eq!(off, (0, 0));
                prop_assert_eq!(again, c);
            }
        }
    }

    #[test]
    fn lowering_threshold_never_unkeeps(tokens in prop::collection::vec(0u32..5000, 1..64), t in 0u32..5000, drop in 0u32..5000) {
        let n = tokens.len();
        let mut grid = PatchGrid { rows: 1, cols: n, patch_size: 256, states: vec![CellState::Sifted; n], mean_intensity: vec![0.0; n], tokens };
        grid.apply_threshold(Some(t));
        let before = grid.states.clone();
        grid.apply_threshold(Some(t.saturating_sub(drop)));
        for (a, b) in before.iter().zip(&grid.states) {
            if *a == CellState::Kept {
                prop_assert_eq!(*b, CellState::Kept);
            }
        }
    }
}

#[test]
fn constant_slide_constant_thumbnail() {
    let s = FnSlide::new(1024, 1024, 512, |_, _| [51, 102, 204]);
    let t = slide_thumbnail(&s, 128, &[0, 1, 2]).unwrap();
    assert_eq!(t.data.shape(), &[9, 8, 8]);
    for ch in 0..9 {
        let want = [0.2f32, 0.4, 0.8][ch % 3];
        assert!(t.data.data()[ch * 64..(ch + 1) * 64].iter().all(|&v| (v - want).abs() < 1e-6));
    }
}

#[test]
fn default_thumbnail_shape() {
    let s = FnSlide::new(4096, 4096, 512, |x, y| [(x % 256) as u8, (y % 256) as u8, 0]);
    let t = slide_thumbnail(&s, 128, &[0, 1, 2]).unwrap();
    assert_eq!(t.data.shape(), &[9, 32, 32]);
    assert_eq!(t.levels, vec![0, 1, 2]);
}

#[test]
fn thumbnail_levels_are_aligned_area_averages() {
    // gradient along x so every level differs
    let s = FnSlide::new(1024, 512, 256, |x, _| [(x / 4) as u8, 0, 255]);
    let t = slide_thumbnail(&s, 64, &[0, 1, 2]).unwrap();
    let (h, w) = (t.height(), t.width());
    assert_eq!((h, w), (8, 16));
    let d = t.data.data();
    let at = |level: usize, y: usize, x: usize| d[((level * 3) * h + y) * w + x];
    for y in 0..h {
        for x in 0..w {
            // level 0: mean of x/4 over 64 columns, exact area average
            let mean0: f64 = (x * 64..(x + 1) * 64).map(|px| (px / 4) as f64).sum::<f64>() / 64.0;
            assert!((at(0, y, x) as f64 - mean0 / 255.0).abs() < 1e-6);
            for level in 1..3 {
                let g = 1 << level;
                let group = x / g * g;
                let mean: f64 = (group..group + g).map(|c| at(0, y, c) as f64).sum::<f64>() / g as f64;
                assert!((at(level, y, x) as f64 - mean).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn tiny_slide_gives_single_pixel_thumbnail() {
    let s = FnSlide::new(100, 60, 128, |_, _| [255, 0, 0]);
    let t = slide_thumbnail(&s, 128, &[0]).unwrap();
    assert_eq!(t.data.shape(), &[3, 1, 1]);
    assert_eq!(t.data.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn thumbnail_padding_and_mask() {
    let s = FnSlide::new(512, 256, 256, |_, _| [255; 3]);
    let t = slide_thumbnail(&s, 128, &[0]).unwrap();
    let (data, mask) = t.padded(8, 8).unwrap();
    assert_eq!(data.shape(), &[3, 8, 8]);
    assert_eq!(mask.sum(), 8.0);
    assert_eq!(data.sum(), 24.0);
    assert!(t.padded(1, 8).is_err());
}

#[test]
fn compression_accounting() {
    let r = compression_report(256, 128, 128, 3).unwrap();
    assert_eq!(r.combined.round(), 517.0);
    assert!((r.thumbnail - 16384.0 / 3.0).abs() < 1e-9);
    assert_eq!(r.embedding, 1536.0);
    // one level: 3·S²K² / (C·K² + 3·S²)
    let one = compression_report(256, 128, 128, 1).unwrap();
    assert!((one.combined - 3.0 * 65536.0 * 16384.0 / (128.0 * 16384.0 + 3.0 * 65536.0)).abs() < 1e-9);
    assert!(compression_report(0, 128, 128, 3).is_err());
}

#[test]
fn tiles_round_trip_through_disk() {
    let s = synth("rt", 1024, 9, 0);
    let dir = tempfile::tempdir().unwrap();
    let stored = write_slide(&s, dir.path()).unwrap();
    assert_eq!(stored.manifest(), s.manifest());
    for t in &s.manifest().tiles {
        assert_eq!(stored.read_tile(t.row, t.col).unwrap(), s.read_tile(t.row, t.col).unwrap());
    }
    let region = stored.read_region(500, 500, 100, 100, [0; 3]).unwrap();
    assert_eq!(region, s.render_region(500, 500, 100, 100));
}

#[test]
fn unreadable_tile_names_the_tile() {
    let s = synth("bad", 1024, 2, 0);
    let dir = tempfile::tempdir().unwrap();
    write_slide(&s, dir.path()).unwrap();
    std::fs::write(dir.path().join("tiles/r0001_c0000.png"), b"not a png").unwrap();
    let stored = StoredSlide::open(dir.path()).unwrap();
    let err = sift_patches(&stored, 256).unwrap_err();
    match err {
        SlideError::UnreadableTile { row, col, .. } => assert_eq!((row, col), (1, 0)),
        e => panic!("unexpected {e}"),
    }
    std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
    assert!(StoredSlide::open(dir.path()).is_err());
}

#[test]
fn manifest_rejects_bad_tiling() {
    let mut m = synth("m", 1024, 0, 0).manifest().clone();
    assert!(m.validate(Some(300)).is_err());
    m.tiles.pop();
    assert!(m.validate(None).is_err());
    let mut dup = synth("m", 1024, 0, 0).manifest().clone();
    dup.tiles[1] = dup.tiles[0].clone();
    assert!(dup.validate(None).is_err());
}
