//! Patch-grid geometry: scale configuration, patch/pixel mapping,
//! parent-child expansion, the exact pixel-overlap oracle, and the
//! closed-form comparison budgets.

use serde::{Deserialize, Serialize};

use crate::error::{MonetError, Result};

/// Scale layout of the pipeline. The image is square with side `image_size`
/// (a power of two); scale `s` tiles it into a `grid_size(s)` x `grid_size(s)`
/// grid of `patch_dim(s)` x `patch_dim(s)` pixel patches, and feature maps
/// carry `channels(s)` channels, halving with each step down from the top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub image_size: usize,
    pub top_scale: u32,
    pub min_scale: u32,
    pub top_channels: usize,
}

impl ScaleConfig {
    pub fn new(image_size: usize, top_scale: u32, min_scale: u32, top_channels: usize) -> Result<Self> {
        let cfg = Self {
            image_size,
            top_scale,
            min_scale,
            top_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The layout used throughout the reference experiments:
    /// 256x256 images, scales 1..=5, 256 channels at the top.
    pub fn paper_default() -> Self {
        Self {
            image_size: 256,
            top_scale: 5,
            min_scale: 1,
            top_channels: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if n == 0 || !n.is_power_of_two() {
            return Err(MonetError::InvalidConfig(format!(
                "image_size must be a power of two, got {n}"
            )));
        }
        if self.min_scale == 0 || self.min_scale > self.top_scale {
            return Err(MonetError::InvalidConfig(format!(
                "need 1 <= min_scale <= top_scale, got {} and {}",
                self.min_scale, self.top_scale
            )));
        }
        // grid_size(top) >= 2 keeps every budget below the naive one and the
        // top-scale all-pairs stage meaningful.
        if n >> (self.top_scale + 1) == 0 {
            return Err(MonetError::InvalidConfig(format!(
                "image_size {n} too small for top_scale {}",
                self.top_scale
            )));
        }
        let depth = self.top_scale - self.min_scale;
        if self.top_channels >> depth == 0 {
            return Err(MonetError::InvalidConfig(format!(
                "top_channels {} cannot halve down to scale {}",
                self.top_channels, self.min_scale
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self, scale: u32) -> usize {
        self.image_size >> scale
    }

    pub fn patch_dim(&self, scale: u32) -> usize {
        1 << scale
    }

    pub fn channels(&self, scale: u32) -> usize {
        self.top_channels >> (self.top_scale - scale)
    }

    /// Scales from the top (coarsest grid) down to the minimum.
    pub fn scales_top_down(&self) -> impl Iterator<Item = u32> {
        (self.min_scale..=self.top_scale).rev()
    }

    pub fn num_scales(&self) -> usize {
        (self.top_scale - self.min_scale + 1) as usize
    }
}

/// Which image of the pair a patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImageSide {
    One,
    Two,
}

/// One cell of the patch grid at a given scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchId {
    pub image: ImageSide,
    pub scale: u32,
    pub row: usize,
    pub col: usize,
}

impl PatchId {
    pub fn img1(scale: u32, row: usize, col: usize) -> Self {
        Self {
            image: ImageSide::One,
            scale,
            row,
            col,
        }
    }

    pub fn img2(scale: u32, row: usize, col: usize) -> Self {
        Self {
            image: ImageSide::Two,
            scale,
            row,
            col,
        }
    }
}

/// Axis-aligned pixel rectangle, `(x, y)` top-left corner, `w x h` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection in a signed coordinate space; `None` when empty.
    fn intersect_signed(ax: i64, ay: i64, aw: i64, ah: i64, b: &Rect) -> Option<(i64, i64, i64, i64)> {
        let x0 = ax.max(b.x as i64);
        let y0 = ay.max(b.y as i64);
        let x1 = (ax + aw).min((b.x + b.w) as i64);
        let y1 = (ay + ah).min((b.y + b.h) as i64);
        if x0 < x1 && y0 < y1 {
            Some((x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        Self::intersect_signed(self.x as i64, self.y as i64, self.w as i64, self.h as i64, other)
            .map(|(x, y, w, h)| Rect {
                x: x as usize,
                y: y as usize,
                w: w as usize,
                h: h as usize,
            })
    }
}

/// A rigid-translation duplication: the pixels of `src` in image 1 reappear
/// as `dst` in image 2, identical width and height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationCorrespondence {
    pub src: Rect,
    pub dst: Rect,
}

impl DuplicationCorrespondence {
    pub fn new(src: Rect, dst: Rect, image_size: usize) -> Result<Self> {
        if src.w != dst.w || src.h != dst.h {
            return Err(MonetError::InvalidConfig(format!(
                "src {}x{} and dst {}x{} extents differ",
                src.w, src.h, dst.w, dst.h
            )));
        }
        for r in [&src, &dst] {
            if r.w == 0 || r.h == 0 || r.x + r.w > image_size || r.y + r.h > image_size {
                return Err(MonetError::RegionOutOfBounds {
                    x: r.x,
                    y: r.y,
                    w: r.w,
                    h: r.h,
                    n: image_size,
                });
            }
        }
        Ok(Self { src, dst })
    }

    /// Swaps the roles of the two images.
    pub fn reversed(&self) -> Self {
        Self {
            src: self.dst,
            dst: self.src,
        }
    }

    /// Translation from source to destination coordinates.
    pub fn delta(&self) -> (i64, i64) {
        (
            self.dst.x as i64 - self.src.x as i64,
            self.dst.y as i64 - self.src.y as i64,
        )
    }
}

/// Pixel rectangle covered by a patch. Rectangles at one scale tile the
/// image exactly.
pub fn patch_rect(cfg: &ScaleConfig, p: &PatchId) -> Result<Rect> {
    let grid = cfg.grid_size(p.scale);
    if p.scale < cfg.min_scale || p.scale > cfg.top_scale || p.row >= grid || p.col >= grid {
        return Err(MonetError::PatchOutOfRange {
            scale: p.scale,
            row: p.row,
            col: p.col,
            grid,
        });
    }
    let d = cfg.patch_dim(p.scale);
    Ok(Rect {
        x: p.col * d,
        y: p.row * d,
        w: d,
        h: d,
    })
}

/// The four sub-patches at the next finer scale whose rectangles partition
/// the parent's rectangle.
pub fn children(cfg: &ScaleConfig, p: &PatchId) -> Result<[PatchId; 4]> {
    if p.scale <= cfg.min_scale {
        return Err(MonetError::NoChildren { scale: p.scale });
    }
    let s = p.scale - 1;
    let (r, c) = (2 * p.row, 2 * p.col);
    Ok([
        PatchId { image: p.image, scale: s, row: r, col: c },
        PatchId { image: p.image, scale: s, row: r, col: c + 1 },
        PatchId { image: p.image, scale: s, row: r + 1, col: c },
        PatchId { image: p.image, scale: s, row: r + 1, col: c + 1 },
    ])
}

/// Exact overlap in pixels: how many pixels of patch `a` lie in the source
/// rectangle *and* land inside patch `b` under the rigid translation.
///
/// Computed with rectangle arithmetic; `tests` cross-check it against
/// per-pixel enumeration.
pub fn exact_overlap(
    cfg: &ScaleConfig,
    corr: &DuplicationCorrespondence,
    a: &PatchId,
    b: &PatchId,
) -> Result<u64> {
    if a.scale != b.scale {
        return Err(MonetError::ScaleMismatch { a: a.scale, b: b.scale });
    }
    let ra = patch_rect(cfg, a)?;
    let rb = patch_rect(cfg, b)?;
    let dup = match ra.intersect(&corr.src) {
        Some(r) => r,
        None => return Ok(0),
    };
    let (dx, dy) = corr.delta();
    let o = Rect::intersect_signed(
        dup.x as i64 + dx,
        dup.y as i64 + dy,
        dup.w as i64,
        dup.h as i64,
        &rb,
    )
    .map(|(_, _, w, h)| (w * h) as u64)
    .unwrap_or(0);
    Ok(o)
}

/// All-pairs comparison count at a scale: `(grid^2)^2`.
pub fn naive_budget(cfg: &ScaleConfig, scale: u32) -> u64 {
    let g = cfg.grid_size(scale) as u64;
    (g * g) * (g * g)
}

/// Hierarchical comparison count: all pairs at the top scale, and below it
/// sixteen child comparisons per per-image argmax pair, both directions
/// counted with multiplicity.
pub fn ours_budget(cfg: &ScaleConfig, scale: u32) -> u64 {
    if scale == cfg.top_scale {
        naive_budget(cfg, scale)
    } else {
        let g_parent = cfg.grid_size(scale + 1) as u64;
        2 * g_parent * g_parent * 16
    }
}

/// Per-scale counters of patch-pair comparisons actually executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonLedger {
    min_scale: u32,
    counts: Vec<u64>,
}

impl ComparisonLedger {
    pub fn new(cfg: &ScaleConfig) -> Self {
        Self {
            min_scale: cfg.min_scale,
            counts: vec![0; cfg.num_scales()],
        }
    }

    pub fn record(&mut self, scale: u32, comparisons: u64) {
        let idx = (scale - self.min_scale) as usize;
        self.counts[idx] += comparisons;
    }

    pub fn count(&self, scale: u32) -> u64 {
        self.counts[(scale - self.min_scale) as usize]
    }

    /// Scales with a nonzero slot, bottom to top.
    pub fn scales(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.counts.len() as u32).map(move |i| self.min_scale + i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg256() -> ScaleConfig {
        ScaleConfig::new(256, 5, 1, 256).unwrap()
    }

    fn cfg64() -> ScaleConfig {
        ScaleConfig::new(64, 3, 1, 64).unwrap()
    }

    /// Per-pixel enumeration used as the independent geometry oracle.
    fn brute_force_overlap(
        cfg: &ScaleConfig,
        corr: &DuplicationCorrespondence,
        a: &PatchId,
        b: &PatchId,
    ) -> u64 {
        let ra = patch_rect(cfg, a).unwrap();
        let rb = patch_rect(cfg, b).unwrap();
        let (dx, dy) = corr.delta();
        let mut count = 0;
        for y in ra.y..ra.y + ra.h {
            for x in ra.x..ra.x + ra.w {
                let in_src = x >= corr.src.x
                    && x < corr.src.x + corr.src.w
                    && y >= corr.src.y
                    && y < corr.src.y + corr.src.h;
                if !in_src {
                    continue;
                }
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                if tx >= rb.x as i64
                    && tx < (rb.x + rb.w) as i64
                    && ty >= rb.y as i64
                    && ty < (rb.y + rb.h) as i64
                {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn channel_and_grid_arithmetic_match_the_reference_layout() {
        let cfg = cfg256();
        assert_eq!(cfg.grid_size(5), 8);
        assert_eq!(cfg.patch_dim(5), 32);
        assert_eq!(cfg.channels(5), 256);
        assert_eq!(cfg.channels(1), 16);
        for s in 1..=5 {
            assert_eq!(cfg.grid_size(s) * cfg.patch_dim(s), 256);
        }
    }

    #[test]
    fn patch_rect_corners() {
        let cfg = cfg256();
        let r = patch_rect(&cfg, &PatchId::img1(5, 0, 0)).unwrap();
        assert_eq!(r, Rect { x: 0, y: 0, w: 32, h: 32 });
        let r = patch_rect(&cfg, &PatchId::img1(1, 127, 127)).unwrap();
        assert_eq!(r, Rect { x: 254, y: 254, w: 2, h: 2 });
    }

    #[test]
    fn patch_rects_tile_the_image() {
        let cfg = cfg64();
        for s in 1..=3 {
            let g = cfg.grid_size(s);
            let mut covered = vec![false; 64 * 64];
            for row in 0..g {
                for col in 0..g {
                    let r = patch_rect(&cfg, &PatchId::img1(s, row, col)).unwrap();
                    for y in r.y..r.y + r.h {
                        for x in r.x..r.x + r.w {
                            assert!(!covered[y * 64 + x], "overlap at ({x},{y}) scale {s}");
                            covered[y * 64 + x] = true;
                        }
                    }
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn out_of_range_patch_is_rejected() {
        let cfg = cfg64();
        assert!(patch_rect(&cfg, &PatchId::img1(3, 8, 0)).is_err());
        assert!(patch_rect(&cfg, &PatchId::img1(4, 0, 0)).is_err());
    }

    #[test]
    fn children_partition_parent_exhaustively() {
        let cfg = cfg64();
        for s in 2..=3u32 {
            let g = cfg.grid_size(s);
            for row in 0..g {
                for col in 0..g {
                    let p = PatchId::img1(s, row, col);
                    let pr = patch_rect(&cfg, &p).unwrap();
                    let kids = children(&cfg, &p).unwrap();
                    let mut area = 0;
                    for k in &kids {
                        let kr = patch_rect(&cfg, k).unwrap();
                        assert_eq!(kr.intersect(&pr), Some(kr), "child escapes parent");
                        area += kr.area();
                    }
                    assert_eq!(area, pr.area());
                    // Each child maps back to this parent by integer division.
                    for k in &kids {
                        assert_eq!((k.row / 2, k.col / 2), (row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn children_at_min_scale_error() {
        let cfg = cfg64();
        assert!(children(&cfg, &PatchId::img1(1, 0, 0)).is_err());
    }

    #[test]
    fn full_identical_overlap_is_patch_area() {
        let cfg = cfg256();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 32, h: 32 },
            Rect { x: 0, y: 0, w: 32, h: 32 },
            256,
        )
        .unwrap();
        let o = exact_overlap(&cfg, &corr, &PatchId::img1(5, 0, 0), &PatchId::img2(5, 0, 0)).unwrap();
        assert_eq!(o, 1024);
    }

    #[test]
    fn disjoint_patches_have_zero_overlap() {
        let cfg = cfg256();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 32, h: 32 },
            Rect { x: 64, y: 64, w: 32, h: 32 },
            256,
        )
        .unwrap();
        let o = exact_overlap(&cfg, &corr, &PatchId::img1(5, 4, 4), &PatchId::img2(5, 7, 7)).unwrap();
        assert_eq!(o, 0);
    }

    #[test]
    fn shifted_destination_overlap_matches_enumeration() {
        let cfg = cfg256();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 32, h: 32 },
            Rect { x: 16, y: 0, w: 32, h: 32 },
            256,
        )
        .unwrap();
        let a = PatchId::img1(5, 0, 0);
        let b = PatchId::img2(5, 0, 0);
        let o = exact_overlap(&cfg, &corr, &a, &b).unwrap();
        assert_eq!(o, 512);
        assert_eq!(o, brute_force_overlap(&cfg, &corr, &a, &b));
    }

    #[test]
    fn overlap_matches_enumeration_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let cfg = cfg64();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let w = rng.gen_range(1..=32);
            let h = rng.gen_range(1..=32);
            let corr = DuplicationCorrespondence::new(
                Rect { x: rng.gen_range(0..=64 - w), y: rng.gen_range(0..=64 - h), w, h },
                Rect { x: rng.gen_range(0..=64 - w), y: rng.gen_range(0..=64 - h), w, h },
                64,
            )
            .unwrap();
            let s = rng.gen_range(1..=3);
            let g = cfg.grid_size(s);
            let a = PatchId::img1(s, rng.gen_range(0..g), rng.gen_range(0..g));
            let b = PatchId::img2(s, rng.gen_range(0..g), rng.gen_range(0..g));
            assert_eq!(
                exact_overlap(&cfg, &corr, &a, &b).unwrap(),
                brute_force_overlap(&cfg, &corr, &a, &b)
            );
        }
    }

    #[test]
    fn overlap_is_symmetric_under_direction_swap() {
        use rand::{Rng, SeedableRng};
        let cfg = cfg64();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let w = rng.gen_range(1..=24);
            let h = rng.gen_range(1..=24);
            let corr = DuplicationCorrespondence::new(
                Rect { x: rng.gen_range(0..=64 - w), y: rng.gen_range(0..=64 - h), w, h },
                Rect { x: rng.gen_range(0..=64 - w), y: rng.gen_range(0..=64 - h), w, h },
                64,
            )
            .unwrap();
            let s = rng.gen_range(1..=3);
            let g = cfg.grid_size(s);
            let a = PatchId::img1(s, rng.gen_range(0..g), rng.gen_range(0..g));
            let b = PatchId::img2(s, rng.gen_range(0..g), rng.gen_range(0..g));
            let forward = exact_overlap(&cfg, &corr, &a, &b).unwrap();
            let swapped = exact_overlap(
                &cfg,
                &corr.reversed(),
                &PatchId::img1(s, b.row, b.col),
                &PatchId::img2(s, a.row, a.col),
            )
            .unwrap();
            assert_eq!(forward, swapped);
        }
    }

    #[test]
    fn overlap_totals_equal_duplicated_pixels_of_each_patch() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 5, y: 9, w: 21, h: 17 },
            Rect { x: 30, y: 2, w: 21, h: 17 },
            64,
        )
        .unwrap();
        for s in 1..=3u32 {
            let g = cfg.grid_size(s);
            for row in 0..g {
                for col in 0..g {
                    let a = PatchId::img1(s, row, col);
                    let total: u64 = (0..g)
                        .flat_map(|r| (0..g).map(move |c| (r, c)))
                        .map(|(r, c)| {
                            exact_overlap(&cfg, &corr, &a, &PatchId::img2(s, r, c)).unwrap()
                        })
                        .sum();
                    let in_src = patch_rect(&cfg, &a)
                        .unwrap()
                        .intersect(&corr.src)
                        .map(|r| r.area() as u64)
                        .unwrap_or(0);
                    assert_eq!(total, in_src);
                }
            }
        }
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 8, h: 8 },
            Rect { x: 0, y: 0, w: 8, h: 8 },
            64,
        )
        .unwrap();
        assert!(exact_overlap(&cfg, &corr, &PatchId::img1(2, 0, 0), &PatchId::img2(3, 0, 0)).is_err());
    }

    #[test]
    fn budgets_reproduce_the_reference_table() {
        let cfg = cfg256();
        let ours: Vec<u64> = (1..=5).map(|s| ours_budget(&cfg, s)).collect();
        assert_eq!(ours, vec![131_072, 32_768, 8_192, 2_048, 4_096]);
        let naive: Vec<u64> = (1..=5).map(|s| naive_budget(&cfg, s)).collect();
        assert_eq!(naive, vec![268_435_456, 16_777_216, 1_048_576, 65_536, 4_096]);
    }

    #[test]
    fn budgets_for_the_small_config() {
        let cfg = cfg64();
        assert_eq!(ours_budget(&cfg, 3), 4096);
        assert_eq!(ours_budget(&cfg, 2), 2048);
        assert_eq!(ours_budget(&cfg, 1), 8192);
    }

    #[test]
    fn ours_never_exceeds_naive_and_matches_it_only_at_top() {
        for (n, top) in [(64usize, 3u32), (128, 4), (256, 5), (512, 5)] {
            let cfg = ScaleConfig::new(n, top, 1, 64).unwrap();
            for s in 1..=top {
                let (o, nv) = (ours_budget(&cfg, s), naive_budget(&cfg, s));
                assert!(o <= nv, "N={n} s={s}: {o} > {nv}");
                if s < top {
                    assert!(o < nv);
                } else {
                    assert_eq!(o, nv);
                }
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_layouts() {
        assert!(ScaleConfig::new(100, 3, 1, 64).is_err()); // not a power of two
        assert!(ScaleConfig::new(64, 5, 1, 64).is_err()); // top grid too small
        assert!(ScaleConfig::new(64, 3, 0, 64).is_err()); // scale zero
        assert!(ScaleConfig::new(64, 3, 1, 2).is_err()); // channels vanish
    }

    #[test]
    fn scale_config_json_roundtrip() {
        let cfg = cfg64();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScaleConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
