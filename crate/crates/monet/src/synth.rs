//! Synthetic manipulated-sample generation: reusable annotation templates,
//! on-the-fly application to random image pairs, per-scale exact overlap
//! annotations, ground-truth masks, and triplet sampling for pretraining.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MonetError, Result};
use crate::eval::Mask;
use crate::pyramid::{exact_overlap, patch_rect, DuplicationCorrespondence, PatchId, Rect, ScaleConfig};
use crate::tensor::Tensor;
use crate::training::Triplet;

/// FNV-1a hash of the canonical config JSON; ties templates to the scale
/// layout they were derived for.
pub fn config_hash(cfg: &ScaleConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// One annotated patch pair `(a_row, a_col, b_row, b_col, overlap_pixels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair(pub usize, pub usize, pub usize, pub usize, pub u64);

impl AnnotatedPair {
    pub fn patch1(&self, scale: u32) -> PatchId {
        PatchId::img1(scale, self.0, self.1)
    }

    pub fn patch2(&self, scale: u32) -> PatchId {
        PatchId::img2(scale, self.2, self.3)
    }

    pub fn overlap(&self) -> u64 {
        self.4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleAnnotations {
    pub scale: u32,
    pub pairs: Vec<AnnotatedPair>,
}

/// A reusable duplication specification: the correspondence plus, for every
/// scale, all patch pairs with nonzero exact overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTemplate {
    pub id: u64,
    pub cfg_hash: String,
    pub correspondence: DuplicationCorrespondence,
    pub per_scale: Vec<ScaleAnnotations>,
}

impl AnnotationTemplate {
    pub fn annotations(&self, scale: u32) -> Option<&ScaleAnnotations> {
        self.per_scale.iter().find(|a| a.scale == scale)
    }
}

/// Enumerates every patch pair with nonzero overlap at one scale. Patches of
/// image 1 intersecting the source rectangle are walked row-major; for each,
/// the translated duplicated span pins down the handful of destination
/// patches it can land in.
fn annotate_scale(
    cfg: &ScaleConfig,
    corr: &DuplicationCorrespondence,
    scale: u32,
) -> Result<ScaleAnnotations> {
    let d = cfg.patch_dim(scale);
    let g = cfg.grid_size(scale);
    let src = &corr.src;
    let (dx, dy) = corr.delta();
    let mut pairs = Vec::new();
    let (ar0, ar1) = (src.y / d, (src.y + src.h - 1) / d);
    let (ac0, ac1) = (src.x / d, (src.x + src.w - 1) / d);
    for a_row in ar0..=ar1.min(g - 1) {
        for a_col in ac0..=ac1.min(g - 1) {
            let a = PatchId::img1(scale, a_row, a_col);
            let dup = match patch_rect(cfg, &a)?.intersect(src) {
                Some(r) => r,
                None => continue,
            };
            let (sx, sy) = (dup.x as i64 + dx, dup.y as i64 + dy);
            let (br0, br1) = (sy as usize / d, (sy + dup.h as i64 - 1) as usize / d);
            let (bc0, bc1) = (sx as usize / d, (sx + dup.w as i64 - 1) as usize / d);
            for b_row in br0..=br1.min(g - 1) {
                for b_col in bc0..=bc1.min(g - 1) {
                    let b = PatchId::img2(scale, b_row, b_col);
                    let o = exact_overlap(cfg, corr, &a, &b)?;
                    if o > 0 {
                        pairs.push(AnnotatedPair(a_row, a_col, b_row, b_col, o));
                    }
                }
            }
        }
    }
    Ok(ScaleAnnotations { scale, pairs })
}

/// Samples a duplication uniformly (extent in `[min_region, max_region]`,
/// positions in bounds) and derives its per-scale overlap annotations.
pub fn generate_template(
    cfg: &ScaleConfig,
    rng: &mut ChaCha8Rng,
    id: u64,
    min_region: usize,
    max_region: usize,
) -> Result<AnnotationTemplate> {
    let n = cfg.image_size;
    if min_region == 0 || min_region > max_region || max_region > n {
        return Err(MonetError::RegionOutOfBounds {
            x: 0,
            y: 0,
            w: min_region,
            h: max_region,
            n,
        });
    }
    let w = rng.gen_range(min_region..=max_region);
    let h = rng.gen_range(min_region..=max_region);
    let src = Rect {
        x: rng.gen_range(0..=n - w),
        y: rng.gen_range(0..=n - h),
        w,
        h,
    };
    let dst = Rect {
        x: rng.gen_range(0..=n - w),
        y: rng.gen_range(0..=n - h),
        w,
        h,
    };
    let correspondence = DuplicationCorrespondence::new(src, dst, n)?;
    template_from_correspondence(cfg, id, correspondence)
}

/// Derives a template for a fixed correspondence; deterministic.
pub fn template_from_correspondence(
    cfg: &ScaleConfig,
    id: u64,
    correspondence: DuplicationCorrespondence,
) -> Result<AnnotationTemplate> {
    let mut per_scale = Vec::new();
    for s in cfg.min_scale..=cfg.top_scale {
        per_scale.push(annotate_scale(cfg, &correspondence, s)?);
    }
    Ok(AnnotationTemplate {
        id,
        cfg_hash: config_hash(cfg),
        correspondence,
        per_scale,
    })
}

/// A training/evaluation pair: a possibly-manipulated image pair with its
/// ground-truth masks. Negatives carry empty masks and no template.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image1: Tensor,
    pub image2: Tensor,
    pub gt_mask1: Mask,
    pub gt_mask2: Mask,
    pub template: Option<AnnotationTemplate>,
    pub label: bool,
}

fn rect_mask(n: usize, r: &Rect) -> Mask {
    let mut mask = Mask::zeros(n, n);
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            mask.data[y * n + x] = true;
        }
    }
    mask
}

/// Copies the source rectangle of `image_a` into the destination rectangle
/// of `image_b` and emits the ground-truth masks.
pub fn apply_template(
    cfg: &ScaleConfig,
    template: &AnnotationTemplate,
    image_a: &Tensor,
    image_b: &Tensor,
) -> Result<SyntheticSample> {
    let n = cfg.image_size;
    for img in [image_a, image_b] {
        if img.shape != vec![3, n, n] {
            return Err(MonetError::ShapeMismatch {
                layer: "apply_template".to_string(),
                expected: format!("[3, {n}, {n}]"),
                got: format!("{:?}", img.shape),
            });
        }
    }
    if template.cfg_hash != config_hash(cfg) {
        return Err(MonetError::InvalidConfig(format!(
            "template {} was derived for a different scale config",
            template.id
        )));
    }
    let corr = &template.correspondence;
    let mut image2 = image_b.clone();
    let (dx, dy) = corr.delta();
    for c in 0..3 {
        for y in corr.src.y..corr.src.y + corr.src.h {
            let ty = (y as i64 + dy) as usize;
            for x in corr.src.x..corr.src.x + corr.src.w {
                let tx = (x as i64 + dx) as usize;
                image2.data[(c * n + ty) * n + tx] = image_a.data[(c * n + y) * n + x];
            }
        }
    }
    Ok(SyntheticSample {
        image1: image_a.clone(),
        image2,
        gt_mask1: rect_mask(n, &corr.src),
        gt_mask2: rect_mask(n, &corr.dst),
        template: Some(template.clone()),
        label: true,
    })
}

/// An untouched pair with empty masks.
pub fn make_negative_sample(image_a: &Tensor, image_b: &Tensor) -> SyntheticSample {
    let n = image_a.shape[1];
    SyntheticSample {
        image1: image_a.clone(),
        image2: image_b.clone(),
        gt_mask1: Mask::zeros(n, n),
        gt_mask2: Mask::zeros(n, n),
        template: None,
        label: false,
    }
}

/// Draws `k` triplets at one scale: the anchor comes from the annotated
/// positive pairs, the negative is a patch with strictly smaller overlap
/// with the anchor (typically zero), drawn uniformly with a smallest-overlap
/// fallback.
pub fn sample_triplets(
    cfg: &ScaleConfig,
    template: &AnnotationTemplate,
    scale: u32,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let ann = template
        .annotations(scale)
        .filter(|a| !a.pairs.is_empty())
        .ok_or(MonetError::EmptyStream("positive annotation"))?;
    let g = cfg.grid_size(scale);
    let corr = &template.correspondence;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let pair = ann.pairs[rng.gen_range(0..ann.pairs.len())];
        let anchor = pair.patch1(scale);
        let positive = pair.patch2(scale);
        let o_plus = pair.overlap();
        let mut negative = None;
        for _ in 0..64 {
            let cand = PatchId::img2(scale, rng.gen_range(0..g), rng.gen_range(0..g));
            let o = exact_overlap(cfg, corr, &anchor, &cand)?;
            if o < o_plus {
                negative = Some((cand, o));
                break;
            }
        }
        let (negative, o_minus) = match negative {
            Some(n) => n,
            None => {
                // Nearly everything overlaps; take the smallest-overlap patch.
                let mut best: Option<(PatchId, u64)> = None;
                for row in 0..g {
                    for col in 0..g {
                        let cand = PatchId::img2(scale, row, col);
                        let o = exact_overlap(cfg, corr, &anchor, &cand)?;
                        if best.map(|(_, bo)| o < bo).unwrap_or(true) {
                            best = Some((cand, o));
                        }
                    }
                }
                let (cand, o) = best.expect("grid is nonempty");
                if o >= o_plus {
                    return Err(MonetError::InvalidTriplet {
                        o_plus,
                        o_minus: o,
                    });
                }
                (cand, o)
            }
        };
        out.push(Triplet::new(scale, anchor, positive, negative, o_plus, o_minus)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Procedural base images
// ---------------------------------------------------------------------------

/// Seeded value-noise texture with soft blobs and fine per-pixel noise.
/// The fine noise gives every region a unique fingerprint, so exact copies
/// stay distinguishable from merely similar smooth areas.
pub fn procedural_image(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let gs = 8;
    let mut coarse = vec![0.0; (gs + 1) * (gs + 1)];
    for v in &mut coarse {
        *v = rng.gen_range(0.0..1.0);
    }
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..1.0)).collect();
    let mut data = vec![0.0; 3 * n * n];
    let cell = n as f64 / gs as f64;
    for y in 0..n {
        for x in 0..n {
            let fx = x as f64 / cell;
            let fy = y as f64 / cell;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let c00 = coarse[iy * (gs + 1) + ix];
            let c01 = coarse[iy * (gs + 1) + ix + 1];
            let c10 = coarse[(iy + 1) * (gs + 1) + ix];
            let c11 = coarse[(iy + 1) * (gs + 1) + ix + 1];
            let lum = c00 * (1.0 - tx) * (1.0 - ty)
                + c01 * tx * (1.0 - ty)
                + c10 * (1.0 - tx) * ty
                + c11 * tx * ty;
            for c in 0..3 {
                data[(c * n + y) * n + x] = lum * tint[c];
            }
        }
    }
    let blobs = rng.gen_range(2..=5);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let rx = rng.gen_range(n as f64 / 16.0..n as f64 / 4.0);
        let ry = rng.gen_range(n as f64 / 16.0..n as f64 / 4.0);
        let color: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..n {
            for x in 0..n {
                let ex = (x as f64 - cx) / rx;
                let ey = (y as f64 - cy) / ry;
                let d = (ex * ex + ey * ey).sqrt();
                if d < 1.5 {
                    let w = ((1.5 - d) / 0.5).min(1.0);
                    for c in 0..3 {
                        let i = (c * n + y) * n + x;
                        data[i] = data[i] * (1.0 - w) + color[c] * w;
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.01, 0.99);
    }
    Tensor::new(vec![3, n, n], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg64() -> ScaleConfig {
        ScaleConfig::new(64, 3, 1, 64).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn full_image_duplication_annotates_every_aligned_pair() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 64, h: 64 },
            Rect { x: 0, y: 0, w: 64, h: 64 },
            64,
        )
        .unwrap();
        let t = template_from_correspondence(&cfg, 0, corr).unwrap();
        for s in 1..=3u32 {
            let g = cfg.grid_size(s);
            let d = cfg.patch_dim(s) as u64;
            let ann = t.annotations(s).unwrap();
            assert_eq!(ann.pairs.len(), g * g);
            for p in &ann.pairs {
                assert_eq!((p.0, p.1), (p.2, p.3));
                assert_eq!(p.overlap(), d * d);
            }
        }
    }

    #[test]
    fn aligned_half_image_region_gives_full_overlap_pairs() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 32, h: 32 },
            Rect { x: 32, y: 32, w: 32, h: 32 },
            64,
        )
        .unwrap();
        let t = template_from_correspondence(&cfg, 1, corr).unwrap();
        for s in 1..=3u32 {
            let d = cfg.patch_dim(s);
            let per_side = 32 / d;
            let ann = t.annotations(s).unwrap();
            assert_eq!(ann.pairs.len(), per_side * per_side);
            assert!(ann.pairs.iter().all(|p| p.overlap() == (d * d) as u64));
        }
    }

    #[test]
    fn template_regeneration_is_bit_exact() {
        let cfg = cfg64();
        let t1 = generate_template(&cfg, &mut rng(5), 3, 8, 32).unwrap();
        let t2 = template_from_correspondence(&cfg, 3, t1.correspondence).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn stored_annotations_match_exhaustive_oracle() {
        let cfg = cfg64();
        let template = generate_template(&cfg, &mut rng(6), 0, 8, 32).unwrap();
        for s in 1..=3u32 {
            let g = cfg.grid_size(s);
            let ann = template.annotations(s).unwrap();
            let mut stored = std::collections::BTreeMap::new();
            for p in &ann.pairs {
                stored.insert((p.0, p.1, p.2, p.3), p.overlap());
            }
            for ar in 0..g {
                for ac in 0..g {
                    for br in 0..g {
                        for bc in 0..g {
                            let o = exact_overlap(
                                &cfg,
                                &template.correspondence,
                                &PatchId::img1(s, ar, ac),
                                &PatchId::img2(s, br, bc),
                            )
                            .unwrap();
                            let entry = stored.get(&(ar, ac, br, bc)).copied();
                            if o > 0 {
                                assert_eq!(entry, Some(o));
                            } else {
                                assert_eq!(entry, None);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn parent_overlap_is_the_sum_of_its_children() {
        let cfg = cfg64();
        let template = generate_template(&cfg, &mut rng(7), 0, 8, 32).unwrap();
        let corr = &template.correspondence;
        for s in 2..=3u32 {
            for p in &template.annotations(s).unwrap().pairs {
                let a = p.patch1(s);
                let b = p.patch2(s);
                let kids_a = crate::pyramid::children(&cfg, &a).unwrap();
                let kids_b = crate::pyramid::children(&cfg, &b).unwrap();
                let mut total = 0;
                for ka in &kids_a {
                    for kb in &kids_b {
                        total += exact_overlap(&cfg, corr, ka, kb).unwrap();
                    }
                }
                assert_eq!(total, p.overlap());
            }
        }
    }

    #[test]
    fn bottom_scale_overlap_total_equals_mask_area() {
        let cfg = cfg64();
        for seed in 0..5 {
            let template = generate_template(&cfg, &mut rng(20 + seed), seed, 8, 32).unwrap();
            let total: u64 = template
                .annotations(1)
                .unwrap()
                .pairs
                .iter()
                .map(|p| p.overlap())
                .sum();
            let area = template.correspondence.src.area() as u64;
            assert_eq!(total, area);
            let img = procedural_image(64, &mut rng(100 + seed));
            let img_b = procedural_image(64, &mut rng(200 + seed));
            let sample = apply_template(&cfg, &template, &img, &img_b).unwrap();
            assert_eq!(sample.gt_mask1.positive_pixels(), area);
            assert_eq!(sample.gt_mask2.positive_pixels(), area);
        }
    }

    #[test]
    fn applied_sample_copies_pixels_and_touches_nothing_else() {
        let cfg = cfg64();
        let n = 64;
        for seed in 0..20 {
            let template = generate_template(&cfg, &mut rng(seed), seed, 8, 32).unwrap();
            let a = procedural_image(n, &mut rng(1000 + seed));
            let b = procedural_image(n, &mut rng(2000 + seed));
            let sample = apply_template(&cfg, &template, &a, &b).unwrap();
            let corr = &template.correspondence;
            let (dx, dy) = corr.delta();
            for c in 0..3 {
                for y in 0..n {
                    for x in 0..n {
                        let out = sample.image2.data[(c * n + y) * n + x];
                        let in_dst = x >= corr.dst.x
                            && x < corr.dst.x + corr.dst.w
                            && y >= corr.dst.y
                            && y < corr.dst.y + corr.dst.h;
                        if in_dst {
                            let sx = (x as i64 - dx) as usize;
                            let sy = (y as i64 - dy) as usize;
                            assert_eq!(out, a.data[(c * n + sy) * n + sx]);
                        } else {
                            assert_eq!(out, b.data[(c * n + y) * n + x]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_template_application_is_idempotent() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 8, y: 8, w: 16, h: 16 },
            Rect { x: 8, y: 8, w: 16, h: 16 },
            64,
        )
        .unwrap();
        let t = template_from_correspondence(&cfg, 0, corr).unwrap();
        let img = procedural_image(64, &mut rng(3));
        let sample = apply_template(&cfg, &t, &img, &img).unwrap();
        assert_eq!(sample.image2.data, img.data);
        assert_eq!(sample.gt_mask1.positive_pixels(), 256);
    }

    #[test]
    fn sampled_triplets_satisfy_the_overlap_invariant() {
        let cfg = cfg64();
        let template = generate_template(&cfg, &mut rng(9), 0, 8, 32).unwrap();
        for s in 1..=3u32 {
            let triplets = sample_triplets(&cfg, &template, s, 1000, &mut rng(10)).unwrap();
            assert_eq!(triplets.len(), 1000);
            for t in &triplets {
                assert!(t.o_plus > t.o_minus);
                // Oracle re-check of the stored overlaps.
                assert_eq!(
                    exact_overlap(&cfg, &template.correspondence, &t.anchor, &t.positive).unwrap(),
                    t.o_plus
                );
                assert_eq!(
                    exact_overlap(&cfg, &template.correspondence, &t.anchor, &t.negative).unwrap(),
                    t.o_minus
                );
            }
        }
    }

    #[test]
    fn triplet_sampling_without_positives_errors() {
        let cfg = cfg64();
        let corr = DuplicationCorrespondence::new(
            Rect { x: 0, y: 0, w: 8, h: 8 },
            Rect { x: 0, y: 0, w: 8, h: 8 },
            64,
        )
        .unwrap();
        let mut t = template_from_correspondence(&cfg, 0, corr).unwrap();
        t.per_scale[0].pairs.clear();
        assert!(sample_triplets(&cfg, &t, 1, 10, &mut rng(11)).is_err());
    }

    #[test]
    fn negative_sample_is_untouched_with_empty_masks() {
        let a = procedural_image(64, &mut rng(12));
        let b = procedural_image(64, &mut rng(13));
        let s = make_negative_sample(&a, &b);
        assert!(!s.label);
        assert_eq!(s.image1.data, a.data);
        assert_eq!(s.image2.data, b.data);
        assert_eq!(s.gt_mask1.positive_pixels(), 0);
        assert_eq!(s.gt_mask2.positive_pixels(), 0);
    }

    #[test]
    fn template_json_matches_the_documented_schema() {
        let cfg = cfg64();
        let template = generate_template(&cfg, &mut rng(14), 7, 8, 16).unwrap();
        let json = serde_json::to_value(&template).unwrap();
        assert!(json.get("id").is_some());
        assert!(json.get("cfg_hash").is_some());
        assert!(json.get("correspondence").is_some());
        let per_scale = json.get("per_scale").unwrap().as_array().unwrap();
        assert_eq!(per_scale.len(), 3);
        let first_pair = per_scale[0].get("pairs").unwrap().as_array().unwrap()[0]
            .as_array()
            .unwrap();
        assert_eq!(first_pair.len(), 5);
        let back: AnnotationTemplate = serde_json::from_value(json).unwrap();
        assert_eq!(back, template);
    }

    #[test]
    fn procedural_images_are_deterministic_and_in_range() {
        let a = procedural_image(64, &mut rng(15));
        let b = procedural_image(64, &mut rng(15));
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = procedural_image(64, &mut rng(16));
        assert_ne!(a.data, c.data);
    }
}
