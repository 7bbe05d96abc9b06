//! Structured hierarchical search: exhaustive comparison at the top scale,
//! per-image argmax pair extraction, parent-to-child candidate expansion,
//! and the assembled forward pipeline with exact comparison accounting.

use crate::error::{MonetError, Result};
use crate::network::{
    build_score_maps, decode, decode_backward, encode_with_tape, encoder_backward,
    scoremap_backward, DecodeTape, EncodeTape, Model, ModelScorer, OverlapScoreMap, OverlapScorer,
};
use crate::pyramid::{children, naive_budget, ours_budget, ComparisonLedger, PatchId, ScaleConfig};
use crate::tensor::Tensor;

/// Patch pairs scheduled for comparison at one scale. Duplicates are
/// permitted and executed: the budget counts executions.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub scale: u32,
    pub pairs: Vec<(PatchId, PatchId)>,
}

/// Full cross product of the top-scale patches of the two images.
pub fn top_scale_candidates(cfg: &ScaleConfig) -> CandidateSet {
    let s = cfg.top_scale;
    let g = cfg.grid_size(s);
    let mut pairs = Vec::with_capacity(g * g * g * g);
    for ar in 0..g {
        for ac in 0..g {
            for br in 0..g {
                for bc in 0..g {
                    pairs.push((PatchId::img1(s, ar, ac), PatchId::img2(s, br, bc)));
                }
            }
        }
    }
    CandidateSet { scale: s, pairs }
}

/// Expands the argmax pairs of a scale into candidates one scale finer:
/// for every compared patch of either image, all sixteen child pairs of
/// (patch, argmax partner). Both directions are emitted without dedup.
pub fn propagate(cfg: &ScaleConfig, maps: &OverlapScoreMap) -> Result<CandidateSet> {
    let s = maps.scale;
    if s <= cfg.min_scale {
        return Err(MonetError::NoChildren { scale: s });
    }
    let g = maps.grid;
    let mut pairs = Vec::new();
    let mut expand = |a: &PatchId, b: &PatchId| -> Result<()> {
        let kids_a = children(cfg, a)?;
        let kids_b = children(cfg, b)?;
        for ka in &kids_a {
            for kb in &kids_b {
                pairs.push((*ka, *kb));
            }
        }
        Ok(())
    };
    for row in 0..g {
        for col in 0..g {
            let i = row * g + col;
            if let Some(partner) = maps.argmax1[i] {
                expand(&PatchId::img1(s, row, col), &partner)?;
            } else if maps.o1[i] != 0.0 {
                return Err(MonetError::MissingArgmax { scale: s, row, col });
            }
        }
    }
    for row in 0..g {
        for col in 0..g {
            let i = row * g + col;
            if let Some(partner) = maps.argmax2[i] {
                expand(&partner, &PatchId::img2(s, row, col))?;
            } else if maps.o2[i] != 0.0 {
                return Err(MonetError::MissingArgmax { scale: s, row, col });
            }
        }
    }
    Ok(CandidateSet {
        scale: s - 1,
        pairs,
    })
}

/// Runs the hierarchical search alone: top-scale all-pairs scoring, then
/// repeated propagate/score down to the minimum scale. Score maps are
/// returned indexed by `s - min_scale`.
pub fn run_search(
    cfg: &ScaleConfig,
    scorer: &dyn OverlapScorer,
    ledger: &mut ComparisonLedger,
) -> Result<(Vec<OverlapScoreMap>, Vec<CandidateSet>)> {
    let mut maps: Vec<Option<OverlapScoreMap>> = vec![None; cfg.num_scales()];
    let mut cands: Vec<Option<CandidateSet>> = vec![None; cfg.num_scales()];
    let mut current = top_scale_candidates(cfg);
    for s in cfg.scales_top_down() {
        let idx = (s - cfg.min_scale) as usize;
        let map = build_score_maps(scorer, cfg, s, &current.pairs, ledger)?;
        if s > cfg.min_scale {
            let next = propagate(cfg, &map)?;
            cands[idx] = Some(std::mem::replace(&mut current, next));
        } else {
            cands[idx] = Some(current.clone());
        }
        maps[idx] = Some(map);
    }
    Ok((
        maps.into_iter().map(Option::unwrap).collect(),
        cands.into_iter().map(Option::unwrap).collect(),
    ))
}

/// Like [`run_search`] but over frozen candidate sets from an earlier run,
/// skipping propagation. Used by gradient checks, where the discrete search
/// decisions must stay fixed while parameters are perturbed.
pub fn run_search_frozen(
    cfg: &ScaleConfig,
    scorer: &dyn OverlapScorer,
    candidates: &[CandidateSet],
    ledger: &mut ComparisonLedger,
) -> Result<Vec<OverlapScoreMap>> {
    let mut maps = Vec::with_capacity(candidates.len());
    for cand in candidates {
        maps.push(build_score_maps(scorer, cfg, cand.scale, &cand.pairs, ledger)?);
    }
    Ok(maps)
}

/// Everything a forward pipeline run produces.
pub struct PipelineOutput {
    /// Indexed by `s - min_scale`.
    pub maps: Vec<OverlapScoreMap>,
    pub mask1_prob: Tensor,
    pub mask2_prob: Tensor,
    pub ledger: ComparisonLedger,
    pub candidates: Vec<CandidateSet>,
}

/// Forward activations of a full pipeline run, for the backward pass.
pub struct PipelineTape {
    pub enc1: EncodeTape,
    pub enc2: EncodeTape,
    pub decode: DecodeTape,
}

/// Full forward pipeline: encode both images, search hierarchically,
/// decode masks. Deterministic given `(model, images)`.
pub fn run_pipeline(model: &Model, image1: &Tensor, image2: &Tensor) -> Result<PipelineOutput> {
    Ok(run_pipeline_with_tape(model, image1, image2)?.0)
}

pub fn run_pipeline_with_tape(
    model: &Model,
    image1: &Tensor,
    image2: &Tensor,
) -> Result<(PipelineOutput, PipelineTape)> {
    let cfg = &model.cfg;
    let enc1 = encode_with_tape(model, image1)?;
    let enc2 = encode_with_tape(model, image2)?;
    let mut ledger = ComparisonLedger::new(cfg);
    let (maps, candidates) = {
        let scorer = ModelScorer {
            model,
            feats1: &enc1.feats,
            feats2: &enc2.feats,
        };
        run_search(cfg, &scorer, &mut ledger)?
    };
    let (mask1_prob, mask2_prob, dec_tape) = decode(model, &maps)?;
    Ok((
        PipelineOutput {
            maps,
            mask1_prob,
            mask2_prob,
            ledger,
            candidates,
        },
        PipelineTape {
            enc1,
            enc2,
            decode: dec_tape,
        },
    ))
}

/// Forward pipeline over frozen candidate sets.
pub fn run_pipeline_frozen(
    model: &Model,
    image1: &Tensor,
    image2: &Tensor,
    candidates: &[CandidateSet],
) -> Result<(PipelineOutput, PipelineTape)> {
    let cfg = &model.cfg;
    let enc1 = encode_with_tape(model, image1)?;
    let enc2 = encode_with_tape(model, image2)?;
    let mut ledger = ComparisonLedger::new(cfg);
    let maps = {
        let scorer = ModelScorer {
            model,
            feats1: &enc1.feats,
            feats2: &enc2.feats,
        };
        run_search_frozen(cfg, &scorer, candidates, &mut ledger)?
    };
    let (mask1_prob, mask2_prob, dec_tape) = decode(model, &maps)?;
    Ok((
        PipelineOutput {
            maps,
            mask1_prob,
            mask2_prob,
            ledger,
            candidates: candidates.to_vec(),
        },
        PipelineTape {
            enc1,
            enc2,
            decode: dec_tape,
        },
    ))
}

/// A detector invocation outside the score maps (the ranking-loss term):
/// pair `(a, b)` at `a.scale` with the loss gradient in its score.
pub struct PairGrad {
    pub a: PatchId,
    pub b: PatchId,
    pub upstream: f64,
}

/// Backward through the whole pipeline. `d_masks` holds the loss gradient
/// in the two probability maps (`[2, n, n]`); `extra_pairs` carries
/// ranking-loss gradients on individual detector invocations. Parameter
/// gradients accumulate into the model; search decisions are detached.
pub fn pipeline_backward(
    model: &mut Model,
    output: &PipelineOutput,
    tape: &PipelineTape,
    d_masks: &Tensor,
    extra_pairs: &[PairGrad],
) -> Result<()> {
    let cfg = model.cfg.clone();
    let d_maps = decode_backward(model, &tape.decode, d_masks)?;
    let mut d_feats1: Vec<Tensor> = tape
        .enc1
        .feats
        .iter()
        .map(|f| Tensor::zeros(f.shape.clone()))
        .collect();
    let mut d_feats2: Vec<Tensor> = tape
        .enc2
        .feats
        .iter()
        .map(|f| Tensor::zeros(f.shape.clone()))
        .collect();
    for (idx, map) in output.maps.iter().enumerate() {
        let (d_o1, d_o2) = &d_maps[idx];
        scoremap_backward(
            model,
            &tape.enc1.feats,
            &tape.enc2.feats,
            map,
            d_o1,
            d_o2,
            &mut d_feats1,
            &mut d_feats2,
        )?;
    }
    for pg in extra_pairs {
        crate::network::detector_pair_backward(
            model,
            &tape.enc1.feats,
            &tape.enc2.feats,
            pg.a.scale,
            &pg.a,
            &pg.b,
            pg.upstream,
            &mut d_feats1,
            &mut d_feats2,
        )?;
    }
    let _ = cfg;
    encoder_backward(model, &tape.enc1, &d_feats1)?;
    encoder_backward(model, &tape.enc2, &d_feats2)?;
    Ok(())
}

/// One row of the budget report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetRow {
    pub scale: u32,
    pub patch_dim: usize,
    pub naive: u64,
    pub expected: u64,
    pub executed: u64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct BudgetReport {
    pub rows: Vec<BudgetRow>,
}

impl BudgetReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<u32> {
        self.rows.iter().filter(|r| !r.pass).map(|r| r.scale).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,patch_dimension,naive,ours,executed,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{}x{},{},{},{},{}\n",
                r.scale, r.patch_dim, r.patch_dim, r.naive, r.expected, r.executed, r.pass
            ));
        }
        out
    }
}

/// Compares a run's ledger against the closed-form budgets, scale by scale.
pub fn verify_budget(cfg: &ScaleConfig, ledger: &ComparisonLedger) -> BudgetReport {
    let rows = cfg
        .scales_top_down()
        .map(|s| {
            let expected = ours_budget(cfg, s);
            let executed = ledger.count(s);
            BudgetRow {
                scale: s,
                patch_dim: cfg.patch_dim(s),
                naive: naive_budget(cfg, s),
                expected,
                executed,
                pass: executed == expected,
            }
        })
        .collect();
    BudgetReport { rows }
}
