//! Layer-by-layer verification of a draft forest against the large model.
//!
//! Per layer, drafts whose parent survived are examined in sampling order. A
//! draft at cell `x` is accepted with probability `min(1, p'(x) / q_beam(x))`,
//! where `p'` starts as the large model's warped joint `p_beam` over
//! (accepted parents) x vocabulary. An acceptance resets `p'` to `p_beam`; a
//! rejection replaces it by `norm(max(p' - q_beam, 0))`. Once the layer's
//! target width is reached the remaining drafts are cut off. A layer that
//! falls short draws one beam from the current `p'`, fills the rest from
//! `p_beam`, and ends the iteration. If every draft layer succeeds, a bonus
//! layer is drawn straight from the large model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beam_ref::{beam_joint, Beam, JointIndex};
use crate::distribution::Distribution;
use crate::draft_forest::{
    dfs_linearize, masked_contexts, topology_mask, DraftForest, NodeRef, NodeStatus, Survivor,
};
use crate::error::{DecodeError, Result};
use crate::token_model::TokenModel;
use crate::warping::WarpSpec;
use crate::width_policy::{alpha_chain, decide_width, WidthDecision};

/// Residual mass below which `max(p' - q, 0)` counts as vanished.
pub const RESIDUAL_EPSILON: f64 = 1e-12;

/// `norm(max(p' - q, 0))` over `p'`'s index set.
pub fn residual_update(p_prime: &Distribution, q: &[f64]) -> Result<Distribution> {
    if p_prime.len() != q.len() {
        return Err(DecodeError::IndexMismatch {
            left: p_prime.len(),
            right: q.len(),
        });
    }
    let positive: Vec<f64> = p_prime
        .weights()
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - b).max(0.0))
        .collect();
    let mass: f64 = positive.iter().sum();
    if mass < RESIDUAL_EPSILON {
        return Err(DecodeError::DegenerateResidual);
    }
    Ok(Distribution::from_normalized_unchecked(
        positive.into_iter().map(|w| w / mass).collect(),
    ))
}

/// Direction of the acceptance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioRule {
    /// `min(1, p' / q_beam)`. Reproduces `p_beam`.
    #[default]
    TargetOverDraft,
    /// `min(1, q_beam / p')`. Does not reproduce `p_beam`; kept so the
    /// difference can be measured.
    DraftOverTarget,
}

impl RatioRule {
    pub fn acceptance(self, target: f64, draft: f64) -> f64 {
        let ratio = match self {
            RatioRule::TargetOverDraft => target / draft,
            RatioRule::DraftOverTarget => {
                if target == 0.0 {
                    f64::INFINITY
                } else {
                    draft / target
                }
            }
        };
        ratio.min(1.0)
    }
}

/// Treatment of drafts whose parent was rejected in the previous layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneRule {
    /// Drop them before verification.
    #[default]
    Skip,
    /// Keep them in the sequence as certain rejections, each applying the
    /// residual update.
    CountAsRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRule {
    Dynamic { threshold: f64, min_width: usize },
    Fixed(usize),
}

impl WidthRule {
    pub fn floor(&self) -> usize {
        match *self {
            WidthRule::Dynamic { min_width, .. } => min_width,
            WidthRule::Fixed(w) => w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    pub width: WidthRule,
    pub ratio: RatioRule,
    pub prune: PruneRule,
    /// Draw the extra layer when every draft layer is accepted.
    pub bonus_layer: bool,
}

impl VerifyParams {
    pub fn dynamic(threshold: f64, min_width: usize) -> Self {
        Self {
            width: WidthRule::Dynamic {
                threshold,
                min_width,
            },
            ratio: RatioRule::default(),
            prune: PruneRule::default(),
            bonus_layer: true,
        }
    }

    pub fn fixed(width: usize) -> Self {
        Self {
            width: WidthRule::Fixed(width),
            ..Self::dynamic(1.0, 1)
        }
    }
}

/// A draft presented to [`verify_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    /// Cell in `p_joint`'s index set, or `None` for a draft outside it (only
    /// under [`PruneRule::CountAsRejected`]).
    pub cell: Option<usize>,
    pub q_beam_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PickSource {
    Draft(usize),
    Residual,
    Fill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Pick {
    pub cell: usize,
    pub source: PickSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutcome {
    pub accepted: Vec<Pick>,
    pub resampled_from_residual: Option<Pick>,
    pub extra_from_pbeam: Vec<Pick>,
    /// True iff the target width was met from drafts alone.
    pub layer_accepted: bool,
    pub candidate_status: Vec<NodeStatus>,
}

impl LayerOutcome {
    /// Output cells in order: accepted drafts, residual draw, fills.
    pub fn picks(&self) -> impl Iterator<Item = &Pick> {
        self.accepted
            .iter()
            .chain(&self.resampled_from_residual)
            .chain(&self.extra_from_pbeam)
    }
}

/// Verifies one layer of drafts against `p_joint`.
///
/// `q_joint` holds the draft probabilities over `p_joint`'s index set, used
/// for the residual update.
pub fn verify_layer<R: Rng + ?Sized>(
    candidates: &[Candidate],
    p_joint: &Distribution,
    q_joint: &[f64],
    target_width: usize,
    ratio: RatioRule,
    rng: &mut R,
) -> Result<LayerOutcome> {
    if q_joint.len() != p_joint.len() {
        return Err(DecodeError::IndexMismatch {
            left: p_joint.len(),
            right: q_joint.len(),
        });
    }
    if target_width == 0 {
        return Err(DecodeError::InvalidParameter(
            "target width must be >= 1".into(),
        ));
    }
    if let Some(c) = candidates.iter().find(|c| !(c.q_beam_prob > 0.0)) {
        return Err(DecodeError::InvalidParameter(format!(
            "draft with non-positive probability {}",
            c.q_beam_prob
        )));
    }
    let mut live = p_joint.clone();
    let mut accepted = Vec::with_capacity(target_width);
    let mut status = vec![NodeStatus::CutOff; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        if accepted.len() == target_width {
            break;
        }
        let u: f64 = rng.random();
        let target = c.cell.map_or(0.0, |cell| live.get(cell));
        match c.cell {
            Some(cell) if u < ratio.acceptance(target, c.q_beam_prob) => {
                accepted.push(Pick {
                    cell,
                    source: PickSource::Draft(i),
                });
                status[i] = NodeStatus::Accepted;
                live = p_joint.clone();
            }
            _ => {
                status[i] = NodeStatus::Rejected;
                // A vanished residual means rejection had probability zero;
                // only rounding gets here, and `live` is then already q.
                if let Ok(next) = residual_update(&live, q_joint) {
                    live = next;
                }
            }
        }
    }
    let layer_accepted = accepted.len() == target_width;
    let mut resampled_from_residual = None;
    let mut extra_from_pbeam = Vec::new();
    if !layer_accepted {
        resampled_from_residual = Some(Pick {
            cell: live.sample(rng),
            source: PickSource::Residual,
        });
        while accepted.len() + 1 + extra_from_pbeam.len() < target_width {
            extra_from_pbeam.push(Pick {
                cell: p_joint.sample(rng),
                source: PickSource::Fill,
            });
        }
    }
    Ok(LayerOutcome {
        accepted,
        resampled_from_residual,
        extra_from_pbeam,
        layer_accepted,
        candidate_status: status,
    })
}

// ---------------------------------------------------------------------------
// Whole-forest verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifiedBeam {
    pub beam: Beam,
    /// Input beam (tree) this output descends from.
    pub root: usize,
    /// The forest node, when the beam is an accepted draft.
    pub node: Option<NodeRef>,
}

impl VerifiedBeam {
    pub fn survivor(&self) -> Survivor {
        match self.node {
            Some(at) => Survivor::Node(at),
            None => Survivor::Resampled { root: self.root },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    pub layer: usize,
    /// Drafts examined (after pruning).
    pub candidates: usize,
    pub decision: WidthDecision,
    pub accepted_from_drafts: usize,
    pub resampled: bool,
    pub filled: usize,
    pub layer_accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    /// Number of layers produced this iteration (`l_last`), bonus included.
    pub layers_produced: usize,
    pub outputs: Vec<VerifiedBeam>,
    pub layers: Vec<LayerTrace>,
    /// Width of the bonus layer, if one was drawn.
    pub bonus_width: Option<usize>,
    /// Per draft layer (index `l - 1`), the status of each node.
    pub statuses: Vec<Vec<NodeStatus>>,
}

impl VerificationResult {
    pub fn node_status(&self, at: NodeRef) -> NodeStatus {
        if at.layer == 0 {
            return NodeStatus::Accepted;
        }
        self.statuses[at.layer - 1][at.index]
    }

    /// Output width of each produced layer.
    pub fn produced_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = self
            .layers
            .iter()
            .map(|l| l.decision.target_width)
            .collect();
        widths.extend(self.bonus_width);
        widths
    }
}

/// Large-model rows for every forest node (indexed `[layer][index]`) from one
/// packed pass over the DFS-linearized, masked trees.
pub fn score_forest<M: TokenModel + ?Sized>(
    forest: &DraftForest,
    large: &M,
) -> Vec<Vec<Distribution>> {
    let mut contexts = Vec::with_capacity(forest.node_count());
    let mut refs = Vec::with_capacity(forest.node_count());
    for tree in forest.trees() {
        let mask = topology_mask(&tree);
        debug_assert_eq!(mask.order(), dfs_linearize(&tree).as_slice());
        for (pos, ctx) in masked_contexts(&tree, &mask).into_iter().enumerate() {
            refs.push(tree.node(mask.order()[pos]).forest_ref.expect("forest tree"));
            contexts.push(ctx);
        }
    }
    let rows = large.next_distributions(&contexts);
    let mut by_node: Vec<Vec<Option<Distribution>>> = (0..=forest.gamma())
        .map(|l| vec![None; forest.layer(l).len()])
        .collect();
    for (at, row) in refs.into_iter().zip(rows) {
        by_node[at.layer][at.index] = Some(row);
    }
    by_node
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|r| r.expect("every node scored"))
                .collect()
        })
        .collect()
}

/// Verifies a whole forest with exactly one batched call to `large`.
pub fn run_verification<M, R>(
    forest: &DraftForest,
    large: &M,
    params: &VerifyParams,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<VerificationResult>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    let draft_width = forest.width();
    if params.width.floor() < 1 || params.width.floor() > draft_width {
        return Err(DecodeError::InvalidParameter(format!(
            "width floor {} must lie in 1..={draft_width}",
            params.width.floor()
        )));
    }
    let vocab = forest.vocab_size();
    let gamma = forest.gamma();
    let rows = score_forest(forest, large);

    // Large-model log-likelihood of every node.
    let mut large_ll: Vec<Vec<f64>> = vec![forest
        .input()
        .beams()
        .iter()
        .map(|b| b.log_likelihood)
        .collect()];
    for layer in 1..=gamma {
        let lls = forest
            .layer(layer)
            .iter()
            .map(|n| {
                let parent = n.parent.expect("draft parent");
                let token = n.token.expect("draft token") as usize;
                large_ll[layer - 1][parent] + rows[layer - 1][parent].get(token).ln()
            })
            .collect();
        large_ll.push(lls);
    }
    let beam_of = |at: NodeRef| Beam {
        tokens: forest.context(at),
        log_likelihood: large_ll[at.layer][at.index],
        prompt_len: forest.root_beam(at).prompt_len,
    };
    let joint_over = |layer: usize, parents: &[usize]| -> Result<Distribution> {
        let lls: Vec<f64> = parents.iter().map(|&i| large_ll[layer][i]).collect();
        let parent_rows: Vec<Distribution> =
            parents.iter().map(|&i| rows[layer][i].clone()).collect();
        beam_joint(&lls, &parent_rows, warp)
    };
    let emit = |parent_layer: usize, parents: &[usize], pick: &Pick, node: Option<NodeRef>| {
        let JointIndex { beam, token } = JointIndex::from_flat(pick.cell, vocab);
        let parent = NodeRef {
            layer: parent_layer,
            index: parents[beam],
        };
        let row = &rows[parent_layer][parent.index];
        VerifiedBeam {
            beam: beam_of(parent).extend(token, row.get(token as usize).ln()),
            root: forest.node(parent).expect("parent").root,
            node,
        }
    };

    let mut parents: Vec<usize> = (0..forest.roots().len()).collect();
    let mut traces = Vec::with_capacity(gamma);
    let mut statuses: Vec<Vec<NodeStatus>> = (1..=gamma)
        .map(|l| vec![NodeStatus::Unverified; forest.layer(l).len()])
        .collect();
    let mut last_width = params.width.floor();

    for layer in 1..=gamma {
        let mut position = vec![None; forest.layer(layer - 1).len()];
        for (pos, &n) in parents.iter().enumerate() {
            position[n] = Some(pos);
        }
        let p_joint = joint_over(layer - 1, &parents)?;
        let q_full = forest.layer_joint(layer);
        let q_joint: Vec<f64> = parents
            .iter()
            .flat_map(|&n| q_full.weights()[n * vocab..(n + 1) * vocab].iter().copied())
            .collect();

        let mut candidates = Vec::with_capacity(draft_width);
        let mut candidate_nodes = Vec::with_capacity(draft_width);
        for (i, node) in forest.layer(layer).iter().enumerate() {
            let cell = position[node.parent.expect("draft parent")]
                .map(|pos| pos * vocab + node.token.expect("draft token") as usize);
            if cell.is_none() && params.prune == PruneRule::Skip {
                statuses[layer - 1][i] = NodeStatus::Pruned;
                continue;
            }
            candidates.push(Candidate {
                cell,
                q_beam_prob: node.q_beam_prob.expect("draft probability"),
            });
            candidate_nodes.push(i);
        }

        let all_parents = parents.len() == forest.layer(layer - 1).len();
        let draft_mass = match params.prune {
            PruneRule::Skip if !all_parents => q_joint.iter().sum(),
            _ => 1.0,
        };
        let alphas = alpha_chain(&p_joint, &q_joint, draft_mass, candidates.len());
        let decision = match params.width {
            WidthRule::Dynamic {
                threshold,
                min_width,
            } => decide_width(alphas, candidates.len(), draft_width, threshold, min_width),
            WidthRule::Fixed(w) => WidthDecision {
                target_width: w,
                ..decide_width(alphas, candidates.len(), draft_width, 1.0, w)
            },
        };
        last_width = decision.target_width;

        let outcome = verify_layer(
            &candidates,
            &p_joint,
            &q_joint,
            decision.target_width,
            params.ratio,
            rng,
        )?;
        for (&i, &s) in candidate_nodes.iter().zip(&outcome.candidate_status) {
            statuses[layer - 1][i] = s;
        }
        traces.push(LayerTrace {
            layer,
            candidates: candidates.len(),
            decision,
            accepted_from_drafts: outcome.accepted.len(),
            resampled: outcome.resampled_from_residual.is_some(),
            filled: outcome.extra_from_pbeam.len(),
            layer_accepted: outcome.layer_accepted,
        });

        if !outcome.layer_accepted {
            let outputs = outcome
                .picks()
                .map(|pick| {
                    let node = match pick.source {
                        PickSource::Draft(c) => Some(NodeRef {
                            layer,
                            index: candidate_nodes[c],
                        }),
                        _ => None,
                    };
                    emit(layer - 1, &parents, pick, node)
                })
                .collect();
            return Ok(VerificationResult {
                layers_produced: layer,
                outputs,
                layers: traces,
                bonus_width: None,
                statuses,
            });
        }
        parents = outcome
            .accepted
            .iter()
            .map(|pick| match pick.source {
                PickSource::Draft(c) => candidate_nodes[c],
                _ => unreachable!("accepted picks come from drafts"),
            })
            .collect();
    }

    if !params.bonus_layer {
        let outputs = parents
            .iter()
            .map(|&i| {
                let at = NodeRef { layer: gamma, index: i };
                VerifiedBeam {
                    beam: beam_of(at),
                    root: forest.layer(gamma)[i].root,
                    node: Some(at),
                }
            })
            .collect();
        return Ok(VerificationResult {
            layers_produced: gamma,
            outputs,
            layers: traces,
            bonus_width: None,
            statuses,
        });
    }

    let p_bonus = joint_over(gamma, &parents)?;
    let outputs = (0..last_width)
        .map(|_| {
            let pick = Pick {
                cell: p_bonus.sample(rng),
                source: PickSource::Fill,
            };
            emit(gamma, &parents, &pick, None)
        })
        .collect();
    Ok(VerificationResult {
        layers_produced: gamma + 1,
        outputs,
        layers: traces,
        bonus_width: Some(last_width),
        statuses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam_ref::BeamSet;
    use crate::draft_forest::grow_draft_forest;
    use crate::token_model::{make_model_pair, Metered, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(w: &[f64]) -> Distribution {
        Distribution::new(w.to_vec()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let p = dist(&[0.5, 0.5, 0.0]);
        let q = [0.0, 0.0, 1.0];
        assert_eq!(residual_update(&p, &q).unwrap(), p);

        let p = dist(&[0.5, 0.5, 0.0]);
        let q = [0.5, 0.25, 0.25];
        assert_eq!(residual_update(&p, &q).unwrap().weights(), &[0.0, 1.0, 0.0]);

        assert_eq!(
            residual_update(&p, &[0.5, 0.5, 0.0]),
            Err(DecodeError::DegenerateResidual)
        );
        assert!(residual_update(&p, &[1.0]).is_err());
    }

    #[test]
    fn identical_models_accept_up_to_the_cutoff() {
        let p = dist(&[0.25, 0.25, 0.5]);
        let cands: Vec<Candidate> = [0, 2, 1]
            .iter()
            .map(|&c| Candidate {
                cell: Some(c),
                q_beam_prob: p.get(c),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let out =
                verify_layer(&cands, &p, p.weights(), 2, RatioRule::default(), &mut rng).unwrap();
            assert!(out.layer_accepted);
            assert_eq!(out.accepted.len(), 2);
            assert_eq!(
                out.candidate_status,
                vec![NodeStatus::Accepted, NodeStatus::Accepted, NodeStatus::CutOff]
            );
        }
    }

    #[test]
    fn drafts_off_the_target_support_are_rejected_then_corrected() {
        let p = dist(&[0.0, 0.6, 0.4, 0.0]);
        let q = [0.5, 0.0, 0.0, 0.5];
        let cands = [
            Candidate { cell: Some(0), q_beam_prob: 0.5 },
            Candidate { cell: Some(3), q_beam_prob: 0.5 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = verify_layer(&cands, &p, &q, 3, RatioRule::default(), &mut rng).unwrap();
        assert!(!out.layer_accepted);
        assert!(out.accepted.is_empty());
        let residual = out.resampled_from_residual.unwrap();
        assert!(residual.cell == 1 || residual.cell == 2);
        assert_eq!(out.extra_from_pbeam.len(), 2);
        assert_eq!(out.picks().count(), 3);
    }

    #[test]
    fn rejects_zero_probability_drafts() {
        let p = dist(&[0.5, 0.5]);
        let cands = [Candidate { cell: Some(0), q_beam_prob: 0.0 }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(verify_layer(&cands, &p, &[0.5, 0.5], 1, RatioRule::default(), &mut rng).is_err());
    }

    #[test]
    fn ratio_directions() {
        assert_eq!(RatioRule::TargetOverDraft.acceptance(0.2, 0.4), 0.5);
        assert_eq!(RatioRule::DraftOverTarget.acceptance(0.2, 0.4), 1.0);
        assert_eq!(RatioRule::DraftOverTarget.acceptance(0.4, 0.2), 0.5);
        assert_eq!(RatioRule::DraftOverTarget.acceptance(0.0, 0.2), 1.0);
    }

    fn pair(divergence: f64) -> crate::token_model::ModelPair {
        make_model_pair(21, Vocabulary::new(5).unwrap(), 1, divergence, 1.0).unwrap()
    }

    #[test]
    fn identical_pair_accepts_every_layer() {
        let pair = pair(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut input = BeamSet::from_prompt(&[0]);
        for _ in 0..20 {
            let forest =
                grow_draft_forest(&pair.small, &input, 3, 3, &WarpSpec::IDENTITY, &mut rng)
                    .unwrap();
            let large = Metered::new(&pair.large);
            let res = run_verification(
                &forest,
                &large,
                &VerifyParams::dynamic(1.0, 3),
                &WarpSpec::IDENTITY,
                &mut rng,
            )
            .unwrap();
            assert_eq!(large.calls(), 1);
            assert_eq!(res.layers_produced, 4);
            assert_eq!(res.outputs.len(), 3);
            assert!(res.layers.iter().all(|l| l.layer_accepted));
            input = BeamSet::new(res.outputs.into_iter().map(|o| o.beam).collect()).unwrap();
        }
    }

    #[test]
    fn outputs_carry_exact_large_likelihoods() {
        let pair = pair(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let warp = WarpSpec::new(Some(4), Some(0.9)).unwrap();
        for _ in 0..50 {
            let input = BeamSet::from_prompt(&[2, 1]);
            let forest = grow_draft_forest(&pair.small, &input, 4, 3, &warp, &mut rng).unwrap();
            let res = run_verification(
                &forest,
                &pair.large,
                &VerifyParams::dynamic(0.7, 2),
                &warp,
                &mut rng,
            )
            .unwrap();
            assert!((1..=4).contains(&res.layers_produced));
            let last = res.produced_widths()[res.layers_produced - 1];
            assert_eq!(res.outputs.len(), last);
            for o in &res.outputs {
                assert_eq!(o.beam.generated_len(), res.layers_produced);
                let fresh = o.beam.recompute_log_likelihood(&pair.large).unwrap();
                assert!((fresh - o.beam.log_likelihood).abs() < 1e-9);
                // Accepted drafts chain back through accepted nodes only.
                if let Some(mut at) = o.node {
                    while at.layer > 0 {
                        assert_eq!(res.node_status(at), NodeStatus::Accepted);
                        at = NodeRef {
                            layer: at.layer - 1,
                            index: forest.node(at).unwrap().parent.unwrap(),
                        };
                    }
                }
            }
        }
    }

    #[test]
    fn without_bonus_layer_a_fully_accepted_forest_stops_at_gamma() {
        let pair = pair(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let forest = grow_draft_forest(
            &pair.small,
            &BeamSet::from_prompt(&[0]),
            2,
            2,
            &WarpSpec::IDENTITY,
            &mut rng,
        )
        .unwrap();
        let params = VerifyParams {
            bonus_layer: false,
            ..VerifyParams::dynamic(1.0, 2)
        };
        let res =
            run_verification(&forest, &pair.large, &params, &WarpSpec::IDENTITY, &mut rng).unwrap();
        assert_eq!(res.layers_produced, 2);
        assert!(res.outputs.iter().all(|o| o.node.is_some()));
    }

    #[test]
    fn pruned_nodes_are_marked() {
        let pair = pair(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut saw_pruned = false;
        for _ in 0..200 {
            let forest = grow_draft_forest(
                &pair.small,
                &BeamSet::from_prompt(&[1]),
                4,
                2,
                &WarpSpec::IDENTITY,
                &mut rng,
            )
            .unwrap();
            let res = run_verification(
                &forest,
                &pair.large,
                &VerifyParams::fixed(2),
                &WarpSpec::IDENTITY,
                &mut rng,
            )
            .unwrap();
            if res.layers_produced >= 2 {
                for (i, n) in forest.layer(2).iter().enumerate() {
                    let parent_status = res.statuses[0][n.parent.unwrap()];
                    let status = res.statuses[1][i];
                    if parent_status != NodeStatus::Accepted {
                        assert_eq!(status, NodeStatus::Pruned);
                        saw_pruned = true;
                    } else {
                        assert_ne!(status, NodeStatus::Pruned);
                    }
                }
            }
        }
        assert!(saw_pruned);
    }
}
