import math

import numpy as np
import pytest

from crispedge.errors import ContractError, DomainError, ShapeError
from crispedge.losses import (
    AdaptiveLossState,
    AnnotationSet,
    ConsensusWeightMap,
    LossConfig,
    adaptive_loss,
    batch_weight_maps,
    combined_loss,
    dice,
    remap_weights,
    soft_ce,
    soft_dice,
    weight_map,
    weighted_ce,
)
from crispedge.tensorcore import Tensor, backward

from oracles import (
    dice_loops,
    fd_gradient,
    rel_err,
    soft_ce_loops,
    soft_dice_loops,
    weighted_ce_loops,
)

CFG = LossConfig()


def random_w(rng, h=4, w=4, frac=0.4):
    m = rng.random((h, w))
    m[rng.random((h, w)) > frac] = 0.0
    return m


# ---------------------------------------------------------------------------
# consensus weight map


def test_weight_map_mean_of_annotators():
    base = np.zeros((3, 3))
    marked = base.copy()
    marked[1, 1] = 1.0
    ann = AnnotationSet([marked, marked, base, base, base])
    wm = weight_map(ann)
    assert wm.w[0, 0, 1, 1] == pytest.approx(0.4)
    assert wm.pos_count == 1
    assert wm.neg_count == 8


def test_weight_map_single_annotator_identity():
    rng = np.random.default_rng(0)
    m = (rng.random((5, 5)) > 0.6).astype(float)
    wm = weight_map(AnnotationSet([m]))
    assert np.array_equal(wm.w[0, 0], m)


def test_weight_map_all_empty():
    wm = weight_map(AnnotationSet([np.zeros((4, 4)), np.zeros((4, 4))]))
    assert np.all(wm.w == 0.0)
    assert wm.beta == 1.0
    assert wm.pos_count == 0


def test_annotation_set_validation():
    with pytest.raises(ContractError):
        AnnotationSet([])
    with pytest.raises(ShapeError):
        AnnotationSet([np.zeros((3, 3)), np.zeros((4, 4))])
    with pytest.raises(DomainError):
        AnnotationSet([np.full((3, 3), 0.5)])


def test_majority_rule():
    a = np.zeros((1, 2))
    b = np.ones((1, 2))
    # 2 of 3 annotators mark pixel 0; 1 of 3 marks pixel 1
    m1 = np.array([[1.0, 0.0]])
    m2 = np.array([[1.0, 1.0]])
    m3 = np.array([[0.0, 0.0]])
    lab = AnnotationSet([m1, m2, m3]).majority()
    assert lab[0, 0] == 1.0 and lab[0, 1] == 0.0
    # single annotator: majority is the map itself
    assert np.array_equal(AnnotationSet([b]).majority(), b)
    assert np.array_equal(AnnotationSet([a]).majority(), a)


def test_weight_map_range_validation():
    with pytest.raises(DomainError):
        ConsensusWeightMap.from_array(np.full((3, 3), 1.5))


def test_batch_weight_maps_global_counts():
    m1 = np.zeros((3, 3))
    m1[0, 0] = 1.0
    m2 = np.zeros((3, 3))
    wm = batch_weight_maps([AnnotationSet([m1]), AnnotationSet([m2])])
    assert wm.w.shape == (2, 1, 3, 3)
    assert wm.pos_count == 1
    assert wm.neg_count == 17
    assert wm.beta == pytest.approx(17 / 18)


# ---------------------------------------------------------------------------
# remap


def test_remap_endpoints_and_affine():
    w = np.array([[1.0, 0.0], [0.2, 0.6]])
    wm = remap_weights(ConsensusWeightMap.from_array(w), 0.5)
    assert wm.w[0, 0, 0, 0] == 1.0
    assert wm.w[0, 0, 0, 1] == 0.0
    assert wm.w[0, 0, 1, 0] == pytest.approx(0.6)
    assert wm.w[0, 0, 1, 1] == pytest.approx(0.8)
    assert wm.pos_count == 3 and wm.neg_count == 1


def test_remap_floor_validation():
    wm = ConsensusWeightMap.from_array(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        remap_weights(wm, 1.0)
    with pytest.raises(ContractError):
        remap_weights(wm, -0.1)


# ---------------------------------------------------------------------------
# weighted cross-entropy


def test_weighted_ce_symmetric_case():
    lab = np.array([[1.0, 1.0], [0.0, 0.0]])
    p = Tensor(np.full((1, 1, 2, 2), 0.5))
    got = weighted_ce(p, AnnotationSet([lab]), CFG).item()
    assert got == pytest.approx(2 * math.log(2), rel=1e-12)


def test_weighted_ce_near_zero_at_optimum():
    lab = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = np.where(lab > 0.5, 1.0 - 1e-6, 1e-6)
    got = weighted_ce(Tensor(p), AnnotationSet([lab]), CFG).item()
    assert got < 1e-5 * lab.size


def test_weighted_ce_matches_scalar_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, (4, 4))
        lab = (rng.random((4, 4)) > 0.7).astype(float)
        got = weighted_ce(Tensor(p), AnnotationSet([lab]), CFG).item()
        want = weighted_ce_loops(p, lab, CFG.clamp)
        assert rel_err(got, want) < 1e-12


def test_weighted_ce_shape_mismatch():
    with pytest.raises(ShapeError):
        weighted_ce(Tensor(np.full((1, 1, 3, 3), 0.5)), AnnotationSet([np.zeros((2, 2))]), CFG)


# ---------------------------------------------------------------------------
# soft cross-entropy


def test_soft_ce_all_negative_is_zero():
    wm = ConsensusWeightMap.from_array(np.zeros((4, 4)))
    rng = np.random.default_rng(1)
    p = Tensor(rng.uniform(0.1, 0.9, (4, 4)))
    assert soft_ce(p, wm, CFG).item() == 0.0


def test_soft_ce_all_positive_is_zero():
    wm = ConsensusWeightMap.from_array(np.full((4, 4), 0.5))
    rng = np.random.default_rng(2)
    p = Tensor(rng.uniform(0.1, 0.9, (4, 4)))
    assert soft_ce(p, wm, CFG).item() == 0.0


def test_soft_ce_symmetric_closed_form():
    w = np.array([[1.0, 1.0], [0.0, 0.0]])
    p = Tensor(np.full((1, 1, 2, 2), 0.5))
    got = soft_ce(p, ConsensusWeightMap.from_array(w), CFG).item()
    assert got == pytest.approx(math.log(2), rel=1e-12)


def test_soft_ce_matches_scalar_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, (4, 4))
        w = random_w(rng)
        got = soft_ce(Tensor(p), ConsensusWeightMap.from_array(w), CFG).item()
        want = soft_ce_loops(p, w, CFG.clamp)
        assert rel_err(got, want) < 1e-12


def test_soft_ce_binary_w_relates_to_weighted_ce():
    # with one annotator the two losses share beta and differ only by the
    # per-class count normalizations
    for seed in range(5):
        rng = np.random.default_rng(seed)
        lab = (rng.random((5, 5)) > 0.6).astype(float)
        if lab.sum() in (0, lab.size):
            continue
        p = rng.uniform(0.05, 0.95, (5, 5))
        n = lab.size
        n_pos = int(lab.sum())
        n_neg = n - n_pos
        beta = n_neg / n
        pos_part = -beta * sum(math.log(p[i, j]) for i in range(5) for j in range(5) if lab[i, j] > 0.5)
        neg_part = -(1 - beta) * sum(
            math.log(1 - p[i, j]) for i in range(5) for j in range(5) if lab[i, j] <= 0.5)
        ce = weighted_ce(Tensor(p), AnnotationSet([lab]), CFG).item()
        sce = soft_ce(Tensor(p), ConsensusWeightMap.from_array(lab), CFG).item()
        assert rel_err(ce, pos_part + neg_part) < 1e-12
        assert rel_err(sce, pos_part / n_pos + neg_part / n_neg) < 1e-12


# ---------------------------------------------------------------------------
# dice and soft dice


def test_dice_equality_at_match():
    lab = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = dice(Tensor(lab.reshape(1, 1, 2, 2)), AnnotationSet([lab])).item()
    assert got == pytest.approx(1.0, rel=1e-12)


def test_dice_closed_form_half():
    lab = np.ones((3, 3))
    p = Tensor(np.full((1, 1, 3, 3), 0.5))
    assert dice(p, AnnotationSet([lab])).item() == pytest.approx(1.25, rel=1e-12)


def test_dice_zero_denominator():
    lab = np.zeros((2, 2))
    with pytest.raises(DomainError):
        dice(Tensor(np.zeros((1, 1, 2, 2))), AnnotationSet([lab]))


def test_dice_matches_scalar_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, (4, 4))
        lab = (rng.random((4, 4)) > 0.5).astype(float)
        got = dice(Tensor(p), AnnotationSet([lab])).item()
        want = dice_loops(p, lab)
        assert rel_err(got, want) < 1e-12


def test_soft_dice_equality_and_empty():
    rng = np.random.default_rng(3)
    w = random_w(rng)
    got = soft_dice(Tensor(w), ConsensusWeightMap.from_array(w), CFG).item()
    assert got == pytest.approx(1.0, abs=1e-9)
    empty = soft_dice(Tensor(np.zeros((3, 3))), ConsensusWeightMap.from_array(np.zeros((3, 3))), CFG)
    assert empty.item() == 1.0


def test_soft_dice_matches_scalar_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.0, 1.0, (4, 4))
        w = random_w(rng)
        got = soft_dice(Tensor(p), ConsensusWeightMap.from_array(w), CFG).item()
        want = soft_dice_loops(p, w, CFG.epsilon)
        assert rel_err(got, want) < 1e-12


def test_soft_dice_lower_bound():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.0, 1.0, (5, 5))
        w = random_w(rng, 5, 5)
        val = soft_dice(Tensor(p), ConsensusWeightMap.from_array(w), CFG).item()
        assert val >= 1.0 - 1e-12


# ---------------------------------------------------------------------------
# fusions


def test_combined_reductions_are_exact():
    rng = np.random.default_rng(4)
    p_arr = rng.uniform(0.05, 0.95, (4, 4))
    w = random_w(rng)
    wm = ConsensusWeightMap.from_array(w)
    sce_only = combined_loss(Tensor(p_arr), wm, 1.0, 0.0, CFG).item()
    sd_only = combined_loss(Tensor(p_arr), wm, 0.0, 1.0, CFG).item()
    assert sce_only == soft_ce(Tensor(p_arr), wm, CFG).item()
    assert sd_only == soft_dice(Tensor(p_arr), wm, CFG).item()
    both = combined_loss(Tensor(p_arr), wm, 1.0, 1.0, CFG).item()
    assert rel_err(both, sce_only + sd_only) < 1e-12


def test_combined_rejects_negative_weights():
    wm = ConsensusWeightMap.from_array(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        combined_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), wm, -1.0, 0.0, CFG)


def test_adaptive_closed_form_at_unit_weights():
    rng = np.random.default_rng(5)
    p_arr = rng.uniform(0.05, 0.95, (4, 4))
    wm = ConsensusWeightMap.from_array(random_w(rng))
    sce = soft_ce(Tensor(p_arr), wm, CFG).item()
    sd = soft_dice(Tensor(p_arr), wm, CFG).item()
    got = adaptive_loss(Tensor(p_arr), wm, AdaptiveLossState(1.0, 1.0), CFG).item()
    assert rel_err(got, sce + 0.1 * sd + math.log(2)) < 1e-12


def test_adaptive_closed_form_kappa_two():
    rng = np.random.default_rng(6)
    p_arr = rng.uniform(0.05, 0.95, (4, 4))
    wm = ConsensusWeightMap.from_array(random_w(rng))
    sce = soft_ce(Tensor(p_arr), wm, CFG).item()
    sd = soft_dice(Tensor(p_arr), wm, CFG).item()
    got = adaptive_loss(Tensor(p_arr), wm, AdaptiveLossState(2.0, 1.0), CFG).item()
    assert rel_err(got, 0.25 * sce + 0.1 * sd + math.log(3)) < 1e-9


def test_adaptive_weight_gradients_closed_form_and_fd():
    rng = np.random.default_rng(7)
    p_arr = rng.uniform(0.05, 0.95, (4, 4))
    wm = ConsensusWeightMap.from_array(random_w(rng))
    sce = soft_ce(Tensor(p_arr), wm, CFG).item()
    sd = soft_dice(Tensor(p_arr), wm, CFG).item()
    state = AdaptiveLossState(1.0, 1.0)
    loss = adaptive_loss(Tensor(p_arr), wm, state, CFG)
    backward(loss)
    gk = state.log_kappa.grad.reshape(()).item()
    gt = state.log_tau.grad.reshape(()).item()
    # at unit weights the log-parameter gradient equals the raw-weight one
    assert abs(gk - (-2.0 * sce + 0.5)) < 1e-9
    assert abs(gt - (-2.0 * 0.1 * sd + 0.5)) < 1e-9

    def f():
        return adaptive_loss(Tensor(p_arr), wm, state, CFG).item()

    for param, ana in [(state.log_kappa, gk), (state.log_tau, gt)]:
        num = fd_gradient(f, param.data)
        assert abs(ana - num[0]) < 1e-6


def test_adaptive_state_validation_and_positivity():
    with pytest.raises(ContractError):
        AdaptiveLossState(0.0, 1.0)
    with pytest.raises(ContractError):
        AdaptiveLossState(1.0, -2.0)
    s = AdaptiveLossState(0.5, 3.0)
    assert s.kappa == pytest.approx(0.5, rel=1e-12)
    assert s.tau == pytest.approx(3.0, rel=1e-12)
    # pushing the stored logs anywhere keeps the weights positive
    s.log_kappa.data[...] = -40.0
    assert s.kappa > 0.0


# ---------------------------------------------------------------------------
# shared properties


def test_losses_permutation_invariant():
    rng = np.random.default_rng(8)
    p = rng.uniform(0.05, 0.95, (4, 4))
    w = random_w(rng)
    lab = (w > 0).astype(float)
    perm = rng.permutation(16)
    pp = p.reshape(-1)[perm].reshape(4, 4)
    wp = w.reshape(-1)[perm].reshape(4, 4)
    lp = lab.reshape(-1)[perm].reshape(4, 4)
    wm, wmp = ConsensusWeightMap.from_array(w), ConsensusWeightMap.from_array(wp)
    pairs = [
        (soft_ce(Tensor(p), wm, CFG), soft_ce(Tensor(pp), wmp, CFG)),
        (soft_dice(Tensor(p), wm, CFG), soft_dice(Tensor(pp), wmp, CFG)),
        (weighted_ce(Tensor(p), AnnotationSet([lab]), CFG), weighted_ce(Tensor(pp), AnnotationSet([lp]), CFG)),
        (dice(Tensor(p), AnnotationSet([lab])), dice(Tensor(pp), AnnotationSet([lp]))),
    ]
    for a, b in pairs:
        assert rel_err(a.item(), b.item()) < 1e-12


def test_loss_gradients_wrt_p_match_fd():
    rng = np.random.default_rng(9)
    p_arr = rng.uniform(0.1, 0.9, (1, 1, 4, 4))
    w = random_w(rng)
    wm = ConsensusWeightMap.from_array(w)
    state = AdaptiveLossState()

    builders = [
        lambda t: soft_ce(t, wm, CFG),
        lambda t: soft_dice(t, wm, CFG),
        lambda t: combined_loss(t, wm, 0.7, 1.3, CFG),
        lambda t: adaptive_loss(t, wm, state, CFG),
        lambda t: weighted_ce(t, AnnotationSet([(w > 0).astype(float)]), CFG),
    ]
    for build in builders:
        t = Tensor(p_arr)
        state.log_kappa.zero_grad()
        state.log_tau.zero_grad()
        backward(build(t))

        def f():
            return build(Tensor(p_arr.copy())).item()

        num = fd_gradient(f, p_arr)
        ana = t.grad.reshape(-1)
        for i, g in num.items():
            assert rel_err(ana[i], g) < 1e-4


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ContractError):
        LossConfig(zeta=-0.1)
    with pytest.raises(ContractError):
        LossConfig(clamp=0.5)
