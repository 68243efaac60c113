import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from unimatch.assignment import (
    DEFAULT_ITERS,
    DEFAULT_TAU,
    HardAssignment,
    SoftAssignment,
    check_cycle_consistency,
    compose_pairwise,
    harden,
    load_assignment,
    load_pointmap,
    save_assignment,
    save_pointmap,
    sinkhorn,
    soft_pairwise,
)
from unimatch.errors import DimensionError, ParseError
from unimatch.fmap import PointMap


def _t(a):
    return torch.as_tensor(a, dtype=torch.float64)


def test_defaults():
    assert DEFAULT_ITERS == 10 and DEFAULT_TAU == 0.2


@pytest.mark.parametrize("n,d", [(4, 4), (4, 7), (1, 3)])
def test_equal_logits_uniform(n, d):
    P = sinkhorn(torch.zeros(n, d, dtype=torch.float64)).P
    np.testing.assert_allclose(P.numpy(), 1.0 / d, atol=1e-12)


def test_margin_entry():
    # softmax at margin / tau = 50
    logits = torch.zeros(1, 6, dtype=torch.float64)
    logits[0, 4] = 10.0
    assert sinkhorn(logits).P[0, 4] > 0.999
    # every row with its own winning class
    perm = np.random.default_rng(0).permutation(6)[:5]
    logits = torch.zeros(5, 6, dtype=torch.float64)
    logits[np.arange(5), perm] = 10.0
    assert sinkhorn(logits).P[np.arange(5), perm].min() > 0.999


def test_too_small_universe():
    with pytest.raises(DimensionError):
        sinkhorn(torch.zeros(5, 4))
    with pytest.raises(DimensionError):
        sinkhorn(torch.zeros(2, 4), tau=0.0)
    with pytest.raises(DimensionError):
        harden(np.ones((3, 2)))


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 12), st.floats(0.5, 20.0))
def test_sinkhorn_marginals(seed, n, extra, scale):
    d = n + extra
    logits = _t(scale * np.random.default_rng(seed).standard_normal((n, d)))
    P = sinkhorn(logits).P.numpy()
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert P.sum(axis=0).max() <= 1 + 1e-9


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_sinkhorn_row_shift_invariant(seed, shift):
    logits = np.random.default_rng(seed).standard_normal((5, 8))
    shifted = logits.copy()
    shifted[2] += shift
    np.testing.assert_allclose(sinkhorn(_t(shifted)).P.numpy(), sinkhorn(_t(logits)).P.numpy(), atol=1e-9)


@given(st.integers(0, 10_000))
def test_harden_sinkhorn_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((7, 9))
    perm = rng.permutation(7)
    h0 = harden(sinkhorn(_t(logits)))
    h1 = harden(sinkhorn(_t(logits[perm])))
    np.testing.assert_array_equal(h1.universe_class, h0.universe_class[perm])


@pytest.mark.parametrize("n,d", [(4, 4), (3, 6)])
def test_sinkhorn_gradcheck(n, d):
    logits = _t(np.random.default_rng(n).standard_normal((n, d))).requires_grad_()
    W = _t(np.random.default_rng(9).standard_normal((n, d)))
    assert torch.autograd.gradcheck(lambda z: (sinkhorn(z).P * W).sum(), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_harden_permutation():
    perm = np.array([2, 0, 3, 1])
    P = np.eye(4)[perm]
    np.testing.assert_array_equal(harden(P).universe_class, perm)
    np.testing.assert_array_equal(harden(SoftAssignment(_t(np.log(P + 1e-30)))).universe_class, perm)


def test_harden_conflict_hand_instance():
    P = np.array([[0.9, 0.1, 0.0], [0.6, 0.0, 0.4]])
    np.testing.assert_array_equal(harden(P).universe_class, [0, 2])


def test_harden_vs_hungarian():
    rng = np.random.default_rng(0)
    agree = 0
    for trial in range(100):
        P = sinkhorn(_t(3 * rng.standard_normal((8, 10)))).P.numpy()
        g = harden(P)
        h = harden(P, method="hungarian")
        got = P[np.arange(8), g.universe_class].sum()
        best = P[np.arange(8), h.universe_class].sum()
        # per-row argmax with conflicting rows dropped
        am = P.argmax(axis=1)
        counts = np.bincount(am, minlength=10)
        naive = sum(P[i, am[i]] for i in range(8) if counts[am[i]] == 1)
        assert got >= naive - 1e-12
        assert got <= best + 1e-12
        agree += bool(np.isclose(got, best))
    print(f"greedy equals the Hungarian optimum in {agree}/100 trials")


def test_hard_assignment_contract():
    with pytest.raises(DimensionError):
        HardAssignment([0, 0], 3)
    with pytest.raises(DimensionError):
        HardAssignment([0, 3], 3)
    h = HardAssignment([2, 0], 4)
    np.testing.assert_array_equal(h.inverse(), [1, -1, 0, -1])
    with pytest.raises(ValueError):
        harden(np.eye(3), method="magic")


def test_compose_identical():
    h = HardAssignment([3, 1, 4, 0], 5, "x")
    np.testing.assert_array_equal(compose_pairwise(h, h).target, np.arange(4))


def test_compose_disjoint():
    pm = compose_pairwise(HardAssignment([0, 1], 4), HardAssignment([2, 3], 4))
    assert not pm.matched.any()


def test_compose_universe_mismatch():
    with pytest.raises(DimensionError):
        compose_pairwise(HardAssignment([0], 2), HardAssignment([0], 3))


def _random_hard(rng, n, d, sid):
    return HardAssignment(rng.permutation(d)[:n], d, sid)


def test_three_shapes_composition():
    rng = np.random.default_rng(3)
    hx, hy, hz = (_random_hard(rng, 20, 25, s) for s in "xyz")
    xy, yz, xz = compose_pairwise(hx, hy), compose_pairwise(hy, hz), compose_pairwise(hx, hz)
    through = xy.matched
    np.testing.assert_array_equal(xy.then(yz).target[through], xz.target[through])
    # Y using every class used by X and Z gives full equality
    hy_full = HardAssignment(np.union1d(hx.universe_class, hz.universe_class), 25, "y")
    full = compose_pairwise(hx, hy_full).then(compose_pairwise(hy_full, hz))
    np.testing.assert_array_equal(full.target, xz.target)


@given(st.integers(0, 10_000), st.integers(1, 10))
def test_universe_maps_always_consistent(seed, shapes):
    rng = np.random.default_rng(seed)
    d = 12
    hs = {f"s{i}": _random_hard(rng, int(rng.integers(4, d + 1)), d, f"s{i}") for i in range(shapes)}
    maps = {(a, b): compose_pairwise(hs[a], hs[b]) for a in hs for b in hs if a != b}
    for pm in maps.values():
        M = pm.to_matrix()
        assert M.sum(axis=1).max(initial=0) <= 1 and M.sum(axis=0).max(initial=0) <= 1
    report = check_cycle_consistency(maps)
    assert report.ok
    assert report.triplets == shapes * (shapes - 1) * (shapes - 2)


def test_inconsistent_triplet_reported():
    ident = PointMap([0, 1, 2], 3)
    swap = PointMap([1, 0, 2], 3)
    maps = {}
    for a in "xyz":
        for b in "xyz":
            if a != b:
                maps[(a, b)] = PointMap(ident.target, 3, a, b)
    maps[("x", "z")] = PointMap(swap.target, 3, "x", "z")
    report = check_cycle_consistency(maps)
    assert not report.ok
    hit = {(v.x, v.y, v.z) for v in report.violations}
    assert ("x", "y", "z") in hit
    v = next(v for v in report.violations if (v.x, v.y, v.z) == ("x", "y", "z") and v.vertex == 0)
    assert (v.direct, v.composed) == (1, 0)
    assert any("x -> y -> z" in line for line in report.lines())


def test_single_shape_trivially_consistent():
    report = check_cycle_consistency({})
    assert report.ok and report.triplets == 0


def test_soft_pairwise():
    Px = sinkhorn(_t(np.random.default_rng(0).standard_normal((3, 5)))).P
    np.testing.assert_allclose(soft_pairwise(Px, Px).numpy(), (Px @ Px.T).numpy())


def test_text_files_roundtrip(tmp_path):
    pm = PointMap([2, -1, 0], 4, "a", "b")
    save_pointmap(pm, tmp_path / "m.txt", d=6)
    head = (tmp_path / "m.txt").read_text().splitlines()[0]
    assert head == "# source=a target=b n_target=4 d=6"
    back = load_pointmap(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.target, pm.target)
    assert (back.source_id, back.target_id, back.n_target) == ("a", "b", 4)
    h = HardAssignment([4, 1, 0], 6, "a")
    save_assignment(h, tmp_path / "a.txt")
    hb = load_assignment(tmp_path / "a.txt")
    np.testing.assert_array_equal(hb.universe_class, h.universe_class)
    assert hb.d == 6 and hb.shape_id == "a"


def test_assignment_file_malformed(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1\n2\n")
    with pytest.raises(ParseError):
        load_assignment(p)
