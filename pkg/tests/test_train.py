import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from conftest import bumpy_grid, permute_mesh
from unimatch.errors import ConfigError, DimensionError, NonFiniteGradientError
from unimatch.eval.synthetic import make_synthetic_collection
from unimatch.fmap import FunctionalMap
from unimatch.losses import COMPLETE, PARTIAL, LossWeights, loss_classifier
from unimatch.model import (
    FEATURE_WIDTHS,
    N_SPECTRAL_INPUTS,
    FeatureNetwork,
    UniverseClassifier,
    build_networks,
    prepare_shape,
)
from unimatch.train import (
    CLASSIFIER_FREE,
    FEATURE_SIMILARITY,
    FULL,
    SUPERVISED,
    TrainingConfig,
    backward_pair,
    collection_pairs,
    fine_tune,
    forward_pair,
    infer_collection,
    infer_match,
    infer_match_variant,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
    universe_size,
)
from unimatch.assignment import check_cycle_consistency


@pytest.fixture(scope="module")
def pair30():
    """Two 30-vertex shapes: a bumpy grid and a perturbed, permuted copy."""
    m = bumpy_grid(6, 5, seed=0)
    rng = np.random.default_rng(1)
    from unimatch.mesh import TriangleMesh

    moved = TriangleMesh(m.vertices + 0.01 * rng.standard_normal(m.vertices.shape), m.faces, name="b")
    y = permute_mesh(moved, rng.permutation(m.n), name="b")
    return prepare_shape(m, 6, "a"), prepare_shape(y, 6, "b")


@pytest.fixture(scope="module")
def tiny_collection():
    col = make_synthetic_collection(count=4, seed=3, subdivisions=1)
    return col, [prepare_shape(m, 8) for m in col.meshes]


def _config(**kw):
    kw.setdefault("total_iters", 50)
    kw.setdefault("detach_iters", 0)
    kw.setdefault("log_every", 0)
    return TrainingConfig.for_mode(kw.pop("mode", COMPLETE), **kw)


def test_config_defaults_and_validation():
    c = TrainingConfig()
    assert (c.learning_rate, c.total_iters, c.detach_iters, c.batch_pairs) == (1e-3, 20000, 4000, 1)
    assert (c.tau, c.sinkhorn_iters, c.gamma) == (0.2, 10, 0.5)
    assert c.fm_lambda == 0.0
    assert TrainingConfig.for_mode(PARTIAL).fm_lambda == 100.0
    assert TrainingConfig.for_mode(PARTIAL).weights == LossWeights(w_lap=0.0, lambda_cls=1.0)
    for bad in (dict(mode="HALF"), dict(variant="X"), dict(learning_rate=0.0),
                dict(detach_iters=30000), dict(batch_pairs=2), dict(dtype="float16")):
        with pytest.raises(ConfigError):
            TrainingConfig(**bad)
    assert TrainingConfig.from_dict(c.to_dict()) == c


def test_network_widths():
    assert FEATURE_WIDTHS == (368, 256, 256, 128)
    assert N_SPECTRAL_INPUTS == 16
    nets = build_networks(11, seed=0)
    assert isinstance(nets.feature, FeatureNetwork) and isinstance(nets.classifier, UniverseClassifier)
    assert nets.classifier.d == 11 and nets.feature.out_dim == 128
    assert build_networks(None, seed=0).classifier is None


def test_inputs_shape(pair30):
    x, _ = pair30
    inp = x.inputs()
    assert inp.shape == (30, 368)
    # k = 6 < 16: missing spectral columns are zero
    assert not inp[:, 352 + 6:].any()


def test_build_networks_seeded():
    a, b = build_networks(5, seed=3), build_networks(5, seed=3)
    for (k, va), vb in zip(a.named_tensors().items(), b.named_tensors().values()):
        assert torch.equal(va, vb), k
    c = build_networks(5, seed=4)
    assert not torch.equal(parameters_to_vector(a.parameters()), parameters_to_vector(c.parameters()))


def test_self_pair_sanity(pair30):
    x, _ = pair30
    nets = build_networks(x.n, seed=0)
    out = forward_pair(x, x, nets, _config())
    np.testing.assert_allclose(out.C_xy.C.detach().numpy(), np.eye(6), atol=1e-8)
    assert out.parts["bij"].item() < 1e-14 and out.parts["orth"].item() < 1e-14
    pm = infer_match(x, x, nets, _config())
    np.testing.assert_array_equal(pm.target, np.arange(x.n))


def test_forward_outputs(pair30):
    x, y = pair30
    out = forward_pair(x, y, build_networks(30, seed=0), _config())
    assert out.C_xy.shape == (6, 6) and out.S_x.shape == (30, 30)
    assert set(out.parts) == {"bij", "orth", "lap", "cls"}
    P = out.S_x.P.detach().numpy()
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-9)


def test_siamese_swap(pair30):
    x, y = pair30
    nets = build_networks(30, seed=2)
    cfg = _config()
    a = forward_pair(x, y, nets, cfg)
    b = forward_pair(y, x, nets, cfg)
    torch.testing.assert_close(a.C_xy.C, b.C_yx.C, rtol=0, atol=1e-12)
    torch.testing.assert_close(a.S_x.log_P, b.S_y.log_P, rtol=0, atol=0)
    assert abs(a.total.item() - b.total.item()) <= 1e-10 * max(1.0, abs(a.total.item()))


def test_deterministic_forward(pair30):
    x, y = pair30
    cfg = _config(seed=5)
    v = [forward_pair(x, y, build_networks(30, seed=5), cfg).total.item() for _ in range(2)]
    assert v[0] == v[1]


def _flat_params(nets):
    return parameters_to_vector(list(nets.parameters())).detach().clone()


def _loss_at(x, y, nets, cfg, vec, iteration=None):
    vector_to_parameters(vec, list(nets.parameters()))
    with torch.no_grad():
        return float(forward_pair(x, y, nets, cfg, iteration).total)


@pytest.mark.parametrize("variant", [FULL, FEATURE_SIMILARITY, CLASSIFIER_FREE])
def test_pipeline_gradient_finite_differences(pair30, variant):
    x, y = pair30
    cfg = _config(variant=variant)
    nets = build_networks(30 if variant == FULL else None, seed=0)
    theta = _flat_params(nets)
    out = forward_pair(x, y, nets, cfg)
    backward_pair(out, nets)
    grad = torch.cat([p.grad.reshape(-1) for p in nets.parameters()])
    rng = np.random.default_rng(0)
    for _ in range(5):
        d = torch.as_tensor(rng.standard_normal(theta.numel()))
        d /= d.norm()
        h = 1e-5
        fd = (_loss_at(x, y, nets, cfg, theta + h * d) - _loss_at(x, y, nets, cfg, theta - h * d)) / (2 * h)
        an = float(grad @ d)
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)), (fd, an)
    vector_to_parameters(theta, list(nets.parameters()))


def test_detach_severs_classifier_path_into_C(pair30):
    x, y = pair30
    cfg = _config(detach_iters=10, total_iters=20)
    nets = build_networks(30, seed=0)
    feat = list(nets.feature.parameters())

    detached = forward_pair(x, y, nets, cfg, iteration=0)
    g_det = torch.autograd.grad(detached.parts["cls"], feat, retain_graph=True)
    live = forward_pair(x, y, nets, cfg, iteration=10)
    g_live = torch.autograd.grad(live.parts["cls"], feat, retain_graph=True)
    # manual zeroing: rebuild the loss from the live tensors with C cut out of the graph
    P_x, P_y = live.S_x.P, live.S_y.P
    manual = 0.5 * (
        loss_classifier(x.phi(), y.phi(), live.C_yx.C.detach(), (P_x, P_y))
        + loss_classifier(y.phi(), x.phi(), live.C_xy.C.detach(), (P_y, P_x))
    )
    g_manual = torch.autograd.grad(manual, feat)
    for a, b in zip(g_det, g_manual):
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-14)
    assert any(not torch.allclose(a, b) for a, b in zip(g_det, g_live))
    # structural losses still reach the feature network while detached
    g_bij = torch.autograd.grad(detached.parts["bij"], feat, allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in g_bij)


def test_zero_weights_zero_gradients(pair30):
    x, y = pair30
    cfg = _config(weights=LossWeights(0.0, 0.0, 0.0, 0.0))
    nets = build_networks(30, seed=0)
    grads = backward_pair(forward_pair(x, y, nets, cfg), nets)
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_nonfinite_gradient_raises(pair30):
    x, y = pair30
    nets = build_networks(30, seed=0)
    out = forward_pair(x, y, nets, _config())
    out.total = out.total * torch.tensor(float("nan"), dtype=torch.float64)
    with pytest.raises(NonFiniteGradientError):
        backward_pair(out, nets)


def test_pairs_and_universe(tiny_collection):
    _, shapes = tiny_collection
    assert collection_pairs(shapes, COMPLETE) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    assert collection_pairs(shapes, PARTIAL) == [(0, 1), (0, 2), (0, 3)]
    assert universe_size(shapes, COMPLETE) == max(s.n for s in shapes)
    with pytest.raises(ConfigError):
        collection_pairs(shapes[:1], COMPLETE)


def test_sampling_without_replacement(tiny_collection):
    _, shapes = tiny_collection
    state = train(shapes, _config(total_iters=12))
    seen = [h["pair"] for h in state.history]
    assert sorted(seen[:6]) == sorted(collection_pairs(shapes, COMPLETE))
    assert sorted(seen[6:]) == sorted(collection_pairs(shapes, COMPLETE))


def test_training_deterministic(tiny_collection):
    _, shapes = tiny_collection
    a = train(shapes, _config(total_iters=6, seed=1))
    b = train(shapes, _config(total_iters=6, seed=1))
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]


def test_checkpoint_resume_is_exact(tiny_collection, tmp_path):
    _, shapes = tiny_collection
    cfg = _config(total_iters=8, seed=2, detach_iters=3, log_every=2)
    straight = train(shapes, cfg)
    first = train(shapes, cfg, iters=4)
    save_checkpoint(first, tmp_path / "c.npz")
    resumed = load_checkpoint(tmp_path / "c.npz")
    assert resumed.iteration == 4 and resumed.queue == first.queue
    resumed = train(shapes, cfg, state=resumed)
    assert resumed.iteration == 8
    assert [h["total"] for h in resumed.history] == [h["total"] for h in straight.history]
    assert resumed.log_lines == straight.log_lines
    for k, v in straight.nets.named_tensors().items():
        assert torch.equal(v, resumed.nets.named_tensors()[k]), k


def test_train_writes_checkpoints(tiny_collection, tmp_path):
    _, shapes = tiny_collection
    train(shapes, _config(total_iters=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000002.npz", "ckpt_000004.npz", "final.npz"]


def test_single_pair_training_equals_fine_tuning(pair30):
    x, y = pair30
    cfg = _config(total_iters=3)
    state = init_state([x, y], cfg)
    base = state.nets.clone()
    train([x, y], cfg, state=state)
    tuned, _ = fine_tune(x, y, base, cfg, passes=3)
    for k, v in state.nets.named_tensors().items():
        torch.testing.assert_close(v, tuned.named_tensors()[k], rtol=0, atol=1e-12)


def test_fine_tune_contract(pair30):
    x, y = pair30
    cfg = _config()
    nets = build_networks(30, seed=0)
    before = {k: v.clone() for k, v in nets.named_tensors().items()}
    same, losses = fine_tune(x, y, nets, cfg, passes=0)
    assert len(losses) == 1
    for k, v in same.named_tensors().items():
        assert torch.equal(v, before[k])
    tuned, losses = fine_tune(x, y, nets, cfg)
    assert len(losses) == 6
    assert losses[-1] <= losses[0]
    for k, v in nets.named_tensors().items():
        assert torch.equal(v, before[k]), "base networks must stay untouched"


def test_inference_builds_no_functional_maps(tiny_collection):
    _, shapes = tiny_collection
    nets = build_networks(universe_size(shapes, COMPLETE), seed=0)
    before = FunctionalMap.instances
    infer_match(shapes[0], shapes[1], nets, _config())
    infer_collection(shapes, nets, _config())
    assert FunctionalMap.instances == before


def test_inferred_collection_cycle_consistent(tiny_collection):
    _, shapes = tiny_collection
    nets = build_networks(universe_size(shapes, COMPLETE), seed=0)
    for count in (2, 3, 4):
        _, maps = infer_collection(shapes[:count], nets, _config())
        assert check_cycle_consistency(maps).ok


def test_partial_forward(tiny_collection):
    col, shapes = tiny_collection
    from unimatch.eval.synthetic import make_partial

    part, _, _ = make_partial(col.meshes[1], "CUT", 0.3, seed=0, gt=col.gt[1])
    ys = prepare_shape(part, 8, "part")
    cfg = _config(mode=PARTIAL)
    nets = build_networks(shapes[0].n, seed=0)
    out = forward_pair(shapes[0], ys, nets, cfg)
    assert out.rank is not None and 0 <= out.rank <= 8
    assert out.total.item() == pytest.approx(
        (out.parts["bij"] + out.parts["orth"] + out.parts["cls"]).item(), rel=1e-12)
    backward_pair(out, nets)


def test_supervised_needs_labels(pair30):
    x, y = pair30
    with pytest.raises(ConfigError):
        forward_pair(x, y, build_networks(30, seed=0), _config(variant=SUPERVISED))


def test_variant_inference_shapes(tiny_collection):
    _, shapes = tiny_collection
    x, y = shapes[0], shapes[1]
    for variant in (CLASSIFIER_FREE, FEATURE_SIMILARITY):
        nets = build_networks(None, seed=0)
        pm = infer_match_variant(x, y, nets, _config(variant=variant))
        assert pm.n_source == x.n and pm.n_target == y.n


def test_classifier_free_has_no_classifier(tiny_collection):
    _, shapes = tiny_collection
    state = train(shapes, _config(variant=CLASSIFIER_FREE, total_iters=2))
    assert state.nets.classifier is None and state.d is None


def test_prepare_collection_partial_shares_shot_radius():
    from unimatch.descriptors import bbox_diagonal, shot
    from unimatch.eval import make_partial
    from unimatch.model import prepare_collection

    col = make_synthetic_collection(count=2, seed=0, subdivisions=2)
    part, _, _ = make_partial(col.meshes[1], "CUT", 0.4, seed=0)
    radius = 0.1 * bbox_diagonal(col.meshes[0].vertices)
    shapes = prepare_collection([col.meshes[0], part], 6, partial=True)
    np.testing.assert_array_equal(shapes[1].shot, shot(part, radius=radius).values)
    own = prepare_collection([col.meshes[0], part], 6)
    np.testing.assert_array_equal(own[1].shot, shot(part).values)
    assert not np.array_equal(own[1].shot, shapes[1].shot)
