import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import tiny_config
from oracles import all_dags_count
from acmesim.data import SyntheticTask
from acmesim.nas.controller import Controller, update_controller
from acmesim.nas.header import HeaderDims, HeaderNet
from acmesim.nas.search import (NASConfig, child_loss, init_search, mc_gradient,
                                random_baseline, run_phase2_stage1, train_shared_weights)
from acmesim.nas.space import (BlockSpec, HeaderDAG, OperationSet,
                               enumerate_dags, random_dag, search_space_size)
from acmesim.nn.network import forward, grad_check, tensor_grads
from acmesim.nn.tensor import Tensor
from acmesim.nn import tensor as T
from acmesim.nn.transformer import Classifier, ViTBackbone


def backbone(seed=0, **kw):
    return ViTBackbone(tiny_config(seed=seed, **kw))


def toy_data(seed=0, n=256):
    return SyntheticTask(3, 4, 5, signal=1.0, seed=seed).sample(n, np.random.default_rng(seed))


# ---------------------------------------------------------------- space


def test_space_size_examples():
    assert search_space_size(1, 7) == 196
    assert search_space_size(2, 7) == 86436
    assert search_space_size(1, 1) == 4
    with pytest.raises(ValueError):
        search_space_size(0, 7)


@pytest.mark.parametrize("B", [1, 2])
@pytest.mark.parametrize("n_ops", [2, 3, 7])
def test_space_size_matches_enumeration(B, n_ops):
    assert search_space_size(B, n_ops) == all_dags_count(B, n_ops)
    assert sum(1 for _ in enumerate_dags(B, n_ops)) == search_space_size(B, n_ops)


def test_space_size_is_exact_integer():
    n = search_space_size(12, 7)
    assert isinstance(n, int) and n > 2 ** 64


def test_block_validation():
    with pytest.raises(ValueError):
        HeaderDAG((BlockSpec(2, 0, 0, 0),))
    with pytest.raises(ValueError):
        HeaderDAG((BlockSpec(0, 0, 7, 0),))
    with pytest.raises(ValueError):
        HeaderDAG(())
    with pytest.raises(ValueError):
        HeaderDAG.from_decisions([0, 1, 2])
    dag = HeaderDAG((BlockSpec(0, 1, 3, 3), BlockSpec(2, 1, 0, 5)))
    assert dag.loose_ends() == [1]
    assert HeaderDAG.from_json(dag.to_json()) == dag


def test_dag_rejects_other_opset_version():
    d = HeaderDAG((BlockSpec(1, 1, 3, 3),)).to_dict()
    d["opset_version"] = 99
    with pytest.raises(ValueError):
        HeaderDAG.from_dict(d)


def test_operation_set_checks():
    with pytest.raises(ValueError):
        OperationSet(("conv1x1", "conv1x1"))
    with pytest.raises(ValueError):
        OperationSet(("warp",))
    assert len(OperationSet.first(3)) == 3


# ---------------------------------------------------------------- controller


def test_initial_policy_uniform():
    ctrl = Controller.for_space(2, OperationSet(), hidden=100, seed=0)
    s = ctrl.sample(10_000, np.random.default_rng(0))
    for t, k in enumerate(ctrl.supports):
        counts = np.bincount(s.actions[:, t], minlength=k)
        assert chisquare(counts).pvalue > 1e-3, (t, counts)
    np.testing.assert_allclose(s.log_probs, -np.log(np.prod(ctrl.supports)), atol=1e-12)


def test_sampled_dags_are_valid():
    ctrl = Controller.for_space(3, OperationSet(), hidden=16, seed=1)
    for p in ctrl.named_parameters().values():
        p.data = p.data + np.random.default_rng(2).normal(0, 0.5, p.shape)
    s = ctrl.sample(10_000, np.random.default_rng(3))
    for a in s.actions:
        ctrl.to_dag(a)  # raises on any out-of-range selector
    assert s.actions.shape == (10_000, 12)


def test_argmax_decode_is_deterministic():
    ctrl = Controller.for_space(2, OperationSet(), hidden=16, seed=4)
    for p in ctrl.named_parameters().values():
        p.data = p.data + np.random.default_rng(5).normal(0, 0.3, p.shape)
    a = ctrl.argmax()
    assert np.array_equal(a, ctrl.argmax())
    assert np.array_equal(a, ctrl.sample(3, None, temperature=0.0).actions[0])


def test_equal_rewards_at_baseline_do_not_move_policy():
    ctrl = Controller.for_space(1, OperationSet.first(3), hidden=8, seed=0)
    ctrl.baseline = 0.4
    before = {k: t.data.copy() for k, t in ctrl.policy_params.items()}
    s = ctrl.sample(6, np.random.default_rng(0))
    grads = ctrl.update(s.actions, np.full(6, 0.4), lr=1.0)
    assert all(np.all(g == 0) for g in grads.values())
    for k, t in ctrl.policy_params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_reinforce_converges_on_two_arch_space():
    ctrl = Controller([2], hidden=8, seed=0)
    rng = np.random.default_rng(0)
    for step in range(500):
        s = ctrl.sample(4, rng)
        update_controller(ctrl, (s.actions[:, 0] == 0).astype(float), s.actions, lr=0.5)
        if ctrl.probabilities(np.array([[0]]))[0] > 0.9:
            break
    assert ctrl.probabilities(np.array([[0]]))[0] > 0.9
    assert step < 500


def _perturbed(supports, seed, scale=0.5):
    ctrl = Controller(supports, hidden=6, seed=seed)
    r = np.random.default_rng(seed)
    for t in ctrl.named_parameters().values():
        t.data = t.data + r.normal(0, scale, t.shape)
    return ctrl


def _all_actions(supports):
    import itertools
    return np.array(list(itertools.product(*[range(k) for k in supports])))


def test_policy_gradient_matches_finite_difference():
    ctrl = _perturbed([4], seed=1)
    acts = _all_actions(ctrl.supports)
    R = np.array([0.1, 0.9, 0.3, 0.5])

    def J():
        return float((ctrl.probabilities(acts) * R).sum())

    g = ctrl.policy_gradient(acts, R, weights=ctrl.probabilities(acts), baseline=0.0)
    ana, num = [], []
    h = 1e-6
    for k, t in ctrl.policy_params.items():
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            jp = J()
            flat[i] = keep - h
            jm = J()
            flat[i] = keep
            num.append((jp - jm) / (2 * h))
            ana.append(g[k].reshape(-1)[i])
    ana, num = np.array(ana), np.array(num)
    cos = ana @ num / (np.linalg.norm(ana) * np.linalg.norm(num))
    assert cos >= 0.99
    np.testing.assert_allclose(ana, num, atol=1e-7)


def test_reinforce_estimator_unbiased():
    ctrl = _perturbed([2, 3], seed=2)
    acts = _all_actions(ctrl.supports)
    R = np.array([0.2, 1.0, 0.4, 0.0, 0.7, 0.5])
    pi = ctrl.probabilities(acts)
    # per-action score function vectors, flattened
    rows = []
    for a in acts:
        g = ctrl.policy_gradient(a[None], np.array([1.0]), weights=np.array([1.0]), baseline=0.0)
        rows.append(np.concatenate([g[k].reshape(-1) for k in sorted(g)]))
    S = np.array(rows)  # grad log pi(a) for each a
    exact = (pi * R) @ S
    n = 50_000
    s = ctrl.sample(n, np.random.default_rng(3))
    idx = np.ravel_multi_index(s.actions.T, ctrl.supports)
    freq = np.bincount(idx, minlength=len(acts)) / n
    terms = R[:, None] * S  # value of R * grad log pi per action
    mean = freq @ terms
    var = freq @ (terms ** 2) - mean ** 2
    se = np.sqrt(var / n)
    mask = se > 0
    assert np.all(np.abs(mean - exact)[mask] <= 3 * se[mask] + 1e-12)
    assert np.allclose(mean[~mask], exact[~mask], atol=1e-12)


# ---------------------------------------------------------------- header


def _dims(cfg):
    return HeaderDims.for_backbone(cfg, channels=4, mlp_hidden=6)


def test_identity_block_header():
    cfg = tiny_config(depth=2)
    bb = ViTBackbone(cfg)
    dag = HeaderDAG((BlockSpec(1, 1, 3, 3),), opset=OperationSet())
    head = HeaderNet(dag, HeaderDims.for_backbone(cfg), 3)
    x = np.random.default_rng(0).standard_normal((5, 4, 5))
    out = forward(Classifier(bb, head), x)
    assert out.shape == (5, 3)
    # the tail sees 2 * mean(final grid) next to the CLS token
    feats = forward(bb, x)
    z = np.concatenate([2 * feats[:, 1:, :].mean(axis=1), feats[:, 0, :]], axis=1)
    P = head.params
    hdn = T.gelu(Tensor(z @ P[f"{head.fc1}.w"].data + P[f"{head.fc1}.b"].data)).data
    np.testing.assert_allclose(out, hdn @ P["tail.fc2.w"].data + P["tail.fc2.b"].data,
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_random_header_grad_check(seed):
    cfg = tiny_config(depth=2, seed=seed)
    rng = np.random.default_rng(seed)
    dag = random_dag(2, rng, repeats=2, opset=OperationSet())
    net = Classifier(ViTBackbone(cfg), HeaderNet(dag, _dims(cfg), 3, seed=seed))
    for t in net.named_parameters().values():
        t.data = t.data * 5
    rep = grad_check(net, rng.standard_normal((2, 4, 5)), probes=120, seed=seed)
    assert rep.max_rel_error < 1e-4, (dag.describe(), rep.failures[:3])


def test_repeated_sections_double_parameters():
    cfg = tiny_config()
    dag = HeaderDAG((BlockSpec(1, 0, 1, 0), BlockSpec(2, 1, 2, 3)), repeats=2)
    head = HeaderNet(dag, HeaderDims.for_backbone(cfg), 3)
    one = HeaderNet(HeaderDAG(dag.blocks, 1), HeaderDims.for_backbone(cfg), 3)
    assert head.section_param_count(0) == head.section_param_count(1) > 0
    assert head.section_param_count(0) == one.section_param_count(0)
    assert not set(head.sections[0]) & set(head.sections[1])


def test_downsample_branches_align():
    cfg = tiny_config(num_patches=16, patch_dim=5)
    dag = HeaderDAG((BlockSpec(1, 1, 4, 1), BlockSpec(2, 0, 4, 0)))
    net = Classifier(ViTBackbone(cfg), HeaderNet(dag, HeaderDims.for_backbone(cfg), 3))
    out = forward(net, np.random.default_rng(0).standard_normal((2, 16, 5)))
    assert out.shape == (2, 3) and np.all(np.isfinite(out))


# ---------------------------------------------------------------- weight sharing


def test_shared_bundle_reaches_every_child():
    cfg = tiny_config()
    state = init_search(ViTBackbone(cfg), 3, NASConfig(B=2, controller_hidden=8), seed=0)
    rng = np.random.default_rng(0)
    dags = [random_dag(2, rng) for _ in range(5)]
    x = rng.standard_normal((3, 4, 5))
    before = [forward(state.child(d), x) for d in dags]
    for t in state.shared.params.values():
        t.data = t.data + 0.5
    after = [forward(state.child(d), x) for d in dags]
    for a, b in zip(before, after):
        assert not np.allclose(a, b)
    a, b = state.child(dags[0]).header, state.child(dags[0]).header
    for k in a.params:
        assert a.params[k] is b.params[k]


def test_mc_gradient_is_mean_of_children():
    cfg = tiny_config()
    state = init_search(ViTBackbone(cfg), 3, NASConfig(B=2, controller_hidden=8), seed=1)
    rng = np.random.default_rng(1)
    dags = [random_dag(2, rng) for _ in range(3)]
    data = toy_data(1, 32)
    grads, st = mc_gradient(state, dags, data.x, data.y)
    assert st.used == 3 and st.skipped == 0
    singles = [mc_gradient(state, [d], data.x, data.y)[0] for d in dags]
    for k, g in grads.items():
        parts = [s.get(k, 0.0) for s in singles]
        np.testing.assert_allclose(g, sum(parts) / 3, atol=1e-10)


def test_single_child_is_plain_sgd():
    cfg = tiny_config()
    state = init_search(ViTBackbone(cfg), 3, NASConfig(B=1, controller_hidden=8), seed=2)
    data = toy_data(2, 32)
    dag = random_dag(1, np.random.default_rng(0))
    net = state.child(dag)
    net.zero_grad()
    T.cross_entropy(net(Tensor(data.x)), data.y).backward()
    want = tensor_grads(net)
    net.clear_cache()
    got, _ = mc_gradient(state, [dag], data.x, data.y)
    for k, g in want.items():
        key = "shared." + k[len("header."):] if k.startswith("header.") else k
        np.testing.assert_array_equal(got[key], g)


def test_shared_training_lowers_child_loss():
    for seed in range(3):
        cfg = tiny_config(seed=seed)
        state = init_search(ViTBackbone(cfg), 3, NASConfig(B=2, controller_hidden=8), seed)
        data = toy_data(seed, 384)
        train, val = data.take(np.arange(256)), data.take(np.arange(256, 384))
        rng = np.random.default_rng(seed)
        probe = [random_dag(2, np.random.default_rng([seed, i])) for i in range(8)]
        start = np.mean([child_loss(state, d, val) for d in probe])
        train_shared_weights(state, train, M=4, steps=300, lr=0.05, batch_size=32, rng=rng)
        end = np.mean([child_loss(state, d, val) for d in probe])
        assert end <= 0.8 * start, (seed, start, end)


# ---------------------------------------------------------------- stage driver


def test_zero_budget_returns_initial_argmax():
    cfg = NASConfig(B=2, budget=0, controller_hidden=8)
    res = run_phase2_stage1(backbone(), toy_data(), 3, cfg, np.random.default_rng(0), seed=3)
    fresh = init_search(backbone(), 3, cfg, seed=3).controller
    assert res.dag == fresh.to_dag(fresh.argmax())
    assert res.history == []


def test_search_is_deterministic():
    cfg = NASConfig(B=2, budget=2, shared_steps=2, M=2, controller_samples=3,
                    controller_hidden=8)
    runs = [run_phase2_stage1(backbone(), toy_data(), 3, cfg, np.random.default_rng(7), seed=7)
            for _ in range(2)]
    assert runs[0].dag == runs[1].dag
    assert runs[0].history == runs[1].history


def test_search_beats_random_median():
    wins = 0
    for seed in range(5):
        cfg = NASConfig(B=2, budget=8, shared_steps=8, M=2, controller_samples=6,
                        controller_hidden=16, lr_controller=1.0)
        data = toy_data(seed, 384)
        rng = np.random.default_rng(seed)
        res = run_phase2_stage1(backbone(seed), data, 3, cfg, rng, seed=seed)
        val = data.take(np.arange(256, 384))
        ours = float((forward(res.state.child(res.dag), val.x).argmax(1) == val.y).mean())
        base = random_baseline(res.state, val, 20, 2, 1, cfg.opset, np.random.default_rng(seed))
        wins += ours >= np.median(base)
    assert wins >= 4


def test_coarse_header_follows_search_result():
    cfg = NASConfig(B=1, budget=1, shared_steps=1, M=1, controller_samples=2,
                    controller_hidden=8, finetune_steps=5)
    res = run_phase2_stage1(backbone(), toy_data(), 3, cfg, np.random.default_rng(0), seed=0)
    head = res.coarse_header()
    assert head.dag == res.dag
    assert all(k in res.state.shared.params for k in head.params)
