"""Training-schedule tests: optimizer trace, phase contracts, determinism."""

import numpy as np
import pytest

import adanorm.trainer as tr
from adanorm import tensor as T
from adanorm.data import build_protocol, generate_bundle
from adanorm.losses import CentroidBank, EmbeddingBatch, cls_loss, depth_loss, \
    update_centroid_bank
from adanorm.model import Network, NetworkConfig
from adanorm.optim import Adam
from adanorm.tensor import TAG_ADAPTIVE, TAG_BASE, Tensor
from adanorm.trainer import (Batch, DomainSampler, ScheduleViolation,
                             TrainConfig, full_loss, meta_optimize,
                             meta_test_loss, meta_train_step,
                             normal_train_step, run_training, split_domains,
                             split_key, task_loss)

SIDE = 12
DEPTH = 3


def tiny_cfg(variant="adaptive"):
    return NetworkConfig(in_channels=6, widths=(4, 4), variant=variant,
                         input_side=SIDE, depth_map_side=DEPTH)


@pytest.fixture(scope="module")
def bundle():
    proto = build_protocol(4, held_out=3, train_per_domain=8,
                           test_per_domain=2, data_seed=7)
    return generate_bundle(proto, side=SIDE, depth_side=DEPTH)


def fresh_bank(model, bundle, gamma=0.9, seed=0):
    bank = CentroidBank(model.cfg.embed_dim, gamma)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(seed))
    batch = sampler.next_batch(sorted(bundle.train))
    with T.no_grad():
        trace = model.forward(batch.images, "train", update_stats=False)
    update_centroid_bank(bank, EmbeddingBatch(trace.embedding,
                                              batch.domain_ids, batch.labels))
    return bank


# -- Adam ---------------------------------------------------------------------

def test_adam_three_step_trace_exact():
    # reference values computed by hand for lr=0.1 and the canonical
    # moment recursion; gradients are exact binary fractions so every
    # intermediate rounds identically regardless of multiplication order
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    opt = Adam(0.1)
    for g in ([0.5, 0.5], [-0.25, 1.0], [0.0, -0.5]):
        opt.step(p, {"w": np.array(g)})
    assert np.array_equal(p["w"].data,
                          np.array([0.8527783689874682, -2.238527129124422]))
    state = opt.state_arrays()
    assert np.array_equal(state["adam.t"], np.array([3.0]))
    assert np.array_equal(state["adam.m.w"],
                          np.array([0.018, 0.08049999999999999]))
    assert np.array_equal(state["adam.v.w"],
                          np.array([0.0003119377500000003,
                                    0.0014985002500000012]))


def test_adam_state_starts_at_zero_moments():
    p = {"w": Tensor(np.array([4.0]), requires_grad=True)}
    opt = Adam(0.5)
    opt.step(p, {"w": np.array([2.0])})
    # first step: m_hat = g, v_hat = g^2, so the move is ~lr * sign(g)
    assert p["w"].data[0] == pytest.approx(4.0 - 0.5, abs=1e-7)


# -- config / split -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"beta1": 0.0}, {"beta2": -1.0}, {"lambda1": -0.1}, {"gamma": 1.0},
    {"epochs": 0}, {"batch_per_domain": 3}, {"batch_per_domain": 0},
    {"meta_mode": "second_order"}, {"max_iters": -1},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_split_is_deterministic_and_partitions():
    key = split_key(5, 17)
    a = split_domains([0, 1, 2], key)
    b = split_domains([2, 0, 1], key)
    assert a == b
    assert len(a.val) == 1
    assert sorted(a.trn + a.val) == [0, 1, 2]


def test_split_requires_two_domains():
    with pytest.raises(ValueError):
        split_domains([4], split_key(0, 0))


def test_split_val_domain_frequency_is_uniform():
    counts = {0: 0, 1: 0, 2: 0}
    n = 3000
    for i in range(n):
        counts[split_domains([0, 1, 2], split_key(11, i)).val[0]] += 1
    for d, c in counts.items():
        assert abs(c / n - 1 / 3) < 0.03, f"domain {d} drawn {c}/{n}"


# -- sampler --------------------------------------------------------------------

def test_sampler_batch_is_domain_and_class_balanced(bundle):
    sampler = DomainSampler(bundle, 4, np.random.default_rng(0))
    batch = sampler.next_batch([0, 1, 2])
    assert batch.images.shape == (12, 6, SIDE, SIDE)
    assert batch.depths.shape == (12, 1, DEPTH, DEPTH)
    for dom in (0, 1, 2):
        rows = batch.domain_ids == dom
        assert rows.sum() == 4
        assert batch.labels[rows].sum() == 2  # half real
    # deterministic group order: domains ascending, reals before fakes
    assert batch.domain_ids.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    assert batch.labels.tolist() == [1, 1, 0, 0] * 3


def test_sampler_covers_each_pool_without_repeats_within_epoch(bundle):
    sampler = DomainSampler(bundle, 4, np.random.default_rng(1))
    assert sampler.iters_per_epoch == 2  # pools of 4, two per draw
    seen: dict[tuple, list] = {}
    for _ in range(sampler.iters_per_epoch):
        b = sampler.next_batch([0, 1, 2])
        for dom, lab, img in zip(b.domain_ids, b.labels, b.images):
            seen.setdefault((dom, lab), []).append(img.tobytes())
    for key, imgs in seen.items():
        assert len(imgs) == 4 and len(set(imgs)) == 4, f"repeat in pool {key}"


def test_sampler_rejects_undersized_pools(bundle):
    with pytest.raises(ValueError, match="pool"):
        DomainSampler(bundle, 10, np.random.default_rng(0))


def test_batch_restrict_keeps_only_requested_domains(bundle):
    sampler = DomainSampler(bundle, 4, np.random.default_rng(2))
    batch = sampler.next_batch([0, 1, 2])
    sub = batch.restrict([1])
    assert set(sub.domain_ids.tolist()) == {1}
    assert len(sub.labels) == 4
    np.testing.assert_array_equal(sub.images, batch.images[4:8])


# -- loss composition -------------------------------------------------------------

def test_task_loss_matches_per_domain_sum(bundle):
    model = Network(tiny_cfg(), seed=0)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(3))
    batch = sampler.next_batch([0, 1, 2])
    trace = model.forward(batch.images, "train")
    got = task_loss(trace, batch).item()
    want = 0.0
    for dom in (0, 1, 2):
        idx = np.flatnonzero(batch.domain_ids == dom)
        want += cls_loss(T.take_rows(trace.logits, idx), batch.labels[idx]).item()
        want += depth_loss(T.take_rows(trace.depth, idx), batch.depths[idx]).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_full_loss_with_zero_weights_equals_task_loss(bundle):
    model = Network(tiny_cfg(), seed=0)
    bank = fresh_bank(model, bundle)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(4))
    batch = sampler.next_batch([0, 1, 2])
    trace = model.forward(batch.images, "train", update_stats=False)
    assert full_loss(trace, batch, bank, 0.0, 0.0).item() == \
        task_loss(trace, batch).item()


def test_full_loss_adds_weighted_alignment_terms(bundle):
    model = Network(tiny_cfg(), seed=0)
    bank = fresh_bank(model, bundle)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(4))
    batch = sampler.next_batch([0, 1, 2])
    trace = model.forward(batch.images, "train", update_stats=False)
    base = task_loss(trace, batch).item()
    loaded = full_loss(trace, batch, bank, 0.25, 0.5).item()
    from adanorm.losses import ics_loss, idc_loss
    emb = EmbeddingBatch(trace.embedding, batch.domain_ids, batch.labels)
    want = base + 0.25 * idc_loss(emb, bank).item() + 0.5 * ics_loss(emb, bank).item()
    assert loaded == pytest.approx(want, rel=1e-12)


# -- schedule phases --------------------------------------------------------------

def test_normal_step_moves_base_only_and_updates_buffers(bundle):
    model = Network(tiny_cfg(), seed=1)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(5))
    batch = sampler.next_batch([0, 1, 2])
    base = dict(model.params.items(TAG_BASE))
    base_before = {n: p.data.copy() for n, p in base.items()}
    adaptive_before = {n: p.data.copy()
                       for n, p in model.params.items(TAG_ADAPTIVE)}
    buf_before = {k: v.copy() for k, v in model.buffers().items()}
    loss, trace = normal_train_step(model, batch, Adam(0.01), base,
                                    expected_domains=[0, 1, 2])
    assert np.isfinite(loss)
    assert trace.embedding.shape == (12, 4)
    for n, p in model.params.items(TAG_ADAPTIVE):
        np.testing.assert_array_equal(p.data, adaptive_before[n])
    assert any(not np.array_equal(v, buf_before[k])
               for k, v in model.buffers().items()), "running stats never moved"
    assert any(not np.array_equal(p.data, base_before[n])
               for n, p in base.items()), "no base parameter moved"


def test_normal_step_rejects_wrong_domain_coverage(bundle):
    model = Network(tiny_cfg(), seed=1)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(5))
    batch = sampler.next_batch([0, 1])
    with pytest.raises(ValueError, match="span"):
        normal_train_step(model, batch, Adam(0.01),
                          dict(model.params.items(TAG_BASE)),
                          expected_domains=[0, 1, 2])


def test_meta_train_leaves_live_state_untouched(bundle):
    model = Network(tiny_cfg(), seed=2)
    bank = fresh_bank(model, bundle)
    cfg = TrainConfig(batch_per_domain=4)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(6))
    batch = sampler.next_batch([0, 1, 2]).restrict([0, 1])
    params_before = {n: p.data.copy() for n, p in model.params.items()}
    buf_before = {k: v.copy() for k, v in model.buffers().items()}
    loss, grads, shadow = meta_train_step(model, batch, bank, cfg, (0, 1))
    assert np.isfinite(loss)
    for n, p in model.params.items():
        np.testing.assert_array_equal(p.data, params_before[n])
    for k, v in model.buffers().items():
        np.testing.assert_array_equal(v, buf_before[k])
    for n in grads:
        np.testing.assert_array_equal(
            shadow[n], model.params[n].data - cfg.beta1 * grads[n])
    assert set(grads) == set(model.adaptive_param_names())


def test_meta_train_rejects_leaked_val_rows(bundle):
    model = Network(tiny_cfg(), seed=2)
    bank = fresh_bank(model, bundle)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(6))
    batch = sampler.next_batch([0, 1, 2])
    with pytest.raises(ValueError, match="non-train"):
        meta_train_step(model, batch, bank, TrainConfig(), (0, 1))


def test_meta_test_evaluates_at_shadow_and_restores_bitwise(bundle):
    model = Network(tiny_cfg(), seed=3)
    bank = fresh_bank(model, bundle)
    cfg = TrainConfig(beta1=0.5, batch_per_domain=4)  # big shadow offset
    sampler = DomainSampler(bundle, 4, np.random.default_rng(7))
    batch = sampler.next_batch([0, 1, 2])
    trn, val = batch.restrict([0, 1]), batch.restrict([2])
    originals = {n: p.data for n, p in model.params.items(TAG_ADAPTIVE)}

    _, grads, shadow = meta_train_step(model, trn, bank, cfg, (0, 1))
    loss_shadow, g_shadow = meta_test_loss(model, val, bank, cfg, shadow, (2,))

    # the very same array objects are back in place
    for n, p in model.params.items(TAG_ADAPTIVE):
        assert p.data is originals[n]

    # evaluating "shadow = live" must give different numbers than the real
    # shadow point whenever the inner step actually moved something
    live = {n: p.data.copy() for n, p in model.params.items(TAG_ADAPTIVE)}
    loss_live, g_live = meta_test_loss(model, val, bank, cfg, live, (2,))
    assert loss_shadow != loss_live
    assert any(not np.array_equal(g_shadow[n], g_live[n]) for n in g_shadow)


def test_meta_test_rejects_train_rows(bundle):
    model = Network(tiny_cfg(), seed=3)
    bank = fresh_bank(model, bundle)
    sampler = DomainSampler(bundle, 4, np.random.default_rng(7))
    batch = sampler.next_batch([0, 1, 2])
    shadow = {n: p.data.copy() for n, p in model.params.items(TAG_ADAPTIVE)}
    with pytest.raises(ValueError, match="non-val"):
        meta_test_loss(model, batch, bank, TrainConfig(), shadow, (2,))


# -- meta_optimize ----------------------------------------------------------------

def test_meta_optimize_first_order_arithmetic():
    p = {"a": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    meta_optimize(p, {"a": np.array([0.5, -0.5])}, {"a": np.array([1.0, 1.0])},
                  beta1=0.1, beta2=0.01, mode="first_order")
    np.testing.assert_allclose(p["a"].data,
                               [1.0 - 0.01 * 1.5, 2.0 - 0.01 * 0.5],
                               rtol=0, atol=1e-15)


def test_meta_optimize_exact_small_matches_quadratic_chain_rule():
    # train loss 0.5 t'At + b't has gradient At + b and Hessian A, so the
    # exact meta direction is g_trn + (I - beta1 A) g_val; central
    # differences on a linear gradient field reproduce A v to rounding
    rng = np.random.default_rng(42)
    q = rng.normal(size=(3, 3))
    A = q @ q.T + 3.0 * np.eye(3)
    b = rng.normal(size=3)
    theta0 = rng.normal(size=3)
    beta1, beta2 = 0.05, 0.02

    g_trn = A @ theta0 + b
    shadow = theta0 - beta1 * g_trn
    g_val = 2.0 * shadow + 1.0  # val loss |t|^2 + sum(t), gradient 2t + 1

    p = {"theta": Tensor(theta0.copy(), requires_grad=True)}

    def grad_fn():
        return {"theta": A @ p["theta"].data + b}

    meta_optimize(p, {"theta": g_trn}, {"theta": g_val}, beta1, beta2,
                  mode="exact_small", grad_fn=grad_fn)
    want = theta0 - beta2 * (g_trn + g_val - beta1 * (A @ g_val))
    np.testing.assert_allclose(p["theta"].data, want, rtol=1e-8, atol=1e-10)
    # probing must not disturb the stored parameter beyond the update
    assert p["theta"].data.shape == (3,)


def test_meta_optimize_exact_small_guards():
    big = {"w": Tensor(np.zeros(60), requires_grad=True)}
    g = {"w": np.zeros(60)}
    with pytest.raises(ValueError, match="exact_small"):
        meta_optimize(big, g, g, 0.1, 0.1, mode="exact_small",
                      grad_fn=lambda: g)
    small = {"w": Tensor(np.zeros(3), requires_grad=True)}
    gs = {"w": np.zeros(3)}
    with pytest.raises(ValueError, match="grad_fn"):
        meta_optimize(small, gs, gs, 0.1, 0.1, mode="exact_small")


def test_meta_optimize_rejects_shape_mismatch():
    p = {"a": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError, match="shape"):
        meta_optimize(p, {"a": np.zeros(3)}, {"a": np.zeros(2)}, 0.1, 0.1)


# -- full loop ---------------------------------------------------------------------

def test_run_training_is_deterministic_and_moves_both_partitions(bundle):
    def run():
        model = Network(tiny_cfg(), seed=11)
        res = run_training(model, bundle, TrainConfig(batch_per_domain=4,
                                                      epochs=1, seed=5))
        return model, res

    m1, r1 = run()
    m2, r2 = run()
    for (n1, p1), (_, p2) in zip(m1.params.items(), m2.params.items()):
        np.testing.assert_array_equal(p1.data, p2.data, err_msg=n1)
    assert r1.records == r2.records
    assert r1.iterations == 2 and r1.epochs == 1

    init = Network(tiny_cfg(), seed=11)
    base_moved = any(not np.array_equal(m1.params[n].data, init.params[n].data)
                     for n in init.base_param_names())
    adaptive_moved = any(
        not np.array_equal(m1.params[n].data, init.params[n].data)
        for n in init.adaptive_param_names())
    assert base_moved and adaptive_moved


def test_run_training_records_carry_losses_and_alpha(bundle):
    model = Network(tiny_cfg(), seed=12)
    res = run_training(model, bundle, TrainConfig(batch_per_domain=4, seed=2))
    train_recs = [r for r in res.records if r["kind"] == "train"]
    assert len(train_recs) == res.iterations
    for r in train_recs:
        assert np.isfinite(r["loss_base"])
        assert np.isfinite(r["loss_meta_train"])
        assert np.isfinite(r["loss_meta_val"])
        assert r["val_domain"] in (0, 1, 2)
        assert len(r["alpha_mean"]) == 2
        assert all(0.0 < a < 1.0 for a in r["alpha_mean"])


def test_run_training_erm_matches_reference_loop(bundle):
    cfg = TrainConfig(batch_per_domain=4, epochs=1, seed=9)
    model = Network(tiny_cfg("bn"), seed=13)
    run_training(model, bundle, cfg, use_meta=False)

    ref = Network(tiny_cfg("bn"), seed=13)
    sampler = DomainSampler(bundle, cfg.batch_per_domain,
                            np.random.default_rng(
                                np.random.SeedSequence((cfg.seed, 0xBA7C))))
    opt = Adam(cfg.beta1)
    allp = dict(ref.params.items())
    for _ in range(sampler.iters_per_epoch):
        batch = sampler.next_batch([0, 1, 2])
        ref.params.zero_grad()
        trace = ref.forward(batch.images, "train")
        task_loss(trace, batch).backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in allp.items()}
        opt.step(allp, grads)
        ref.apply_constraints()

    for n, p in ref.params.items():
        np.testing.assert_array_equal(model.params[n].data, p.data, err_msg=n)
    for k, v in ref.buffers().items():
        np.testing.assert_array_equal(model.buffers()[k], v, err_msg=k)


def test_run_training_meta_off_for_variant_without_adaptive_params(bundle):
    model = Network(tiny_cfg("in"), seed=14)
    res = run_training(model, bundle, TrainConfig(batch_per_domain=4, seed=3))
    assert all(r["loss_meta_train"] is None for r in res.records
               if r["kind"] == "train")


def test_run_training_centroid_bank_covers_all_groups(bundle):
    model = Network(tiny_cfg(), seed=15)
    res = run_training(model, bundle, TrainConfig(batch_per_domain=4, seed=4))
    keys = set(res.bank.state_arrays())
    assert {"centroid.domain.0", "centroid.domain.1", "centroid.domain.2",
            "centroid.cls.real", "centroid.cls.fake"} <= keys


def test_run_training_eval_cadence_and_epoch_hook(bundle):
    model = Network(tiny_cfg(), seed=16)
    evals, epochs = [], []
    res = run_training(
        model, bundle,
        TrainConfig(batch_per_domain=4, epochs=2, eval_every=1, seed=6),
        eval_fn=lambda m, it: evals.append(it) or {"marker": it},
        epoch_fn=epochs.append)
    assert res.iterations == 4
    assert evals == [0, 1, 2, 3]          # eval_every=1: every iteration
    assert epochs == [0, 1]               # per-epoch hook at each boundary
    eval_recs = [r for r in res.records if r["kind"] == "eval"]
    assert [r["marker"] for r in eval_recs] == [0, 1, 2, 3]


def test_run_training_respects_max_iters(bundle):
    model = Network(tiny_cfg(), seed=17)
    res = run_training(model, bundle,
                       TrainConfig(batch_per_domain=4, epochs=5, max_iters=3,
                                   seed=7))
    assert res.iterations == 3


def test_run_training_audit_catches_contract_breach(bundle, monkeypatch):
    real = tr.meta_test_loss

    def leaky(model, batch, bank, cfg, shadow, val_domains):
        out = real(model, batch, bank, cfg, shadow, val_domains)
        next(iter(dict(model.params.items(TAG_ADAPTIVE)).values())).data += 1.0
        return out

    monkeypatch.setattr(tr, "meta_test_loss", leaky)
    model = Network(tiny_cfg(), seed=18)
    with pytest.raises(ScheduleViolation, match="leaked"):
        run_training(model, bundle, TrainConfig(batch_per_domain=4, seed=8))


def test_run_training_exact_small_mode_runs_on_tiny_gate_head(bundle):
    # single-channel blocks keep the whole fusion head (gates + affine)
    # under the exact_small parameter ceiling
    model = Network(NetworkConfig(in_channels=6, widths=(1, 1),
                                  variant="adaptive", input_side=SIDE,
                                  depth_map_side=DEPTH), seed=19)
    dim = sum(model.params[n].data.size for n in model.adaptive_param_names())
    assert dim <= 50, f"test premise broken: {dim} adaptive params"
    res = run_training(model, bundle,
                       TrainConfig(batch_per_domain=4, max_iters=2, seed=9,
                                   meta_mode="exact_small"))
    assert res.iterations == 2
    for r in res.records:
        if r["kind"] == "train":
            assert np.isfinite(r["loss_meta_val"])
