import numpy as np
import pytest

import faircda.autodiff as ad
import faircda.nn as nn
from faircda.data import LabeledBatch, SynthSpec, synth_generate, group_balanced_batch
from faircda.disentangle import (FairCdaArch, FairCdaNetwork, branch_losses,
                                 orth_loss, resolve_beta, stage1_objective,
                                 task_loss)


def tiny_net(seed=3, input_dim=5, hidden=7, branch=6):
    return FairCdaNetwork.build(FairCdaArch(input_dim, hidden, branch), seed=seed)


def tiny_batch(seed=0, n=4, dim=5):
    rng = np.random.default_rng(seed)
    return LabeledBatch(x=rng.standard_normal((n, dim)),
                        y=(rng.random(n) < 0.5).astype(float),
                        a=(rng.random(n) < 0.5).astype(float))


class TestNetworkStructure:
    def test_extract_shapes_and_determinism(self):
        net = tiny_net()
        x = np.random.default_rng(1).standard_normal((9, 5))
        z1, zy1, za1 = net.extract(ad.constant(x))
        z2, zy2, za2 = net.extract(ad.constant(x))
        assert z1.shape == (9, 7) and zy1.shape == (9, 6) and za1.shape == (9, 6)
        assert np.array_equal(zy1.data, zy2.data)

    def test_zero_weight_net_zero_features(self):
        net = tiny_net()
        net.store.load_state_dict({n: np.zeros_like(t.data) for n, t in net.store.items()})
        z, zy, za = net.extract(ad.constant(np.ones((3, 5))))
        assert np.all(z.data == 0) and np.all(zy.data == 0) and np.all(za.data == 0)

    def test_imputation_copy_immutable(self):
        net = tiny_net()
        net.freeze_imputation()
        with pytest.raises(ValueError):
            net.imputation_state["g.0.W"][0, 0] = 99.0

    def test_groups_registered_once(self):
        net = tiny_net()
        assert set(net.store.groups()) == {"h", "h_y", "h_a", "g_y", "g_a", "g", "g_aug"}
        names = net.store.names()
        assert len(names) == len(set(names)) == 16


class TestBranchLosses:
    def test_half_predictions_give_ln2(self):
        net = tiny_net()
        for name in ("g_y.0", "g_a.0"):
            net.store.tensor(name + ".W").data = np.zeros_like(
                net.store.tensor(name + ".W").data)
            net.store.tensor(name + ".b").data = np.zeros_like(
                net.store.tensor(name + ".b").data)
        batch = tiny_batch()
        _, zy, za = net.extract(ad.constant(batch.x))
        l_y, l_a = branch_losses(net, zy, za, batch.y, batch.a)
        assert l_y.item() == pytest.approx(np.log(2.0))
        assert l_a.item() == pytest.approx(np.log(2.0))

    def test_confident_wrong_prediction(self):
        # head forced to ~0.9 while labels are 0 -> -ln(0.1)
        p = ad.constant(np.full((3, 1), 0.9))
        t = ad.constant(np.zeros((3, 1)))
        assert ad.mean_all(ad.bce(p, t)).item() == pytest.approx(-np.log(0.1))

    def test_perfect_prediction_clamp_floor(self):
        p = ad.constant(np.ones((3, 1)))
        t = ad.constant(np.ones((3, 1)))
        val = ad.mean_all(ad.bce(p, t)).item()
        assert 0 < val < 2e-7


class TestOrthLoss:
    def _orth_from_grads(self, gy_rows, ga_rows):
        """Build a graph whose branch-loss gradients at z are the given rows."""
        n, d = np.shape(gy_rows)
        z = ad.constant(np.zeros((n, d)))
        l_y = ad.sum_all(ad.mul(z, ad.constant(np.asarray(gy_rows, float))))
        l_a = ad.sum_all(ad.mul(z, ad.constant(np.asarray(ga_rows, float))))
        return orth_loss(l_y, l_a, z).item()

    def test_orthogonal_gradients(self):
        assert self._orth_from_grads([[1, 0]], [[0, 1]]) == pytest.approx(0.0)

    def test_parallel_gradients(self):
        assert self._orth_from_grads([[1, 1]], [[2, 2]]) == pytest.approx(1.0)

    def test_cos2_45_degrees(self):
        assert self._orth_from_grads([[1, 0]], [[1, 1]]) == pytest.approx(0.5)

    def test_batch_average(self):
        val = self._orth_from_grads([[1, 0], [1, 1]], [[0, 1], [2, 2]])
        assert val == pytest.approx(0.5)  # mean of 0 and 1

    def test_zero_gradient_guard(self):
        assert self._orth_from_grads([[0, 0]], [[1, 1]]) == 0.0

    def test_in_unit_interval_on_random_networks(self):
        for seed in range(15):
            net = tiny_net(seed=seed)
            batch = tiny_batch(seed=seed, n=6)
            z, zy, za = net.extract(ad.constant(batch.x))
            l_y, l_a = branch_losses(net, zy, za, batch.y, batch.a)
            val = orth_loss(l_y, l_a, z).item()
            assert 0.0 <= val <= 1.0 + 1e-12

    def test_invariant_to_branch_loss_rescaling(self):
        net = tiny_net(seed=5)
        batch = tiny_batch(seed=5, n=5)
        z, zy, za = net.extract(ad.constant(batch.x))
        l_y, l_a = branch_losses(net, zy, za, batch.y, batch.a)
        base = orth_loss(l_y, l_a, z).item()
        scaled = orth_loss(ad.scale(l_y, 7.3), l_a, z).item()
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_differentiable_wrt_upstream_parameters(self):
        from conftest import checkable_case
        net, batch = checkable_case(seed=6, n=3)
        params = [net.store.tensor(n) for n in net.store.names()
                  if n.split(".")[0] in ("h", "h_y", "h_a", "g_y", "g_a")]

        def f(ps):
            z, zy, za = net.extract(ad.constant(batch.x))
            l_y, l_a = branch_losses(net, zy, za, batch.y, batch.a)
            return orth_loss(l_y, l_a, z)

        assert ad.finite_diff_check(f, params, eps=2e-4) <= 1e-4


class TestTaskLoss:
    def test_half_output_ln2(self):
        net = tiny_net()
        for head in ("g.0", "g_aug.0"):
            net.store.tensor(head + ".W").data = np.zeros_like(net.store.tensor(head + ".W").data)
        batch = tiny_batch()
        _, zy, za = net.extract(ad.constant(batch.x))
        assert task_loss(net, zy, za, batch.y).item() == pytest.approx(np.log(2.0))
        assert task_loss(net, zy, za, batch.y, use_aug_head=True).item() == pytest.approx(np.log(2.0))

    def test_batch_mean_equals_mean_of_singletons(self):
        net = tiny_net(seed=7)
        batch = tiny_batch(seed=7, n=5)
        _, zy, za = net.extract(ad.constant(batch.x))
        whole = task_loss(net, zy, za, batch.y).item()
        singles = []
        for i in range(5):
            _, zyi, zai = net.extract(ad.constant(batch.x[i:i + 1]))
            singles.append(task_loss(net, zyi, zai, batch.y[i:i + 1]).item())
        assert whole == pytest.approx(np.mean(singles), rel=1e-12)


def numpy_stage1_oracle(net, batch, beta):
    """Independent evaluation of the first-stage objective with plain numpy."""
    def dense(name, x, act):
        w = net.store.tensor(name + ".W").data
        b = net.store.tensor(name + ".b").data
        out = x @ w + b
        if act == "relu":
            return np.maximum(out, 0.0)
        return 1.0 / (1.0 + np.exp(-out))

    def bce(p, t):
        p = np.clip(p, 1e-7, 1 - 1e-7)
        return -(t * np.log(p) + (1 - t) * np.log(1 - p))

    x = batch.x
    h0 = dense("h.0", x, "relu")
    z = dense("h.1", h0, "relu")
    zy = dense("h_y.0", z, "relu")
    za = dense("h_a.0", z, "relu")
    y = batch.y.reshape(-1, 1)
    a = batch.a.reshape(-1, 1)
    n = len(x)
    task = bce(dense("g.0", np.concatenate([zy, za], axis=1), "sigmoid"), y).mean()
    l_y = bce(dense("g_y.0", zy, "sigmoid"), y).mean()
    l_a = bce(dense("g_a.0", za, "sigmoid"), a).mean()

    # per-sample gradients of the mean branch losses at z, by hand
    def grad_at_z(head, branch, target):
        wh = net.store.tensor(branch + ".W").data
        bh = net.store.tensor(branch + ".b").data
        pre = z @ wh + bh
        feat = np.maximum(pre, 0.0)
        w2 = net.store.tensor(head + ".W").data
        b2 = net.store.tensor(head + ".b").data
        p = 1.0 / (1.0 + np.exp(-(feat @ w2 + b2)))
        p_c = np.clip(p, 1e-7, 1 - 1e-7)
        interior = ((p > 1e-7) & (p < 1 - 1e-7)).astype(float)
        dl_dp = (p_c - target) / (p_c * (1 - p_c)) / n
        dl_dpre2 = dl_dp * interior * p * (1 - p)
        dl_dfeat = dl_dpre2 @ w2.T
        dl_dpre = dl_dfeat * (pre > 0)
        return dl_dpre @ wh.T

    gy = grad_at_z("g_y.0", "h_y.0", y)
    ga = grad_at_z("g_a.0", "h_a.0", a)
    inner = np.einsum("ij,ij->i", gy, ga)
    ny = np.einsum("ij,ij->i", gy, gy)
    na = np.einsum("ij,ij->i", ga, ga)
    alive = (ny >= 1e-24) & (na >= 1e-24)
    lperp = np.where(alive, inner ** 2 / np.where(alive, ny * na, 1.0), 0.0).mean()
    return task + beta * (l_y + l_a + lperp), task, l_y, l_a, lperp


class TestStage1Objective:
    def test_beta_zero_equals_task_loss(self):
        net = tiny_net(seed=8)
        batch = tiny_batch(seed=8)
        bundle = stage1_objective(net, batch, beta=0.0)
        assert bundle.total.item() == pytest.approx(bundle.task.item(), rel=1e-12)

    def test_matches_independent_numpy_oracle(self):
        for seed in (0, 1, 2):
            net = tiny_net(seed=seed)
            batch = tiny_batch(seed=seed, n=2)
            bundle = stage1_objective(net, batch, beta=0.7)
            want, task, l_y, l_a, lperp = numpy_stage1_oracle(net, batch, 0.7)
            assert bundle.task.item() == pytest.approx(task, rel=1e-10)
            assert bundle.label_branch.item() == pytest.approx(l_y, rel=1e-10)
            assert bundle.attr_branch.item() == pytest.approx(l_a, rel=1e-10)
            assert bundle.orth.item() == pytest.approx(lperp, rel=1e-9)
            assert bundle.total.item() == pytest.approx(want, rel=1e-10)

    def test_full_gradient_passes_finite_differences(self):
        from conftest import checkable_case
        net, batch = checkable_case(seed=9)
        params = [net.store.tensor(n) for n in net.store.names()]
        err = ad.finite_diff_check(
            lambda ps: stage1_objective(net, batch, beta=0.6).total, params,
            eps=2e-4)
        assert err <= 1e-4

    def test_orth_disabled_path(self):
        net = tiny_net(seed=10)
        batch = tiny_batch(seed=10)
        bundle = stage1_objective(net, batch, beta=0.5, orth_enabled=False)
        assert bundle.orth.item() == 0.0

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            stage1_objective(tiny_net(), tiny_batch(), beta=-0.1)


class TestResolveBeta:
    def test_balances_initial_magnitudes(self):
        net = tiny_net(seed=11)
        batch = tiny_batch(seed=11, n=32)
        beta = resolve_beta(net, batch)
        assert 0.05 < beta < 20.0
        # definition check: median task / median penalty sums
        bundle = stage1_objective(net, batch, beta=beta)
        penalty = (bundle.label_branch.item() + bundle.attr_branch.item()
                   + bundle.orth.item())
        assert beta * penalty == pytest.approx(bundle.task.item(), rel=1.0)


def test_stage1_training_lowers_gradient_alignment(synth_ds):
    # with the penalty on, the mean |cosine| of branch gradients ends lower
    from faircda.trainer import TrainConfig, Trainer

    def mean_abs_cos(net, view):
        z, zy, za = net.extract(ad.constant(view.x[:400]))
        y = view.y[:400]
        a = view.a[:400]
        l_y, l_a = branch_losses(net, zy, za, y, a)
        gy = ad.grad_wrt(l_y, z).data
        ga = ad.grad_wrt(l_a, z).data
        num = np.abs(np.einsum("ij,ij->i", gy, ga))
        den = np.linalg.norm(gy, axis=1) * np.linalg.norm(ga, axis=1)
        ok = den > 1e-12
        return float((num[ok] / den[ok]).mean())

    diffs = []
    for seed in range(5):
        res = {}
        for beta in (0.0, 1.0):
            cfg = TrainConfig(iterations_stage1=120, iterations_stage2=0,
                              per_group=80, hidden_dim=16, branch_dim=12,
                              beta=beta, seed=seed, eval_every_stage1=60)
            tr = Trainer(cfg, synth_ds)
            while tr.stage == 1 and not tr.done:
                tr.step()
            res[beta] = mean_abs_cos(tr.net, synth_ds.view("train"))
        diffs.append(res[1.0] - res[0.0])
    assert np.mean(diffs) < 0.0
