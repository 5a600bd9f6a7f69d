"""Central finite-difference checks for every differentiable operation.

Each check runs the op in a float64 graph, takes autodiff gradients, and
compares against central differences (h = 1e-3) of the same float64
forward evaluation, at several seeds.  Inputs are kept away from
non-differentiable ties (relu kinks, pooling ties).
"""

import numpy as np
import pytest

from radiocon import autodiff as ad
from radiocon import losses, model
from radiocon.autodiff import Tape, Tensor

from oracles import central_diff, rel_err

SEEDS = [0, 1, 2, 3, 4]
H = 1e-3
TOL = 1e-3


def check_grad(build, x0: np.ndarray):
    """build(tensor) -> scalar Tensor graph; FD vs autodiff at x0."""
    with Tape() as tape:
        x = Tensor(x0, np.float64)
        out = build(x)
    ad.backward(tape, out)
    auto = x.grad.copy()

    def f(values):
        with Tape():
            return build(Tensor(values, np.float64)).item()

    fd = central_diff(f, x0, H)
    assert rel_err(auto, fd, floor=1e-4) < TOL


def projector(rng, shape):
    """A fixed random weighting that turns a tensor into a scalar proxy."""
    w = Tensor(rng.normal(size=shape), np.float64, requires_grad=False)
    return lambda t: ad.reduce_sum(ad.mul(t, w))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grads(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(3, 3)), np.float64)
    check_grad(lambda a: ad.reduce_sum(ad.matmul(a, b)), rng.normal(size=(3, 3)))
    a = Tensor(rng.normal(size=(3, 3)), np.float64)
    check_grad(lambda m: ad.reduce_sum(ad.matmul(a, m)), rng.normal(size=(3, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grads(seed):
    rng = np.random.default_rng(seed)
    k0 = rng.normal(size=(3, 3, 1, 1))
    x0 = rng.normal(size=(4, 4, 1))
    b0 = rng.normal(size=1)
    proj = projector(rng, (4, 4, 1))
    check_grad(lambda x: proj(
        ad.conv2d(x, Tensor(k0, np.float64), stride=1, padding=1)), x0)
    check_grad(lambda k: proj(
        ad.conv2d(Tensor(x0, np.float64), k, stride=1, padding=1)), k0)
    check_grad(lambda b: proj(
        ad.conv2d(Tensor(x0, np.float64), Tensor(k0, np.float64), b,
                  stride=1, padding=1)), b0)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_strided_grads(seed):
    rng = np.random.default_rng(seed)
    k0 = rng.normal(size=(3, 3, 2, 2))
    x0 = rng.normal(size=(5, 5, 2))
    proj = projector(rng, (3, 3, 2))
    check_grad(lambda x: proj(
        ad.conv2d(x, Tensor(k0, np.float64), stride=2, padding=1)), x0)
    check_grad(lambda k: proj(
        ad.conv2d(Tensor(x0, np.float64), k, stride=2, padding=1)), k0)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_grads(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=7)
    x0 = np.where(np.abs(x0) < 0.05, 0.2, x0)  # stay off the relu kink
    other = Tensor(rng.normal(size=7), np.float64)
    proj = projector(rng, (7,))
    for build in [
        lambda x: proj(ad.add(x, other)),
        lambda x: proj(ad.sub(other, x)),
        lambda x: proj(ad.mul(x, other)),
        lambda x: proj(ad.scale(x, -1.7)),
        lambda x: proj(ad.relu(x)),
        lambda x: proj(ad.sigmoid(x)),
        lambda x: proj(ad.exp(x)),
    ]:
        check_grad(build, x0)
    check_grad(lambda x: proj(ad.log(x)), np.abs(x0) + 0.5)
    x_clamp = np.where(np.abs(np.abs(x0) - 0.5) < 0.05, 0.8, x0)
    check_grad(lambda x: proj(ad.clamp(x, -0.5, 0.5)), x_clamp)


@pytest.mark.parametrize("seed", SEEDS)
def test_structural_grads(seed):
    rng = np.random.default_rng(seed)
    mat = Tensor(rng.normal(size=(4, 3)), np.float64)
    p43 = projector(rng, (4, 3))
    check_grad(lambda x: p43(ad.bias_add(mat, x)), rng.normal(size=3))
    check_grad(lambda x: p43(ad.transpose(x)), rng.normal(size=(3, 4)))
    p4 = projector(rng, (4,))
    check_grad(lambda x: p4(ad.diag(x)), rng.normal(size=(4, 4)))
    p6 = projector(rng, (6,))
    check_grad(lambda x: p6(ad.reshape(x, (6,))), rng.normal(size=(2, 3)))
    p442 = projector(rng, (4, 4, 2))
    check_grad(lambda x: p442(ad.upsample_nearest(x, 2)), rng.normal(size=(2, 2, 2)))
    p35 = projector(rng, (3, 5))
    check_grad(lambda x: p35(ad.l2_normalize(x, gain=3.0)), rng.normal(size=(3, 5)))


@pytest.mark.parametrize("seed", SEEDS)
def test_reduce_grads(seed):
    rng = np.random.default_rng(seed)
    check_grad(ad.reduce_sum, rng.normal(size=(3, 4)))
    check_grad(ad.reduce_mean, rng.normal(size=(2, 5)))
    p3 = projector(rng, (3,))
    check_grad(lambda x: p3(ad.global_avg_pool(x)), rng.normal(size=(4, 4, 3)))
    p222 = projector(rng, (2, 2, 2))
    check_grad(lambda x: p222(ad.max_pool2d(x, 2)), rng.normal(size=(4, 4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_log_softmax_grads(seed):
    rng = np.random.default_rng(seed)
    p8 = projector(rng, (8,))
    check_grad(lambda x: p8(ad.log_softmax(x)), rng.normal(scale=3, size=8))
    p35 = projector(rng, (3, 5))
    check_grad(lambda x: p35(ad.log_softmax(x)), rng.normal(scale=3, size=(3, 5)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_distance_grads(seed, p):
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=6)
    check_grad(lambda u: ad.p_norm_distance(u, Tensor(v0, np.float64), p),
               v0 + rng.normal(size=6))
    vm = Tensor(rng.normal(size=(3, 6)), np.float64)
    p43 = projector(rng, (4, 3))
    check_grad(lambda u: p43(ad.pairwise_p_distance(u, vm, p)),
               rng.normal(size=(4, 6)))
    um = Tensor(rng.normal(size=(4, 6)), np.float64)
    check_grad(lambda v: p43(ad.pairwise_p_distance(um, v, p)),
               rng.normal(size=(3, 6)))


@pytest.mark.parametrize("seed", SEEDS)
def test_combined_loss_grads(seed):
    rng = np.random.default_rng(seed)
    cfg = losses.ContrastiveConfig()
    n, d = 4, 6
    v0 = Tensor(rng.normal(size=(n, d)), np.float64)
    u0 = Tensor(rng.normal(size=(n, d)), np.float64)
    check_grad(lambda u: losses.combined_loss(losses.BatchEmbeddings(u, v0), cfg),
               rng.normal(size=(n, d)))
    check_grad(lambda v: losses.combined_loss(losses.BatchEmbeddings(u0, v), cfg),
               rng.normal(size=(n, d)))


@pytest.mark.parametrize("kernel", ["raw_distance", "dot_product"])
def test_combined_loss_grads_other_kernels(kernel):
    rng = np.random.default_rng(9)
    cfg = losses.ContrastiveConfig(similarity_kernel=kernel)
    v0 = Tensor(rng.normal(size=(3, 5)), np.float64)
    check_grad(lambda u: losses.combined_loss(losses.BatchEmbeddings(u, v0), cfg),
               rng.normal(size=(3, 5)))


def test_finetune_loss_grads():
    rng = np.random.default_rng(5)
    y = np.array([1.0, 0.0, 1.0, 0.0])
    check_grad(lambda t: losses.finetune_loss(ad.sigmoid(t), y),
               rng.normal(size=4))


class TestFullNetworkGradients:
    """Training loss gradients through the whole two-tower model."""

    CFG = model.BackboneConfig(input_resolution=32, stem_channels=4,
                               stage_channels=(4, 8))

    def _loss(self, params, x64, r64):
        u, _ = model.forward_image(Tensor(x64, np.float64, requires_grad=False),
                                   params, self.CFG)
        v = model.forward_radiomics(Tensor(r64, np.float64, requires_grad=False),
                                    params)
        return losses.combined_loss(
            losses.BatchEmbeddings(u, v), losses.ContrastiveConfig())

    def test_all_parameter_grads_match_fd(self):
        # h is smaller here than in the per-op checks: perturbing an early
        # conv weight by 1e-3 flips relu/pool gates several layers down,
        # which makes the difference quotient measure a neighbouring
        # piecewise-linear segment rather than the local derivative.
        h = 1e-6
        rng = np.random.default_rng(0)
        params32 = model.init_params(self.CFG, seed=0)
        params = {k: Tensor(t.values, np.float64) for k, t in params32.items()}
        x64 = rng.random((2, 32, 32, 1))
        r64 = rng.normal(size=(2, 102))

        with Tape() as tape:
            loss = self._loss(params, x64, r64)
        ad.backward(tape, loss)
        grads = {k: t.grad.copy() for k, t in params.items()}
        assert all(np.all(np.isfinite(g)) for g in grads.values())

        worst = 0.0
        for name, tensor in params.items():
            flat = tensor.values.reshape(-1)
            picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + h
                with Tape():
                    fp = self._loss(params, x64, r64).item()
                flat[idx] = orig - h
                with Tape():
                    fm = self._loss(params, x64, r64).item()
                flat[idx] = orig
                fd = (fp - fm) / (2 * h)
                got = grads[name].reshape(-1)[idx]
                err = abs(fd - got) / max(abs(fd), abs(got), 1e-4)
                worst = max(worst, err)
        assert worst < TOL
