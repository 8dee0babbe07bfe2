"""Gradient checks through deep compositions at desk width (float64, soft masks)."""
import numpy as np

from afenet import network
from afenet import tensor as T
from afenet.afsim import Afsim
from afenet.network import TransformerBlock
from afenet.sfm import Sfm
from afenet.tensor import Tensor


def _scalarize(shape, seed=7):
    r = Tensor(np.random.default_rng(seed).normal(size=shape))
    return lambda y: T.tsum(y * r)


def _probe(module, inputs, fn, n_params, max_checks, eps, seed):
    """grad_check over the inputs plus a sample of the module's parameter tensors."""
    params = [p for _, p in module.named_parameters()]
    rng = np.random.default_rng(seed)
    picked = [params[i] for i in sorted(rng.choice(len(params), min(n_params, len(params)), replace=False))]
    n_in = len(inputs)

    def f(*args):
        return fn(*args[:n_in])
    return T.grad_check(f, list(inputs) + picked, eps=eps, max_checks=max_checks, seed=seed)


def afsim_case(seed=0, c=8, hw=8, eps=(1e-4, 1e-6)):
    rng = np.random.default_rng(seed)
    mod = Afsim(c, 2 * c, 2, rng).astype(np.float64)
    x_raw = Tensor(rng.uniform(0, 1, (1, 3, hw, hw)))
    x_enc = Tensor(rng.normal(size=(1, c, hw, hw)))
    x_dec = Tensor(rng.normal(size=(1, 2 * c, hw // 2, hw // 2)))
    proj = _scalarize((1, c, hw, hw))

    def fn(a, b, d):
        f_h, f_l, x_in = mod(a, b, d, "soft", 1.0)
        return proj(f_h) + proj(f_l) * 0.5 + proj(x_in) * 0.25
    return _probe(mod, [x_raw, x_enc, x_dec], fn, 6, 12, eps, seed)


def sfm_case(seed=0, c=8, hw=8, eps=1e-6):
    rng = np.random.default_rng(seed)
    mod = Sfm(c, rng).astype(np.float64)
    xs = [Tensor(rng.normal(size=(2, c, hw, hw))) for _ in range(3)]
    proj = _scalarize((2, c, hw, hw))
    return _probe(mod, xs, lambda a, b, d: proj(mod(a, b, d)), 4, 20, eps, seed)


def tb_case(seed=0, c=8, hw=8, eps=1e-6):
    rng = np.random.default_rng(seed)
    mod = TransformerBlock(c, 2, 2.66, rng).astype(np.float64)
    x = Tensor(rng.normal(size=(1, c, hw, hw)))
    proj = _scalarize((1, c, hw, hw))
    return _probe(mod, [x], lambda a: proj(mod(a)), 6, 20, eps, seed)


def afeb_case(seed=0, c=8, hw=8, eps=(1e-4, 1e-6)):
    rng = np.random.default_rng(seed)
    mod = network.Afeb(c, None, 2, rng).astype(np.float64)
    x_raw = Tensor(rng.uniform(0, 1, (1, 3, hw, hw)))
    x_enc = Tensor(rng.normal(size=(1, c, hw, hw)))
    proj = _scalarize((1, c, hw, hw))
    return _probe(mod, [x_raw, x_enc], lambda a, b: proj(mod(a, b, None, "soft", 1.0)), 6, 12, eps, seed)


def model_case(seed=0, size=64, eps=(1e-4, 1e-6)):
    cfg = network.desk_config(mask_mode="soft", seed=seed)
    mod = network.build_model(cfg).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.uniform(0, 1, (1, 3, size, size)))
    proj = _scalarize((1, cfg.num_classes, size, size))
    return _probe(mod, [x], lambda a: proj(mod(a, mode="soft")), 8, 6, eps, seed)


COMPOSITIONS = {"afsim": afsim_case, "sfm": sfm_case, "tb": tb_case, "afeb": afeb_case, "model": model_case}
