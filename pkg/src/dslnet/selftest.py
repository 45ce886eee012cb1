"""Built-in verification: finite-difference checks of every differentiable op and
the oracle equivalences the network design relies on.

Shared by ``dslnet selftest`` and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .config import ModelConfig, preset
from .gradcheck import gradcheck
from .model import DSLNet, build_model, param_count_formula
from .tensor import Tensor, precision

GRADCHECK_TOL = 1e-3
ORACLE_TOL = 1e-6
SEEDS = tuple(range(5))
TARGET_PARAMS = 0.93e6


def _rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def _off_kink(rng, shape, lo=-2, hi=2):
    """Offsets whose fractional parts stay away from bilinear sampling kinks."""
    return rng.integers(lo, hi + 1, size=shape) + rng.uniform(0.1, 0.9, size=shape)


def _away_from_zero(rng, *shape, margin=0.05):
    x = _rand(rng, *shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# Each case: rng -> (fn, inputs, gradcheck kwargs)
def _conv(rng):
    return (lambda x, w, b: ops.conv2d(x, w, b, padding=1)), [_rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3),
                                                              _rand(rng, 4)], {}


def _conv_grouped(rng):
    return (lambda x, w: ops.conv2d(x, w, stride=2, padding=1, groups=2)), [_rand(rng, 1, 4, 6, 6),
                                                                           _rand(rng, 6, 2, 3, 3)], {}


def _depthwise7(rng):
    return ops.depthwise_conv2d, [_rand(rng, 1, 3, 9, 9), _rand(rng, 3, 7, 7), _rand(rng, 3)], {}


def _depthwise17(rng):
    return ops.depthwise_conv2d, [_rand(rng, 1, 2, 18, 18), _rand(rng, 2, 17, 17), _rand(rng, 2)], {}


def _transposed(rng):
    return (lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2, padding=1)), \
        [_rand(rng, 1, 3, 4, 4), _rand(rng, 3, 2, 4, 4), _rand(rng, 2)], {}


def _deformable(rng):
    return (lambda x, o, w: ops.deformable_conv2d(x, o, w)), \
        [_rand(rng, 1, 2, 6, 6), _off_kink(rng, (1, 18, 6, 6)), _rand(rng, 3, 2, 3, 3)], {"max_coords": 300}


def _deformable_groups(rng):
    return (lambda x, o, w: ops.deformable_conv2d(x, o, w, deform_groups=2)), \
        [_rand(rng, 1, 4, 5, 5), _off_kink(rng, (1, 36, 5, 5), -1, 1), _rand(rng, 2, 4, 3, 3)], {}


def _dynamic(rng):
    return ops.dynamic_conv2d, [_rand(rng, 2, 3, 8, 8), _rand(rng, 4, 3, 7, 7), _rand(rng, 2, 4)], {}


def _pool(rng):
    return (lambda x: ops.pool_avg(x, 2) + ops.resize_bilinear(ops.pool_avg(x, 3, 1, padding=1), (3, 3))
            + ops.pool_global(x)), [_rand(rng, 2, 3, 6, 6)], {}


def _activations(rng):
    return (lambda x: ops.relu(x) + ops.leaky_relu(x, 0.1)), [_away_from_zero(rng, 2, 3, 5, 5)], {}


def _resample(rng):
    return (lambda x: ops.resize_bilinear(x, (7, 9))), [_rand(rng, 1, 2, 5, 5)], {}


def _normalize(rng):
    return ops.normalize, [_rand(rng, 2, 3, 4, 4)], {}


def _modulation(rng):
    return ops.affine, [_rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 1, 1), _rand(rng, 2, 3, 4, 4)], {}


def _l1(rng):
    return ops.l1_loss, [_rand(rng, 1, 3, 4, 4), _rand(rng, 1, 3, 4, 4)], {"wrt": [0]}


GRADCHECK_CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "conv2d_grouped_strided": _conv_grouped,
    "depthwise_7": _depthwise7,
    "depthwise_17": _depthwise17,
    "transposed_conv2d": _transposed,
    "deformable_conv2d": _deformable,
    "deformable_conv2d_groups": _deformable_groups,
    "dynamic_conv2d": _dynamic,
    "pooling": _pool,
    "activations": _activations,
    "resize_bilinear": _resample,
    "normalize": _normalize,
    "modulation": _modulation,
    "l1_loss": _l1,
}


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<40s} {self.value:.3e} (tol {self.tol:g}) {self.detail}"


def run_gradchecks(seeds=SEEDS) -> list[CheckResult]:
    out = []
    for name, build in GRADCHECK_CASES.items():
        worst = 0.0
        for seed in seeds:
            fn, inputs, kw = build(np.random.default_rng(seed))
            worst = max(worst, gradcheck(fn, inputs, seed=seed, **kw))
        out.append(CheckResult(f"gradcheck {name}", worst, GRADCHECK_TOL, f"worst of {len(seeds)} seeds"))
    return out


# -- oracle equivalences -------------------------------------------------------------------------

ORACLE_CONFIGS = ((1, 1, 8, 0), (2, 3, 6, 1), (0, 3, 4, 2))  # (T, deform_groups, c_feat, seed)


def zero_offset_deformable(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cin = int(rng.integers(2, 7))
    x = Tensor(_rand(rng, 2, cin, 9, 11))
    w = Tensor(_rand(rng, int(rng.integers(1, 5)), cin, 3, 3))
    b = Tensor(_rand(rng, w.shape[0]))
    off = Tensor(np.zeros((2, 18, 9, 11)))
    return float(np.abs(ops.deformable_conv2d(x, off, w, b).data - ops.conv2d(x, w, b, padding=1).data).max())


def one_hot_dynamic(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c, k, n_k = int(rng.integers(1, 5)), int(rng.choice([3, 5, 7])), int(rng.integers(2, 6))
    x = Tensor(_rand(rng, 2, c, 10, 10))
    cands = _rand(rng, n_k, c, k, k)
    logits = np.full((2, n_k), -1e30)
    pick = rng.integers(0, n_k, size=2)
    logits[np.arange(2), pick] = 0.0
    out = ops.dynamic_conv2d(x, Tensor(cands), Tensor(logits)).data
    worst = 0.0
    for n in range(2):
        ref = ops.depthwise_conv2d(Tensor(x.data[n:n + 1]), Tensor(cands[pick[n]])).data
        worst = max(worst, float(np.abs(out[n:n + 1] - ref).max()))
    return worst


def identity_modulation(T: int, dg: int, c: int, seed: int) -> float:
    """Network with zeroed modulation heads (scale 1, shift 0) vs the same weights
    in a network built without any modulation."""
    cfg = ModelConfig(T=T, deform_groups=dg, c_feat=c, c_cond=c, c_offset=c)
    full = DSLNet(cfg, seed)
    reduced = DSLNet(cfg.replace(tfm=False, cfm=False, sfm=False), seed + 1)
    for head in (full.stfm.tme.head, full.stfm.cme.head, full.stfm.sme.head):
        head.weight.data = np.zeros_like(head.weight.data)
        head.bias.data = np.zeros_like(head.bias.data)
    rng = np.random.default_rng(seed)
    proj = full.align.ldoe.proj
    proj.weight.data = rng.uniform(-0.3, 0.3, size=proj.weight.shape).astype(np.float32)
    src = dict(full.named_parameters())
    for path, p in reduced.named_parameters():
        p.data = src[path].data.copy()
    x = Tensor(rng.uniform(0, 1, size=(1, 3 * (2 * T + 1), 16, 16)).astype(np.float32))
    return float(np.abs(full(x).data - reduced(x).data).max())


def run_oracles() -> list[CheckResult]:
    out = []
    for seed in range(3):
        out.append(CheckResult(f"zero-offset deformable == conv (seed {seed})", zero_offset_deformable(seed),
                               ORACLE_TOL))
    for seed in range(3):
        out.append(CheckResult(f"one-hot dynamic == depthwise (seed {seed})", one_hot_dynamic(seed), ORACLE_TOL))
    for T, dg, c, seed in ORACLE_CONFIGS:
        out.append(CheckResult(f"identity modulation (T={T}, dg={dg}, C={c})", identity_modulation(T, dg, c, seed),
                               ORACLE_TOL))
    return out


def budget() -> CheckResult:
    cfg = preset("full")
    n = build_model(cfg).param_count()
    if n != param_count_formula(cfg):
        return CheckResult("parameter budget", float("inf"), 0.10, "module tree disagrees with the closed form")
    rel = abs(n - TARGET_PARAMS) / TARGET_PARAMS
    return CheckResult("parameter budget vs 0.93M", rel, 0.10 + 1e-12, f"count {n:,}")


def describe_full_preset() -> str:
    cfg = preset("full")
    n = build_model(cfg).param_count()
    fields = ", ".join(f"{k}={v}" for k, v in cfg.to_dict().items())
    return f"full preset: {n:,} parameters ({(n - TARGET_PARAMS) / TARGET_PARAMS:+.2%} vs 0.93M)\nconfig: {fields}"


def run_all(echo: Callable[[str], None] = print) -> bool:
    t0 = time.time()
    echo(describe_full_preset())
    results = [budget()]
    with precision(np.float64):
        results += run_gradchecks()
    results += run_oracles()
    for r in results:
        echo(r.line())
    failed = sum(not r.ok for r in results)
    echo(f"{len(results) - failed}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return failed == 0
