"""L1 training with Adam, the step-halving learning-rate schedule, checkpoints and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .data import SequencePair, collate, sample_patches, window
from .metrics import MetricReport
from .model import DSLNet
from .ops import l1_loss
from .tensor import Tensor, no_grad


class NonFiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    halve_every_a: int = 50_000
    phase_boundary: int = 150_000
    halve_every_b: int = 40_000
    total_iters: int = 350_000
    scale: float = 1.0
    batch: int = 4
    patch: int = 96
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.batch < 1 or self.patch < 1:
            raise ValueError("batch and patch must be >= 1")

    def _scaled(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    @property
    def a(self) -> int:
        return self._scaled(self.halve_every_a)

    @property
    def phase(self) -> int:
        return self._scaled(self.phase_boundary)

    @property
    def b(self) -> int:
        return self._scaled(self.halve_every_b)

    @property
    def total(self) -> int:
        return self._scaled(self.total_iters)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def lr_boundaries(cfg: TrainConfig) -> list[int]:
    """Iterations at which the rate halves.

    Every ``a`` iterations up to and including ``phase``, then every ``b`` after it.
    """
    a, phase, b, total = cfg.a, cfg.phase, cfg.b, cfg.total
    out = list(range(a, phase, a)) + [phase]
    out += list(range(phase + b, total, b))
    return [x for x in out if x < total]


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    halvings = sum(1 for x in lr_boundaries(cfg) if x <= it)
    return cfg.lr0 * 2.0 ** -halvings


class Adam:
    """Bias-corrected Adam over a model's named parameters; moments are float32."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p: np.zeros_like(t.data) for p, t in self.params}
        self.v = {p: np.zeros_like(t.data) for p, t in self.params}

    def step(self, lr: float) -> None:
        for path, t in self.params:
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {path}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for path, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self.m[path], self.v[path]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data - update).astype(t.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{p}": m for p, m in self.m.items()}
        out.update({f"adam_v/{p}": v for p, v in self.v.items()})
        return out

    def load_state(self, ck: ckpt_io.Checkpoint, t: int) -> None:
        m, v = ck.with_prefix("adam_m/"), ck.with_prefix("adam_v/")
        for path, _ in self.params:
            if path not in m or path not in v:
                raise ckpt_io.CheckpointError(f"checkpoint lacks optimizer moments for {path}")
            self.m[path] = m[path].copy()
            self.v[path] = v[path].copy()
        self.t = t


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], moments: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> tuple[dict, dict]:
    """Functional Adam update: returns (new params, new moments {"t", "m", "v"})."""
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {path}")
    t = moments.get("t", 0) + 1
    m_old, v_old = moments.get("m", {}), moments.get("v", {})
    new_p, m_new, v_new = {}, {}, {}
    for path, p in params.items():
        g = grads.get(path, np.zeros_like(p))
        m = beta1 * m_old.get(path, 0.0) + (1 - beta1) * g
        v = beta2 * v_old.get(path, 0.0) + (1 - beta2) * g * g
        new_p[path] = p - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        m_new[path], v_new[path] = m, v
    return new_p, {"t": t, "m": m_new, "v": v_new}


# -- training loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    final_iter: int
    checkpoint_path: Path | None


def draw_batch(dataset: Sequence[SequencePair], T: int, cfg: TrainConfig, rng: np.random.Generator):
    samples = []
    for _ in range(cfg.batch):
        seq = dataset[int(rng.integers(len(dataset)))]
        i = int(rng.integers(seq.length))
        samples.append(sample_patches(seq, i, T, cfg.patch, rng))
    return collate(samples)


def _save(path: Path, model: DSLNet, opt: Adam, it: int, rng: np.random.Generator, cfg: TrainConfig) -> None:
    meta = {"iteration": it, "adam_t": opt.t, "rng_state": rng.bit_generator.state,
            "train_config": cfg.to_dict(), "train_digest": cfg.digest()}
    ckpt_io.save(path, ckpt_io.model_checkpoint(model, meta, opt.state_tensors()))


def train(model: DSLNet, dataset: Sequence[SequencePair], cfg: TrainConfig, *, run_dir: str | Path | None = None,
          resume: str | Path | None = None, stop_at: int | None = None,
          on_step: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run (or resume) training up to ``cfg.total`` iterations, or ``stop_at`` if given.

    With ``run_dir`` the loss log (``loss.jsonl``) and ``checkpoint.bin`` are kept there.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    T = model.config.T
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    start = 0
    if resume is not None:
        ck = ckpt_io.load(resume)
        ckpt_io.load_params(model, ck)
        if ck.meta.get("train_digest") != cfg.digest():
            raise ckpt_io.CheckpointError("checkpoint was written with a different train config")
        start = int(ck.meta["iteration"])
        opt.load_state(ck, int(ck.meta["adam_t"]))
        rng.bit_generator.state = ck.meta["rng_state"]
    end = min(cfg.total, stop_at) if stop_at is not None else cfg.total
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_path = run_dir / "checkpoint.bin" if run_dir is not None else None
    log = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log = open(run_dir / "loss.jsonl", "a" if resume is not None else "w")
    losses = []
    try:
        for it in range(start, end):
            x, y = draw_batch(dataset, T, cfg, rng)
            lr = lr_schedule(it, cfg)
            model.zero_grad()
            loss = l1_loss(model(Tensor(x)), Tensor(y))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at iteration {it}"
                                     + (f"; last checkpoint kept at {ckpt_path}" if ckpt_path else ""))
            loss.backward()
            opt.step(lr)
            losses.append(value)
            if log is not None:
                log.write(json.dumps({"iter": it, "lr": lr, "loss": value}) + "\n")
            if on_step is not None:
                on_step(it, lr, value)
            done = it + 1
            if ckpt_path is not None and (done % cfg.checkpoint_every == 0 or done == end):
                log.flush()
                _save(ckpt_path, model, opt, done, rng, cfg)
    finally:
        if log is not None:
            log.close()
    return TrainResult(losses, end, ckpt_path)


def read_loss_log(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


# -- evaluation ----------------------------------------------------------------------------------

def model_predictor(model: DSLNet) -> Callable[[list[np.ndarray]], np.ndarray]:
    def predict(frames: list[np.ndarray]) -> np.ndarray:
        x = np.concatenate(frames, axis=0)[None].astype(np.float32)
        return model.infer(Tensor(x))[0]

    return predict


def evaluate(model, dataset: Sequence[SequencePair], T: int | None = None, *, frames: str = "all") -> MetricReport:
    """Score full-resolution predictions against the HDR frames of every sequence.

    ``model`` is a DSLNet or any callable mapping a list of 2T+1 SDR frames to an HDR frame.
    ``frames`` is "all" (every frame as a window centre) or "center" (middle frame only).
    """
    if isinstance(model, DSLNet):
        T = model.config.T
        predict = model_predictor(model)
    else:
        if T is None:
            raise ValueError("T is required when evaluating a plain callable")
        predict = model
    report = MetricReport()
    for seq in dataset:
        indices = range(seq.length) if frames == "all" else [seq.length // 2]
        for i in indices:
            pred = predict(window(seq, i, T))
            report.add(pred, seq.hdr_frames[i], f"{seq.scene_id}/{i:04d}")
    return report


def training_l1(model: DSLNet, dataset: Sequence[SequencePair]) -> float:
    """Mean L1 of the unclamped training-mode output over every frame of every sequence."""
    T = model.config.T
    total, count = 0.0, 0
    for seq in dataset:
        for i in range(seq.length):
            x = np.concatenate(window(seq, i, T), axis=0)[None].astype(np.float32)
            with no_grad():
                out = model(Tensor(x)).data[0]
            err = np.abs(out.astype(np.float64) - seq.hdr_frames[i])
            total += float(err.sum())
            count += err.size
    return total / count
