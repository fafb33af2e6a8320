"""Dataset assembly, the Adam training loop with loss scaling, inference,
and directory checkpoints.

Training pairs are built by projecting each phantom, subsampling the angles,
reconstructing with FBP, then quantizing both the reconstruction and the
ground truth to 8 bits on the label's scale and renormalizing to [0, 1].
The loop keeps FP32 master weights, casts compute copies per the policy,
scales the loss before backward, and skips (never aborts) an O2 step whose
gradients overflow. Validation always runs under O0 numerics in eval mode so
loss curves are comparable across policies.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .containers import quantize_u8, read_json, read_tensor, u8_to_unit, write_json, write_tensor
from .errors import FormatError, GraphError, NumericError, ParameterError
from .fbp import FilterSpec, fbp
from .model import ModelConfig, NetworkGraph, build_model
from .phantom import rng_from_seed, split_seed
from .projector import SubsampleSpec, radon_forward, subsample, uniform_angles
from .tensor import FP32, O0, PrecisionPolicy, Tensor, backward, unscale_grads

CHECKPOINT_FORMAT = "sparsect-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-4
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    epochs: int = 65
    adam_eps: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 4
    policy: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    seed: int = 0
    splits: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ParameterError("lr0 must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ParameterError("lr_decay must be in (0, 1]")
        if self.epochs < 1 or self.lr_decay_every < 1 or self.batch_size < 1:
            raise ParameterError("epochs, lr_decay_every and batch_size must be >= 1")
        if abs(sum(self.splits) - 1.0) > 1e-9 or any(s < 0 for s in self.splits):
            raise ParameterError(f"split fractions {self.splits} must sum to 1")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0, "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every, "epochs": self.epochs,
            "adam_eps": self.adam_eps, "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2, "batch_size": self.batch_size,
            "policy": {"level": self.policy.level, "loss_scale": self.policy.loss_scale,
                       "dynamic": self.policy.dynamic},
            "seed": self.seed, "splits": list(self.splits),
        }


@dataclass
class SamplePair:
    input: Tensor                # sparse-FBP reconstruction, [0,1], 8-bit grid
    label: Tensor                # ground truth, same normalization
    phantom_seed: int = 0
    index: int = 0
    degenerate: bool = False     # constant label quantized to all-zero


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    @property
    def image_size(self) -> int:
        return self.train[0].input.dims[2] if self.train else 0


def make_pair(phantom, angles_total: int, factor: int, filterspec: FilterSpec,
              index: int = 0) -> SamplePair:
    """Project, subsample, reconstruct, and quantize one phantom."""
    sino = radon_forward(phantom.image, uniform_angles(angles_total))
    sparse = subsample(sino, SubsampleSpec(factor))
    recon = fbp(sparse, filterspec)

    label_arr = phantom.image.data
    lo, hi = float(label_arr.min()), float(label_arr.max())
    if hi <= lo:
        zeros = np.zeros(label_arr.shape, np.float32)
        return SamplePair(input=Tensor(zeros.copy()), label=Tensor(zeros),
                          phantom_seed=phantom.seed, index=index, degenerate=True)
    x = u8_to_unit(quantize_u8(recon.data, lo, hi)).reshape(label_arr.shape)
    y = u8_to_unit(quantize_u8(label_arr, lo, hi)).reshape(label_arr.shape)
    return SamplePair(input=Tensor(x), label=Tensor(y),
                      phantom_seed=phantom.seed, index=index)


def split_indices(n: int, fractions: tuple, seed: int) -> tuple:
    """Deterministic shuffled split; train/val counts floor, the rest is test."""
    perm = [int(i) for i in rng_from_seed(seed).permutation(n)]
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def build_dataset(phantoms, angles_total: int, factor: int,
                  filterspec: FilterSpec = FilterSpec(), seed: int = 0,
                  fractions: tuple = (0.8, 0.1, 0.1)) -> DatasetSplits:
    if factor > angles_total:
        raise ParameterError(f"factor {factor} exceeds angle count {angles_total}")
    pairs = [make_pair(ph, angles_total, factor, filterspec, i)
             for i, ph in enumerate(phantoms)]
    tr, va, te = split_indices(len(pairs), fractions, seed)
    prov = {
        "angles_total": angles_total, "factor": factor,
        "window": filterspec.window, "split_seed": seed,
        "fractions": list(fractions),
        "train_indices": tr, "val_indices": va, "test_indices": te,
        "phantom_seeds": [ph.seed for ph in phantoms],
    }
    return DatasetSplits(train=[pairs[i] for i in tr], val=[pairs[i] for i in va],
                         test=[pairs[i] for i in te], provenance=prov)


# ---------------------------------------------------------------------------
# optimizer

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


class AdamState:
    def __init__(self, params):
        self.m = {p.name: np.zeros(p.dims, np.float32) for p in params}
        self.v = {p.name: np.zeros(p.dims, np.float32) for p in params}
        self.t = 0


def adam_update(master, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam update, in place, dtype-generic."""
    one = master.dtype.type(1.0)
    b1 = master.dtype.type(beta1)
    b2 = master.dtype.type(beta2)
    m[...] = b1 * m + (one - b1) * grad
    v[...] = b2 * v + (one - b2) * grad * grad
    mhat = m / (one - b1 ** t)
    vhat = v / (one - b2 ** t)
    master -= master.dtype.type(lr) * mhat / (np.sqrt(vhat) + master.dtype.type(eps))


def adam_step(params, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    state.t += 1
    for p in params:
        if p.grad is None:
            raise GraphError(f"parameter {p.name} has no gradient")
        adam_update(p.master.data, p.grad, state.m[p.name], state.v[p.name],
                    state.t, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


class LossScaler:
    """Static or dynamic loss scale: dynamic halves on overflow and doubles
    after `growth_interval` consecutive clean steps."""

    def __init__(self, policy: PrecisionPolicy, growth_interval: int = 2000):
        self.scale = float(policy.loss_scale)
        self.dynamic = policy.dynamic
        self.growth_interval = growth_interval
        self._clean = 0

    def update(self, overflow: bool) -> None:
        if not self.dynamic:
            return
        if overflow:
            self.scale = max(self.scale / 2.0, 1.0)
            self._clean = 0
        else:
            self._clean += 1
            if self._clean >= self.growth_interval:
                self.scale *= 2.0
                self._clean = 0


# ---------------------------------------------------------------------------
# training loop

@dataclass
class StepOutcome:
    loss: float
    skipped: bool


def stack_batch(pairs) -> tuple:
    x = np.concatenate([p.input.data for p in pairs], axis=0)
    y = np.concatenate([p.label.data for p in pairs], axis=0)
    return Tensor(x), Tensor(y)


def train_step(model: NetworkGraph, params, state: AdamState, scaler: LossScaler,
               xb: Tensor, yb: Tensor, lr: float, cfg: TrainConfig) -> StepOutcome:
    """One optimizer step; an O2 overflow skips the update without touching
    the master weights."""
    model.zero_grads()
    pred = model.forward(xb, mode="train", policy=cfg.policy)
    loss = ops.mse_loss(pred, yb)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        if cfg.policy.is_o2:
            scaler.update(overflow=True)
            return StepOutcome(loss=loss_val, skipped=True)
        raise NumericError(f"non-finite training loss {loss_val} under O0")

    backward(loss, scale=scaler.scale)
    finite = unscale_grads(params, scaler.scale)
    if not finite:
        if not cfg.policy.is_o2:
            raise NumericError("non-finite gradients under O0")
        scaler.update(overflow=True)
        return StepOutcome(loss=loss_val, skipped=True)

    scaler.update(overflow=False)
    adam_step(params, state, lr, cfg)
    model.apply_policy(cfg.policy)
    return StepOutcome(loss=loss_val, skipped=False)


def dataset_mse(model: NetworkGraph, pairs, batch_size: int = 4,
                restore_policy: PrecisionPolicy | None = None) -> float:
    """Mean MSE over pairs under O0 numerics, eval mode."""
    model.apply_policy(O0)
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        xb, yb = stack_batch(chunk)
        pred = model.forward(xb, mode="eval", policy=O0)
        total += float(ops.mse_loss(pred, yb).data) * len(chunk)
        count += len(chunk)
    if restore_policy is not None:
        model.apply_policy(restore_policy)
    return total / max(count, 1)


@dataclass
class TrainResult:
    history: list                 # one dict per epoch
    best_epoch: int
    best_val: float
    best_state: dict              # arrays snapshot at the best epoch
    model: NetworkGraph
    config: TrainConfig


def train(model: NetworkGraph, data: DatasetSplits, cfg: TrainConfig,
          out_dir=None, log=None) -> TrainResult:
    if not data.train:
        raise ParameterError("training split is empty")
    model.apply_policy(cfg.policy)
    params = model.parameters()
    state = AdamState(params)
    scaler = LossScaler(cfg.policy)

    history = []
    best_val, best_epoch = np.inf, -1
    best_state = None
    n = len(data.train)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng_from_seed(split_seed(cfg.seed, 2 ** 32 + epoch)).permutation(n)
        losses = []
        skipped = 0
        for start in range(0, n, cfg.batch_size):
            batch = [data.train[int(i)] for i in order[start:start + cfg.batch_size]]
            xb, yb = stack_batch(batch)
            outcome = train_step(model, params, state, scaler, xb, yb, lr, cfg)
            if outcome.skipped:
                skipped += 1
            if np.isfinite(outcome.loss):
                losses.append(outcome.loss)

        val_mse = dataset_mse(model, data.val, cfg.batch_size, restore_policy=cfg.policy) \
            if data.val else np.nan
        record = {
            "epoch": epoch, "lr": lr,
            "train_mse": float(np.mean(losses)) if losses else np.nan,
            "val_mse": float(val_mse), "scale": scaler.scale,
            "skipped_steps": skipped,
        }
        history.append(record)
        if log is not None:
            log(record)
        if data.val and val_mse < best_val:
            best_val, best_epoch = float(val_mse), epoch
            best_state = copy.deepcopy(model.state_arrays())

    if best_state is None:      # no validation split: final weights are "best"
        best_val, best_epoch = history[-1]["val_mse"], cfg.epochs - 1
        best_state = copy.deepcopy(model.state_arrays())

    result = TrainResult(history=history, best_epoch=best_epoch, best_val=best_val,
                         best_state=best_state, model=model, config=cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "final",
                        epoch=cfg.epochs - 1, metrics={"val_mse": history[-1]["val_mse"]},
                        train_config=cfg)
        final_state = copy.deepcopy(model.state_arrays())
        model.load_state(best_state)
        save_checkpoint(model, out / "best",
                        epoch=best_epoch, metrics={"val_mse": best_val},
                        train_config=cfg)
        model.load_state(final_state)
        write_history(out / "history.jsonl", history)
    return result


def write_history(path, history) -> None:
    """JSON lines, one record per epoch; non-finite values become null."""
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v

    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps({k: clean(v) for k, v in rec.items()}, sort_keys=True))
            f.write("\n")


def read_history(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# inference and checkpoints

def infer(model: NetworkGraph, image: Tensor) -> Tensor:
    """Eval-mode O0 forward with the output clamped to [0, 1]."""
    model.apply_policy(O0)
    out = model.forward(image, mode="eval", policy=O0)
    return Tensor(np.clip(out.data, 0.0, 1.0), dtype=FP32)


def save_checkpoint(model: NetworkGraph, ckpt_dir, epoch: int = 0,
                    metrics: dict | None = None,
                    train_config: TrainConfig | None = None) -> None:
    ckpt = Path(ckpt_dir)
    (ckpt / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in model.state_arrays().items():
        fname = f"params/{name}.tsr"
        write_tensor(ckpt / fname, Tensor(arr, dtype=FP32))
        entries.append({"name": name, "dims": list(arr.shape),
                        "dtype": "fp32", "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model": {"kind": model.name, "config": model.config.to_dict(),
                  "init_seed": model.seed},
        "epoch": epoch,
        "metrics": metrics or {},
        "train_config": train_config.to_dict() if train_config else None,
        "tensors": entries,
    }
    write_json(ckpt / "manifest.json", manifest)


def load_checkpoint(ckpt_dir) -> tuple:
    ckpt = Path(ckpt_dir)
    manifest = read_json(ckpt / "manifest.json")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{ckpt}: not a {CHECKPOINT_FORMAT} checkpoint")
    info = manifest["model"]
    cfg = ModelConfig(**info["config"])
    model = build_model(info["kind"], cfg, seed=info.get("init_seed", 0))
    arrays = {}
    for entry in manifest["tensors"]:
        arrays[entry["name"]] = read_tensor(ckpt / entry["file"]).data
    model.load_state(arrays)
    model.apply_policy(O0)
    return model, manifest
