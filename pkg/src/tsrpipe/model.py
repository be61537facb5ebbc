"""Patch classifiers: a miniature trainable softmax convnet, an adapter for
externally computed predictions, and a label-map oracle.

The miniature network is a desk-scale stand-in for full-size architectures:
224x224 inputs are area-downsampled to 56x56 and scaled to [0, 1], then pass
through conv(3->8, 3x3, pad 1) + ReLU + 2x2 maxpool, conv(8->16, 3x3, pad 1)
+ ReLU + 2x2 maxpool, and a fully-connected 16*14*14 -> 3 softmax head. The
first convolution sees the inputs centered at 0.5.
Everything runs in float64 with analytic gradients (finite-difference
checked in the tests), and training is single-threaded and seed-
deterministic: identical (initial weights, data, config) give bitwise-
identical traces.

Full-scale models plug in through the predictions-CSV adapter
(``patch_id,p_tumor,p_stroma,p_other``).

Checkpoint format: magic ``MNET1`` followed by the parameter tensors as
little-endian float64 in the fixed order conv1_w (8,3,3,3), conv1_b (8,),
conv2_w (16,3,3,8), conv2_b (16,), fc_w (3,3136), fc_b (3,). Convolution
weights are (filter, ky, kx, in_channel); the fc input is the C-order
flattening of the (14, 14, 16) feature map.
"""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cohort
from .annotate import CLASS_ORDER, TissueClass
from .cohort import LabeledPatch
from .errors import (
    CheckpointError,
    EmptyBatchError,
    EmptyGridError,
    MalformedRowError,
    MissingCorpusError,
    MissingPatchIdError,
    NonNormalizedRowError,
    TooFewPatchesError,
    WrongPatchSizeError,
)
from .raster import RgbImage
from .rng import derive_seed

INPUT_SIZE = 224
NET_SIZE = 56
_POOL2_SIZE = NET_SIZE // 4  # 14
FC_IN = 16 * _POOL2_SIZE * _POOL2_SIZE

PARAM_SHAPES = {
    "conv1_w": (8, 3, 3, 3),
    "conv1_b": (8,),
    "conv2_w": (16, 3, 3, 8),
    "conv2_b": (16,),
    "fc_w": (3, FC_IN),
    "fc_b": (3,),
}
PARAM_ORDER = tuple(PARAM_SHAPES)

CHECKPOINT_MAGIC = b"MNET1"

PREDICTIONS_HEADER = ["patch_id", "p_tumor", "p_stroma", "p_other"]


class Setup(enum.IntEnum):
    """The three pretraining strategies."""
    SETUP1 = 1  # generic pretrain -> domain pretrain -> target fine-tune
    SETUP2 = 2  # generic pretrain -> target fine-tune
    SETUP3 = 3  # random init -> domain pretrain -> target fine-tune


class MiniNet:
    """Weight container; all arrays float64 with the shapes in PARAM_SHAPES."""

    def __init__(self, **params: np.ndarray):
        if set(params) != set(PARAM_ORDER):
            raise ValueError(f"expected parameters {PARAM_ORDER}")
        for name, shape in PARAM_SHAPES.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr.copy())

    @classmethod
    def init_random(cls, seed: int) -> "MiniNet":
        """Per-layer uniform in +-1/sqrt(fan_in), seed-deterministic."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(**params)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "MiniNet":
        return MiniNet(**{k: v.copy() for k, v in self.params().items()})

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            for name in PARAM_ORDER:
                f.write(getattr(self, name).astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "MiniNet":
        blob = Path(path).read_bytes()
        if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {blob[:5]!r}")
        offset = len(CHECKPOINT_MAGIC)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated at parameter {name}")
            params[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
            offset = end
        if offset != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
        return cls(**params)


# ----------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------

def downsample_patch(img: RgbImage) -> np.ndarray:
    """Area-downsample a 224x224 patch to 56x56 floats in [0, 1]."""
    if img.width != INPUT_SIZE or img.height != INPUT_SIZE:
        raise WrongPatchSizeError(
            f"expected {INPUT_SIZE}x{INPUT_SIZE}, got {img.width}x{img.height}")
    f = INPUT_SIZE // NET_SIZE
    x = img.data.astype(np.float64).reshape(NET_SIZE, f, NET_SIZE, f, 3)
    return x.mean(axis=(1, 3)) / 255.0


def _im2col(xp: np.ndarray) -> np.ndarray:
    """(B, H+2, W+2, C) padded input -> (B, H, W, 9*C) 3x3 neighborhoods."""
    b, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    cols = np.empty((b, h, w, 9, c))
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return cols.reshape(b, h, w, 9 * c)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (B, H, W, 9*C) back to the padded input."""
    b, h, w, _ = dcols.shape
    dcols = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c))
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp)
    f = w.shape[0]
    y = cols @ w.reshape(f, -1).T + b
    return y, cols


def _maxpool_forward(x: np.ndarray):
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        b, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)  # first maximum on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    b, h2, w2, c = dout.shape
    dwin = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(net: MiniNet, xb: np.ndarray, want_cache: bool = False):
    xb = xb - 0.5  # center the [0, 1] inputs; all-positive inputs stall SGD
    z1, cols1 = _conv_forward(xb, net.conv1_w, net.conv1_b)
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _maxpool_forward(a1)
    z2, cols2 = _conv_forward(p1, net.conv2_w, net.conv2_b)
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _maxpool_forward(a2)
    flat = p2.reshape(xb.shape[0], FC_IN)
    logits = flat @ net.fc_w.T + net.fc_b
    probs = _softmax(logits)
    if not want_cache:
        return probs, None
    return probs, (z1, cols1, idx1, z2, cols2, idx2, flat, p1.shape, a1.shape, a2.shape)


def forward(net: MiniNet, patch: RgbImage) -> np.ndarray:
    """Class probabilities over (tumor, stroma, other) for one patch."""
    xb = downsample_patch(patch)[None]
    probs, _ = _forward_batch(net, xb)
    return probs[0]


def _decay_term(net: MiniNet, weight_decay: float) -> float:
    if weight_decay == 0.0:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.sum(v * v)) for v in net.params().values())


def _loss_batch(net: MiniNet, xb: np.ndarray, yb: np.ndarray, weight_decay: float) -> float:
    probs, _ = _forward_batch(net, xb)
    nll = -np.log(np.maximum(probs[np.arange(len(yb)), yb], 1e-300))
    return float(nll.mean()) + _decay_term(net, weight_decay)


def _loss_grads_batch(net: MiniNet, xb: np.ndarray, yb: np.ndarray,
                      weight_decay: float):
    n = xb.shape[0]
    probs, cache = _forward_batch(net, xb, want_cache=True)
    z1, cols1, idx1, z2, cols2, idx2, flat, p1_shape, a1_shape, a2_shape = cache

    nll = -np.log(np.maximum(probs[np.arange(n), yb], 1e-300))
    loss = float(nll.mean()) + _decay_term(net, weight_decay)

    dlogits = probs.copy()
    dlogits[np.arange(n), yb] -= 1.0
    dlogits /= n

    grads = {
        "fc_w": dlogits.T @ flat,
        "fc_b": dlogits.sum(axis=0),
    }
    dflat = dlogits @ net.fc_w
    dp2 = dflat.reshape(n, _POOL2_SIZE, _POOL2_SIZE, 16)
    da2 = _maxpool_backward(dp2, idx2, a2_shape[1], a2_shape[2])
    dz2 = da2 * (z2 > 0)
    grads["conv2_w"] = (dz2.reshape(-1, 16).T @ cols2.reshape(-1, 9 * 8)).reshape(16, 3, 3, 8)
    grads["conv2_b"] = dz2.sum(axis=(0, 1, 2))
    dcols2 = dz2 @ net.conv2_w.reshape(16, -1)
    dp1 = _col2im(dcols2, 8)[:, 1:-1, 1:-1, :]
    da1 = _maxpool_backward(dp1, idx1, a1_shape[1], a1_shape[2])
    dz1 = da1 * (z1 > 0)
    grads["conv1_w"] = (dz1.reshape(-1, 8).T @ cols1.reshape(-1, 9 * 3)).reshape(8, 3, 3, 3)
    grads["conv1_b"] = dz1.sum(axis=(0, 1, 2))

    if weight_decay != 0.0:
        for name, value in net.params().items():
            grads[name] = grads[name] + weight_decay * value
    return loss, grads


# ----------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------

class PatchDataset:
    """Patches downsampled once into a float array for repeated epochs."""

    def __init__(self, x: np.ndarray, y: np.ndarray, ids: list[str]):
        self.x = x  # (n, 56, 56, 3) float64
        self.y = y  # (n,) int64, class index 0..2
        self.ids = ids

    @classmethod
    def from_patches(cls, patches: Sequence[LabeledPatch]) -> "PatchDataset":
        x = np.stack([downsample_patch(p.pixels) for p in patches])
        y = np.array([int(p.label) - 1 for p in patches], dtype=np.int64)
        return cls(x, y, [p.patch_id for p in patches])

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[RgbImage, TissueClass]]) -> "PatchDataset":
        x = np.stack([downsample_patch(img) for img, _ in pairs])
        y = np.array([int(label) - 1 for _, label in pairs], dtype=np.int64)
        return cls(x, y, [f"pair_{i}" for i in range(len(pairs))])

    def subset(self, idx: np.ndarray) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx])

    def __len__(self) -> int:
        return len(self.y)


def _as_dataset(patches) -> PatchDataset:
    if isinstance(patches, PatchDataset):
        return patches
    if len(patches) and isinstance(patches[0], LabeledPatch):
        return PatchDataset.from_patches(patches)
    return PatchDataset.from_pairs(patches)


def loss_and_gradients(net: MiniNet,
                       batch: Sequence[tuple[RgbImage, TissueClass]],
                       weight_decay: float = 0.0):
    """Mean cross-entropy (+ L2 decay) and analytic gradients for a batch."""
    if len(batch) == 0:
        raise EmptyBatchError("empty batch")
    ds = _as_dataset(batch)
    return _loss_grads_batch(net, ds.x, ds.y, weight_decay)


def evaluate_accuracy(net: MiniNet, patches, chunk: int = 256) -> float:
    """Fraction of patches whose argmax class matches the label."""
    ds = _as_dataset(patches)
    correct = 0
    for start in range(0, len(ds), chunk):
        probs, _ = _forward_batch(net, ds.x[start:start + chunk])
        correct += int(np.sum(probs.argmax(axis=1) == ds.y[start:start + chunk]))
    return correct / len(ds)


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs_max: int = 30
    seed: int = 0
    patience: int = 5
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    train_accuracy: float


def _sgd_epoch(net: MiniNet, ds: PatchDataset, cfg: TrainConfig,
               rng: np.random.Generator) -> float:
    perm = rng.permutation(len(ds))
    losses = []
    for start in range(0, len(ds), cfg.batch_size):
        bidx = perm[start:start + cfg.batch_size]
        loss, grads = _loss_grads_batch(net, ds.x[bidx], ds.y[bidx], cfg.weight_decay)
        for name, g in grads.items():
            getattr(net, name)[...] -= cfg.learning_rate * g
        losses.append(loss)
    return float(np.mean(losses))


def train(net: MiniNet, patches, cfg: TrainConfig,
          trace_accuracy: bool = True) -> tuple[MiniNet, list[EpochStats]]:
    """Minibatch SGD with per-epoch seeded shuffling; returns a new net.

    ``trace_accuracy=False`` skips the per-epoch training-set accuracy
    (reported as nan) for callers that only need the final weights; weight
    updates are identical either way.
    """
    ds = _as_dataset(patches)
    if len(ds) < cfg.batch_size:
        raise TooFewPatchesError(f"{len(ds)} patches < batch_size {cfg.batch_size}")
    out = net.copy()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(1, cfg.epochs_max + 1):
        mean_loss = _sgd_epoch(out, ds, cfg, rng)
        acc = evaluate_accuracy(out, ds) if trace_accuracy else float("nan")
        trace.append(EpochStats(epoch, mean_loss, acc))
    return out, trace


def train_early_stop(net: MiniNet, patches, cfg: TrainConfig):
    """Two-phase early stopping.

    Phase 1 holds out 1/3 of the patches for validation and trains until
    validation accuracy has not improved for ``patience`` epochs (or
    epochs_max); the optimal epoch is the earliest with the highest
    validation accuracy. Phase 2 retrains from the same initial weights on
    all patches for exactly that many epochs.

    Returns (optimal_epochs, final_net, traces).
    """
    ds = _as_dataset(patches)
    if len(ds) < cfg.batch_size:
        raise TooFewPatchesError(f"{len(ds)} patches < batch_size {cfg.batch_size}")
    train_idx, val_idx = cohort.holdout_split(ds.y, 1 / 3, cfg.seed)
    train_ds, val_ds = ds.subset(train_idx), ds.subset(val_idx)
    if len(train_ds) < cfg.batch_size:
        raise TooFewPatchesError(
            f"{len(train_ds)} training patches after holdout < batch_size {cfg.batch_size}")

    probe = net.copy()
    rng = np.random.default_rng(cfg.seed)
    val_accs: list[float] = []
    best_acc, best_epoch = -1.0, 0
    for epoch in range(1, cfg.epochs_max + 1):
        _sgd_epoch(probe, train_ds, cfg, rng)
        acc = evaluate_accuracy(probe, val_ds)
        val_accs.append(acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    optimal_epochs = best_epoch
    final, phase2_trace = train(net, ds, replace(cfg, epochs_max=optimal_epochs))
    traces = {"val_accuracy": val_accs, "best_val_accuracy": best_acc,
              "phase2": phase2_trace}
    return optimal_epochs, final, traces


def cross_validate(grid: Sequence[TrainConfig], patches, k: int = 5, seed: int = 0):
    """Pick the grid config with the best mean held-out-fold accuracy.

    Returns (best_config, [(config, mean_accuracy), ...]); ties break in
    grid order.
    """
    if len(grid) == 0:
        raise EmptyGridError("empty hyperparameter grid")
    ds = _as_dataset(patches)
    folds = cohort.kfold(ds.y, k, seed)
    results = []
    for ci, cfg in enumerate(grid):
        accs = []
        for fi, fold in enumerate(folds):
            train_idx = np.concatenate([f for j, f in enumerate(folds) if j != fi])
            net0 = MiniNet.init_random(derive_seed(seed, "cv", ci, fi))
            trained, _ = train(net0, ds.subset(train_idx), cfg)
            accs.append(evaluate_accuracy(trained, ds.subset(fold)))
        results.append((cfg, float(np.mean(accs))))
    best_cfg, best_acc = results[0]
    for cfg, acc in results[1:]:
        if acc > best_acc:
            best_cfg, best_acc = cfg, acc
    return best_cfg, results


def corpus_digest(patches) -> str:
    """Content hash of a corpus (ids, labels, pixels), order-independent."""
    items = sorted((p.patch_id, int(p.label), hashlib.sha256(p.pixels.data.tobytes()).hexdigest())
                   for p in patches)
    h = hashlib.sha256()
    for pid, label, digest in items:
        h.update(f"{pid},{label},{digest};".encode())
    return h.hexdigest()


def run_setup(setup: Setup,
              generic_corpus, domain_corpus, target_corpus,
              cfg: TrainConfig,
              generic_epochs: int | None = None,
              domain_epochs: int | None = None):
    """Run one pretraining strategy end to end.

    SETUP1: generic pretrain, then domain pretrain, then early-stopped
    fine-tune on the target. SETUP2 skips the domain stage. SETUP3 skips the
    generic stage (random init). Stage epoch overrides default to
    cfg.epochs_max; 0 skips the stage's updates but still records it.

    Returns (final_net, provenance) where provenance lists every stage's
    corpus digest and epochs.
    """
    setup = Setup(setup)
    needs = {"target": target_corpus}
    if setup in (Setup.SETUP1, Setup.SETUP2):
        needs["generic"] = generic_corpus
    if setup in (Setup.SETUP1, Setup.SETUP3):
        needs["domain"] = domain_corpus
    for name, corpus in needs.items():
        if corpus is None or len(corpus) == 0:
            raise MissingCorpusError(f"{setup.name} requires a nonempty {name} corpus")

    net = MiniNet.init_random(cfg.seed)
    stages = [{"name": "init_random", "seed": cfg.seed, "epochs": 0,
               "corpus_sha256": None, "n_patches": 0}]

    def pretrain(current: MiniNet, corpus, stage: str, epochs: int) -> MiniNet:
        if epochs > 0:
            current, _ = train(current, corpus, replace(cfg, epochs_max=epochs))
        stages.append({"name": stage, "epochs": epochs,
                       "corpus_sha256": corpus_digest(corpus),
                       "n_patches": len(corpus)})
        return current

    if setup in (Setup.SETUP1, Setup.SETUP2):
        net = pretrain(net, generic_corpus,
                       "generic_pretrain",
                       cfg.epochs_max if generic_epochs is None else generic_epochs)
    if setup in (Setup.SETUP1, Setup.SETUP3):
        net = pretrain(net, domain_corpus,
                       "domain_pretrain",
                       cfg.epochs_max if domain_epochs is None else domain_epochs)

    optimal_epochs, net, traces = train_early_stop(net, target_corpus, cfg)
    stages.append({"name": "target_finetune_early_stop",
                   "epochs": optimal_epochs,
                   "corpus_sha256": corpus_digest(target_corpus),
                   "n_patches": len(target_corpus)})
    provenance = {"setup": setup.name, "stages": stages,
                  "optimal_epochs": optimal_epochs,
                  "best_val_accuracy": traces["best_val_accuracy"],
                  "val_accuracy_trace": traces["val_accuracy"]}
    return net, provenance


# ----------------------------------------------------------------------
# Classifier adapters
# ----------------------------------------------------------------------

class MiniNetClassifier:
    """Classifies records by running their pixels through a MiniNet."""

    def __init__(self, net: MiniNet):
        self.net = net

    def predict_probs(self, record) -> np.ndarray:
        return forward(self.net, record.pixels)


class LabelMapOracle:
    """One-hot predictions from the majority class of each record's rect.

    Used with synthetic slides where the rasterized annotation is ground
    truth; a rect with no labeled pixels gets uniform probabilities.
    """

    def __init__(self, labelmap: np.ndarray):
        self.labelmap = labelmap

    def predict_probs(self, record) -> np.ndarray:
        x, y, w, h = record.rect
        counts = np.bincount(self.labelmap[y:y + h, x:x + w].ravel(), minlength=4)[1:4]
        if counts.sum() == 0:
            return np.full(3, 1.0 / 3.0)
        probs = np.zeros(3)
        probs[int(np.argmax(counts))] = 1.0
        return probs


class ExternalPredictions:
    """Lookup classifier backed by a predictions CSV."""

    def __init__(self, probs_by_id: dict[str, np.ndarray]):
        self._probs = probs_by_id

    @classmethod
    def from_csv(cls, path: str | Path) -> "ExternalPredictions":
        probs_by_id: dict[str, np.ndarray] = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != PREDICTIONS_HEADER:
                raise MalformedRowError(f"{path}: expected header {PREDICTIONS_HEADER}, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 4:
                    raise MalformedRowError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
                pid = row[0]
                try:
                    p = np.array([float(v) for v in row[1:]], dtype=np.float64)
                except ValueError as e:
                    raise MalformedRowError(f"{path}:{lineno}: {e}") from e
                if np.any(p < -1e-6):
                    raise MalformedRowError(f"{path}:{lineno}: negative probability")
                total = float(p.sum())
                if abs(total - 1.0) > 1e-6:
                    raise NonNormalizedRowError(
                        f"{path}:{lineno}: probabilities sum to {total}")
                if pid in probs_by_id:
                    raise MalformedRowError(f"{path}:{lineno}: duplicate patch_id {pid!r}")
                probs_by_id[pid] = np.clip(p, 0.0, None) / total
        return cls(probs_by_id)

    def predict_probs(self, record) -> np.ndarray:
        try:
            return self._probs[record.patch_id]
        except KeyError:
            raise MissingPatchIdError(f"no prediction for patch {record.patch_id!r}") from None


def external_classifier(path: str | Path) -> ExternalPredictions:
    return ExternalPredictions.from_csv(path)


@dataclass(frozen=True)
class PatchPrediction:
    patch_id: str
    label: TissueClass
    probs: np.ndarray


def classify_manifest(classifier, patches) -> list[PatchPrediction]:
    """Argmax classification of every record (ties to the lowest class index)."""
    out = []
    for record in patches:
        probs = np.asarray(classifier.predict_probs(record), dtype=np.float64)
        label = CLASS_ORDER[int(np.argmax(probs))]
        out.append(PatchPrediction(record.patch_id, label, probs))
    return out


def write_predictions_csv(path: str | Path, predictions: Sequence[PatchPrediction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTIONS_HEADER)
        for pr in predictions:
            writer.writerow([pr.patch_id] + [repr(float(v)) for v in pr.probs])


# ----------------------------------------------------------------------
# Finite-difference gradient checking (shared by tests and demos)
# ----------------------------------------------------------------------

def _loss_and_kink_pattern(net: MiniNet, xb: np.ndarray, yb: np.ndarray,
                           weight_decay: float):
    probs, cache = _forward_batch(net, xb, want_cache=True)
    z1, _, idx1, z2, _, idx2, *_ = cache
    nll = -np.log(np.maximum(probs[np.arange(len(yb)), yb], 1e-300))
    loss = float(nll.mean()) + _decay_term(net, weight_decay)
    return loss, (z1 > 0, idx1, z2 > 0, idx2)


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(net: MiniNet, batch, seed: int = 0,
                   samples_per_tensor: int | None = None,
                   h: float = 1e-5, weight_decay: float = 0.0) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    ``samples_per_tensor`` limits the checked components per tensor (None =
    all); bias tensors are always checked exhaustively. Relative error is
    |a - fd| / max(|a|, |fd|, 1e-6).

    A central difference is only a valid derivative oracle where the loss
    is smooth on [theta - h, theta + h]; components whose perturbation
    flips a ReLU sign or a pool argmax are skipped (the loss is piecewise
    smooth, and the two-sided slope at a kink does not equal either
    one-sided derivative).
    """
    ds = _as_dataset(batch)
    xb, yb = ds.x, ds.y
    _, grads = _loss_grads_batch(net, xb, yb, weight_decay)
    rng = np.random.default_rng(seed)
    out = {}
    for name in PARAM_ORDER:
        arr = getattr(net, name)
        size = arr.size
        if samples_per_tensor is None or name.endswith("_b") or size <= samples_per_tensor:
            indices = np.arange(size)
        else:
            indices = rng.choice(size, size=samples_per_tensor, replace=False)
        worst = 0.0
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            up, pattern_up = _loss_and_kink_pattern(net, xb, yb, weight_decay)
            flat[i] = orig - h
            down, pattern_down = _loss_and_kink_pattern(net, xb, yb, weight_decay)
            flat[i] = orig
            if not _same_pattern(pattern_up, pattern_down):
                continue
            fd = (up - down) / (2 * h)
            a = gflat[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
        out[name] = worst
    return out
