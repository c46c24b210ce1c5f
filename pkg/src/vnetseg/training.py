"""End-to-end training: minibatch assembly with on-the-fly augmentation,
SGD with momentum, staircase learning-rate decay, checkpointing, and
history logging.

Every random draw is keyed by (seed, iteration), never by arrival order, so
two runs with the same config and seed produce bit-identical histories and a
checkpoint resume continues exactly where the uninterrupted run would be.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy, augment_pair
from .losses import dice_loss_op, weighted_logistic_op
from .network import NetworkConfig, VNetModel, build
from .params_io import load_params, save_params
from .tensor import NonFiniteError, Tape, Tensor5, backward, softmax_voxelwise
from .volume import LabelVolume, Volume, load_volume

LOSSES = ("dice", "weighted_logistic")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss/gradient, bad dataset, ...)."""


@dataclass
class TrainConfig:
    minibatch: int = 2
    momentum: float = 0.99
    learning_rate: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_interval: int = 25000
    max_iterations: int = 30000
    loss: str = "dice"
    dice_reduction: str = "mean_per_volume"
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_decay_interval < 1:
            raise ValueError("lr_decay_interval must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.dice_reduction != "mean_per_volume":
            raise ValueError("only dice_reduction=mean_per_volume is supported")


@dataclass
class TrainRun:
    """Mutable training state plus the logged history."""

    iteration: int
    seed: int
    velocities: "OrderedDict[str, np.ndarray]"
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Staircase decay: lr0 * decay^floor(iteration / interval)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.learning_rate * cfg.lr_decay ** (iteration // cfg.lr_decay_interval)


def sgd_momentum_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> None:
    """In-place v <- momentum*v - lr*g; w <- w + v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}"
        )
    if not np.isfinite(grad).all():
        raise NonFiniteError("sgd step: non-finite gradient")
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


def _zscore(arr: np.ndarray) -> np.ndarray:
    sd = arr.std()
    if sd == 0.0:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / sd


def _hard_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    a = int(pred.sum())
    b = int(truth.sum())
    if a + b == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / (a + b)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _validate_dataset(dataset, config: NetworkConfig):
    if not dataset:
        raise TrainingError("dataset is empty")
    for i, (img, lab) in enumerate(dataset):
        if img.dims != config.input_dims:
            raise TrainingError(
                f"volume {i}: dims {img.dims} do not match model input {config.input_dims}"
            )
        if lab.dims != img.dims:
            raise TrainingError(f"volume {i}: label dims {lab.dims} != image dims {img.dims}")


def train(
    dataset: list[tuple[Volume, LabelVolume]],
    model: VNetModel,
    cfg: TrainConfig,
    policy: AugmentPolicy | None = None,
    out_dir: str | None = None,
    start_iteration: int = 0,
    velocities: "OrderedDict[str, np.ndarray] | None" = None,
) -> TrainRun:
    """Run the optimize loop from ``start_iteration`` to ``max_iterations``.

    Each iteration: assemble an augmented minibatch, forward, loss, backward,
    momentum step; log (iter, lr, loss, train_dice). Checkpoints land in
    ``out_dir`` as ckpt_<iter>.vpar along with history.csv.
    """
    _validate_dataset(dataset, model.config)
    if policy is None:
        policy = AugmentPolicy.disabled()
    params = model.parameters()
    if velocities is None:
        velocities = OrderedDict((n, np.zeros_like(p.values)) for n, p in params.items())
    run = TrainRun(iteration=start_iteration, seed=cfg.seed, velocities=velocities)
    n = len(dataset)

    for it in range(start_iteration, cfg.max_iterations):
        rng_batch = np.random.default_rng(np.random.SeedSequence([cfg.seed, it]))
        idx = rng_batch.choice(n, size=cfg.minibatch, replace=n < cfg.minibatch)

        imgs, labs = [], []
        for slot, di in enumerate(idx):
            img, lab = dataset[int(di)]
            if policy.deform or policy.hist_match:
                rng_aug = np.random.default_rng(np.random.SeedSequence([policy.seed, it, slot]))
                refs = [im for j, (im, _) in enumerate(dataset) if j != int(di)] or [img]
                img, lab = augment_pair(img, lab, refs, policy, rng_aug)
            arr = img.data.astype(np.float64)
            imgs.append(_zscore(arr) if cfg.normalize else arr)
            labs.append(lab.data)
        x = Tensor5(np.stack(imgs)[:, np.newaxis])
        labels = np.stack(labs)

        tape = Tape()
        logits = model.forward(x, tape)
        if cfg.loss == "dice":
            probs = softmax_voxelwise(logits, tape)
            loss_t = dice_loss_op(probs, labels, tape)
            probs_v = probs.values
        else:
            loss_t = weighted_logistic_op(logits, labels, None, tape)
            probs_v = _softmax_np(logits.values)
        loss_val = float(loss_t.values.ravel()[0])
        if not np.isfinite(loss_val):
            raise TrainingError(f"non-finite loss at iteration {it}")

        model.zero_grad()
        backward(tape, loss_t)

        lr = lr_schedule(it, cfg)
        try:
            for name, p in params.items():
                grad = p.grad if p.grad is not None else np.zeros_like(p.values)
                sgd_momentum_step(p.values, grad, velocities[name], lr, cfg.momentum)
        except NonFiniteError as exc:
            raise TrainingError(f"iteration {it}, parameter {name}: {exc}") from exc

        train_dice = float(
            np.mean([_hard_dice(probs_v[b, 1] > 0.5, labels[b]) for b in range(len(labs))])
        )
        run.history.append((it, lr, loss_val, train_dice))
        run.iteration = it + 1

        if (
            out_dir
            and cfg.checkpoint_interval
            and run.iteration % cfg.checkpoint_interval == 0
            and run.iteration < cfg.max_iterations
        ):
            save_checkpoint(
                os.path.join(out_dir, f"ckpt_{run.iteration}.vpar"), model, run
            )

    if out_dir:
        save_checkpoint(os.path.join(out_dir, f"ckpt_{run.iteration}.vpar"), model, run)
        write_history(os.path.join(out_dir, "history.csv"), run.history)
    return run


# ---------------------------------------------------------------------------
# checkpointing and history


def save_checkpoint(path: str, model: VNetModel, run: TrainRun) -> None:
    """Parameters + velocities + iteration + RNG seed, self-describing."""
    cfg = model.config
    blocks: OrderedDict[str, np.ndarray] = OrderedDict()
    blocks["meta/iteration"] = np.float64(run.iteration)
    blocks["meta/seed"] = np.float64(run.seed)
    blocks["meta/stages"] = np.float64(cfg.num_stages)
    blocks["meta/base_channels"] = np.float64(cfg.base_channels)
    blocks["meta/kernel"] = np.float64(cfg.kernel)
    blocks["meta/input_dims"] = np.asarray(cfg.input_dims, dtype=np.float64)
    blocks["meta/convs_down"] = np.asarray(cfg.convs_down, dtype=np.float64)
    blocks["meta/convs_up"] = np.asarray(cfg.convs_up, dtype=np.float64)
    for name, p in model.parameters().items():
        blocks[name] = p.values
    for name, v in run.velocities.items():
        blocks[f"velocity/{name}"] = v
    save_params(blocks, path)


def load_checkpoint(path: str) -> tuple[VNetModel, TrainRun]:
    """Rebuild the model and training state recorded by ``save_checkpoint``."""
    blocks = load_params(path)
    cfg = NetworkConfig(
        input_dims=tuple(int(v) for v in blocks["meta/input_dims"]),
        num_stages=int(blocks["meta/stages"]),
        base_channels=int(blocks["meta/base_channels"]),
        convs_down=tuple(int(v) for v in blocks["meta/convs_down"]),
        convs_up=tuple(int(v) for v in blocks["meta/convs_up"]),
        kernel=int(blocks["meta/kernel"]),
    )
    model = build(cfg, seed=0)
    model.load_state(blocks)
    velocities = OrderedDict()
    for name in model.parameters():
        key = f"velocity/{name}"
        if key not in blocks:
            raise KeyError(f"checkpoint missing velocity block {key!r}")
        velocities[name] = np.asarray(blocks[key], dtype=np.float64).copy()
    run = TrainRun(
        iteration=int(blocks["meta/iteration"]),
        seed=int(blocks["meta/seed"]),
        velocities=velocities,
    )
    return model, run


def write_history(path: str, rows) -> None:
    with open(path, "w") as f:
        f.write("iter,lr,loss,train_dice\n")
        for it, lr, loss, dice in rows:
            f.write(f"{it},{lr!r},{loss!r},{dice!r}\n")


def read_history(path: str) -> list[tuple[int, float, float, float]]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "iter,lr,loss,train_dice":
            raise ValueError(f"unexpected history header {header!r}")
        for line in f:
            it, lr, loss, dice = line.strip().split(",")
            rows.append((int(it), float(lr), float(loss), float(dice)))
    return rows


def load_dataset(data_dir: str) -> list[tuple[str, Volume, LabelVolume]]:
    """Load (name, image, label) triples from ``<name>_image.vvol`` /
    ``<name>_label.vvol`` pairs in a directory."""
    names = sorted(
        f[: -len("_image.vvol")]
        for f in os.listdir(data_dir)
        if f.endswith("_image.vvol")
    )
    if not names:
        raise TrainingError(f"no *_image.vvol files in {data_dir}")
    triples = []
    for name in names:
        img = load_volume(os.path.join(data_dir, f"{name}_image.vvol"))
        lab_path = os.path.join(data_dir, f"{name}_label.vvol")
        if not os.path.exists(lab_path):
            raise TrainingError(f"missing label file for {name}")
        lab = load_volume(lab_path)
        if not isinstance(lab, LabelVolume):
            raise TrainingError(f"{name}_label.vvol is not a label volume")
        if isinstance(img, LabelVolume):
            raise TrainingError(f"{name}_image.vvol is a label volume, expected image")
        triples.append((name, img, lab))
    return triples
