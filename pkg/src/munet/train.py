"""Training loop, validation, checkpoints and evaluation helpers."""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import AugmentSpec, PatchDataset, PatchSpec, compute_class_weights, extract_patches
from .inference import predict_mosaic
from .loss import multilevel_loss_from_logits, pyramid_targets
from .metrics import confusion_matrix, per_class_metrics
from .model import MUNet, build_munet
from .pyramid import image_pyramid
from .types import LossConfig, ModelConfig, default_beta

log = logging.getLogger(__name__)


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    m_levels: int = 3
    num_classes: int = 6
    base_channels: int = 24
    beta: tuple = (0.8, 0.16, 0.04)
    epsilon: float = 1e-5
    factor_two: bool = False
    window: int = 256
    stride: int = 0  # 0: half the window (50% overlap)
    jitter: int = 32
    overlap: float = 0.75
    epochs: int = 50
    lr: float = 1e-4
    batch: int = 8
    patches_per_epoch: int = 0  # 0: every grid patch of every image
    val_fraction: float = 0.1
    augment: bool = True
    rotations: tuple = (0, 90, 180, 270)
    shear: float = 10.0
    intensity_shift: float = 0.1

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.rotations = tuple(int(r) for r in self.rotations)
        if len(self.beta) != self.m_levels:
            if self.beta == (0.8, 0.16, 0.04):
                self.beta = default_beta(self.m_levels)
            else:
                raise ValueError(f"beta has {len(self.beta)} entries for {self.m_levels} levels")
        if abs(sum(self.beta) - 1.0) > 1e-9:
            raise ValueError(f"beta must sum to 1, got {sum(self.beta)!r}")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")
        self.model_config()
        if self.stride == 0:
            self.stride = self.window // 2
        if not 0 < self.stride <= self.window:
            raise ValueError("stride must be in (0, window]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            M=self.m_levels,
            K=self.num_classes,
            base_channels=self.base_channels,
            input_window=self.window,
        )

    def loss_config(self, alpha) -> LossConfig:
        return LossConfig(tuple(alpha), self.beta, self.epsilon, self.factor_two)

    def augment_spec(self) -> AugmentSpec | None:
        if not self.augment:
            return None
        return AugmentSpec(
            rotations=self.rotations,
            shear=self.shear,
            intensity_shift=self.intensity_shift,
            seed=self.seed,
        )

    # flat key=value echo -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, name: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if name not in types:
            raise KeyError(f"unknown config key {name!r}")
        t = types[name]
        raw = raw.strip()
        if t == "tuple":
            return tuple(float(x) if name == "beta" else int(float(x)) for x in raw.split(",") if x.strip())
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{name}: bad boolean {raw!r}")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, _, v = line.partition("=")
            k = k.strip().replace("-", "_")
            values[k] = cls.parse_value(k, v)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _batch_tensors(items, device="cpu"):
    x = torch.from_numpy(np.stack([img for img, _ in items]).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack([lab for _, lab in items]).astype(np.int64))
    return x.to(device), y.to(device)


def batch_loss(model: MUNet, x: torch.Tensor, y: torch.Tensor, loss_cfg: LossConfig) -> torch.Tensor:
    M = model.config.M
    logits = model.forward_logits(image_pyramid(x, M))
    targets = pyramid_targets(y, model.config.K, M, dtype=x.dtype)
    return multilevel_loss_from_logits(targets, logits, loss_cfg)


@torch.no_grad()
def validate(model: MUNet, pairs, loss_cfg: LossConfig, batch: int = 8) -> tuple[float, float]:
    """Loss and mean defined-class hard Dice on non-overlapping validation windows."""
    if not pairs:
        return float("nan"), float("nan")
    model.eval()
    w = model.config.input_window
    spec = PatchSpec(window=w, stride=w, jitter=0, max_depth=model.config.max_depth)
    items = [p for mosaic, labels in pairs for p in extract_patches(mosaic, labels, spec, 0)]
    K = model.config.K
    cm = np.zeros((K, K), dtype=np.int64)
    loss_sum, n = 0.0, 0
    for i in range(0, len(items), batch):
        x, y = _batch_tensors(items[i : i + batch])
        M = model.config.M
        logits = model.forward_logits(image_pyramid(x, M))
        targets = pyramid_targets(y, K, M, dtype=x.dtype)
        loss = multilevel_loss_from_logits(targets, logits, loss_cfg)
        loss_sum += float(loss) * len(x)
        n += len(x)
        pred = logits[0].argmax(dim=1).numpy().astype(np.uint8)
        cm += confusion_matrix(pred, y.numpy().astype(np.uint8), K)
    mean_dice, _ = per_class_metrics(cm).mean("dice")
    return loss_sum / n, mean_dice


def split_pairs(pairs, val_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_val = int(round(len(pairs) * val_fraction))
    if val_fraction > 0 and len(pairs) > 1:
        n_val = max(n_val, 1)
    val = [pairs[i] for i in sorted(order[:n_val])]
    train = [pairs[i] for i in sorted(order[n_val:])]
    return train, val


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice: float
    val_loss: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss!r}\t{self.val_dice!r}\t{self.val_loss!r}"


def train(
    pairs,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[MUNet, list[EpochRecord], LossConfig]:
    """Train from scratch; writes ``train.log`` and ``checkpoint.best`` into ``run_dir``."""
    seed_everything(cfg.seed)
    train_pairs, val_pairs = split_pairs(pairs, cfg.val_fraction, cfg.seed)
    alpha = compute_class_weights([lab for _, lab in train_pairs], cfg.num_classes)
    loss_cfg = cfg.loss_config(alpha)
    model = build_munet(cfg.model_config(), seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    patch_spec = PatchSpec(cfg.window, cfg.stride, cfg.jitter, model.config.max_depth)
    dataset = PatchDataset(train_pairs, patch_spec, cfg.augment_spec(), cfg.seed)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "train.log", "w")
        log_file.write("# epoch\tloss\tval_dice\tval_loss\n")
        log_file.write(f"# beta={','.join(repr(b) for b in loss_cfg.beta)}\n")
        log_file.write(f"# alpha={','.join(repr(a) for a in loss_cfg.alpha)}\n")
        log_file.flush()

    history: list[EpochRecord] = []
    best = -np.inf
    try:
        for epoch in range(1, cfg.epochs + 1):
            items = dataset.epoch(epoch)
            if cfg.patches_per_epoch:
                items = items[: cfg.patches_per_epoch]
            model.train()
            total, n = 0.0, 0
            for i in range(0, len(items), cfg.batch):
                x, y = _batch_tensors(items[i : i + cfg.batch])
                opt.zero_grad()
                loss = batch_loss(model, x, y, loss_cfg)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(x)
                n += len(x)
            val_loss, val_dice = validate(model, val_pairs, loss_cfg, cfg.batch)
            rec = EpochRecord(epoch, total / max(n, 1), val_dice, val_loss)
            history.append(rec)
            log.info("epoch %d loss %.5f val_dice %.4f", epoch, rec.loss, rec.val_dice)
            if log_file is not None:
                log_file.write(rec.line() + "\n")
                log_file.flush()
            score = rec.val_dice if np.isfinite(rec.val_dice) else -rec.loss
            if run_dir is not None and score > best:
                best = score
                save_checkpoint(run_dir / "checkpoint.best", model, loss_cfg, epoch)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log_file is not None:
            log_file.close()
    if run_dir is not None and not (run_dir / "checkpoint.best").exists():
        save_checkpoint(run_dir / "checkpoint.best", model, loss_cfg, cfg.epochs)
    return model, history, loss_cfg


def save_checkpoint(path, model: MUNet, loss_cfg: LossConfig | None = None, epoch: int = 0) -> None:
    payload = {
        "format": "munet-checkpoint/1",
        "model_config": model.config.to_dict(),
        "loss_config": asdict(loss_cfg) if loss_cfg is not None else None,
        "epoch": epoch,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[MUNet, LossConfig | None]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != "munet-checkpoint/1":
        raise ConfigMismatchError(f"{path}: not a MUNet checkpoint")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expected is not None and cfg != expected:
        raise ConfigMismatchError(f"{path}: checkpoint config {cfg} does not match {expected}")
    model = MUNet(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise ConfigMismatchError(f"{path}: parameters do not match config: {exc}") from exc
    model.eval()
    lc = payload.get("loss_config")
    loss_cfg = LossConfig(**lc) if lc else None
    return model, loss_cfg


def evaluate(model, pairs, K: int, overlap: float = 0.75, window_fn=None):
    """Pooled confusion matrix over whole-mosaic predictions."""
    cm = np.zeros((K, K), dtype=np.int64)
    for mosaic, labels in pairs:
        if window_fn is None and model is None:
            raise ValueError("need a model or a window_fn")
        _, pred = predict_mosaic(model, mosaic, overlap=overlap, window_fn=window_fn)
        cm += confusion_matrix(pred, labels, K)
    return cm
