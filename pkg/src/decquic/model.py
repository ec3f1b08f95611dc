"""Response-count estimator: CNN feature extractor, GRU over the time axis,
single-head scaled-dot-product self-attention, and a two-layer classifier head.

Images enter as (B, 2, 32, 32) tensors scaled to [0, 1], laid out with length
bins on the height axis and time bins on the width axis.  Three conv+pool
stages (64@6x6, 128@3x3, 256@3x3, each ReLU + 2x2 max-pool) reduce 32x32 to
4x4; the width axis is then read as a 4-step sequence of 256*4 features for
the GRU.  Attention re-weights the GRU outputs and the pooled context feeds
FC-1 -> ReLU -> dropout(0.3) -> FC-2 into 21 logits.

Training uses Adam with a reduce-on-plateau schedule (30% cuts), early
stopping on validation loss, inverse-frequency class weights from the
training split, and noise augmentation of minority-class samples only.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DecquicError, GradientCheckError
from .featurize import AugmentSpec, ImageDataset, load_image_dataset
from .losses import K_CLASSES, LossParams, class_weights
from .synth import stream_rng

CKPT_FORMAT = "decquic-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, int, int] = (64, 128, 256)
    conv_kernels: tuple[int, int, int] = (6, 3, 3)
    gru_hidden: int = 128
    fc1_units: int = 256
    dropout_p: float = 0.3
    n_classes: int = K_CLASSES
    in_channels: int = 2
    image_size: int = 32

    def __post_init__(self) -> None:
        if len(self.conv_channels) != 3 or len(self.conv_kernels) != 3:
            raise ConfigError("expected three conv stages")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.image_size % 8 != 0:
            raise ConfigError("image_size must be divisible by 8 (three 2x2 pools)")


TINY_CONFIG = ModelConfig(
    conv_channels=(4, 8, 8), conv_kernels=(6, 3, 3), gru_hidden=8, fc1_units=16, dropout_p=0.0
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    scheduler_factor: float = 0.7
    scheduler_patience: int = 3
    early_stop_patience: int = 6
    max_epochs: int = 30
    val_fraction: float = 0.1
    seed: int = 0
    loss: LossParams = field(default_factory=LossParams)
    reweight_classes: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over a short sequence."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        scores = torch.bmm(self.q(h), self.k(h).transpose(1, 2)) * self.scale
        attn = torch.softmax(scores, dim=-1)
        return torch.bmm(attn, self.v(h))


class ResponseCountNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = (config.in_channels, *config.conv_channels)
        stages: list[nn.Module] = []
        for c_in, c_out, k in zip(chans, chans[1:], config.conv_kernels):
            if k % 2 == 0:
                # size-preserving padding for even kernels is asymmetric
                stages.append(nn.ZeroPad2d((k // 2 - 1, k // 2, k // 2 - 1, k // 2)))
                stages.append(nn.Conv2d(c_in, c_out, k))
            else:
                stages.append(nn.Conv2d(c_in, c_out, k, padding=k // 2))
            stages.append(nn.ReLU())
            stages.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*stages)
        side = config.image_size // 8
        self.gru = nn.GRU(config.conv_channels[-1] * side, config.gru_hidden, batch_first=True)
        self.attention = SelfAttention(config.gru_hidden)
        self.fc1 = nn.Linear(config.gru_hidden, config.fc1_units)
        self.dropout = nn.Dropout(config.dropout_p)
        self.fc2 = nn.Linear(config.fc1_units, config.n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"expected input (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}"
            )
        z = self.features(x)  # (B, C, H', W'), width = time
        b, c, h, w = z.shape
        seq = z.permute(0, 3, 1, 2).reshape(b, w, c * h)
        out, _ = self.gru(seq)
        ctx = self.attention(out).mean(dim=1)
        return self.fc2(self.dropout(torch.relu(self.fc1(ctx))))


class CombinedLoss(nn.Module):
    """Torch twin of losses.combined_loss, used inside the training loop.

    Kept numerically identical to the numpy reference (softmax probabilities
    for the focal and distance terms, raw logits through sigmoids for the
    ordinal term, 1e-12 probability floor, ordinal term averaged over the K
    binary components).
    """

    def __init__(self, params: LossParams):
        super().__init__()
        self.alpha = float(params.alpha)
        self.beta = float(params.beta)
        self.gamma = float(params.gamma)
        self.register_buffer("class_w", torch.as_tensor(params.class_weights, dtype=torch.float64))

    def forward(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        idx = torch.arange(logits.shape[1], device=logits.device)
        w = self.class_w.to(logits.dtype)

        p = torch.softmax(logits, dim=1)
        p_y = p.gather(1, targets.unsqueeze(1)).squeeze(1).clamp(1e-12, 1.0 - 1e-9)
        fl = -w[targets] * (1.0 - p_y).pow(self.gamma) * torch.log(p_y)

        dist = (idx.unsqueeze(0) - targets.unsqueeze(1)).abs().to(logits.dtype)
        dbl = (p * dist).sum(dim=1)

        cum_targets = (idx.unsqueeze(0) <= targets.unsqueeze(1)).to(logits.dtype)
        orl = nn.functional.binary_cross_entropy_with_logits(
            logits, cum_targets, reduction="none"
        ).mean(dim=1)

        total = self.alpha * fl + (1.0 - self.alpha) * (self.beta * orl + (1.0 - self.beta) * dbl)
        return total.mean()


def to_input_tensor(images_u8: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, 2, M, N) uint8 grids -> (B, 2, N, M) float tensor in [0, 1].

    The transpose puts length bins on the height axis and time bins on the
    width axis, matching the network's sequence layout.
    """
    x = torch.from_numpy(np.ascontiguousarray(images_u8)).to(dtype)
    return x.div(255.0).transpose(-1, -2).contiguous()


@dataclass
class TrainedModel:
    net: ResponseCountNet
    config: ModelConfig
    history: list[dict]
    label_histogram: np.ndarray
    loss_params: LossParams

    def logits(self, images_u8: np.ndarray) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            return self.net(to_input_tensor(images_u8)).numpy()


def predict_batch(model: TrainedModel, images_u8: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class per image; ties resolve to the smaller class index."""
    out = []
    for i in range(0, len(images_u8), batch_size):
        logits = model.logits(images_u8[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def predict(model: TrainedModel, image_u8: np.ndarray) -> int:
    """Class index for a single (2, M, N) image."""
    return int(predict_batch(model, image_u8[None])[0])


def _augment_minority(
    images: np.ndarray, labels: np.ndarray, aug: AugmentSpec, rng: np.random.Generator
) -> np.ndarray:
    """Fresh noisy copies for minority-class samples; others pass through."""
    sel = (labels >= aug.class_lo) & (labels <= aug.class_hi)
    if not sel.any() or aug.noise_std == 0:
        return images
    out = images.copy()
    sub = out[sel].astype(np.float64)
    noise = rng.normal(0.0, aug.noise_std, size=sub.shape)
    # all-zero channels stay zero so the empty-direction invariant survives
    nonzero = sub.reshape(sub.shape[0], sub.shape[1], -1).any(axis=2)
    noisy = np.clip(np.floor(sub + noise + 0.5), 0, 255)
    sub = np.where(nonzero[:, :, None, None], noisy, sub)
    out[sel] = sub.astype(np.uint8)
    return out


def split_train_val(
    dataset: ImageDataset, val_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Index split for training vs validation, grouped by trace when possible."""
    rng = stream_rng(seed, 1)
    traces = list(dict.fromkeys(dataset.trace_ids))
    if len(traces) >= 2:
        order = rng.permutation(len(traces))
        n_val = max(1, round(val_fraction * len(traces)))
        n_val = min(n_val, len(traces) - 1)
        val_traces = {traces[i] for i in order[:n_val]}
        mask = np.array([tid in val_traces for tid in dataset.trace_ids])
    else:
        order = rng.permutation(len(dataset))
        n_val = max(1, int(round(val_fraction * len(dataset))))
        mask = np.zeros(len(dataset), dtype=bool)
        mask[order[:n_val]] = True
    val_idx = np.flatnonzero(mask)
    train_idx = np.flatnonzero(~mask)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise DecquicError("train/validation split produced an empty side")
    return train_idx, val_idx


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train(
    dataset: ImageDataset | str | Path,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    augment_spec: AugmentSpec | None = AugmentSpec(),
    log=None,
) -> TrainedModel:
    """Train on an image dataset (or its manifest path); returns the weights
    that achieved the best validation loss."""
    if isinstance(dataset, (str, Path)):
        dataset = load_image_dataset(dataset)
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if dataset.labels.min() < 0 or dataset.labels.max() >= model_config.n_classes:
        raise ConfigError(
            f"labels must be in 0..{model_config.n_classes - 1}; "
            f"found {dataset.labels.min()}..{dataset.labels.max()}"
        )

    train_idx, val_idx = split_train_val(dataset, train_config.val_fraction, train_config.seed)
    train_set = dataset.subset(train_idx)
    val_set = dataset.subset(val_idx)

    hist = np.bincount(train_set.labels, minlength=K_CLASSES)
    params = train_config.loss
    if train_config.reweight_classes:
        params = replace(params, class_weights=class_weights(hist))

    torch.manual_seed(train_config.seed)
    net = ResponseCountNet(model_config)
    criterion = CombinedLoss(params)
    optimizer = torch.optim.Adam(net.parameters(), lr=train_config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=train_config.scheduler_factor, patience=train_config.scheduler_patience
    )

    x_val = to_input_tensor(val_set.images)
    y_val = torch.from_numpy(val_set.labels)

    history: list[dict] = []
    best_val = math.inf
    best_state = None
    bad_epochs = 0

    for epoch in range(train_config.max_epochs):
        imgs = train_set.images
        if augment_spec is not None:
            imgs = _augment_minority(
                imgs, train_set.labels, augment_spec, stream_rng(train_config.seed, 10_000 + epoch)
            )
        net.train()
        batch_rng = stream_rng(train_config.seed, 100 + epoch)
        total_loss = 0.0
        for batch_no, idx in enumerate(_epoch_batches(len(train_set), train_config.batch_size, batch_rng)):
            x = to_input_tensor(imgs[idx])
            y = torch.from_numpy(train_set.labels[idx])
            optimizer.zero_grad()
            loss = criterion(net(x), y)
            if not torch.isfinite(loss):
                raise DecquicError(f"non-finite training loss at epoch {epoch}, batch {batch_no}")
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(idx)
        train_loss = total_loss / len(train_set)

        net.eval()
        with torch.no_grad():
            val_logits = net(x_val)
            val_loss = float(criterion(val_logits, y_val))
            val_pred = val_logits.numpy().argmax(axis=1)
        val_cap1 = float(np.mean(np.abs(val_pred - val_set.labels) <= 1))

        scheduler.step(val_loss)
        lr_now = optimizer.param_groups[0]["lr"]
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_cap1": val_cap1,
                "lr": lr_now,
            }
        )
        if log is not None:
            log(
                f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
                f"cap1 {val_cap1:.3f}  lr {lr_now:.2e}"
            )

        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.early_stop_patience:
                break

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return TrainedModel(
        net=net, config=model_config, history=history, label_histogram=hist, loss_params=params
    )


def grid_search(
    dataset: ImageDataset | str | Path,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    alphas=(0.0, 0.3, 0.5, 0.7, 1.0),
    betas=(0.0, 0.4, 0.6, 1.0),
    gammas=(1.0, 2.0, 3.0),
    out_csv: str | Path | None = None,
    log=None,
) -> tuple[LossParams, list[dict]]:
    """Train one model per (alpha, beta, gamma) and pick the lowest val loss."""
    if isinstance(dataset, (str, Path)):
        dataset = load_image_dataset(dataset)
    rows: list[dict] = []
    best: tuple[float, LossParams] | None = None
    for a in alphas:
        for b in betas:
            for g in gammas:
                params = replace(train_config.loss, alpha=a, beta=b, gamma=g)
                tm = train(dataset, model_config, replace(train_config, loss=params))
                val_loss = min(h["val_loss"] for h in tm.history)
                best_epoch = min(tm.history, key=lambda h: h["val_loss"])
                row = {
                    "alpha": a,
                    "beta": b,
                    "gamma": g,
                    "val_loss": val_loss,
                    "val_cap1": best_epoch["val_cap1"],
                }
                rows.append(row)
                if log is not None:
                    log(
                        f"alpha={a} beta={b} gamma={g}  val_loss={val_loss:.4f}  "
                        f"cap1={best_epoch['val_cap1']:.3f}"
                    )
                if best is None or val_loss < best[0]:
                    best = (val_loss, tm.loss_params)
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["alpha", "beta", "gamma", "val_loss", "val_cap1"])
            for r in rows:
                writer.writerow(
                    [r["alpha"], r["beta"], r["gamma"], f"{r['val_loss']:.6f}", f"{r['val_cap1']:.6f}"]
                )
    assert best is not None
    return best[1], rows


def backward_check(
    model_config: ModelConfig = TINY_CONFIG,
    n_samples: int = 3,
    seed: int = 0,
    loss_params: LossParams | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    zero_final_layer: bool = False,
) -> dict:
    """Compare autograd gradients of the combined loss against central finite
    differences for every parameter, in double precision.

    Requires dropout_p == 0 (a random forward would make the comparison
    meaningless).  Returns a report with the worst parameter block; raises
    GradientCheckError if any block exceeds the tolerance.
    """
    if model_config.dropout_p != 0.0:
        raise ConfigError("backward_check requires dropout_p == 0 (deterministic forward)")
    if loss_params is None:
        loss_params = LossParams(alpha=0.7, beta=0.4, gamma=2.0)

    torch.manual_seed(seed)
    net = ResponseCountNet(model_config).double()
    if zero_final_layer:
        with torch.no_grad():
            net.fc2.weight.zero_()
            net.fc2.bias.zero_()
    net.eval()
    criterion = CombinedLoss(loss_params).double()
    size = model_config.image_size
    x = torch.rand(n_samples, model_config.in_channels, size, size, dtype=torch.float64)
    y = torch.randint(0, model_config.n_classes, (n_samples,))

    def loss_value() -> float:
        with torch.no_grad():
            return float(criterion(net(x), y))

    net.zero_grad()
    criterion(net(x), y).backward()

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    n_params = 0
    for name, p in net.named_parameters():
        analytic = p.grad.detach().reshape(-1).numpy().copy()
        flat = p.detach().reshape(-1)
        numeric = np.empty_like(analytic)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float(np.max(np.abs(analytic - numeric) / denom))
        per_param[name] = rel
        n_params += flat.numel()
        if rel > worst[1]:
            worst = (name, rel)

    report = {
        "max_rel_err": worst[1],
        "worst_param": worst[0],
        "per_param": per_param,
        "n_params": n_params,
        "tolerance": tolerance,
    }
    if worst[1] > tolerance:
        raise GradientCheckError(
            f"gradient check failed for parameter block {worst[0]!r}: "
            f"max relative error {worst[1]:.3e} > {tolerance:.0e}"
        )
    return report


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line + concatenated little-endian float32
# tensors in state_dict order; byte-identical for identical weights
# ---------------------------------------------------------------------------


def save_model(model: TrainedModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    tensors = []
    blobs = []
    for name, t in state.items():
        arr = t.detach().to(torch.float32).numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format": CKPT_FORMAT,
        "model_config": asdict(model.config),
        "label_histogram": [int(c) for c in model.label_histogram],
        "loss_params": {
            "alpha": model.loss_params.alpha,
            "beta": model.loss_params.beta,
            "gamma": model.loss_params.gamma,
            "class_weights": [float(w) for w in model.loss_params.class_weights],
        },
        "history": model.history,
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for blob in blobs:
            f.write(blob)


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != CKPT_FORMAT:
            raise ConfigError(f"{path} is not a {CKPT_FORMAT} checkpoint")
        cfg_d = header["model_config"]
        for key in ("conv_channels", "conv_kernels"):
            cfg_d[key] = tuple(cfg_d[key])
        config = ModelConfig(**cfg_d)
        net = ResponseCountNet(config)
        state = {}
        for meta in header["tensors"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape)
            state[meta["name"]] = torch.from_numpy(data.copy())
    net.load_state_dict(state)
    net.eval()
    lp = header["loss_params"]
    return TrainedModel(
        net=net,
        config=config,
        history=header["history"],
        label_histogram=np.array(header["label_histogram"], dtype=np.int64),
        loss_params=LossParams(
            alpha=lp["alpha"],
            beta=lp["beta"],
            gamma=lp["gamma"],
            class_weights=np.array(lp["class_weights"]),
        ),
    )
