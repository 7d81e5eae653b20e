"""Supervised convolutional baseline over multichannel segments.

Two parallel feature extractors — a per-variable convolution applied with a
shared kernel to each channel separately, and a cross-channel temporal
convolution — are each batch-normalized, rectified, and collapsed by 1x1
convolutions, concatenated, passed through a final temporal convolution, and
reduced by global average pooling straight into two-class softmax logits
(no dense head anywhere).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (ConfigInvalid, EmptyClass, NonFiniteLoss, ShapeMismatch)
from .preprocess import SegmentBatch

N_CLASSES = 2


def _odd(k: int) -> int:
    """Symmetric same-padding needs odd kernels; round even sizes up."""
    return k if k % 2 == 1 else k + 1


@dataclass(frozen=True)
class XcmConfig:
    t_len: int = 1280
    d: int = 4
    window_fraction: float = 0.3
    filters: int = 128
    epochs: int = 10
    batch: int = 128
    lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.t_len <= 0 or self.d <= 0:
            raise ConfigInvalid("t_len and d must be positive")
        if not 0.0 < self.window_fraction <= 1.0:
            raise ConfigInvalid("window_fraction must lie in (0, 1]")
        if self.kernel > self.t_len:
            raise ConfigInvalid(f"kernel {self.kernel} exceeds t_len "
                                f"{self.t_len}")
        if self.filters < 1 or self.epochs < 1 or self.batch < 1 \
                or self.lr <= 0:
            raise ConfigInvalid("filters, epochs, batch, lr must be positive")

    @property
    def kernel(self) -> int:
        return math.ceil(self.window_fraction * self.t_len)


@dataclass
class XcmModel:
    cfg: XcmConfig
    params: dict
    bn: dict
    history: list = field(default_factory=list)


def build_model(cfg: XcmConfig) -> XcmModel:
    rng = np.random.default_rng(cfg.seed)
    f = cfg.filters
    k = _odd(cfg.kernel)
    params: dict[str, ad.Tensor] = {}
    bn: dict[str, ad.BatchNormState] = {}

    def block(name: str, c_in: int) -> None:
        kk, kb = ad.init_conv(rng, f, c_in, k)
        params[f"{name}.k"] = kk
        params[f"{name}.b"] = kb
        params[f"{name}.gamma"] = ad.parameter(np.ones(f))
        params[f"{name}.beta"] = ad.parameter(np.zeros(f))
        bn[name] = ad.BatchNormState.for_channels(f)

    block("convA", 1)                       # shared per-variable kernel
    ck, cb = ad.init_conv(rng, 1, f, 1)
    params.update({"colA.k": ck, "colA.b": cb})
    block("convB", cfg.d)
    ck, cb = ad.init_conv(rng, 1, f, 1)
    params.update({"colB.k": ck, "colB.b": cb})
    block("convC", cfg.d + 1)
    # zero-init classifier head: initial logits are exactly 0 on any input,
    # so training starts from the neutral ln2 loss instead of an arbitrary
    # random class preference
    params["head.k"] = ad.parameter(np.zeros((N_CLASSES, f, 1)))
    params["head.b"] = ad.parameter(np.zeros(N_CLASSES))
    return XcmModel(cfg=cfg, params=params, bn=bn)


def _conv_block(model: XcmModel, name: str, x: ad.Tensor,
                train: bool) -> ad.Tensor:
    p = model.params
    h = ad.conv1d(x, p[f"{name}.k"], p[f"{name}.b"])
    h = ad.batchnorm1d(h, p[f"{name}.gamma"], p[f"{name}.beta"],
                       model.bn[name], train)
    return ad.relu(h)


def logits(model: XcmModel, x: np.ndarray, train: bool = False) -> ad.Tensor:
    """[N, d, T] -> pre-softmax class scores [N, 2]."""
    cfg = model.cfg
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != cfg.d or x.shape[2] != cfg.t_len:
        raise ShapeMismatch(f"expected [N,{cfg.d},{cfg.t_len}], "
                            f"got {x.shape}")
    n = x.shape[0]
    p = model.params
    xt = ad.tensor(x)

    per_var = ad.reshape(xt, (n * cfg.d, 1, cfg.t_len))
    a = _conv_block(model, "convA", per_var, train)
    a = ad.conv1d(a, p["colA.k"], p["colA.b"])          # linear collapse
    a = ad.reshape(a, (n, cfg.d, cfg.t_len))

    b = _conv_block(model, "convB", xt, train)
    b = ad.conv1d(b, p["colB.k"], p["colB.b"])          # [N, 1, T]

    joint = ad.concat([a, b], axis=1)                   # [N, d+1, T]
    c = _conv_block(model, "convC", joint, train)
    maps = ad.conv1d(c, p["head.k"], p["head.b"])       # [N, 2, T]
    pooled = ad.avgpool1d(maps, cfg.t_len)              # [N, 2, 1]
    return ad.reshape(pooled, (n, N_CLASSES))


def xcm_forward(model: XcmModel, x: np.ndarray,
                train: bool = False) -> np.ndarray:
    """Class probabilities [N, 2]; rows sum to 1."""
    with ad.no_grad():
        z = logits(model, x, train)
        return ad.softmax(z).data


def predict(model: XcmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and signed scores (logit difference, positive = class 1)."""
    with ad.no_grad():
        z = logits(model, x).data
    scores = z[:, 1] - z[:, 0]
    return (scores > 0).astype(np.int64), scores


def xcm_train(batch_train: SegmentBatch, batch_val: SegmentBatch,
              cfg: XcmConfig) -> tuple[XcmModel, list]:
    """Minimize cross-entropy with Adam; deterministic for a fixed seed."""
    if batch_train.labels is None:
        raise EmptyClass("supervised training requires labels")
    x_all = np.asarray(batch_train.values, dtype=np.float64)
    y_all = np.asarray(batch_train.labels)
    for k in range(N_CLASSES):
        if not (y_all == k).any():
            raise EmptyClass(f"no training samples for class {k}")
    val_x = np.asarray(batch_val.values, dtype=np.float64)
    val_y = None if batch_val.labels is None \
        else np.asarray(batch_val.labels)

    model = build_model(cfg)
    adam = ad.AdamState(learning_rate=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    history: list[dict] = []
    n = len(x_all)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        hits = 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            z = logits(model, x_all[idx], train=True)
            loss = ad.softmax_cross_entropy(z, y_all[idx])
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"epoch {epoch}: loss {float(loss.data)}")
            loss.backward()
            ad.adam_step(adam, model.params, ad.collect_grads(model.params))
            ad.zero_grads(model.params)
            loss_sum += float(loss.data) * len(idx)
            hits += int((z.data.argmax(axis=1) == y_all[idx]).sum())

        row = {"epoch": epoch, "train_loss": loss_sum / n,
               "train_acc": hits / n, "val_loss": None, "val_acc": None}
        if len(val_x) and val_y is not None:
            with ad.no_grad():
                zv = logits(model, val_x, train=False)
                row["val_loss"] = float(
                    ad.softmax_cross_entropy(zv, val_y).data)
            row["val_acc"] = float((zv.data.argmax(axis=1) == val_y).mean())
        history.append(row)
    model.history = history
    return model, history


def history_csv(history: list) -> str:
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for r in history:
        cells = [str(r["epoch"])] + \
            ["" if r[k] is None else repr(r[k]) for k in
             ("train_loss", "train_acc", "val_loss", "val_acc")]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parameter_count(model: XcmModel) -> int:
    return sum(t.data.size for t in model.params.values())


def save_model(model: XcmModel, path: str) -> None:
    named = {k: t.data for k, t in model.params.items()}
    for k, s in model.bn.items():
        named[f"{k}.running_mean"] = s.mean
        named[f"{k}.running_var"] = s.var
    ad.save_checkpoint(path, named)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"config": dataclasses.asdict(model.cfg)}, fh, indent=1)


def load_model(path: str) -> XcmModel:
    with open(path + ".json", encoding="utf-8") as fh:
        cfg = XcmConfig(**json.load(fh)["config"])
    model = build_model(cfg)
    named = ad.load_checkpoint(path)
    for k, t in model.params.items():
        t.data[...] = named[k]
    for k, s in model.bn.items():
        s.mean[...] = named[f"{k}.running_mean"]
        s.var[...] = named[f"{k}.running_var"]
    return model
