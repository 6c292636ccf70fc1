"""Depth-enhanced fused feature pyramid classifier.

Architecture
------------
A residual backbone emits ``C1..C5`` with channels ``64, 64, 128, 256, 512``
(times ``width``) at strides ``2, 4, 8, 16, 32``. ``C2..C5`` are projected to
a common bottleneck by 1x1 convolutions and merged top-down, each coarser
level being upsampled by a learned 2x deconvolution and added to the next
lateral. The four pyramid levels are then bilinearly upsampled to the finest
level, concatenated, mixed by one 3x3 convolution, globally average pooled
and mapped to roof / façade / background logits by a fully connected layer.

Tensors, autograd and the optimizer come from torch; everything specific to
the classifier (layer layout, depth-channel initialization, schedule, model
selection, serialization) lives here.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import struct
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from . import io
from .errors import EmptyClass, ParseError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

CLASSES = ("roof", "facade", "background")
ROOF, FACADE, BACKGROUND = 0, 1, 2
LADDER = (64, 64, 128, 256, 512)
BOTTLENECK = 256
_MAGIC = b"FFPW"


def scaled(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


class PyramidFeatures(NamedTuple):
    C1: torch.Tensor
    C2: torch.Tensor
    C3: torch.Tensor
    C4: torch.Tensor
    C5: torch.Tensor


class BasicBlock(nn.Module):
    """Two 3x3 conv/BN layers with an identity or projected shortcut."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


def _stage(cin, cout, blocks):
    layers = [BasicBlock(cin, cout, 2)]
    layers += [BasicBlock(cout, cout, 1) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    def __init__(self, in_channels=4, width=1.0, blocks=(1, 1, 1, 1)):
        super().__init__()
        ch = [scaled(c, width) for c in LADDER]
        self.in_channels = in_channels
        self.channels = tuple(ch)
        self.conv1 = nn.Conv2d(in_channels, ch[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(ch[0])
        self.relu = nn.ReLU()
        self.layer2 = _stage(ch[0], ch[1], blocks[0])
        self.layer3 = _stage(ch[1], ch[2], blocks[1])
        self.layer4 = _stage(ch[2], ch[3], blocks[2])
        self.layer5 = _stage(ch[3], ch[4], blocks[3])

    def forward(self, x) -> PyramidFeatures:
        check_input(x, self.in_channels)
        c1 = self.relu(self.bn1(self.conv1(x)))
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        c5 = self.layer5(c4)
        return PyramidFeatures(c1, c2, c3, c4, c5)


def check_input(x, channels: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, I, I) input, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    if c != channels:
        raise ShapeError(f"expected {channels} input channels, got {c}")
    if h != w or h % 32 or h == 0:
        raise ShapeError(f"input size must be square and divisible by 32, got {h}x{w}")


class FeaturePyramid(nn.Module):
    """Lateral 1x1 projections plus a deconvolution top-down pathway."""

    def __init__(self, channels: Sequence[int], bottleneck: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, bottleneck, 1) for c in channels)
        self.upsample = nn.ModuleList(nn.ConvTranspose2d(bottleneck, bottleneck, 2, 2) for _ in channels[1:])

    def forward(self, c2=None, c3=None, c4=None, c5=None):
        """Return ``[P2, P3, P4, P5]``; missing finer inputs yield None levels."""
        feats = [c2, c3, c4, c5]
        if c5 is None:
            raise ShapeError("the coarsest level C5 is required")
        out = [None] * 4
        top = self.lateral[3](c5)
        out[3] = top
        for k in (2, 1, 0):
            if feats[k] is None:
                break
            lat = self.lateral[k](feats[k])
            up = self.upsample[k](top)
            if up.shape != lat.shape:
                raise ShapeError(f"top-down {tuple(up.shape)} does not match lateral {tuple(lat.shape)}")
            top = lat + up
            out[k] = top
        return out


class PyramidFusion(nn.Module):
    """Upsample all levels to the finest one, concatenate, mix with a 3x3 conv."""

    def __init__(self, bottleneck: int, levels: int = 4, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(levels * bottleneck, bottleneck, kernel, 1, kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(bottleneck)
        self.relu = nn.ReLU()

    @staticmethod
    def concat(levels):
        widths = {p.shape[1] for p in levels}
        if len(widths) != 1:
            raise ShapeError(f"pyramid levels have different widths {sorted(widths)}")
        size = levels[0].shape[-2:]
        ups = [levels[0]] + [F.interpolate(p, size=size, mode="bilinear", align_corners=False) for p in levels[1:]]
        return torch.cat(ups, dim=1)

    def forward(self, levels):
        return self.relu(self.bn(self.conv(self.concat(levels))))


class ClassifierHead(nn.Module):
    def __init__(self, channels: int, n_classes: int = 3):
        super().__init__()
        self.fc = nn.Linear(channels, n_classes)

    def forward(self, fused):
        return self.fc(fused.mean(dim=(2, 3)))


class FusedPyramidNet(nn.Module):
    """Backbone + pyramid + fusion + head; ``forward`` returns logits."""

    def __init__(self, in_channels=4, width=1.0, bottleneck=None, blocks=(1, 1, 1, 1), n_classes=3):
        super().__init__()
        bottleneck = bottleneck or scaled(BOTTLENECK, width)
        self.config = {
            "in_channels": int(in_channels),
            "width": float(width),
            "bottleneck": int(bottleneck),
            "blocks": [int(b) for b in blocks],
            "n_classes": int(n_classes),
        }
        self.backbone = Backbone(in_channels, width, blocks)
        self.pyramid = FeaturePyramid(self.backbone.channels[1:], bottleneck)
        self.fusion = PyramidFusion(bottleneck)
        self.head = ClassifierHead(bottleneck, n_classes)

    def forward(self, x):
        f = self.backbone(x)
        p = self.pyramid(f.C2, f.C3, f.C4, f.C5)
        return self.head(self.fusion(p))

    def predict_proba(self, x):
        return torch.softmax(self.forward(x), dim=1)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# depth-channel initialization


def init_depth_channel(rgb_kernels) -> torch.Tensor:
    """Append a depth input channel whose kernel is the mean of the RGB kernels."""
    w = torch.as_tensor(rgb_kernels)
    if w.dim() != 4 or w.shape[1] != 3:
        raise ShapeError(f"first-layer kernels must be (out, 3, k, k), got {tuple(w.shape)}")
    return torch.cat([w, w.mean(dim=1, keepdim=True)], dim=1)


def expand_to_depth(source: nn.Module, target: Optional[FusedPyramidNet] = None) -> FusedPyramidNet:
    """Build a 4-channel network from a 3-channel one.

    The first convolution gains the averaged depth kernel; parameters of
    ``target`` that have no counterpart in ``source`` are zero-initialized,
    all others are copied.
    """
    src = source.state_dict()
    if target is None:
        cfg = dict(getattr(source, "config", {}))
        cfg["in_channels"] = 4
        target = FusedPyramidNet(**cfg)
    dst = target.state_dict()
    first = "backbone.conv1.weight"
    new = {}
    for name, tensor in dst.items():
        if name == first and name in src:
            new[name] = init_depth_channel(src[name])
        elif name in src and src[name].shape == tensor.shape:
            new[name] = src[name].clone()
        elif tensor.is_floating_point():
            new[name] = torch.zeros_like(tensor)
        else:
            new[name] = tensor.clone()
    target.load_state_dict(new)
    return target


# ----------------------------------------------------------------------------
# gradient checking


class GradPair(NamedTuple):
    name: str
    index: int
    analytic: float
    numeric: float


class _SignRecorder:
    """Records the sign pattern of every ReLU input during a forward pass."""

    def __init__(self, module: nn.Module):
        self.patterns = []
        self.handles = [m.register_forward_hook(self._hook) for m in module.modules() if isinstance(m, nn.ReLU)]

    def _hook(self, mod, inputs, output):
        self.patterns.append(inputs[0].detach() > 0)

    def take(self):
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_pairs(module: nn.Module, inputs, *, params=None, n_samples=8, h=1e-5, seed=0, max_tries=8):
    """Analytic vs central-difference gradients on sampled parameter entries.

    Runs a double-precision copy of ``module`` in its current train/eval
    mode. The scalar objective is a fixed random projection of the output.
    A finite difference is meaningless when the ``±h`` stencil crosses a
    ReLU kink, so entries whose perturbation flips any ReLU input sign are
    redrawn (up to ``max_tries`` draws per requested sample).

    Returns ``(pairs, n_kinked)`` where ``pairs`` is a list of
    :class:`GradPair` and ``n_kinked`` counts discarded draws.
    """
    gen = torch.Generator().manual_seed(seed)
    mod = _copy_double(module)
    x = torch.as_tensor(inputs).double()
    rec = _SignRecorder(mod)
    with torch.no_grad():
        out = mod(x)
    rec.take()
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    mod.zero_grad()
    (mod(x) * proj).sum().backward()
    base = rec.take()

    def probe():
        with torch.no_grad():
            val = float((mod(x) * proj).sum())
        return val, rec.take()

    named = dict(mod.named_parameters())
    names = list(named) if params is None else list(params)
    pairs, kinked = [], 0
    for name in names:
        p = named[name]
        flat = p.data.view(-1)
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        want = min(n_samples, flat.numel())
        order = torch.randperm(flat.numel(), generator=gen)[: want * max_tries].tolist()
        got = 0
        for i in order:
            if got == want:
                break
            orig = float(flat[i])
            flat[i] = orig + h
            plus, pat_plus = probe()
            flat[i] = orig - h
            minus, pat_minus = probe()
            flat[i] = orig
            if not (_same_pattern(base, pat_plus) and _same_pattern(base, pat_minus)):
                kinked += 1
                continue
            pairs.append(GradPair(name, i, float(grad[i]), (plus - minus) / (2 * h)))
            got += 1
    rec.close()
    return pairs, kinked


def _copy_double(module: nn.Module) -> nn.Module:
    buf = _io.BytesIO()
    torch.save(module, buf)
    buf.seek(0)
    mod = torch.load(buf, weights_only=False)
    return mod.double()


def relative_error(analytic, numeric, floor=1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(module: nn.Module, inputs, *, n_samples=8, h=1e-5, seed=0, floor=1e-6) -> float:
    """Maximum relative error between analytic and finite-difference gradients."""
    pairs, _ = gradient_pairs(module, inputs, n_samples=n_samples, h=h, seed=seed)
    return max((relative_error(p.analytic, p.numeric, floor) for p in pairs), default=0.0)


# ----------------------------------------------------------------------------
# training


def learning_rate(epoch: int, lr: float = 0.1, decay: float = 0.2, every: int = 10) -> float:
    """Step schedule: ``lr * decay ** (epoch // every)``."""
    return lr * decay ** (epoch // every)


def _as_batch(X) -> torch.Tensor:
    a = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=0)
    t = torch.from_numpy(np.ascontiguousarray(a))
    if t.dim() != 4:
        raise ShapeError(f"expected (N, C, I, I) samples, got {tuple(t.shape)}")
    return t


class FFPClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper that trains :class:`FusedPyramidNet`.

    ``X`` is a float array ``(n, 4, I, I)`` of RGB + normalized depth (or
    ``(n, 3, I, I)`` with ``use_depth=False``; a 4-channel ``X`` is then
    sliced to its colour channels). ``y`` holds class indices 0 roof,
    1 façade, 2 background.

    A seeded 3-channel network is initialized first and, with
    ``use_depth=True``, expanded to 4 channels with the averaged depth
    kernel. Training uses mini-batch SGD on cross-entropy with the step
    learning-rate schedule, evaluating on a held-out split after every
    epoch and keeping the weights with the best held-out accuracy.
    """

    def __init__(
        self,
        width=0.125,
        bottleneck=None,
        blocks=(1, 1, 1, 1),
        epochs=50,
        lr=0.1,
        lr_decay=0.2,
        decay_every=10,
        batch_size=32,
        momentum=0.9,
        weight_decay=0.0,
        test_size=0.3,
        use_depth=True,
        seed=0,
    ):
        self.width = width
        self.bottleneck = bottleneck
        self.blocks = blocks
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.test_size = test_size
        self.use_depth = use_depth
        self.seed = seed

    @property
    def n_channels(self) -> int:
        return 4 if self.use_depth else 3

    def _select(self, X) -> torch.Tensor:
        t = _as_batch(X)
        if t.shape[1] == self.n_channels:
            return t
        if t.shape[1] == 4 and not self.use_depth:
            return t[:, :3].contiguous()
        raise ShapeError(f"expected {self.n_channels} channels, got {t.shape[1]}")

    def _init_model(self) -> FusedPyramidNet:
        torch.manual_seed(self.seed)
        rgb = FusedPyramidNet(3, self.width, self.bottleneck, tuple(self.blocks))
        return expand_to_depth(rgb) if self.use_depth else rgb

    def fit(self, X, y):
        torch.use_deterministic_algorithms(True)
        Xt = self._select(X)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(Xt):
            raise ValidationError("X and y lengths differ")
        counts = np.bincount(y, minlength=len(CLASSES))
        if len(counts) > len(CLASSES) or np.any(counts == 0):
            raise EmptyClass(f"need at least one sample per class, got counts {counts.tolist()}")
        self.classes_ = np.arange(len(CLASSES))
        idx = np.arange(len(y))
        if self.test_size and self.test_size > 0:
            stratify = y if counts.min() >= 2 else None
            tr, te = train_test_split(idx, test_size=self.test_size, random_state=self.seed, stratify=stratify)
            tr, te = np.sort(tr), np.sort(te)
        else:
            tr, te = idx, np.zeros(0, dtype=np.int64)
        self.train_indices_, self.test_indices_ = tr, te

        model = self._init_model()
        opt = torch.optim.SGD(model.parameters(), lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(self.seed)
        yt = torch.as_tensor(y)
        self.history_ = []
        self.step_losses_ = []
        best_acc, best_state = -1.0, None
        for epoch in range(self.epochs):
            lr = learning_rate(epoch, self.lr, self.lr_decay, self.decay_every)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.as_tensor(tr)[torch.randperm(len(tr), generator=gen)]
            tot_loss, correct = 0.0, 0
            for s in range(0, len(order), self.batch_size):
                batch = order[s : s + self.batch_size]
                xb, yb = Xt[batch], yt[batch]
                if len(batch) == 1:
                    # batch norm needs more than one value per channel in training
                    xb, yb = xb.repeat(2, 1, 1, 1), yb.repeat(2)
                logits = model(xb)
                loss = F.cross_entropy(logits, yb)
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.step_losses_.append(float(loss.detach()))
                tot_loss += float(loss.detach()) * len(batch)
                correct += int((logits[: len(batch)].argmax(1) == yb[: len(batch)]).sum())
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": tot_loss / len(tr),
                "train_acc": correct / len(tr),
                "test_acc": float("nan"),
            }
            model.eval()
            if len(te):
                row["test_acc"] = float(np.mean(self._predict_with(model, Xt[te]) == y[te]))
                score = row["test_acc"]
            else:
                score = float(np.mean(self._predict_with(model, Xt[tr]) == y[tr]))
            self.history_.append(row)
            logger.debug("epoch %d lr %.4g loss %.4f train %.3f test %.3f", epoch, lr, row["train_loss"], row["train_acc"], row["test_acc"])
            if score > best_acc:
                best_acc = score
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                self.best_epoch_ = epoch
        model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.best_score_ = best_acc
        return self

    @staticmethod
    def _predict_with(model, Xt, batch=256) -> np.ndarray:
        return FFPClassifier._proba_with(model, Xt, batch).argmax(axis=1)

    @staticmethod
    def _proba_with(model, Xt, batch=256) -> np.ndarray:
        out = []
        with torch.no_grad():
            for s in range(0, len(Xt), batch):
                out.append(torch.softmax(model(Xt[s : s + batch]).double(), dim=1).numpy())
        return np.concatenate(out) if out else np.zeros((0, len(CLASSES)))

    def _check_fitted(self):
        check_is_fitted(self, "model_")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        self.model_.eval()
        return self._proba_with(self.model_, self._select(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path) -> None:
        self._check_fitted()
        save_weights(path, self.model_, extra={"params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "FFPClassifier":
        model, header = load_weights(path)
        params = header.get("extra", {}).get("params", {})
        params = {k: (tuple(v) if k == "blocks" else v) for k, v in params.items()}
        clf = cls(**params)
        clf.model_ = model.eval()
        clf.classes_ = np.arange(len(CLASSES))
        return clf

    def write_log(self, path) -> None:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "test_acc"])
        for r in self.history_:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]), repr(r["test_acc"])])
        io.write_text(path, buf.getvalue())


def _jsonable(params):
    out = {}
    for k, v in params.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


# ----------------------------------------------------------------------------
# weight files


def encode_weights(model: nn.Module, extra=None) -> bytes:
    """Flat little-endian float32 blob behind a JSON header.

    Layout: ``b"FFPW"``, uint32 header length, UTF-8 JSON header, data. The
    header lists ``name``, ``shape`` and float ``offset`` of every tensor
    in the state dict, plus the model config.
    """
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = {"format": 1, "config": getattr(model, "config", {}), "tensors": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def save_weights(path, model: nn.Module, extra=None) -> None:
    io.write_bytes(path, encode_weights(model, extra))


def load_weights(path):
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ParseError(f"{path}: not a weight file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    blob = np.frombuffer(data, dtype="<f4", offset=8 + n)
    model = FusedPyramidNet(**{**header["config"], "blocks": tuple(header["config"]["blocks"])})
    state = model.state_dict()
    new = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"] : e["offset"] + count].reshape(e["shape"])
        ref = state[e["name"]]
        new[e["name"]] = torch.as_tensor(arr.copy()).to(ref.dtype)
    model.load_state_dict(new)
    return model.eval(), header
