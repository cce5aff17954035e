"""Classifiers under attack: a multi-resolution self-ensemble, a plain
convnet baseline, and a tiny linear model with closed-form gradients.

The ensemble channel-stacks an image pyramid, runs a shared conv trunk, and
taps a classification head after each of the last H blocks; head logits are
combined elementwise by mean or median. All models expose the same attack
surface: ``predict_labels`` and ``loss_and_grad`` (summed cross-entropy plus
its input gradient, so per-sample gradients are independent of batch
grouping).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .transforms import PyramidSpec

_PREDICT_CHUNK = 256


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture: resolutions, trunk width/depth, heads."""

    resolutions: tuple[int, ...]
    in_channels: int = 3
    num_classes: int = 10
    channels: int = 8
    blocks: int = 3
    heads: int = 3
    aggregation: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        PyramidSpec(self.resolutions)  # validates the pyramid side lengths
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1 or self.channels < 1:
            raise ValueError("channel counts must be positive")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if not 1 <= self.heads <= self.blocks:
            raise ValueError(f"heads must be in [1, blocks={self.blocks}], got {self.heads}")
        if self.aggregation not in ("mean", "median"):
            raise ValueError(f"aggregation must be mean or median, got {self.aggregation!r}")
        if self.side % (2 ** (self.blocks - 1)):
            raise ValueError(
                f"side {self.side} not divisible by 2^{self.blocks - 1} for between-block pooling")

    @property
    def side(self) -> int:
        return self.resolutions[0]

    @property
    def head_taps(self) -> tuple[int, ...]:
        """Indices of the trunk blocks that carry classification heads."""
        return tuple(range(self.blocks - self.heads, self.blocks))

    def plain(self) -> "ModelConfig":
        """The single-resolution, single-head twin of this architecture."""
        return replace(self, resolutions=(self.side,), heads=1)

    def to_dict(self) -> dict:
        return {
            "resolutions": list(self.resolutions),
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "blocks": self.blocks,
            "heads": self.heads,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            resolutions=tuple(d["resolutions"]),
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            channels=int(d["channels"]),
            blocks=int(d["blocks"]),
            heads=int(d["heads"]),
            aggregation=str(d["aggregation"]),
        )


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """He-scaled conv weights, smaller head weights, zero biases; float32."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    cin = len(cfg.resolutions) * cfg.in_channels
    for b in range(cfg.blocks):
        fan_in = cin * 9
        params[f"block{b}/w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (cfg.channels, cin, 3, 3)).astype(np.float32)
        params[f"block{b}/b"] = np.zeros(cfg.channels, dtype=np.float32)
        cin = cfg.channels
    for b in cfg.head_taps:
        params[f"head{b}/w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.channels),
                                          (cfg.num_classes, cfg.channels)).astype(np.float32)
        params[f"head{b}/b"] = np.zeros(cfg.num_classes, dtype=np.float32)
    return params


def _finish_graph(g: dc.Graph, cfg: ModelConfig, head_nodes: list[int]):
    logits = head_nodes[0] if len(head_nodes) == 1 else g.aggregate(head_nodes, cfg.aggregation)
    g.mark_output("logits", logits)
    g.mark_output("ce_sum", g.sum(g.softmax_ce(logits)))
    ce_heads = [g.softmax_ce(h) for h in head_nodes]
    per_sample = ce_heads[0] if len(ce_heads) == 1 else g.aggregate(ce_heads, "mean")
    g.mark_output("train_loss", g.mean(per_sample))


def build_ensemble_graph(cfg: ModelConfig) -> dc.Graph:
    g = dc.Graph((cfg.in_channels, cfg.side, cfg.side))
    spec = PyramidSpec(cfg.resolutions)
    x = g.input_id
    if len(spec.factors) > 1:
        scales = [x if k == 1 else g.upsample(g.avgpool(x, k), k) for k in spec.factors]
        x = g.concat_channels(*scales)
    head_nodes = []
    for b in range(cfg.blocks):
        if b > 0:
            x = g.avgpool(x, 2)
        x = g.relu(g.conv3x3(x, f"block{b}/w", f"block{b}/b"))
        if b in cfg.head_taps:
            h = g.affine(g.mean_hw(x), f"head{b}/w", f"head{b}/b")
            g.mark_output(f"head{b}", h)
            head_nodes.append(h)
    _finish_graph(g, cfg, head_nodes)
    return g


def build_plain_graph(cfg: ModelConfig) -> dc.Graph:
    """Straight-line single-head convnet; written independently of the
    ensemble builder so the two can cross-check each other."""
    if len(cfg.resolutions) != 1 or cfg.heads != 1:
        raise ValueError("plain classifier requires a single resolution and a single head")
    g = dc.Graph((cfg.in_channels, cfg.side, cfg.side))
    x = g.relu(g.conv3x3(g.input_id, "block0/w", "block0/b"))
    for b in range(1, cfg.blocks):
        x = g.relu(g.conv3x3(g.avgpool(x, 2), f"block{b}/w", f"block{b}/b"))
    tap = cfg.blocks - 1
    h = g.affine(g.mean_hw(x), f"head{tap}/w", f"head{tap}/b")
    g.mark_output(f"head{tap}", h)
    _finish_graph(g, cfg, [h])
    return g


@dataclass
class Prediction:
    logits: np.ndarray            # aggregated, (N, C)
    head_logits: dict[str, np.ndarray]
    labels: np.ndarray            # argmax, ties to the lowest class index


class GraphModel:
    """Shared wrapper over a diffcore graph; parameters live in the graph."""

    kind = "graph"

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.graph = self._build(cfg)
        init = init_params(cfg, seed)
        if params is not None:
            missing = set(init) - set(params)
            extra = set(params) - set(init)
            if missing or extra:
                raise ValueError(f"parameter names do not match architecture: "
                                 f"missing {sorted(missing)}, unexpected {sorted(extra)}")
            for k, v in params.items():
                if v.shape != init[k].shape:
                    raise ValueError(f"parameter {k!r}: shape {v.shape} != expected {init[k].shape}")
                init[k] = np.asarray(v, dtype=np.float32)
        self.graph.params.update(init)

    def _build(self, cfg):
        raise NotImplementedError

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.params

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    @property
    def input_shape(self) -> tuple:
        return (self.cfg.in_channels, self.cfg.side, self.cfg.side)

    def _check_batch(self, images: np.ndarray):
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise ValueError(f"expected (N, {self.input_shape[0]}, {self.input_shape[1]}, "
                             f"{self.input_shape[2]}) images, got {images.shape}")

    def predict(self, images: np.ndarray) -> Prediction:
        """Full prediction with per-head logits; inputs must lie in [0,1]."""
        self._check_batch(images)
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError(f"image values outside [0,1]: [{images.min()}, {images.max()}]")
        logit_chunks, head_chunks = [], {f"head{b}": [] for b in self.cfg.head_taps}
        wanted = ("logits", *head_chunks)
        for lo in range(0, images.shape[0], _PREDICT_CHUNK):
            tape = self.graph.forward(images[lo:lo + _PREDICT_CHUNK],
                                      dtype=np.float32, outputs=wanted)
            logit_chunks.append(self.graph.output(tape, "logits"))
            for name in head_chunks:
                head_chunks[name].append(self.graph.output(tape, name))
        logits = np.concatenate(logit_chunks, axis=0)
        heads = {k: np.concatenate(v, axis=0) for k, v in head_chunks.items()}
        return Prediction(logits, heads, np.argmax(logits, axis=1))

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        self._check_batch(images)
        out = []
        for lo in range(0, images.shape[0], _PREDICT_CHUNK):
            tape = self.graph.forward(images[lo:lo + _PREDICT_CHUNK],
                                      dtype=np.float32, outputs=("logits",))
            out.append(np.argmax(self.graph.output(tape, "logits"), axis=1))
        return np.concatenate(out)

    def loss_and_grad(self, images: np.ndarray, labels: np.ndarray):
        """Summed cross-entropy at the aggregated logits and its input gradient."""
        self._check_batch(images)
        tape = self.graph.forward(images, labels=labels, dtype=np.float32,
                                  outputs=("ce_sum",))
        gx, _ = self.graph.backward(tape, "ce_sum")
        return float(self.graph.output(tape, "ce_sum")), gx


class EnsembleModel(GraphModel):
    kind = "ensemble"

    def _build(self, cfg):
        return build_ensemble_graph(cfg)


class PlainModel(GraphModel):
    kind = "plain"

    def _build(self, cfg):
        return build_plain_graph(cfg)


_MODEL_KINDS = {"ensemble": EnsembleModel, "plain": PlainModel}


class LinearModel:
    """logits = flatten(x) @ W.T + b, with hand-derived gradients.

    Deliberately independent of the graph machinery: attack tests use it as
    an analytically solvable oracle.
    """

    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, input_shape: tuple):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)
        self.input_shape = tuple(input_shape)
        d = int(np.prod(self.input_shape))
        if self.weight.ndim != 2 or self.weight.shape[1] != d:
            raise ValueError(f"weight {self.weight.shape} incompatible with input {input_shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, images: np.ndarray) -> np.ndarray:
        flat = images.reshape(images.shape[0], -1).astype(np.float32)
        return flat @ self.weight.T + self.bias

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def loss_and_grad(self, images: np.ndarray, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        z = self.logits(images)
        zs = z - z.max(axis=1, keepdims=True)
        e = np.exp(zs)
        sums = e.sum(axis=1, keepdims=True)
        loss = float(np.sum(np.log(sums[:, 0]) - zs[np.arange(z.shape[0]), labels]))
        p = e / sums
        p[np.arange(z.shape[0]), labels] -= 1.0
        grad = (p @ self.weight).reshape(images.shape).astype(np.float32)
        return loss, grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


def train(model: GraphModel, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> float:
    """Plain SGD on the mean-over-heads cross-entropy; returns train accuracy.

    Deterministic given the seed: shuffling comes from one generator and the
    update order is fixed. Mutates the model's parameters in place.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    model._check_batch(images)

    rng = np.random.default_rng(cfg.seed)
    params = model.graph.params
    lr = np.float32(cfg.learning_rate)
    for _ in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                tape = model.graph.forward(images[idx], labels=labels[idx],
                                           dtype=np.float32, outputs=("train_loss",))
                _, grads = model.graph.backward(tape, "train_loss")
            except FloatingPointError as err:
                raise RuntimeError(
                    f"training diverged ({err}); lower the learning rate") from err
            for name, g in grads.items():
                params[name] = params[name] - lr * g
    return float(np.mean(model.predict_labels(images) == labels))


# ---------------------------------------------------------------------------
# checkpoint + config files
# ---------------------------------------------------------------------------

def save_model(model, ckpt_path, cfg_path):
    if model.kind == "linear":
        dc.save_tensors(ckpt_path, {"weight": model.weight, "bias": model.bias})
        arch = {"input_shape": list(model.input_shape)}
    else:
        dc.save_tensors(ckpt_path, model.params)
        arch = model.cfg.to_dict()
    doc = {"kind": model.kind, "architecture": arch}
    with open(cfg_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(ckpt_path, cfg_path):
    with open(cfg_path) as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    known = sorted(_MODEL_KINDS) + ["linear"]
    if kind == "linear":
        tensors = dc.load_tensors(ckpt_path)
        shape = tuple(doc["architecture"]["input_shape"])
        return LinearModel(tensors["weight"], tensors["bias"], shape)
    if kind not in _MODEL_KINDS:
        raise ValueError(f"{cfg_path}: unknown model kind {kind!r}; expected one of {known}")
    cfg = ModelConfig.from_dict(doc["architecture"])
    params = dc.load_tensors(ckpt_path)
    return _MODEL_KINDS[kind](cfg, params=params)
