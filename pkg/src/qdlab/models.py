"""Declarative model specs and the quantized convolutional classifier.

A model is a chain of conv + batchnorm + quantized-activation blocks with an
optional two-input residual junction (convex combination), closed by a dense
head. Forward passes can capture every block-boundary activation and can
override the quantization mode, which is what the amplification diagnostics
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_weights, save_weights
from .lipschitz import AggregationCoeff, RegConfig, convex_aggregate, plain_add
from .quantize import QuantConfig, quantize_tanh, quantized_relu6
from .seeds import split_seed
from .tensor import BatchNormState, Tensor


class ModelSpecError(ValueError):
    """Block list does not compose into a valid network."""


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int | None = None  # None = same-style padding, kernel // 2

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.pad is None else self.pad


@dataclass
class ModelSpec:
    blocks: list[ConvBlockSpec]
    classes: int = 10
    in_shape: tuple = (3, 32, 32)
    residual: tuple[int, int] | None = (3, 2)  # junction at block i mixes block j's output
    pool: str = "avg"  # avg = global average pool into the head, flatten = raw
    quant: QuantConfig = field(default_factory=QuantConfig)
    reg: RegConfig = field(default_factory=RegConfig)

    def block_shapes(self) -> list[tuple]:
        """Output shape (C, H, W) after every block; raises on the first bad one."""
        shapes = []
        c, h, w = self.in_shape
        for i, b in enumerate(self.blocks, start=1):
            pad = b.padding
            if b.kernel > h + 2 * pad or b.kernel > w + 2 * pad:
                raise ModelSpecError(f"block {i}: kernel {b.kernel} exceeds input {h}x{w}")
            if b.stride < 1:
                raise ModelSpecError(f"block {i}: stride must be >= 1")
            h = (h + 2 * pad - b.kernel) // b.stride + 1
            w = (w + 2 * pad - b.kernel) // b.stride + 1
            if h < 1 or w < 1:
                raise ModelSpecError(f"block {i}: output collapsed to {h}x{w}")
            c = b.out_channels
            shapes.append((c, h, w))
        return shapes

    def validate(self):
        if not self.blocks:
            raise ModelSpecError("at least one conv block required")
        if self.classes < 2:
            raise ModelSpecError(f"need >= 2 classes, got {self.classes}")
        if self.pool not in ("avg", "flatten"):
            raise ModelSpecError(f"unknown pool {self.pool!r}")
        shapes = self.block_shapes()
        if self.residual is not None:
            at, src = self.residual
            if not (1 <= src < at <= len(self.blocks)):
                raise ModelSpecError(f"residual ({at}, {src}) out of order or range")
            if shapes[at - 1] != shapes[src - 1]:
                raise ModelSpecError(
                    f"residual shapes differ: block {at} gives {shapes[at - 1]}, "
                    f"block {src} gives {shapes[src - 1]}")
        return shapes


def default_spec(quant: QuantConfig | None = None, reg: RegConfig | None = None,
                 classes: int = 10) -> ModelSpec:
    """Desk-scale 4-block CNN with one residual junction (~26k parameters).

    Downsamples early (32 -> 16 -> 8 -> 8 -> 4) so a full training run stays
    in the tens of seconds on a laptop core while every mechanism (BN,
    quantized activations, convex junction, penalty) is exercised.
    """
    return ModelSpec(
        blocks=[ConvBlockSpec(12, 3, 2), ConvBlockSpec(24, 3, 2),
                ConvBlockSpec(24, 3, 1), ConvBlockSpec(48, 3, 2)],
        classes=classes,
        residual=(3, 2),
        quant=quant or QuantConfig(),
        reg=reg or RegConfig(),
    )


class Model:
    """Layer graph built from a ModelSpec, holding weights and BN state."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor],
                 bn_states: list[BatchNormState], coeff: AggregationCoeff | None):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states
        self.coeff = coeff

    # -- forward ----------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False,
                quant_override: QuantConfig | None = None,
                capture: list | None = None) -> Tensor:
        """Logits for a [N,C,H,W] batch.

        capture, when given, collects (name, activation array) at every
        block boundary (post-activation, post-junction) in order.
        quant_override swaps the activation quantizer for this pass only.
        """
        spec = self.spec
        qcfg = quant_override if quant_override is not None else spec.quant
        h = x
        boundary: dict[int, Tensor] = {}
        for i, b in enumerate(spec.blocks, start=1):
            h = T.conv2d(h, self.params[f"block{i}.conv.w"], stride=b.stride, pad=b.padding)
            h = T.batchnorm(h, self.params[f"block{i}.bn.gamma"], self.params[f"block{i}.bn.beta"],
                            self.bn_states[i - 1], training=train)
            if qcfg.mode == "tanh":
                h = quantize_tanh(h, qcfg)
            else:
                h = quantized_relu6(h, qcfg)  # mode "off" clamps without snapping
            if spec.residual is not None and i == spec.residual[0]:
                skip = boundary[spec.residual[1]]
                if spec.reg.aggregation == "convex":
                    h = convex_aggregate(h, skip, self.coeff)
                else:
                    h = plain_add(h, skip)
            boundary[i] = h
            if capture is not None:
                capture.append((f"block{i}", h.data))
        feats = T.global_avg_pool(h) if spec.pool == "avg" else T.flatten(h)
        return T.dense(feats, self.params["head.w"], self.params["head.b"])

    def __call__(self, x: Tensor, **kw) -> Tensor:
        return self.forward(x, **kw)

    def predict(self, images: np.ndarray, batch_size: int = 256,
                quant_override: QuantConfig | None = None) -> np.ndarray:
        """Argmax class per image, eval mode, no gradient tracking."""
        out = np.empty(images.shape[0], dtype=np.int64)
        with T.no_grad():
            for s in range(0, images.shape[0], batch_size):
                logits = self.forward(Tensor(images[s:s + batch_size]),
                                      quant_override=quant_override)
                out[s:s + batch_size] = logits.data.argmax(axis=1)
        return out

    # -- parameters and persistence ----------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        items = list(self.params.items())
        if self.coeff is not None:
            items.append(("junction.alpha", self.coeff.alpha))
        return items

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def weight_matrices(self) -> list[tuple[str, Tensor]]:
        """Weights eligible for the orthogonality penalty (conv + head, no BN)."""
        out = []
        for name, t in self.params.items():
            if name.endswith("conv.w") or name == "head.w":
                out.append((name, t))
        return out

    def layer_names(self) -> list[str]:
        return [f"block{i}" for i in range(1, len(self.spec.blocks) + 1)]

    def freeze(self):
        for _, p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for _, p in self.parameters():
            p.requires_grad = True

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.astype(np.float32) for name, t in self.parameters()}
        for i, st in enumerate(self.bn_states, start=1):
            out[f"block{i}.bn.running_mean"] = st.running_mean.astype(np.float32)
            out[f"block{i}.bn.running_var"] = st.running_var.astype(np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = {name: t for name, t in self.parameters()}
        expected = set(own) | {f"block{i}.bn.running_{s}"
                               for i in range(1, len(self.bn_states) + 1)
                               for s in ("mean", "var")}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in own.items():
            if state[name].shape != t.data.shape:
                raise CheckpointError(
                    f"{name}: shape {state[name].shape} != expected {t.data.shape}")
            t.data = state[name].astype(t.data.dtype).copy()
        for i, st in enumerate(self.bn_states, start=1):
            st.running_mean = state[f"block{i}.bn.running_mean"].astype(np.float32).copy()
            st.running_var = state[f"block{i}.bn.running_var"].astype(np.float32).copy()

    def save(self, path):
        save_weights(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_weights(path))

    def with_quant(self, quant: QuantConfig) -> "Model":
        """Same weights and state, different activation quantizer."""
        clone = Model(replace(self.spec, quant=quant), self.params, self.bn_states, self.coeff)
        return clone


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """He fan-in initialization, fully determined by (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(split_seed(seed, "init"))
    params: dict[str, Tensor] = {}
    bn_states: list[BatchNormState] = []
    cin = spec.in_shape[0]
    for i, b in enumerate(spec.blocks, start=1):
        fan_in = cin * b.kernel * b.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(b.out_channels, cin, b.kernel, b.kernel))
        params[f"block{i}.conv.w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"block{i}.bn.gamma"] = Tensor(np.ones(b.out_channels, dtype=dtype), requires_grad=True)
        params[f"block{i}.bn.beta"] = Tensor(np.zeros(b.out_channels, dtype=dtype), requires_grad=True)
        bn_states.append(BatchNormState(b.out_channels, dtype=dtype))
        cin = b.out_channels
    c, h, w_ = spec.block_shapes()[-1]
    feat = c if spec.pool == "avg" else c * h * w_
    head = rng.normal(0.0, np.sqrt(2.0 / feat), size=(spec.classes, feat))
    params["head.w"] = Tensor(head.astype(dtype), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(spec.classes, dtype=dtype), requires_grad=True)
    coeff = None
    if spec.residual is not None and spec.reg.aggregation == "convex":
        coeff = AggregationCoeff(Tensor(np.asarray(0.5, dtype=dtype), requires_grad=True))
    return Model(spec, params, bn_states, coeff)


def transfer_attack(source: Model, target: Model, dataset, atk_cfg,
                    batch_size: int = 256) -> float:
    """Black-box accuracy: craft on `source`, score argmax hits on `target`."""
    from .attacks import batch_attack_config, run_attack  # keeps attacks decoupled

    if source.spec.in_shape != target.spec.in_shape:
        raise ModelSpecError(
            f"input shapes differ: source {source.spec.in_shape}, target {target.spec.in_shape}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for bi, s in enumerate(range(0, len(dataset), batch_size)):
        xb = dataset.images[s:s + batch_size]
        yb = dataset.labels[s:s + batch_size]
        x_adv = run_attack(source, xb, yb, batch_attack_config(atk_cfg, bi))
        pred = target.predict(x_adv, batch_size=batch_size)
        correct += int((pred == yb).sum())
    return 100.0 * correct / len(dataset)
