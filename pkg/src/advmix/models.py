"""Dense classifiers on flattened images and their checkpoint format."""

from __future__ import annotations

import copy
import math
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCH_TAGS = {"linear": 0, "mlp2": 1}
MLP2_WIDTHS = (256, 128)


class Classifier:
    """``linear``: one affine layer. ``mlp2``: two relu hidden layers (256, 128) then logits."""

    def __init__(self, arch: str, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 params: list[np.ndarray] | None = None):
        if arch not in ARCH_TAGS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch, self.n_in, self.n_out = arch, n_in, n_out
        widths = [n_in] + (list(MLP2_WIDTHS) if arch == "mlp2" else []) + [n_out]
        self.widths = widths
        if params is None:
            if rng is None:
                raise ValueError("need rng or params")
            params = []
            for a, b in zip(widths[:-1], widths[1:]):
                scale = math.sqrt(2.0 / a) if b != n_out else math.sqrt(1.0 / a)
                params += [rng.normal(0.0, scale, size=(a, b)), np.zeros(b)]
        expected = [s for a, b in zip(widths[:-1], widths[1:]) for s in ((a, b), (b,))]
        if [p.shape for p in params] != expected:
            raise ValueError(f"parameter shapes {[p.shape for p in params]} do not match {expected}")
        self.params = params
        self.frozen = False

    def forward(self, x, params=None) -> Tensor:
        return self.activations(x, params)[-1]

    def activations(self, x, params=None) -> list[Tensor]:
        """Outputs of every layer (post-relu for hidden layers, logits last)."""
        ps = params if params is not None else [Tensor(p) for p in self.params]
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1, self.n_in))
        if h.shape[-1] != self.n_in:
            raise ValueError(f"classifier expects {self.n_in} inputs, got {h.shape[-1]}")
        outs = []
        n_layers = len(ps) // 2
        for i in range(n_layers):
            h = ad.linear(h, ps[2 * i], ps[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
            outs.append(h)
        return outs

    def logits(self, x: np.ndarray, batch: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.n_in)
        return np.concatenate([self.forward(x[i:i + batch]).data for i in range(0, len(x), batch)]) \
            if len(x) else np.zeros((0, self.n_out))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def snapshot(self) -> "Classifier":
        snap = copy.deepcopy(self)
        for p in snap.params:
            p.flags.writeable = False
        snap.frozen = True
        return snap

    # checkpoint layout (little-endian): b"ADVMIXC1", int32 arch tag, int32 n_layers,
    # int32 widths[n_layers + 1], then float64 W_0, b_0, W_1, b_1, ...
    def save(self, path) -> None:
        n_layers = len(self.widths) - 1
        head = b"ADVMIXC1" + struct.pack(f"<{2 + n_layers + 1}i", ARCH_TAGS[self.arch], n_layers, *self.widths)
        Path(path).write_bytes(head + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes()
                                              for p in self.params))

    @classmethod
    def load(cls, path) -> "Classifier":
        raw = Path(path).read_bytes()
        if raw[:8] != b"ADVMIXC1":
            raise ValueError(f"{path}: wrong magic {raw[:8]!r} at offset 0")
        tag, n_layers = struct.unpack_from("<2i", raw, 8)
        widths = struct.unpack_from(f"<{n_layers + 1}i", raw, 16)
        arch = {v: k for k, v in ARCH_TAGS.items()}[tag]
        off = 16 + 4 * (n_layers + 1)
        params = []
        for a, b in zip(widths[:-1], widths[1:]):
            for shp in ((a, b), (b,)):
                k = int(np.prod(shp))
                if off + 8 * k > len(raw):
                    raise ValueError(f"{path}: truncated at offset {off}")
                params.append(np.frombuffer(raw, "<f8", k, off).reshape(shp).astype(np.float64))
                off += 8 * k
        if off != len(raw):
            raise ValueError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
        return cls(arch, widths[0], widths[-1], params=params)
