"""Dual-branch debiasing model: feature extraction, semantic activation, shared classifier."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Backbone, BackboneConfig, Linear, ParamSet, build_backbone

__all__ = [
    "CausalModel",
    "ModelOutput",
    "GeometryError",
    "interventional_scores",
    "save_checkpoint",
    "load_checkpoint",
    "PREDICT_MODES",
]

PREDICT_MODES = ("interventional", "baseline")
POOLINGS = ("mean", "sum")

# sub-seed tags, so each branch initialises identically whether or not the others exist
_FEM_TAG, _SAM_TAG, _CLS_TAG = 0, 1, 2


class GeometryError(ValueError):
    """Feature-extraction and activation branches (or data) disagree on shape."""


@dataclass
class ModelOutput:
    baseline_logits: Tensor  # B x K
    strat_logits: Optional[Tensor]  # B x n x K
    features: Tensor  # B x n x n_c
    activations: Optional[Tensor]  # B x n x n_c


def _as_batch(x, cfg: BackboneConfig, dtype) -> Tensor:
    if isinstance(x, Tensor):
        arr = x.values
    else:
        arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4 or arr.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise GeometryError(
            f"input batch {arr.shape} does not match backbone input "
            f"({cfg.input_channels}, {cfg.input_size}, {cfg.input_size})"
        )
    if isinstance(x, Tensor) and x.values.ndim == 4:
        return x
    return Tensor(arr.astype(dtype, copy=False))


def _stratify(fmap: Tensor) -> Tensor:
    # (B, n_c, s, s) -> (B, s*s, n_c); stratum t is spatial position (t // s, t % s)
    B, C, s, _ = fmap.shape
    return ad.transpose(ad.reshape(fmap, (B, C, s * s)), (0, 2, 1))


def interventional_scores(strat_logits: np.ndarray) -> np.ndarray:
    """Per-class score sum over strata of log-softmax, shape (B, K)."""
    z = np.asarray(strat_logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return logp.sum(axis=1)


class CausalModel:
    """FEM backbone, optional SAM backbone and one classifier shared by all paths.

    With ``sam_cfg=None`` the model is the plain baseline network (no
    activation branch, no interventional path).
    """

    def __init__(
        self,
        fem_cfg: BackboneConfig | None = None,
        sam_cfg: BackboneConfig | None | str = "same",
        num_classes: int = 4,
        seed: int = 0,
        pooling: str = "mean",
        dtype=np.float32,
    ):
        fem_cfg = fem_cfg or BackboneConfig()
        if isinstance(sam_cfg, str):
            if sam_cfg != "same":
                raise ValueError(f"sam_cfg must be a BackboneConfig, None or 'same', got {sam_cfg!r}")
            sam_cfg = fem_cfg
        if num_classes < 2:
            raise ValueError("need at least two classes")
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if sam_cfg is not None:
            if (sam_cfg.n_strata, sam_cfg.final_channels) != (fem_cfg.n_strata, fem_cfg.final_channels):
                raise GeometryError(
                    f"SAM map {sam_cfg.final_spatial}x{sam_cfg.final_spatial}x{sam_cfg.final_channels} "
                    f"does not match FEM map {fem_cfg.final_spatial}x{fem_cfg.final_spatial}x{fem_cfg.final_channels}"
                )
            if (sam_cfg.input_channels, sam_cfg.input_size) != (fem_cfg.input_channels, fem_cfg.input_size):
                raise GeometryError("SAM and FEM must read the same input geometry")
        self.fem_cfg = fem_cfg
        self.sam_cfg = sam_cfg
        self.num_classes = num_classes
        self.seed = seed
        self.pooling = pooling
        self.dtype = np.dtype(dtype)

        self.fem: Backbone = build_backbone(fem_cfg, [seed, _FEM_TAG], "fem", dtype)
        self.sam: Optional[Backbone] = (
            build_backbone(sam_cfg, [seed, _SAM_TAG], "sam", dtype) if sam_cfg is not None else None
        )
        self.cls = Linear(fem_cfg.final_channels, num_classes, [seed, _CLS_TAG], "cls", dtype)
        self.params = ParamSet()
        self.params.update(self.fem.params)
        if self.sam is not None:
            self.params.update(self.sam.params)
        self.params.update(self.cls.params)

    # geometry
    @property
    def n_strata(self) -> int:
        return self.fem_cfg.n_strata

    @property
    def n_channels(self) -> int:
        return self.fem_cfg.final_channels

    @property
    def has_sam(self) -> bool:
        return self.sam is not None

    def astype(self, dtype) -> "CausalModel":
        """Copy of the model with parameters cast to ``dtype``."""
        other = CausalModel(self.fem_cfg, self.sam_cfg, self.num_classes, self.seed, self.pooling, dtype)
        for k, p in self.params.items():
            other.params[k].values = p.values.astype(dtype)
        return other

    # forward paths
    def extract_semantics(self, x) -> Tensor:
        return _stratify(self.fem(_as_batch(x, self.fem_cfg, self.dtype)))

    def activate(self, x) -> Tensor:
        if self.sam is None:
            raise RuntimeError("model was built without an activation branch")
        return ad.sigmoid(_stratify(self.sam(_as_batch(x, self.sam_cfg, self.dtype))))

    def classify(self, v: Tensor) -> Tensor:
        return self.cls(v)

    def pool(self, feats: Tensor) -> Tensor:
        reduce = ad.mean if self.pooling == "mean" else ad.sum
        return reduce(feats, axis=1)

    def forward(self, x) -> ModelOutput:
        xb = _as_batch(x, self.fem_cfg, self.dtype)
        F = self.extract_semantics(xb)
        baseline = self.classify(self.pool(F))
        if self.sam is None:
            return ModelOutput(baseline, None, F, None)
        A = self.activate(xb)
        strat = self.classify(ad.mul(F, A))
        return ModelOutput(baseline, strat, F, A)

    __call__ = forward

    def predict(self, out: ModelOutput, mode: str = "interventional") -> np.ndarray:
        return predict(out, mode)

    # persistence
    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "CausalModel":
        return load_checkpoint(path)

    def header(self) -> dict:
        return {
            "format": "causal-sar-checkpoint",
            "version": 1,
            "fem": self.fem_cfg.to_dict(),
            "sam": self.sam_cfg.to_dict() if self.sam_cfg is not None else None,
            "n": self.n_strata,
            "n_c": self.n_channels,
            "K": self.num_classes,
            "pooling": self.pooling,
            "seed": self.seed,
        }


def predict(out: ModelOutput, mode: str = "interventional") -> np.ndarray:
    """Class index per sample; argmax ties resolve to the smallest index."""
    if mode == "baseline":
        scores = out.baseline_logits.values
    elif mode == "interventional":
        if out.strat_logits is None:
            raise ValueError("interventional prediction needs the activation branch")
        scores = interventional_scores(out.strat_logits.values)
    else:
        raise ValueError(f"unknown predict mode {mode!r}; expected one of {PREDICT_MODES}")
    return np.argmax(scores, axis=-1)


_MAGIC = b"CSARCKPT"


def save_checkpoint(model: CausalModel, path, extra: dict | None = None) -> None:
    """JSON header followed by little-endian float32 parameter arrays.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, raw
    data.  The header's ``params`` list gives name, shape and byte offset
    (relative to the start of the data section) in storage order.
    """
    manifest = []
    offset = 0
    for name, p in model.params.items():
        nbytes = p.size * 4
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = model.header()
    header["params"] = manifest
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path, dtype=np.float32) -> CausalModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    body = data[16 + hlen:]
    fem = BackboneConfig.from_dict(header["fem"])
    sam = BackboneConfig.from_dict(header["sam"]) if header["sam"] is not None else None
    model = CausalModel(fem, sam, header["K"], header.get("seed", 0), header.get("pooling", "mean"), dtype)
    names = [m["name"] for m in header["params"]]
    if names != list(model.params):
        raise ValueError(f"{path}: parameter manifest does not match the declared architecture")
    for m in header["params"]:
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(m["shape"], dtype=np.int64)), offset=m["offset"])
        model.params[m["name"]].values = arr.reshape(m["shape"]).astype(dtype)
    return model
