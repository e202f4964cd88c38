"""GRU encoder-decoder with a turbine embedding and an MLP output head.

Parameter matrices are stored input-major so a batch of row vectors ``x``
multiplies as ``x @ W``. The three GRU gates share one block per cell:
columns ``[0:H]`` are the update gate, ``[H:2H]`` the reset gate and
``[2H:3H]`` the candidate state.

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    c  = tanh(x Wc + (r*h) Uc + bc)
    h' = (1 - z) * h + z * c
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import _kernels
from .autodiff import Tape, Tensor
from .data import TIME_FEATURE_DIM, Batch, Normalizer


class CheckpointMismatch(ValueError):
    """Checkpoint was trained on a different farm layout or neighbour graph."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``annual_features=None`` lets :func:`~windseq.training.fit` decide: the
    day-of-year and season inputs are only used when the training span covers
    a full year, since a shorter span cannot tell seasonal effects from
    weather that happened on those dates.
    """

    n_turbines: int
    k: int = 6
    m: int = 48
    horizon: int = 12
    hidden: int = 48
    embed_dim: int = 16
    head_hidden: int = 32
    cell: str = "gru"
    embed_encoder: bool = False
    power_history: bool = False
    annual_features: bool | None = None
    time_dim: int = TIME_FEATURE_DIM

    def __post_init__(self):
        for name in ("n_turbines", "k", "m", "horizon", "hidden", "embed_dim", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.cell not in ("gru", "rnn"):
            raise ValueError(f"cell must be 'gru' or 'rnn', got {self.cell!r}")

    def window_options(self) -> dict:
        """Keyword arguments for :func:`~windseq.data.make_windows` matching this model."""
        return {"power_history": self.power_history,
                "annual": True if self.annual_features is None else self.annual_features}

    @property
    def encoder_input_dim(self) -> int:
        extra = self.embed_dim if self.embed_encoder else 0
        return self.k + int(self.power_history) + self.time_dim + extra

    @property
    def decoder_input_dim(self) -> int:
        return 1 + self.embed_dim + self.time_dim


def _gates(cfg: ModelConfig) -> int:
    return 3 if cfg.cell == "gru" else 1


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, g = cfg.hidden, _gates(cfg)
    shapes = {}
    for part, dim in (("enc", cfg.encoder_input_dim), ("dec", cfg.decoder_input_dim)):
        shapes[f"{part}.W"] = (dim, g * H)
        shapes[f"{part}.U"] = (H, g * H)
        shapes[f"{part}.b"] = (g * H,)
    shapes["embedding"] = (cfg.embed_dim, cfg.n_turbines)
    shapes["head.W1"] = (H, cfg.head_hidden)
    shapes["head.b1"] = (cfg.head_hidden,)
    shapes["head.W2"] = (cfg.head_hidden, 1)
    shapes["head.b2"] = (1,)
    return shapes


def season_rows(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Rows of ``enc.W`` and ``dec.W`` fed by the season indicator inputs."""
    if cfg.time_dim != TIME_FEATURE_DIM:
        return {"enc.W": np.zeros(0, dtype=np.int64), "dec.W": np.zeros(0, dtype=np.int64)}
    season = np.arange(4, 8)
    return {"enc.W": cfg.k + int(cfg.power_history) + season,
            "dec.W": 1 + cfg.embed_dim + season}


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, Uniform(+-0.05) embeddings.

    Input weights on the season indicators start at zero. A season that never
    occurs in the training span gets no gradient, so a random start would
    inject noise the first time that season is seen at inference.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".b", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        elif name == "embedding":
            params[name] = rng.uniform(-0.05, 0.05, size=shape)
        else:
            lim = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-lim, lim, size=shape)
    for name, rows in season_rows(cfg).items():
        params[name][rows] = 0.0
    return params


def parameter_count(cfg_or_params) -> int:
    """Total number of trainable scalars."""
    if isinstance(cfg_or_params, ModelConfig):
        return int(sum(np.prod(s) for s in param_shapes(cfg_or_params).values()))
    return int(sum(np.asarray(v).size for v in cfg_or_params.values()))


def as_leaves(params: Mapping[str, np.ndarray], frozen=()) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=k not in frozen, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------

def gru_step_reference(tape: Tape, x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """One GRU step composed from tape primitives."""
    H = h.shape[1]
    _check_cell(x, h, W, U, b, 3)
    xw = tape.add_row(tape.matmul(x, W), b)
    hu = tape.matmul(h, tape.slice_cols(U, 0, 2 * H))
    z = tape.sigmoid(tape.add(tape.slice_cols(xw, 0, H), tape.slice_cols(hu, 0, H)))
    r = tape.sigmoid(tape.add(tape.slice_cols(xw, H, 2 * H), tape.slice_cols(hu, H, 2 * H)))
    rh = tape.matmul(tape.mul(r, h), tape.slice_cols(U, 2 * H, 3 * H))
    c = tape.tanh(tape.add(tape.slice_cols(xw, 2 * H, 3 * H), rh))
    return tape.add(tape.mul(tape.one_minus(z), h), tape.mul(z, c))


def gru_step(tape: Tape, x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """One GRU step as a single tape node backed by the fused kernels."""
    H = h.shape[1]
    _check_cell(x, h, W, U, b, 3)
    xv, hv, Wv, Uv, bv = x.values, h.values, W.values, U.values, b.values
    U_zr, U_c = Uv[:, : 2 * H], Uv[:, 2 * H:]
    xw = xv @ Wv
    hu = hv @ U_zr
    z, r, rh = _kernels.gru_gates(xw[:, :H], xw[:, H:2 * H], hu[:, :H], hu[:, H:],
                                  bv[:H], bv[H:2 * H], hv)
    c, h_next = _kernels.gru_blend(xw[:, 2 * H:], rh @ U_c, bv[2 * H:], z, hv)

    def back(g):
        daz, dac, dh = _kernels.gru_back_blend(g, z, c, hv)
        dar, dh = _kernels.gru_back_reset(dac @ U_c.T, r, hv, dh)
        da = np.concatenate([daz, dar, dac], axis=1)
        dh = dh + da[:, : 2 * H] @ U_zr.T
        dU = np.concatenate([hv.T @ da[:, : 2 * H], rh.T @ dac], axis=1)
        return da @ Wv.T, dh, xv.T @ da, dU, da.sum(axis=0)

    return tape.record(h_next, (x, h, W, U, b), back)


def rnn_step(tape: Tape, x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """Vanilla recurrent step ``tanh(x W + h U + b)``."""
    _check_cell(x, h, W, U, b, 1)
    return tape.tanh(tape.add_row(tape.add(tape.matmul(x, W), tape.matmul(h, U)), b))


def _check_cell(x, h, W, U, b, gates):
    H = h.shape[1]
    if (x.values.ndim != 2 or h.values.ndim != 2 or x.shape[0] != h.shape[0]
            or W.shape != (x.shape[1], gates * H) or U.shape != (H, gates * H)
            or b.shape != (gates * H,)):
        raise ValueError(
            f"cell dimension mismatch: x {x.shape}, h {h.shape}, W {W.shape}, "
            f"U {U.shape}, b {b.shape}"
        )


# --------------------------------------------------------------------------
# encoder / decoder
# --------------------------------------------------------------------------

@dataclass
class Seq2Seq:
    """Forward pass over a parameter set; holds no mutable state of its own."""

    config: ModelConfig
    fused: bool = True
    _step: object = field(init=False, repr=False)

    def __post_init__(self):
        if self.config.cell == "rnn":
            self._step = rnn_step
        else:
            self._step = gru_step if self.fused else gru_step_reference

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        return init_params(self.config, seed)

    def embed(self, tape: Tape, leaves, turbines) -> Tensor:
        return tape.take_columns(leaves["embedding"], turbines)

    def encode(self, tape: Tape, leaves, inputs: np.ndarray, emb: Tensor | None = None) -> Tensor:
        """Run the encoder over ``inputs`` (m, B, channels) from a zero state."""
        cfg = self.config
        if inputs.ndim != 3 or inputs.shape[0] != cfg.m:
            raise ValueError(f"encoder expects {cfg.m} timesteps, got input shape {inputs.shape}")
        W, U, b = leaves["enc.W"], leaves["enc.U"], leaves["enc.b"]
        h = Tensor(np.zeros((inputs.shape[1], cfg.hidden)))
        for j in range(cfg.m):
            x = Tensor(inputs[j])
            if cfg.embed_encoder:
                x = tape.concat([x, emb])
            h = self._step(tape, x, h, W, U, b)
        return h

    def head(self, tape: Tape, leaves, h: Tensor) -> Tensor:
        a = tape.tanh(tape.add_row(tape.matmul(h, leaves["head.W1"]), leaves["head.b1"]))
        return tape.add_row(tape.matmul(a, leaves["head.W2"]), leaves["head.b2"])

    def decode(self, tape: Tape, leaves, h: Tensor, y_current: np.ndarray, emb: Tensor,
               future_time: np.ndarray) -> Tensor:
        """Unroll ``horizon`` steps feeding back each forecast; returns (B, horizon)."""
        cfg = self.config
        if future_time.shape[0] != cfg.horizon:
            raise ValueError(
                f"decoder horizon is {cfg.horizon} but {future_time.shape[0]} "
                "future time-feature vectors were given"
            )
        W, U, b = leaves["dec.W"], leaves["dec.U"], leaves["dec.b"]
        prev = Tensor(np.asarray(y_current, dtype=np.float64).reshape(-1, 1))
        outs = []
        for j in range(cfg.horizon):
            x = tape.concat([prev, emb, Tensor(future_time[j])])
            h = self._step(tape, x, h, W, U, b)
            prev = self.head(tape, leaves, h)
            outs.append(prev)
        return tape.concat(outs, axis=1) if len(outs) > 1 else outs[0]

    def forward(self, tape: Tape, leaves, batch: Batch) -> Tensor:
        emb = self.embed(tape, leaves, batch.turbines)
        h = self.encode(tape, leaves, batch.inputs, emb)
        return self.decode(tape, leaves, h, batch.y_current, emb, batch.future_time)

    def predict(self, params: Mapping[str, np.ndarray], batch: Batch) -> np.ndarray:
        tape = Tape(record=False)
        return self.forward(tape, as_leaves(params, frozen=params.keys()), batch).values.copy()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "windseq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    layout_digest: str
    neighbor_digest: str
    mode: str = "power"
    hemisphere: str = "north"
    meta: dict = field(default_factory=dict)

    def check_farm(self, layout_digest: str, neighbor_digest: str | None = None) -> None:
        if layout_digest != self.layout_digest:
            raise CheckpointMismatch(
                f"checkpoint layout digest {self.layout_digest} does not match "
                f"farm layout digest {layout_digest}"
            )
        if neighbor_digest is not None and neighbor_digest != self.neighbor_digest:
            raise CheckpointMismatch(
                f"checkpoint neighbour digest {self.neighbor_digest} does not match "
                f"rebuilt neighbour digest {neighbor_digest}"
            )

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "mode": self.mode,
            "hemisphere": self.hemisphere,
            "layout_digest": self.layout_digest,
            "neighbor_digest": self.neighbor_digest,
            "normalizer": self.normalizer.to_dict(),
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in self.params.items()},
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True)

    def save(self, path) -> None:
        _atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        cfg = ModelConfig(**doc["config"])
        params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        expected = param_shapes(cfg)
        if {k: tuple(v.shape) for k, v in params.items()} != expected:
            raise ValueError(f"{path}: parameter shapes do not match the stored config")
        return cls(cfg, params, Normalizer.from_dict(doc["normalizer"]),
                   doc["layout_digest"], doc["neighbor_digest"], doc["mode"],
                   doc["hemisphere"], doc.get("meta", {}))


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
