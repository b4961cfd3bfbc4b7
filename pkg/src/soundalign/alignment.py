"""Trainable alignment head: adapters, attention poolers, and the MSE objective.

Audio tokens ``f`` (``m x d_audio``) go through two token-wise MLP adapters,
one per target space. Each adapted sequence is then pooled by
cross-attention from learned query tokens: the text branch emits one row
per caption token (``l x d_text``), the vision branch a single vector
(``d_vision``). Training minimises the summed per-branch MSE against the
frozen caption encodings.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from ._binio import Reader, atomic_write
from .autodiff import Tensor
from .encoders import CaptionRecord
from .errors import CapacityError, ContractError, FormatError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    d_audio: int = 64
    d_text: int = 32
    d_vision: int = 32
    d_hidden: int | None = None  # defaults to 2 * max(d_text, d_vision)
    heads: int = 4
    q_max: int = 16
    pooling: str = "attention"  # or "mean": adaptive/mean pooling ablation
    proj_std: float | None = None  # None: Xavier-uniform projections; else N(0, proj_std)
    seed: int = 0

    @property
    def hidden(self) -> int:
        return self.d_hidden or 2 * max(self.d_text, self.d_vision)


@dataclass
class Adapter:
    """Token-wise two-layer MLP: Linear -> GELU -> Linear."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> "Adapter":
        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(uniform((d_in, d_hidden), d_in), uniform((d_hidden,), d_in),
                   uniform((d_hidden, d_out), d_hidden), uniform((d_out,), d_hidden))

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class AttentionPooler:
    """Learned queries attending over an input sequence (multi-head)."""

    queries: Tensor
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int

    @classmethod
    def init(cls, d: int, q_max: int, heads: int, rng: np.random.Generator,
             proj_std: float | None = None) -> "AttentionPooler":
        """Queries ~ N(0, 0.02); projections Xavier-uniform unless ``proj_std`` is given."""
        if d % heads:
            raise ShapeError(f"width {d} is not divisible by {heads} heads")
        queries = Tensor(rng.normal(0.0, 0.02, size=(q_max, d)), requires_grad=True)

        def proj():
            if proj_std is not None:
                return Tensor(rng.normal(0.0, proj_std, size=(d, d)), requires_grad=True)
            bound = math.sqrt(6.0 / (2 * d))
            return Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True)

        return cls(queries, proj(), proj(), proj(), proj(), heads)

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @property
    def q_max(self) -> int:
        return self.queries.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"queries": self.queries, "Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv, "Wo": self.Wo}


def adapt(adapter: Adapter, f) -> Tensor:
    """Apply the adapter to every token of ``f`` ([m x d_in] -> [m x d_out])."""
    f = ad.as_tensor(f)
    if f.data.ndim != 2 or f.shape[1] != adapter.d_in:
        raise ShapeError(f"adapter expects tokens of width {adapter.d_in}, got shape {f.shape}")
    h = ad.gelu(ad.add(ad.matmul(f, adapter.W1), adapter.b1))
    return ad.add(ad.matmul(h, adapter.W2), adapter.b2)


def pool(pooler: AttentionPooler, w, out_len: int) -> Tensor:
    """Cross-attention of the first ``out_len`` learned queries over ``w`` ([p x d])."""
    w = ad.as_tensor(w)
    if out_len > pooler.q_max:
        raise CapacityError(f"requested {out_len} output tokens, pooler has {pooler.q_max} queries")
    if out_len < 1 or w.data.ndim != 2 or w.shape[0] < 1:
        raise ShapeError(f"pool needs out_len >= 1 and a non-empty sequence, got {out_len}, {w.shape}")
    if w.shape[1] != pooler.d:
        raise ShapeError(f"pooler width {pooler.d} does not match input width {w.shape[1]}")
    q = ad.matmul(ad.rows(pooler.queries, 0, out_len), pooler.Wq)
    k = ad.matmul(w, pooler.Wk)
    v = ad.matmul(w, pooler.Wv)
    dh = pooler.d // pooler.heads
    inv = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(pooler.heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = ad.scale(ad.matmul(ad.cols(q, lo, hi), ad.transpose(ad.cols(k, lo, hi))), inv)
        heads.append(ad.matmul(ad.softmax_rows(scores), ad.cols(v, lo, hi)))
    return ad.matmul(ad.concat_cols(heads), pooler.Wo)


def adaptive_pool_matrix(p: int, q: int) -> np.ndarray:
    """Averaging weights mapping p rows to q rows (adaptive average pooling)."""
    out = np.zeros((q, p))
    for i in range(q):
        lo = (i * p) // q
        hi = -((-(i + 1) * p) // q)
        out[i, lo:hi] = 1.0 / (hi - lo)
    return out


@dataclass
class ConditioningPair:
    z_hat_T: Tensor  # [l x d_text]
    z_hat_V: Tensor  # [d_vision]


class AlignmentModel:
    """Adapters and poolers for the text and vision-text branches.

    With ``pooling="mean"`` the poolers are dropped: the text branch uses
    adaptive average pooling and the vision branch a plain token mean.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        hidden = config.hidden
        self.adapter_T = Adapter.init(config.d_audio, hidden, config.d_text, rng)
        self.adapter_V = Adapter.init(config.d_audio, hidden, config.d_vision, rng)
        if config.pooling == "attention":
            self.pooler_T = AttentionPooler.init(config.d_text, config.q_max, config.heads, rng, config.proj_std)
            self.pooler_V = AttentionPooler.init(config.d_vision, 1, config.heads, rng, config.proj_std)
        elif config.pooling == "mean":
            self.pooler_T = self.pooler_V = None
        else:
            raise ContractError(f"unknown pooling {config.pooling!r}")

    def groups(self) -> dict[str, object]:
        out = {"adapter_T": self.adapter_T, "adapter_V": self.adapter_V}
        if self.pooler_T is not None:
            out["pooler_T"] = self.pooler_T
            out["pooler_V"] = self.pooler_V
        return out

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors, named ``<group>.<param>`` in a fixed order."""
        return {f"{g}.{n}": t for g, mod in self.groups().items() for n, t in mod.parameters().items()}

    def branch_parameters(self, branch: str) -> dict[str, Tensor]:
        suffix = {"text": "_T", "vision": "_V"}[branch]
        return {k: t for k, t in self.parameters().items() if k.split(".")[0].endswith(suffix)}

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr


def forward(model: AlignmentModel, f, target_len: int) -> ConditioningPair:
    if target_len < 1:
        raise ShapeError(f"target_len must be >= 1, got {target_len}")
    f = ad.as_tensor(f)
    w_T = adapt(model.adapter_T, f)
    w_V = adapt(model.adapter_V, f)
    if model.pooler_T is None:
        z_T = ad.matmul(adaptive_pool_matrix(w_T.shape[0], target_len), w_T)
        z_V = ad.mean_rows(w_V)
    else:
        z_T = pool(model.pooler_T, w_T, target_len)
        z_V = pool(model.pooler_V, w_V, 1)
    return ConditioningPair(z_T, ad.reshape(z_V, (model.config.d_vision,)))


def alignment_loss(pair: ConditioningPair, target: CaptionRecord) -> Tensor:
    """Per-sample loss: MSE over the token sequence plus MSE over the vector."""
    if pair.z_hat_T.shape != target.text_embedding.shape:
        raise ShapeError(f"predicted text sequence {pair.z_hat_T.shape} vs target {target.text_embedding.shape}")
    return ad.add(ad.mse(pair.z_hat_T, target.text_embedding), ad.mse(pair.z_hat_V, target.vision_embedding))


# ---------------------------------------------------------------------------
# conditioning export
#
# "SSCP" | u32 version | u32 d_text | u32 d_vision | u64 count
# per record: u16 key length | key (UTF-8) | u32 l | f32 [l x d_text] | f32 [d_vision]

CONDITIONING_MAGIC = b"SSCP"
CONDITIONING_VERSION = 1


def write_conditioning(path, pairs: Mapping[str, tuple[np.ndarray, np.ndarray]], d_text: int, d_vision: int) -> None:
    """Serialise ``{key: (z_hat_T, z_hat_V)}`` as float32."""
    chunks = [CONDITIONING_MAGIC, struct.pack("<IIIQ", CONDITIONING_VERSION, d_text, d_vision, len(pairs))]
    for key, (zt, zv) in pairs.items():
        zt = np.asarray(zt, dtype="<f4")
        zv = np.asarray(zv, dtype="<f4").reshape(-1)
        if zt.ndim != 2 or zt.shape[1] != d_text or zv.size != d_vision:
            raise ShapeError(f"conditioning record {key!r} has shapes {zt.shape}/{zv.shape}")
        kb = key.encode("utf-8")
        chunks += [struct.pack("<H", len(kb)), kb, struct.pack("<I", zt.shape[0]), zt.tobytes(), zv.tobytes()]
    payload = b"".join(chunks)
    atomic_write(path, lambda f: f.write(payload))


def read_conditioning(path) -> tuple[int, int, dict[str, tuple[np.ndarray, np.ndarray]]]:
    with open(path, "rb") as f:
        r = Reader(f.read())
    if r.take(4, "magic") != CONDITIONING_MAGIC:
        raise FormatError("not a conditioning file: bad magic", 0)
    version = r.u32("version")
    if version != CONDITIONING_VERSION:
        raise FormatError(f"unsupported conditioning version {version}", 4)
    d_text, d_vision, count = r.u32("d_text"), r.u32("d_vision"), r.u64("record count")
    out = {}
    for _ in range(count):
        key = r.take(r.u16("key length"), "key").decode("utf-8")
        n = r.u32("token count")
        zt = np.frombuffer(r.take(4 * n * d_text, f"z_hat_T of {key!r}"), dtype="<f4").reshape(n, d_text)
        zv = np.frombuffer(r.take(4 * d_vision, f"z_hat_V of {key!r}"), dtype="<f4")
        out[key] = (zt.astype(np.float32), zv.astype(np.float32))
    if not r.at_end():
        raise FormatError("trailing bytes after last record", r.pos)
    return d_text, d_vision, out
