"""Self-attentive knowledge tracing network with hand-written gradients.

Shapes used throughout: ``B`` windows per batch, ``n`` positions, ``d`` latent
width, ``h`` heads. Each head projects with full ``d x d`` matrices and the
output projection ``Wo`` maps the ``h*d`` concatenation back to ``d``.

Position ``i`` of a window carries the past interaction ``x_i`` (key/value
stream) and the next exercise ``e_{i+1}`` (query stream). A query may attend
keys ``j <= i`` that are not padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .config import TrainConfig
from .data import EncodedWindow, WindowBatch, stack_windows
from .numerics import (
    DimensionError,
    EmptyRowError,
    dropout_mask,
    layer_norm_backward,
    layer_norm_forward,
    masked_softmax_rows,
    relu,
    sigmoid,
    softmax_backward,
)

INIT_STD = 0.05
PROB_CLIP = 1e-7

BLOCK_TENSORS = (
    "Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
)  # fmt: skip


@dataclass
class ModelParams:
    """Every learnable tensor, keyed by name.

    ``M`` (2E+1, d) interaction embeddings, last row padding; ``E`` (E+1, d)
    exercise embeddings, last row padding; ``P`` (n, d) positions; per block
    ``b{k}.Wq/Wk/Wv`` (h, d, d), ``b{k}.Wo`` (h*d, d), FFN and layer-norm
    tensors; prediction head ``w`` (d,) and scalar ``bias``.
    """

    num_exercises: int
    d: int
    n: int
    heads: int
    blocks: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.expected_shapes()
        if self.tensors:
            if set(self.tensors) != set(expected):
                missing = set(expected) - set(self.tensors)
                extra = set(self.tensors) - set(expected)
                raise DimensionError(
                    f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}"
                )
            for name, shape in expected.items():
                if self.tensors[name].shape != shape:
                    raise DimensionError(
                        f"{name}: shape {self.tensors[name].shape}, expected {shape}"
                    )

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        E, d, n, h = self.num_exercises, self.d, self.n, self.heads
        shapes = {"M": (2 * E + 1, d), "E": (E + 1, d), "P": (n, d)}
        for k in range(self.blocks):
            shapes.update(
                {
                    f"b{k}.Wq": (h, d, d),
                    f"b{k}.Wk": (h, d, d),
                    f"b{k}.Wv": (h, d, d),
                    f"b{k}.Wo": (h * d, d),
                    f"b{k}.W1": (d, d),
                    f"b{k}.b1": (d,),
                    f"b{k}.W2": (d, d),
                    f"b{k}.b2": (d,),
                    f"b{k}.ln1_g": (d,),
                    f"b{k}.ln1_b": (d,),
                    f"b{k}.ln2_g": (d,),
                    f"b{k}.ln2_b": (d,),
                }
            )
        shapes["w"] = (d,)
        shapes["bias"] = ()
        return shapes

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def block(self, k: int) -> dict[str, np.ndarray]:
        return {t: self.tensors[f"b{k}.{t}"] for t in BLOCK_TENSORS}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.num_exercises,
            self.d,
            self.n,
            self.heads,
            self.blocks,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(
    config: TrainConfig, num_exercises: int, rng: np.random.Generator
) -> ModelParams:
    """Truncated-normal weights (std 0.05, cut at 2 std), zero biases, unit gains."""
    shell = ModelParams(num_exercises, config.d, config.n, config.heads, config.blocks)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in shell.expected_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("ln1_g", "ln2_g"):
            arr = np.ones(shape)
        elif leaf in ("b1", "b2", "ln1_b", "ln2_b", "bias"):
            arr = np.zeros(shape)
        else:
            arr = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
        tensors[name] = np.asarray(arr, dtype=dtype)
    return ModelParams(
        num_exercises, config.d, config.n, config.heads, config.blocks, tensors
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def as_batch(window: EncodedWindow | WindowBatch) -> WindowBatch:
    if isinstance(window, EncodedWindow):
        return stack_windows([window])
    return window


def _check_ids(params: ModelParams, batch: WindowBatch) -> None:
    E = params.num_exercises
    if batch.interaction_ids.shape[1] != params.n:
        raise DimensionError(
            f"window length {batch.interaction_ids.shape[1]} vs model n={params.n}"
        )
    if batch.interaction_ids.min() < 0 or batch.interaction_ids.max() > 2 * E:
        raise DimensionError("interaction id outside [0, 2E]")
    if batch.query_exercise_ids.min() < 0 or batch.query_exercise_ids.max() > E:
        raise DimensionError("query exercise id outside [0, E]")


def embed(params: ModelParams, batch: WindowBatch, config: TrainConfig):
    """Return (Mhat, Ehat), each (B, n, d): looked-up interactions plus positions,
    and looked-up query exercises (no positional term)."""
    batch = as_batch(batch)
    _check_ids(params, batch)
    mhat = params["M"][batch.interaction_ids]
    if not config.no_pe:
        mhat = mhat + params["P"][None, :, :]
    ehat = params["E"][batch.query_exercise_ids]
    return mhat, ehat


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, 1, n, n) boolean: query i may see key j iff j <= i and both are real."""
    n = valid.shape[1]
    causal = np.tril(np.ones((n, n), dtype=bool))
    return causal[None, None] & valid[:, None, None, :] & valid[:, None, :, None]


@dataclass
class BlockCache:
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    concat: np.ndarray
    drop_s: np.ndarray | None
    ln1: tuple
    a_out: np.ndarray
    z1: np.ndarray
    hidden: np.ndarray
    drop_g: np.ndarray | None
    ln2: tuple
    residual: bool
    params: dict


def attention_block_forward(
    xq: np.ndarray,
    xkv: np.ndarray,
    valid: np.ndarray,
    blk: dict[str, np.ndarray],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
):
    """One attention + feed-forward block. Returns (output, cache).

    ``rng`` switches on dropout (train mode); ``None`` means eval mode.
    """
    B, n, d = xq.shape
    q = np.einsum("bnd,hde->bhne", xq, blk["Wq"])
    k = np.einsum("bnd,hde->bhne", xkv, blk["Wk"])
    v = np.einsum("bnd,hde->bhne", xkv, blk["Wv"])
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    mask = attention_mask(valid)
    if np.any(valid & ~mask[:, 0].any(axis=-1)):
        raise EmptyRowError("a real query position has no visible key")
    mask = np.broadcast_to(mask, logits.shape)
    weights = masked_softmax_rows(logits, mask, allow_empty=True)
    heads = weights @ v  # (B, h, n, d)
    concat = np.swapaxes(heads, 1, 2).reshape(B, n, -1)
    s = concat @ blk["Wo"]

    rate = config.dropout_rate
    drop_s = dropout_mask(s.shape, rate, rng, s.dtype)
    s_d = s * drop_s if drop_s is not None else s
    residual = not config.no_residual
    a_out, ln1 = layer_norm_forward(s_d + xq if residual else s_d, blk["ln1_g"], blk["ln1_b"])

    z1 = a_out @ blk["W1"] + blk["b1"]
    hidden = relu(z1)
    g = hidden @ blk["W2"] + blk["b2"]
    drop_g = dropout_mask(g.shape, rate, rng, g.dtype)
    g_d = g * drop_g if drop_g is not None else g
    out, ln2 = layer_norm_forward(g_d + a_out if residual else g_d, blk["ln2_g"], blk["ln2_b"])
    out = out.astype(xq.dtype, copy=False)
    cache = BlockCache(
        xq, xkv, q, k, v, weights, concat, drop_s, ln1, a_out, z1, hidden, drop_g, ln2,
        residual, blk,
    )  # fmt: skip
    return out, cache


def attention_block(xq, xkv, valid, blk, config, rng=None) -> np.ndarray:
    return attention_block_forward(xq, xkv, valid, blk, config, rng)[0]


def attention_block_backward(dout: np.ndarray, cache: BlockCache):
    """Return (d_xq, d_xkv, grads) where grads is keyed by block tensor name."""
    blk = cache.params
    B, n, d = cache.xq.shape
    h = blk["Wq"].shape[0]
    lead = (0, 1)
    grads: dict[str, np.ndarray] = {}

    dpre2, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dout, cache.ln2)
    dg = dpre2 * cache.drop_g if cache.drop_g is not None else dpre2
    da_out = dpre2.copy() if cache.residual else np.zeros_like(dpre2)
    grads["W2"] = np.einsum("bni,bnj->ij", cache.hidden, dg)
    grads["b2"] = dg.sum(axis=lead)
    dz1 = (dg @ blk["W2"].T) * (cache.z1 > 0)
    grads["W1"] = np.einsum("bni,bnj->ij", cache.a_out, dz1)
    grads["b1"] = dz1.sum(axis=lead)
    da_out += dz1 @ blk["W1"].T

    dpre1, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(da_out, cache.ln1)
    ds = dpre1 * cache.drop_s if cache.drop_s is not None else dpre1
    dxq = dpre1.copy() if cache.residual else np.zeros_like(dpre1)

    grads["Wo"] = np.einsum("bni,bnj->ij", cache.concat, ds)
    dheads = np.swapaxes((ds @ blk["Wo"].T).reshape(B, n, h, d), 1, 2)
    dweights = dheads @ np.swapaxes(cache.v, -1, -2)
    dv = np.swapaxes(cache.weights, -1, -2) @ dheads
    dlogits = softmax_backward(cache.weights, dweights) / np.sqrt(d)
    dq = dlogits @ cache.k
    dk = np.swapaxes(dlogits, -1, -2) @ cache.q

    grads["Wq"] = np.einsum("bnd,bhne->hde", cache.xq, dq)
    grads["Wk"] = np.einsum("bnd,bhne->hde", cache.xkv, dk)
    grads["Wv"] = np.einsum("bnd,bhne->hde", cache.xkv, dv)
    dxq += np.einsum("bhne,hde->bnd", dq, blk["Wq"])
    dxkv = np.einsum("bhne,hde->bnd", dk, blk["Wk"]) + np.einsum(
        "bhne,hde->bnd", dv, blk["Wv"]
    )
    return dxq, dxkv, grads


def predict(F: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-position probability of a correct answer, sigmoid(F w + bias)."""
    return sigmoid(F @ params["w"] + params["bias"])


def loss(p: np.ndarray, targets: np.ndarray, valid: np.ndarray) -> tuple[float, float]:
    """Negative log-likelihood over valid positions as (mean, sum).

    Probabilities are clipped to [1e-7, 1 - 1e-7] before taking logs.
    """
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("loss needs at least one valid position")
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    r = np.asarray(targets, dtype=float)
    nll = -(r * np.log(pc) + (1.0 - r) * np.log1p(-pc))
    total = float(np.sum(nll[valid]))
    return total / count, total


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    batch: WindowBatch
    mhat: np.ndarray
    ehat: np.ndarray
    blocks: list[BlockCache]
    F: np.ndarray
    p: np.ndarray
    no_pe: bool

    def attention(self, block: int = -1) -> np.ndarray:
        """(B, h, n, n) attention weights of the given block."""
        if not self.blocks:
            raise ValueError("model has no attention blocks")
        return self.blocks[block].weights


def forward(
    params: ModelParams,
    batch: WindowBatch | EncodedWindow,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    batch = as_batch(batch)
    if config.blocks != params.blocks or config.heads != params.heads:
        raise DimensionError("config and parameters disagree on blocks or heads")
    mhat, ehat = embed(params, batch, config)
    xq, xkv = ehat, mhat
    caches = []
    for k in range(params.blocks):
        out, cache = attention_block_forward(xq, xkv, batch.valid, params.block(k), config, rng)
        caches.append(cache)
        # stacked blocks self-attend over the previous block's output
        xq = xkv = out
    F = xq if params.blocks else mhat
    return ForwardTrace(batch, mhat, ehat, caches, F, predict(F, params), config.no_pe)


def backward(params: ModelParams, trace: ForwardTrace) -> dict[str, np.ndarray]:
    """Gradient of the mean valid-position loss w.r.t. every tensor in ``params``."""
    batch = trace.batch
    if trace.F.shape[-1] != params.d or len(trace.blocks) != params.blocks:
        raise DimensionError("trace does not belong to these parameters")
    valid = batch.valid
    count = int(valid.sum())
    if count == 0:
        raise ValueError("backward needs at least one valid position")
    grads = params.zeros_like()

    p = trace.p
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    dz = np.where(valid & inside, p - batch.targets, 0.0) / count
    grads["w"] = np.einsum("bnd,bn->d", trace.F, dz).astype(params["w"].dtype)
    grads["bias"] = np.asarray(dz.sum(), dtype=params["bias"].dtype)
    dF = dz[..., None] * params["w"]

    dmhat = np.zeros_like(trace.mhat)
    dehat = np.zeros_like(trace.ehat)
    if params.blocks == 0:
        dmhat += dF
    else:
        dcur = dF
        for k in reversed(range(params.blocks)):
            dxq, dxkv, bgrads = attention_block_backward(dcur, trace.blocks[k])
            for name, g in bgrads.items():
                grads[f"b{k}.{name}"] = g
            if k == 0:
                dehat += dxq
                dmhat += dxkv
            else:
                dcur = dxq + dxkv

    np.add.at(grads["M"], batch.interaction_ids, dmhat)
    np.add.at(grads["E"], batch.query_exercise_ids, dehat)
    if not trace.no_pe:
        grads["P"] = dmhat.sum(axis=0)
    return {k: g.astype(params[k].dtype, copy=False) for k, g in grads.items()}


def loss_and_grad(params, batch, config, rng=None):
    """Mean loss and its gradient for one batch."""
    trace = forward(params, batch, config, rng)
    mean, _ = loss(trace.p, trace.batch.targets, trace.batch.valid)
    return mean, backward(params, trace)
