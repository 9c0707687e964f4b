"""Miniature transformer encoder with pluggable bottleneck adapters,
an adapter-fusion block, and task heads.

Layer recipe (pre-LN): attention residual, feed-forward residual, then the
language slot (single adapter or fusion over several), then the task slot.
Up-projections and fusion value matrices initialize to zero so inserting
fresh adapters leaves the encoder function unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (CheckpointFormatError, ConfigMismatchError, FusionArityError,
                     SeqLenError, ShapeError)

CHECKPOINT_MAGIC = b"KGADAPT1"


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 512
    max_seq_len: int = 64
    dropout_p: float = 0.1

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def _uniform(rng, shape, dtype):
    bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class _ParamBlock:
    """Ordered named-tensor container; the base of every weights class."""

    def __init__(self, params):
        self.params = params  # name -> Tensor, insertion order is canonical

    def named_tensors(self):
        return list(self.params.items())

    def set_trainable(self, flag):
        for t in self.params.values():
            t.requires_grad = flag

    def trainable_tensors(self):
        return [t for t in self.params.values() if t.requires_grad]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__ = dict(self.__dict__)
        clone.params = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                        for name, t in self.params.items()}
        return clone


class EncoderWeights(_ParamBlock):
    def __init__(self, config: EncoderConfig, params):
        super().__init__(params)
        self.config = config

    @classmethod
    def init(cls, config: EncoderConfig, seed=0, dtype=np.float64) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.d_ff
        p = {}
        p["token_emb"] = _uniform(rng, (config.vocab_size, d), dtype)
        p["pos_emb"] = _uniform(rng, (config.max_seq_len, d), dtype)
        for i in range(config.n_layers):
            for mat in ("Wq", "Wk", "Wv", "Wo"):
                p[f"layer{i}.attn.{mat}"] = _uniform(rng, (d, d), dtype)
            for vec in ("bq", "bk", "bv", "bo"):
                p[f"layer{i}.attn.{vec}"] = _zeros((d,), dtype)
            p[f"layer{i}.ln1.g"] = _ones((d,), dtype)
            p[f"layer{i}.ln1.b"] = _zeros((d,), dtype)
            p[f"layer{i}.ln2.g"] = _ones((d,), dtype)
            p[f"layer{i}.ln2.b"] = _zeros((d,), dtype)
            p[f"layer{i}.ff.W1"] = _uniform(rng, (d, ff), dtype)
            p[f"layer{i}.ff.b1"] = _zeros((ff,), dtype)
            p[f"layer{i}.ff.W2"] = _uniform(rng, (ff, d), dtype)
            p[f"layer{i}.ff.b2"] = _zeros((d,), dtype)
        p["final_ln.g"] = _ones((d,), dtype)
        p["final_ln.b"] = _zeros((d,), dtype)
        return cls(config, p)


class AdapterWeights(_ParamBlock):
    """Per-layer residual bottleneck: down-projection, ReLU, up-projection."""

    def __init__(self, d_model, n_layers, reduction_factor, params):
        super().__init__(params)
        self.d_model = d_model
        self.n_layers = n_layers
        self.reduction_factor = reduction_factor

    @classmethod
    def init(cls, config: EncoderConfig, reduction_factor=16, seed=0,
             dtype=np.float64) -> "AdapterWeights":
        d = config.d_model
        if d % reduction_factor:
            raise ValueError(f"d_model {d} not divisible by reduction factor {reduction_factor}")
        width = d // reduction_factor
        rng = np.random.default_rng(seed)
        p = {}
        for i in range(config.n_layers):
            p[f"layer{i}.W_down"] = _uniform(rng, (d, width), dtype)
            p[f"layer{i}.b_down"] = _zeros((width,), dtype)
            # zero up-projection: inserting the fresh adapter is a no-op
            p[f"layer{i}.W_up"] = _zeros((width, d), dtype)
            p[f"layer{i}.b_up"] = _zeros((d,), dtype)
        return cls(d, config.n_layers, reduction_factor, p)


class FusionWeights(_ParamBlock):
    """Per-layer Query/Key/Value matrices that mix several adapter outputs."""

    def __init__(self, d_model, n_layers, params):
        super().__init__(params)
        self.d_model = d_model
        self.n_layers = n_layers

    @classmethod
    def init(cls, config: EncoderConfig, seed=0, dtype=np.float64) -> "FusionWeights":
        d = config.d_model
        rng = np.random.default_rng(seed)
        p = {}
        for i in range(config.n_layers):
            p[f"layer{i}.W_q"] = _uniform(rng, (d, d), dtype)
            p[f"layer{i}.W_k"] = _uniform(rng, (d, d), dtype)
            p[f"layer{i}.W_v"] = _zeros((d, d), dtype)  # zero value path: safe insertion
        return cls(d, config.n_layers, p)


HEAD_KINDS = ("mlm", "seq_cls", "tok_cls")


class HeadWeights(_ParamBlock):
    """Classification head: mlm (optionally tied to the embedding table),
    seq_cls over the CLS position, or tok_cls per position."""

    def __init__(self, kind, d_model, n_out, params, tied_table=None):
        super().__init__(params)
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.d_model = d_model
        self.n_out = n_out
        self.tied_table = tied_table  # embedding Tensor when tied

    @classmethod
    def init(cls, kind, d_model, n_out, seed=0, dtype=np.float64) -> "HeadWeights":
        rng = np.random.default_rng(seed)
        params = {"W": _uniform(rng, (d_model, n_out), dtype), "b": _zeros((n_out,), dtype)}
        return cls(kind, d_model, n_out, params)

    @classmethod
    def tied_mlm(cls, token_emb: Tensor) -> "HeadWeights":
        vocab_size, d_model = token_emb.data.shape
        return cls("mlm", d_model, vocab_size, {}, tied_table=token_emb)


@dataclass
class FusionSlot:
    adapters: list  # >= 2 AdapterWeights
    fusion: FusionWeights

    def __post_init__(self):
        if len(self.adapters) < 2:
            raise FusionArityError(f"fusion needs at least 2 adapters, got {len(self.adapters)}")


@dataclass
class AdapterStack:
    """language slot feeds the task slot; empty slots are identity."""

    language: object = None  # None | AdapterWeights | FusionSlot
    task: AdapterWeights | None = None

    @classmethod
    def empty(cls) -> "AdapterStack":
        return cls()


# --- forward passes ---------------------------------------------------------


def _linear(h, W, b=None):
    d_in = h.data.shape[-1]
    if W.data.shape[0] != d_in:
        raise ShapeError("linear", f"input {h.data.shape} vs weight {W.data.shape}")
    flat = ad.reshape(h, (-1, d_in))
    out = ad.matmul(flat, W)
    if b is not None:
        out = ad.add(out, b)
    return ad.reshape(out, h.data.shape[:-1] + (W.data.shape[1],))


def adapter_forward(h, adapter: AdapterWeights, layer: int):
    """h + relu(h @ W_down + b_down) @ W_up + b_up."""
    if h.data.shape[-1] != adapter.d_model:
        raise ShapeError("adapter_forward", f"{h.data.shape} vs d_model {adapter.d_model}")
    p = adapter.params
    z = ad.relu(_linear(h, p[f"layer{layer}.W_down"], p[f"layer{layer}.b_down"]))
    return ad.add(h, _linear(z, p[f"layer{layer}.W_up"], p[f"layer{layer}.b_up"]))


def fusion_forward(h, adapter_outputs, fusion: FusionWeights, layer: int):
    """Attention over adapter outputs; returns (h + mixed values, weights).

    Per position: query from h, key/value from each adapter output, logits
    scaled by 1/sqrt(d_model), softmax over the adapters.
    """
    if len(adapter_outputs) < 2:
        raise FusionArityError(f"fusion needs at least 2 adapter outputs, got {len(adapter_outputs)}")
    for out in adapter_outputs:
        if out.data.shape != h.data.shape:
            raise ShapeError("fusion_forward", f"adapter output {out.data.shape} vs h {h.data.shape}")
    p = fusion.params
    w_q, w_k, w_v = p[f"layer{layer}.W_q"], p[f"layer{layer}.W_k"], p[f"layer{layer}.W_v"]
    inv_sqrt_d = 1.0 / math.sqrt(h.data.shape[-1])

    q = _linear(h, w_q)
    logits = []
    values = []
    for out in adapter_outputs:
        k = _linear(out, w_k)
        values.append(_linear(out, w_v))
        logits.append(ad.scale(ad.sum_axis(ad.mul(q, k), axis=-1, keepdims=True), inv_sqrt_d))
    alpha = ad.softmax(ad.concat(logits, axis=-1), axis=-1)  # [..., n_adapters]

    mixed = None
    for i, v in enumerate(values):
        weight_i = ad.narrow(alpha, alpha.data.ndim - 1, i, 1)
        term = ad.mul(weight_i, v)
        mixed = term if mixed is None else ad.add(mixed, term)
    return ad.add(h, mixed), alpha


def _apply_stack(h, stack, layer, fusion_traces):
    slot = stack.language
    if isinstance(slot, AdapterWeights):
        h = adapter_forward(h, slot, layer)
    elif isinstance(slot, FusionSlot):
        outputs = [adapter_forward(h, a, layer) for a in slot.adapters]
        h, alpha = fusion_forward(h, outputs, slot.fusion, layer)
        if fusion_traces is not None:
            fusion_traces.append(alpha)
    elif slot is not None:
        raise ShapeError("encoder_forward", f"bad language slot {type(slot).__name__}")
    if stack.task is not None:
        h = adapter_forward(h, stack.task, layer)
    return h


def encoder_forward(ids, base: EncoderWeights, stack: AdapterStack | None = None,
                    mode="eval", attn_mask=None, dropout_p=None, dropout_seed=0,
                    fusion_traces=None):
    """Hidden states for `ids` ([T] or [B, T] ints). `attn_mask` marks real
    (non-padding) tokens; pass `fusion_traces=[]` to collect per-layer fusion
    attention tensors."""
    cfg = base.config
    stack = stack or AdapterStack.empty()
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
        if attn_mask is not None:
            attn_mask = np.asarray(attn_mask)[None, :]
    n_batch, seq_len = ids.shape
    if seq_len > cfg.max_seq_len:
        raise SeqLenError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")

    training = mode == "train"
    p_drop = cfg.dropout_p if dropout_p is None else dropout_p
    site = [0]

    def drop(x):
        if not training or p_drop == 0.0:
            return x
        seed = int(np.random.SeedSequence([int(dropout_seed) & (2**63 - 1), site[0]]).generate_state(1)[0])
        site[0] += 1
        return ad.dropout(x, p_drop, seed=seed, training=True)

    mask_bias = None
    if attn_mask is not None:
        bias = np.where(np.asarray(attn_mask, dtype=bool), 0.0, -1e9)
        mask_bias = Tensor(bias[:, None, None, :].astype(base.params["token_emb"].data.dtype))

    p = base.params
    h = ad.add(ad.embedding_lookup(p["token_emb"], ids),
               ad.embedding_lookup(p["pos_emb"], np.arange(seq_len)))
    h = drop(h)

    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    for i in range(cfg.n_layers):
        normed = ad.layer_norm(h, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        q = _split_heads(_linear(normed, p[f"layer{i}.attn.Wq"], p[f"layer{i}.attn.bq"]), n_heads, d_head)
        k = _split_heads(_linear(normed, p[f"layer{i}.attn.Wk"], p[f"layer{i}.attn.bk"]), n_heads, d_head)
        v = _split_heads(_linear(normed, p[f"layer{i}.attn.Wv"], p[f"layer{i}.attn.bv"]), n_heads, d_head)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
        if mask_bias is not None:
            scores = ad.add(scores, mask_bias)
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)  # [B, nh, T, dh]
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n_batch, seq_len, cfg.d_model))
        h = ad.add(h, drop(_linear(ctx, p[f"layer{i}.attn.Wo"], p[f"layer{i}.attn.bo"])))

        normed = ad.layer_norm(h, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        ff = _linear(ad.gelu(_linear(normed, p[f"layer{i}.ff.W1"], p[f"layer{i}.ff.b1"])),
                     p[f"layer{i}.ff.W2"], p[f"layer{i}.ff.b2"])
        h = ad.add(h, drop(ff))

        h = _apply_stack(h, stack, i, fusion_traces)

    h = ad.layer_norm(h, p["final_ln.g"], p["final_ln.b"])
    if single:
        h = ad.reshape(h, (seq_len, cfg.d_model))
    return h


def _split_heads(x, n_heads, d_head):
    n_batch, seq_len, _ = x.data.shape
    return ad.transpose(ad.reshape(x, (n_batch, seq_len, n_heads, d_head)), (0, 2, 1, 3))


def head_forward(h, head: HeadWeights):
    """mlm -> [..., vocab]; seq_cls -> class logits from the CLS position;
    tok_cls -> [..., n_tags]."""
    if h.data.shape[-1] != head.d_model:
        raise ShapeError("head_forward", f"{h.data.shape} vs d_model {head.d_model}")
    if head.kind == "mlm":
        if head.tied_table is not None:
            return _linear(h, ad.transpose(head.tied_table, (1, 0)))
        return _linear(h, head.params["W"], head.params["b"])
    if head.kind == "tok_cls":
        return _linear(h, head.params["W"], head.params["b"])
    # seq_cls: position 0 is CLS
    single = h.data.ndim == 2
    cls = ad.narrow(h, h.data.ndim - 2, 0, 1)
    logits = _linear(cls, head.params["W"], head.params["b"])
    if single:
        return ad.reshape(logits, (head.n_out,))
    return ad.reshape(logits, (h.data.shape[0], head.n_out))


# --- checkpoint container -----------------------------------------------------
#
# Layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON manifest,
# concatenated little-endian float payloads (dtype per tensor in the manifest;
# f32 in training builds, f64 in test builds, preserved across round trips).

_DTYPE_CODES = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(weights, path, extra_config=None):
    component, config = _describe(weights)
    if extra_config:
        config = {**config, **extra_config}
    entries = []
    payload = bytearray()
    for name, t in weights.named_tensors():
        arr = np.ascontiguousarray(t.data)
        code = "f64" if arr.dtype == np.float64 else "f32"
        raw = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    manifest = json.dumps({"component": component, "config": config, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(manifest).to_bytes(8, "little"))
        fh.write(manifest)
        fh.write(payload)


def _describe(weights):
    if isinstance(weights, EncoderWeights):
        return "base", asdict(weights.config)
    if isinstance(weights, AdapterWeights):
        return "adapter", {"d_model": weights.d_model, "n_layers": weights.n_layers,
                           "reduction_factor": weights.reduction_factor}
    if isinstance(weights, FusionWeights):
        return "fusion", {"d_model": weights.d_model, "n_layers": weights.n_layers}
    if isinstance(weights, HeadWeights):
        if weights.tied_table is not None:
            raise ValueError("tied heads have no weights of their own to save")
        return "head", {"kind": weights.kind, "d_model": weights.d_model, "n_out": weights.n_out}
    raise TypeError(f"cannot checkpoint {type(weights).__name__}")


def load_checkpoint(path):
    """Rebuild the weights object stored at `path` (bitwise round trip)."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic prefix")
    if len(blob) < 16:
        raise CheckpointFormatError(f"{path}: truncated header")
    manifest_len = int.from_bytes(blob[8:16], "little")
    if 16 + manifest_len > len(blob):
        raise CheckpointFormatError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(blob[16:16 + manifest_len].decode("utf-8"))
        component = manifest["component"]
        config = manifest["config"]
        entries = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc

    payload = blob[16 + manifest_len:]
    tensors = {}
    total = 0
    for e in entries:
        try:
            shape = tuple(int(s) for s in e["shape"])
            dtype = _DTYPE_CODES[e["dtype"]]
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            expected = count * np.dtype(dtype).itemsize
            if e["nbytes"] != expected:
                raise CheckpointFormatError(
                    f"{path}: tensor {e['name']} shape {shape} implies {expected} bytes, "
                    f"manifest says {e['nbytes']}")
            if e["offset"] + expected > len(payload):
                raise CheckpointFormatError(f"{path}: tensor {e['name']} overruns payload")
            arr = np.frombuffer(payload, dtype=dtype, count=count, offset=e["offset"])
            tensors[e["name"]] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
            total += expected
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: malformed tensor entry: {exc}") from exc
    if total != len(payload):
        raise CheckpointFormatError(
            f"{path}: payload is {len(payload)} bytes, manifest accounts for {total}")

    return _rebuild(component, config, tensors, path)


def _rebuild(component, config, tensors, path):
    try:
        if component == "base":
            built = EncoderWeights(EncoderConfig(**{k: config[k] for k in (
                "n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
                "max_seq_len", "dropout_p")}), tensors)
        elif component == "adapter":
            built = AdapterWeights(config["d_model"], config["n_layers"],
                                   config["reduction_factor"], tensors)
        elif component == "fusion":
            built = FusionWeights(config["d_model"], config["n_layers"], tensors)
        elif component == "head":
            built = HeadWeights(config["kind"], config["d_model"], config["n_out"], tensors)
        else:
            raise CheckpointFormatError(f"{path}: unknown component {component!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad {component} config: {exc}") from exc
    missing = _expected_names(component, config) - set(tensors)
    if missing:
        raise CheckpointFormatError(f"{path}: manifest missing tensors {sorted(missing)}")
    return built


def _expected_names(component, config):
    if component == "head":
        return {"W", "b"}
    n_layers = config["n_layers"]
    if component == "adapter":
        per_layer = ("W_down", "b_down", "W_up", "b_up")
    elif component == "fusion":
        per_layer = ("W_q", "W_k", "W_v")
    else:  # base
        per_layer = ("attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo", "attn.bq", "attn.bk",
                     "attn.bv", "attn.bo", "ln1.g", "ln1.b", "ln2.g", "ln2.b",
                     "ff.W1", "ff.b1", "ff.W2", "ff.b2")
    names = {f"layer{i}.{suffix}" for i in range(n_layers) for suffix in per_layer}
    if component == "base":
        names |= {"token_emb", "pos_emb", "final_ln.g", "final_ln.b"}
    return names


def check_adapter_fits(adapter: AdapterWeights, config: EncoderConfig, expect_r=None):
    """Reject adapters trained against a different geometry."""
    mine = {"d_model": config.d_model, "n_layers": config.n_layers}
    theirs = {"d_model": adapter.d_model, "n_layers": adapter.n_layers}
    if mine != theirs:
        raise ConfigMismatchError(f"adapter config {theirs} vs encoder config {mine}")
    if expect_r is not None and adapter.reduction_factor != expect_r:
        raise ConfigMismatchError(
            f"adapter config {{'reduction_factor': {adapter.reduction_factor}}} "
            f"vs expected {{'reduction_factor': {expect_r}}}")


def check_fusion_fits(fusion: FusionWeights, config: EncoderConfig):
    mine = {"d_model": config.d_model, "n_layers": config.n_layers}
    theirs = {"d_model": fusion.d_model, "n_layers": fusion.n_layers}
    if mine != theirs:
        raise ConfigMismatchError(f"fusion config {theirs} vs encoder config {mine}")
