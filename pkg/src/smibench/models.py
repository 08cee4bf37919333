"""The three transformer backbones with regression and fine-tune heads.

Family conventions are pinned to each namesake architecture: the encoder
family uses post-layer-norm blocks with learned absolute positions and
pools the bos position; the decoder family uses pre-RMS-norm blocks with
rotary positions and a causal mask and pools the eos position; the
encoder-decoder family pairs a post-LN encoder with a causal decoder plus
cross-attention and pools the decoder's eos position.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .families import ModelFamily
from .tokenizer import BOS_ID, EOS_ID, EncodedBatch, MAX_SEQ_LEN

_CHECKPOINT_MAGIC = b"SMBCKPT1"


@dataclass
class ModelConfig:
    family: ModelFamily
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_heads: int
    vocab_size: int
    max_positions: int = MAX_SEQ_LEN
    num_properties: int = 8
    ft_head_hidden: int | None = None

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = ModelFamily.from_name(self.family)
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by "
                             f"num_heads {self.num_heads}")
        if (self.hidden_size // self.num_heads) % 2 != 0 and self.family is ModelFamily.DECODER:
            raise ValueError("rotary positions need an even head dimension")
        if not 1 <= self.max_positions <= MAX_SEQ_LEN:
            raise ValueError(f"max_positions must be in [1, {MAX_SEQ_LEN}]")
        for name in ("hidden_size", "intermediate_size", "num_layers", "num_heads",
                     "vocab_size", "num_properties"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "hidden_size", "intermediate_size", "num_layers", "num_heads",
            "vocab_size", "max_positions", "num_properties", "ft_head_hidden")}
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two sigma."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


class _ParamStore:
    """Ordered named-parameter registry shared by backbone and heads."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def new(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(data, name)
        self._params[name] = p
        return p

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def by_name(self) -> dict[str, Parameter]:
        return dict(self._params)


class _Attention:
    def __init__(self, store: _ParamStore, rng, prefix: str, hidden: int, heads: int):
        self.heads = heads
        self.wq = store.new(f"{prefix}.wq", _trunc_normal(rng, (hidden, hidden)))
        self.bq = store.new(f"{prefix}.bq", np.zeros(hidden))
        self.wk = store.new(f"{prefix}.wk", _trunc_normal(rng, (hidden, hidden)))
        self.bk = store.new(f"{prefix}.bk", np.zeros(hidden))
        self.wv = store.new(f"{prefix}.wv", _trunc_normal(rng, (hidden, hidden)))
        self.bv = store.new(f"{prefix}.bv", np.zeros(hidden))
        self.wo = store.new(f"{prefix}.wo", _trunc_normal(rng, (hidden, hidden)))
        self.bo = store.new(f"{prefix}.bo", np.zeros(hidden))

    def __call__(self, x: Tensor, mode: str, pad_mask: np.ndarray,
                 kv: Tensor | None = None, rope=None) -> Tensor:
        source = x if kv is None else kv
        q = _split_heads(ad.linear(x, self.wq, self.bq), self.heads)
        k = _split_heads(ad.linear(source, self.wk, self.bk), self.heads)
        v = _split_heads(ad.linear(source, self.wv, self.bv), self.heads)
        if rope is not None:
            q = _apply_rope(q, rope)
            k = _apply_rope(k, rope)
        out = ad.attention(q, k, v, mode, pad_mask)
        return ad.linear(_merge_heads(out), self.wo, self.bo)


class _Ffn:
    def __init__(self, store: _ParamStore, rng, prefix: str, hidden: int, intermediate: int):
        self.w1 = store.new(f"{prefix}.w1", _trunc_normal(rng, (hidden, intermediate)))
        self.b1 = store.new(f"{prefix}.b1", np.zeros(intermediate))
        self.w2 = store.new(f"{prefix}.w2", _trunc_normal(rng, (intermediate, hidden)))
        self.b2 = store.new(f"{prefix}.b2", np.zeros(hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(ad.gelu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


class _LayerNorm:
    def __init__(self, store: _ParamStore, prefix: str, hidden: int):
        self.gamma = store.new(f"{prefix}.gamma", np.ones(hidden))
        self.beta = store.new(f"{prefix}.beta", np.zeros(hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class _RmsNorm:
    def __init__(self, store: _ParamStore, prefix: str, hidden: int):
        self.gamma = store.new(f"{prefix}.gamma", np.ones(hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.rms_norm(x, self.gamma)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.swapaxes(ad.reshape(x, (b, t, heads, d // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, t, h * dh))


def _rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    return cos[None, None], sin[None, None]


def _apply_rope(x: Tensor, rope: tuple[np.ndarray, np.ndarray]) -> Tensor:
    cos, sin = rope
    return ad.add(ad.mul(x, Tensor(cos)), ad.mul(ad.rotate_half(x), Tensor(sin)))


class _EncoderBackbone:
    """Bidirectional post-LN stack with learned absolute positions."""

    def __init__(self, cfg: ModelConfig, store: _ParamStore, rng):
        self.cfg = cfg
        d = cfg.hidden_size
        self.tok_emb = store.new("tok_emb", _trunc_normal(rng, (cfg.vocab_size, d)))
        self.pos_emb = store.new("pos_emb", _trunc_normal(rng, (cfg.max_positions, d)))
        self.emb_ln = _LayerNorm(store, "emb_ln", d)
        self.layers = []
        for i in range(cfg.num_layers):
            self.layers.append({
                "attn": _Attention(store, rng, f"layers.{i}.attn", d, cfg.num_heads),
                "ln1": _LayerNorm(store, f"layers.{i}.ln1", d),
                "ffn": _Ffn(store, rng, f"layers.{i}.ffn", d, cfg.intermediate_size),
                "ln2": _LayerNorm(store, f"layers.{i}.ln2", d),
            })

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        t = ids.shape[1]
        h = ad.add(ad.embedding_lookup(self.tok_emb, ids),
                   ad.embedding_lookup(self.pos_emb, np.arange(t)[None, :]))
        h = self.emb_ln(h)
        for layer in self.layers:
            h = layer["ln1"](ad.add(h, layer["attn"](h, "bidirectional", pad_mask)))
            h = layer["ln2"](ad.add(h, layer["ffn"](h)))
        return h


class _DecoderBackbone:
    """Causal pre-RMS-norm stack with rotary positions."""

    def __init__(self, cfg: ModelConfig, store: _ParamStore, rng):
        self.cfg = cfg
        d = cfg.hidden_size
        self.tok_emb = store.new("tok_emb", _trunc_normal(rng, (cfg.vocab_size, d)))
        self.layers = []
        for i in range(cfg.num_layers):
            self.layers.append({
                "rms1": _RmsNorm(store, f"layers.{i}.rms1", d),
                "attn": _Attention(store, rng, f"layers.{i}.attn", d, cfg.num_heads),
                "rms2": _RmsNorm(store, f"layers.{i}.rms2", d),
                "ffn": _Ffn(store, rng, f"layers.{i}.ffn", d, cfg.intermediate_size),
            })
        self.final_rms = _RmsNorm(store, "final_rms", d)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _rope(self, t: int):
        if t not in self._rope_cache:
            self._rope_cache[t] = _rope_tables(t, self.cfg.hidden_size // self.cfg.num_heads)
        return self._rope_cache[t]

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        rope = self._rope(ids.shape[1])
        h = ad.embedding_lookup(self.tok_emb, ids)
        for layer in self.layers:
            h = ad.add(h, layer["attn"](layer["rms1"](h), "causal", pad_mask, rope=rope))
            h = ad.add(h, layer["ffn"](layer["rms2"](h)))
        return self.final_rms(h)


class _EncDecBackbone:
    """Post-LN encoder feeding a causal decoder through cross-attention.

    For regression the decoder consumes the same token ids as the encoder
    (a pass-through, no corruption), and pooling reads the decoder side.
    """

    def __init__(self, cfg: ModelConfig, store: _ParamStore, rng):
        self.cfg = cfg
        d = cfg.hidden_size
        self.tok_emb = store.new("tok_emb", _trunc_normal(rng, (cfg.vocab_size, d)))
        self.enc_pos_emb = store.new("enc_pos_emb", _trunc_normal(rng, (cfg.max_positions, d)))
        self.dec_pos_emb = store.new("dec_pos_emb", _trunc_normal(rng, (cfg.max_positions, d)))
        self.enc_emb_ln = _LayerNorm(store, "enc_emb_ln", d)
        self.dec_emb_ln = _LayerNorm(store, "dec_emb_ln", d)
        self.enc_layers = []
        for i in range(cfg.num_layers):
            self.enc_layers.append({
                "attn": _Attention(store, rng, f"enc_layers.{i}.attn", d, cfg.num_heads),
                "ln1": _LayerNorm(store, f"enc_layers.{i}.ln1", d),
                "ffn": _Ffn(store, rng, f"enc_layers.{i}.ffn", d, cfg.intermediate_size),
                "ln2": _LayerNorm(store, f"enc_layers.{i}.ln2", d),
            })
        self.dec_layers = []
        for i in range(cfg.num_layers):
            self.dec_layers.append({
                "self_attn": _Attention(store, rng, f"dec_layers.{i}.self_attn", d, cfg.num_heads),
                "ln1": _LayerNorm(store, f"dec_layers.{i}.ln1", d),
                "cross_attn": _Attention(store, rng, f"dec_layers.{i}.cross_attn", d, cfg.num_heads),
                "ln2": _LayerNorm(store, f"dec_layers.{i}.ln2", d),
                "ffn": _Ffn(store, rng, f"dec_layers.{i}.ffn", d, cfg.intermediate_size),
                "ln3": _LayerNorm(store, f"dec_layers.{i}.ln3", d),
            })

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        t = ids.shape[1]
        positions = np.arange(t)[None, :]
        mem = ad.add(ad.embedding_lookup(self.tok_emb, ids),
                     ad.embedding_lookup(self.enc_pos_emb, positions))
        mem = self.enc_emb_ln(mem)
        for layer in self.enc_layers:
            mem = layer["ln1"](ad.add(mem, layer["attn"](mem, "bidirectional", pad_mask)))
            mem = layer["ln2"](ad.add(mem, layer["ffn"](mem)))

        h = ad.add(ad.embedding_lookup(self.tok_emb, ids),
                   ad.embedding_lookup(self.dec_pos_emb, positions))
        h = self.dec_emb_ln(h)
        for layer in self.dec_layers:
            h = layer["ln1"](ad.add(h, layer["self_attn"](h, "causal", pad_mask)))
            h = layer["ln2"](ad.add(h, layer["cross_attn"](h, "cross", pad_mask, kv=mem)))
            h = layer["ln3"](ad.add(h, layer["ffn"](h)))
        return h


_BACKBONES = {
    ModelFamily.ENCODER: _EncoderBackbone,
    ModelFamily.DECODER: _DecoderBackbone,
    ModelFamily.ENCODER_DECODER: _EncDecBackbone,
}


class MtrModel:
    """Backbone plus a linear multi-property regression head.

    Predictions are read at the family's pooling position only: bos for the
    encoder family, eos for the decoder and encoder-decoder families.
    """

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._store = _ParamStore()
        self.backbone = _BACKBONES[config.family](config, self._store, rng)
        self._backbone_param_names = set(self._store.by_name())
        d, p = config.hidden_size, config.num_properties
        self.head_weight = self._store.new("mtr_head.weight", _trunc_normal(rng, (d, p)))
        self.head_bias = self._store.new("mtr_head.bias", np.zeros(p))

    def parameters(self) -> list[Parameter]:
        return self._store.all()

    def named_parameters(self) -> dict[str, Parameter]:
        return self._store.by_name()

    def backbone_parameters(self) -> list[Parameter]:
        return [p for p in self._store.all() if p.name in self._backbone_param_names]

    def param_count(self) -> int:
        """Total scalar parameters, embeddings and heads included."""
        return int(sum(p.data.size for p in self.parameters()))

    def pooling_positions(self, batch: EncodedBatch) -> np.ndarray:
        """Index of the pooled position per row; validates the pooling
        token is actually there."""
        if self.config.family is ModelFamily.ENCODER:
            if not (batch.ids[:, 0] == BOS_ID).all():
                raise ValueError("encoder pooling requires a leading bos token in every row")
            return np.zeros(len(batch), dtype=np.int64)
        pos = batch.content_lengths - 1
        if not (batch.ids[np.arange(len(batch)), pos] == EOS_ID).all():
            raise ValueError("eos pooling requires a terminal eos token in every row")
        return pos

    def forward_hidden(self, batch: EncodedBatch) -> Tensor:
        return self.backbone.forward(batch.ids, batch.attention_mask.astype(bool))

    def forward(self, batch: EncodedBatch) -> Tensor:
        pooled = ad.take_positions(self.forward_hidden(batch), self.pooling_positions(batch))
        return ad.linear(pooled, self.head_weight, self.head_bias)

    def predict(self, batch: EncodedBatch) -> np.ndarray:
        return self.forward(batch).data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._store.by_name().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self._store.by_name()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.config, self.state_arrays(), extra)

    @classmethod
    def from_checkpoint(cls, path: str | Path, seed: int = 0) -> "MtrModel":
        config, arrays, _ = load_checkpoint(path)
        model = cls(config, seed)
        model.load_state(arrays)
        return model


class FtModel:
    """Frozen backbone with a trainable two-layer GELU head of width one."""

    def __init__(self, mtr_model: MtrModel, head_seed: int, head_hidden: int | None = None):
        self.config = mtr_model.config
        self.mtr_model = mtr_model
        for p in mtr_model.parameters():
            p.freeze()
        d = self.config.hidden_size
        hidden = head_hidden or self.config.ft_head_hidden or d
        rng = np.random.default_rng(head_seed)
        self._head_store = _ParamStore()
        self.w1 = self._head_store.new("ft_head.w1", _trunc_normal(rng, (d, hidden)))
        self.b1 = self._head_store.new("ft_head.b1", np.zeros(hidden))
        self.w2 = self._head_store.new("ft_head.w2", _trunc_normal(rng, (hidden, 1)))
        self.b2 = self._head_store.new("ft_head.b2", np.zeros(1))

    def head_parameters(self) -> list[Parameter]:
        return self._head_store.all()

    def features(self, batch: EncodedBatch) -> np.ndarray:
        """Pooled backbone output; constant while the backbone is frozen."""
        pooled = ad.take_positions(self.mtr_model.forward_hidden(batch),
                                   self.mtr_model.pooling_positions(batch))
        return pooled.data

    def forward_from_features(self, features: np.ndarray) -> Tensor:
        h = ad.gelu(ad.linear(Tensor(features), self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)

    def forward(self, batch: EncodedBatch) -> Tensor:
        pooled = ad.take_positions(self.mtr_model.forward_hidden(batch),
                                   self.mtr_model.pooling_positions(batch))
        h = ad.gelu(ad.linear(pooled, self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)

    def predict(self, batch: EncodedBatch) -> np.ndarray:
        return self.forward(batch).data[:, 0]

    def backbone_checksum(self) -> str:
        return backbone_checksum(self.mtr_model)


def build(config: ModelConfig, seed: int) -> MtrModel:
    return MtrModel(config, seed)


def param_count(model) -> int:
    return model.param_count()


def forward_mtr(model: MtrModel, batch: EncodedBatch) -> Tensor:
    return model.forward(batch)


def freeze_backbone(mtr_model: MtrModel, head_seed: int = 0,
                    head_hidden: int | None = None) -> FtModel:
    return FtModel(mtr_model, head_seed, head_hidden)


def forward_ft(ft_model: FtModel, batch: EncodedBatch) -> Tensor:
    return ft_model.forward(batch)


def backbone_checksum(model: MtrModel) -> str:
    """SHA-256 over every non-head parameter, in name order."""
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters().items()):
        if name.startswith("mtr_head."):
            continue
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, config: ModelConfig,
                    arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Self-describing container: JSON header plus little-endian float64
    payloads. Round-trips bit exactly."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(data)})
        payload.extend(data)
    header = json.dumps({"config": config.to_dict(), "extra": extra or {},
                         "params": entries}).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path):
    """Returns (ModelConfig, arrays dict, extra dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for entry in header["params"]:
        start = off + entry["offset"]
        buf = raw[start: start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return ModelConfig.from_dict(header["config"]), arrays, header.get("extra", {})
