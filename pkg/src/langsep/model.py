"""Speaker network and language-classifier head.

The encoder is a per-frame MLP with tanh activations (weights shared
across frames), followed by self-attentive pooling into a single
utterance embedding. The embedding feeds a one-layer speaker classifier
and a three-layer language classifier; the language feature vector is the
tanh output of the classifier's second layer and has the same dimension
as the speaker embedding, so the two can be paired dimension by
dimension. A gradient-reversal node sits at the entry of the language
classifier and is switched on only while speaker embeddings train.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParseError, ShapeError

#: initial scale / offset of the angular prototypical logits
PROTO_W_INIT = 10.0
PROTO_B_INIT = -5.0
PROTO_W_MIN = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int
    num_speakers: int
    num_languages: int
    hidden_dim: int = 64
    embed_dim: int = 32
    encoder_layers: int = 2

    def __post_init__(self) -> None:
        for field in ("feat_dim", "num_speakers", "num_languages",
                      "hidden_dim", "embed_dim", "encoder_layers"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be >= 1")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ModelBundle:
    """All trainable parameters, keyed by name in a fixed canonical order.

    Speaker-side parameters are the encoder, the pooling layer, the
    speaker classifier, and the prototypical loss scale / offset; the
    language side is the three classifier layers. The split drives the
    freeze contracts of the two training phases.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelBundle":
        rng = np.random.default_rng((seed, 0xB00))
        c = config
        params: dict[str, np.ndarray] = {}
        in_dim = c.feat_dim
        for i in range(c.encoder_layers):
            params[f"enc{i}.w"] = _glorot(rng, in_dim, c.hidden_dim, (in_dim, c.hidden_dim))
            params[f"enc{i}.b"] = np.zeros((1, c.hidden_dim))
            in_dim = c.hidden_dim
        params["sap.w"] = _glorot(rng, c.hidden_dim, c.hidden_dim, (c.hidden_dim, c.hidden_dim))
        params["sap.b"] = np.zeros((1, c.hidden_dim))
        params["sap.u"] = _glorot(rng, c.hidden_dim, 1, (c.hidden_dim, 1))
        params["sap.v"] = _glorot(rng, c.hidden_dim, c.embed_dim, (c.hidden_dim, c.embed_dim))
        params["spk.w"] = _glorot(rng, c.embed_dim, c.num_speakers, (c.embed_dim, c.num_speakers))
        params["spk.b"] = np.zeros((1, c.num_speakers))
        params["lang1.w"] = _glorot(rng, c.embed_dim, c.hidden_dim, (c.embed_dim, c.hidden_dim))
        params["lang1.b"] = np.zeros((1, c.hidden_dim))
        params["lang2.w"] = _glorot(rng, c.hidden_dim, c.embed_dim, (c.hidden_dim, c.embed_dim))
        params["lang2.b"] = np.zeros((1, c.embed_dim))
        params["lang3.w"] = _glorot(rng, c.embed_dim, c.num_languages, (c.embed_dim, c.num_languages))
        params["lang3.b"] = np.zeros((1, c.num_languages))
        params["proto.w"] = np.array([[PROTO_W_INIT]])
        params["proto.b"] = np.array([[PROTO_B_INIT]])
        return cls(config, params)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.config, {k: v.copy() for k, v in self.params.items()})

    def language_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("lang")]

    def speaker_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("lang")]

    def param_hash(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the selected parameters."""
        h = hashlib.sha256()
        for name in (sorted(names) if names is not None else self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()


class BoundModel:
    """Model parameters wrapped as tensors, tracked on a tape when given.

    With tape=None every forward runs untracked (pure inference with
    identical numerics).
    """

    def __init__(self, bundle: ModelBundle, tape: ad.Tape | None = None):
        self.config = bundle.config
        if tape is None:
            self.p = {k: ad.Tensor(v) for k, v in bundle.params.items()}
        else:
            self.p = {k: tape.watch(v) for k, v in bundle.params.items()}

    def node_of(self, name: str) -> int | None:
        return self.p[name].node


def _affine(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add_row_vector(ad.matmul(x, w), b)


def encode_frames(bound: BoundModel, frames) -> ad.Tensor:
    """Frame-level embeddings for one utterance: T x feat_dim in,
    T x hidden_dim out, tanh after every layer."""
    x = frames if isinstance(frames, ad.Tensor) else ad.Tensor(frames)
    if x.cols != bound.config.feat_dim:
        raise ShapeError(f"expected feat_dim {bound.config.feat_dim}, got {x.cols}")
    h = x
    for i in range(bound.config.encoder_layers):
        h = ad.tanh(_affine(h, bound.p[f"enc{i}.w"], bound.p[f"enc{i}.b"]))
    return h


def self_attentive_pool(bound: BoundModel, z: ad.Tensor) -> ad.Tensor:
    """Collapse T x hidden frame embeddings into a 1 x embed_dim vector.

    h_t = tanh(W z_t + b); attention = softmax over t of (h_t . u);
    the output is the attention-weighted sum of projected frames V z_t.
    """
    h = ad.tanh(_affine(z, bound.p["sap.w"], bound.p["sap.b"]))
    scores = ad.matmul(h, bound.p["sap.u"])
    alpha = ad.row_softmax(ad.transpose(scores))
    return ad.matmul(alpha, ad.matmul(z, bound.p["sap.v"]))


def embed_utterance(bound: BoundModel, frames) -> ad.Tensor:
    return self_attentive_pool(bound, encode_frames(bound, frames))


def embed_batch(bound: BoundModel, frame_list: Sequence[np.ndarray]) -> ad.Tensor:
    """Embed several utterances and stack them into a B x embed_dim matrix."""
    if not frame_list:
        raise ContractError("embed_batch: empty batch")
    return ad.concat_rows([embed_utterance(bound, f) for f in frame_list])


def speaker_logits(bound: BoundModel, e_spk: ad.Tensor) -> ad.Tensor:
    """Single affine map from embeddings to speaker logits."""
    return _affine(e_spk, bound.p["spk.w"], bound.p["spk.b"])


def language_forward(bound: BoundModel, e_spk: ad.Tensor,
                     grl_active: bool) -> tuple[ad.Tensor, ad.Tensor]:
    """Language classifier forward pass.

    Input passes the gradient-reversal node (identity forward; backward
    sign-flips only when grl_active), then three affine layers with tanh
    after the first two. Returns (language logits, language feature
    vector), the latter being the second layer's tanh output with the
    same width as the speaker embedding.
    """
    x = ad.gradient_reversal(e_spk, active=grl_active)
    a1 = ad.tanh(_affine(x, bound.p["lang1.w"], bound.p["lang1.b"]))
    e_lang = ad.tanh(_affine(a1, bound.p["lang2.w"], bound.p["lang2.b"]))
    logits = _affine(e_lang, bound.p["lang3.w"], bound.p["lang3.b"])
    return logits, e_lang


# ---------------------------------------------------------------------------
# checkpoint container: magic, JSON header, raw little-endian float64 arrays

_CKPT_MAGIC = b"LANGSEP-CKPT-1\n"


def save_checkpoint(path, bundle: ModelBundle,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a self-describing checkpoint.

    The header is canonical JSON (sorted keys), the payload is the raw
    bytes of each array in header order, so identical bundles always
    produce identical files.
    """
    header = {
        "config": asdict(bundle.config),
        "rng_state": rng_state,
        "extra": extra or {},
        "arrays": [
            {"name": k, "rows": int(v.shape[0]), "cols": int(v.shape[1])}
            for k, v in bundle.params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in bundle.params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelBundle, dict | None, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode())
        config = ModelConfig(**header["config"])
        params: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            n = spec["rows"] * spec["cols"]
            raw = f.read(n * 8)
            if len(raw) != n * 8:
                raise ParseError(f"{path}: truncated array {spec['name']!r}")
            params[spec["name"]] = (
                np.frombuffer(raw, dtype="<f8").astype(np.float64)
                .reshape(spec["rows"], spec["cols"]))
    return ModelBundle(config, params), header["rng_state"], header["extra"]
