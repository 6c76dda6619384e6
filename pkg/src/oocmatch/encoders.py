"""Object encoder, text encoder, the caption embedder, and checkpoint files."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PATCH_SIZE, Caption
from .errors import ShapeError
from .tensor import Tensor

CAPTION_DIM = 512
CHECKPOINT_FORMAT = "oocmatch-checkpoint"
CHECKPOINT_VERSION = 1


class HashingEmbedder:
    """Deterministic bag-of-tokens caption embedding.

    Each token is hashed (BLAKE2b) to one of ``dim`` buckets; bucket counts are
    then scaled to unit length. Captions sharing tokens get positive cosine,
    token-disjoint captions get zero unless two tokens collide.
    """

    id = "hash-bow-v1"

    def __init__(self, dim: int = CAPTION_DIM):
        self.dim = dim
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed_tokens(self, tokens) -> np.ndarray:
        key = tuple(tokens)
        if not key:
            raise ValueError("cannot embed an empty caption")
        cached = self._cache.get(key)
        if cached is None:
            v = np.zeros(self.dim)
            for tok in key:
                v[self.bucket(tok)] += 1.0
            cached = v / np.linalg.norm(v)
            cached.setflags(write=False)
            self._cache[key] = cached
        return cached

    def __call__(self, caption: Caption) -> np.ndarray:
        return self.embed_tokens(caption.tokens)


EMBEDDERS = {HashingEmbedder.id: HashingEmbedder}


def embed_caption(embedder: HashingEmbedder, caption: Caption) -> np.ndarray:
    return embedder(caption)


@dataclass
class ObjectEncoderParams:
    W1: object  # (hidden, 3 * P * P)
    b1: object  # (hidden,)
    W2: object  # (dim, hidden)
    b2: object  # (dim,)


@dataclass
class TextEncoderParams:
    W: object  # (dim, 512)
    b: object  # (dim,)


def param_arrays(params) -> dict[str, np.ndarray]:
    return {f.name: getattr(params, f.name) for f in fields(params)}


def as_leaves(params):
    """Copy of ``params`` whose fields are gradient-requiring leaf tensors."""
    return type(params)(**{k: Tensor(v, requires_grad=True) for k, v in param_arrays(params).items()})


def leaf_grads(leaves) -> dict[str, np.ndarray]:
    out = {}
    for name, leaf in param_arrays(leaves).items():
        out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Model:
    obj: ObjectEncoderParams
    text: TextEncoderParams
    patch_size: int = PATCH_SIZE
    hidden: int = 128
    dim: int = 300
    tau: float = 0.1
    gamma: float = 0.2
    embedder_id: str = HashingEmbedder.id

    @classmethod
    def init(cls, seed: int, patch_size: int = PATCH_SIZE, hidden: int = 128, dim: int = 300,
             tau: float = 0.1, gamma: float = 0.2) -> Model:
        rng = np.random.default_rng(seed)
        d_in = 3 * patch_size * patch_size
        obj = ObjectEncoderParams(
            W1=_uniform(rng, (hidden, d_in), d_in),
            b1=_uniform(rng, (hidden,), d_in),
            W2=_uniform(rng, (dim, hidden), hidden),
            b2=_uniform(rng, (dim,), hidden),
        )
        text = TextEncoderParams(
            W=_uniform(rng, (dim, CAPTION_DIM), CAPTION_DIM),
            b=_uniform(rng, (dim,), CAPTION_DIM),
        )
        return cls(obj, text, patch_size, hidden, dim, tau, gamma)

    def make_embedder(self) -> HashingEmbedder:
        try:
            return EMBEDDERS[self.embedder_id]()
        except KeyError:
            raise ValueError(f"unknown caption embedder {self.embedder_id!r}") from None


def encode_objects(params: ObjectEncoderParams, patches) -> Tensor:
    """Unit embeddings for a stack of patches, shape (n, P, P, 3) or (n, 3P^2)."""
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches).reshape(len(patches), -1))
    W1, b1, W2, b2 = (T.as_tensor(p) for p in (params.W1, params.b1, params.W2, params.b2))
    if x.ndim != 2 or x.shape[1] != W1.shape[1]:
        raise ShapeError(f"patch input of shape {x.shape} does not fit W1 of shape {W1.shape}")
    hidden = T.relu(x @ W1.T + b1)
    return T.l2_normalize(hidden @ W2.T + b2)


def encode_object(params: ObjectEncoderParams, patch) -> Tensor:
    """Unit embedding of one P x P x 3 patch."""
    return encode_objects(params, np.asarray(patch)[None])[0]


def encode_texts(params: TextEncoderParams, use_vectors) -> Tensor:
    """Unit embeddings for rows of 512-d caption vectors: normalize(W relu(u) + b)."""
    u = T.as_tensor(np.atleast_2d(use_vectors) if not isinstance(use_vectors, Tensor) else use_vectors)
    W, b = T.as_tensor(params.W), T.as_tensor(params.b)
    if u.ndim != 2 or u.shape[1] != W.shape[1]:
        raise ShapeError(f"caption input of shape {u.shape} does not fit W of shape {W.shape}")
    return T.l2_normalize(T.relu(u) @ W.T + b)


def encode_text(params: TextEncoderParams, use_vector) -> Tensor:
    vec = use_vector if isinstance(use_vector, Tensor) else Tensor(use_vector)
    if vec.ndim != 1:
        raise ShapeError(f"encode_text needs a single vector, got shape {vec.shape}")
    W, b = T.as_tensor(params.W), T.as_tensor(params.b)
    if vec.shape[0] != W.shape[1]:
        raise ShapeError(f"caption vector of length {vec.shape[0]} does not fit W of shape {W.shape}")
    return T.l2_normalize(W @ T.relu(vec) + b)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "f64_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["f64_b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def model_to_dict(model: Model) -> dict:
    config = {k: v for k, v in asdict(model).items() if k not in ("obj", "text")}
    params = {f"object.{k}": _pack(v) for k, v in param_arrays(model.obj).items()}
    params.update({f"text.{k}": _pack(v) for k, v in param_arrays(model.text).items()})
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": config, "params": params}


def model_from_dict(obj: dict) -> Model:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an oocmatch checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    p = obj["params"]
    obj_params = ObjectEncoderParams(**{k: _unpack(p[f"object.{k}"]) for k in ("W1", "b1", "W2", "b2")})
    text_params = TextEncoderParams(**{k: _unpack(p[f"text.{k}"]) for k in ("W", "b")})
    model = Model(obj_params, text_params, **obj["config"])
    if obj_params.W1.shape != (model.hidden, 3 * model.patch_size ** 2) or text_params.W.shape != (model.dim, CAPTION_DIM):
        raise ValueError("checkpoint parameter shapes disagree with its config")
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return model_from_dict(json.loads(path.read_text(encoding="utf-8")))
