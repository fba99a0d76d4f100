"""Language-knowledge item vectors: embedding file formats, an HTTP client
for hosted embedding services, a deterministic offline fallback encoder,
and the learned projection into the recommender's embedding space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import time
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"LRDE"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbeddingError(Exception):
    """Raised for malformed embedding files or failed fetches."""


@dataclass
class EmbeddingTable:
    """One frozen raw text vector per item, |V| x d_raw."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise EmbeddingError(f"embedding table must be 2-D, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise EmbeddingError("embedding table contains non-finite values")

    @property
    def num_items(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def write_embedding_file(path: str, table: EmbeddingTable, binary: bool = True) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<II", table.num_items, table.dim))
            fh.write(table.vectors.astype("<f4").tobytes(order="C"))
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.num_items} {table.dim}\n")
        for item_id, row in enumerate(table.vectors):
            fh.write(str(item_id) + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_embedding_file(path: str, num_items: int | None = None) -> EmbeddingTable:
    """Read either format; the binary one is detected by its magic bytes.

    When num_items is given, the file must cover exactly the item
    vocabulary 0..num_items-1.
    """
    if not os.path.exists(path):
        raise EmbeddingError(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    table = _load_binary(path) if magic == BINARY_MAGIC else _load_text(path)
    if num_items is not None and table.num_items != num_items:
        raise EmbeddingError(
            f"{path}: table has {table.num_items} items, vocabulary has {num_items}"
        )
    return table


def _load_binary(path: str) -> EmbeddingTable:
    with open(path, "rb") as fh:
        fh.read(4)
        header = fh.read(8)
        if len(header) != 8:
            raise EmbeddingError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", header)
        payload = fh.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise EmbeddingError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return EmbeddingTable(vectors.copy())


def _load_text(path: str) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"{path}: header must be '<count> <dim>'")
        count, dim = int(header[0]), int(header[1])
        vectors = np.zeros((count, dim), dtype=np.float32)
        seen = np.zeros(count, dtype=bool)
        rows = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            item_id = int(parts[0])
            if not 0 <= item_id < count:
                raise EmbeddingError(f"{path}:{lineno}: item id {item_id} outside 0..{count - 1}")
            if len(parts) - 1 != dim:
                raise EmbeddingError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            vectors[item_id] = [float(x) for x in parts[1:]]
            seen[item_id] = True
            rows += 1
    if rows != count:
        raise EmbeddingError(f"{path}: header declares {count} rows, found {rows}")
    if not seen.all():
        missing = np.flatnonzero(~seen)[:10].tolist()
        raise EmbeddingError(f"{path}: missing rows for items {missing}")
    return EmbeddingTable(vectors)


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    token_seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(token_seed))
    return rng.standard_normal(dim)


def hash_fallback_encoder(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic offline stand-in for a hosted embedding model: mean of
    seeded-hash token vectors, L2-normalized. Empty text maps to zeros.
    """
    if dim < 1:
        raise EmbeddingError(f"embedding dim must be >= 1, got {dim}")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return np.zeros(dim, dtype=np.float64)
    acc = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        acc += _token_vector(token, dim, seed)
    acc /= len(tokens)
    norm = np.linalg.norm(acc)
    if norm > 0:
        acc /= norm
    return acc


def fallback_table(texts: list[str], dim: int, seed: int = 0) -> EmbeddingTable:
    """Encode a whole vocabulary with the fallback encoder, reusing token
    vectors across items."""
    cache: dict[str, np.ndarray] = {}
    rows = np.zeros((len(texts), dim), dtype=np.float64)
    for i, text in enumerate(texts):
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            continue
        acc = np.zeros(dim, dtype=np.float64)
        for token in tokens:
            vec = cache.get(token)
            if vec is None:
                vec = _token_vector(token, dim, seed)
                cache[token] = vec
            acc += vec
        acc /= len(tokens)
        norm = np.linalg.norm(acc)
        rows[i] = acc / norm if norm > 0 else acc
    return EmbeddingTable(rows.astype(np.float32))


def _cache_key(model: str, text: str) -> str:
    return hashlib.sha256(f"{model}\x00{text}".encode()).hexdigest()


def fetch_embeddings(
    texts: list[str],
    endpoint: str,
    model: str,
    api_key: str | None = None,
    batch: int = 64,
    cache_dir: str | None = None,
    max_retries: int = 5,
    backoff: float = 1.0,
    post=None,
    sleep=time.sleep,
) -> EmbeddingTable:
    """Fetch one vector per text from an embeddings endpoint speaking the
    common JSON protocol ({"model", "input"} -> {"data": [{"embedding"}]}).

    Results are written through a content-hash cache so reruns issue no
    requests. Transient failures (429/5xx, connection errors) retry with
    exponential backoff. `post` is injectable for tests; the default uses
    a requests session.
    """
    if batch < 1:
        raise EmbeddingError(f"batch must be >= 1, got {batch}")
    if not texts:
        raise EmbeddingError("no texts to embed")
    if post is None:
        import requests

        session = requests.Session()

        def post(url, payload, headers):  # pragma: no cover - thin network shim
            resp = session.post(url, json=payload, headers=headers, timeout=60)
            return resp.status_code, resp.json() if resp.content else {}

    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    vectors: list[np.ndarray | None] = [None] * len(texts)
    pending: list[int] = []
    for i, text in enumerate(texts):
        if cache_dir:
            cached = os.path.join(cache_dir, _cache_key(model, text) + ".json")
            if os.path.exists(cached):
                with open(cached, encoding="utf-8") as fh:
                    vectors[i] = np.asarray(json.load(fh), dtype=np.float32)
                continue
        pending.append(i)

    for start in range(0, len(pending), batch):
        chunk = pending[start:start + batch]
        payload = {"model": model, "input": [texts[i] for i in chunk]}
        data = _post_with_retry(post, endpoint, payload, headers, max_retries, backoff, sleep)
        if len(data) != len(chunk):
            raise EmbeddingError(f"requested {len(chunk)} embeddings, got {len(data)}")
        for i, entry in zip(chunk, data):
            vectors[i] = np.asarray(entry["embedding"], dtype=np.float32)
            if cache_dir:
                cached = os.path.join(cache_dir, _cache_key(model, texts[i]) + ".json")
                tmp = cached + ".tmp"
                with open(tmp, "w", encoding="utf-8") as fh:
                    json.dump([float(x) for x in vectors[i]], fh)
                os.replace(tmp, cached)

    dims = {v.shape[0] for v in vectors if v is not None}
    if len(dims) > 1:
        raise EmbeddingError(f"inconsistent embedding dimensions in response: {sorted(dims)}")
    return EmbeddingTable(np.stack([v for v in vectors]))


def _post_with_retry(post, endpoint, payload, headers, max_retries, backoff, sleep):
    delay = backoff
    for attempt in range(max_retries + 1):
        try:
            status, body = post(endpoint, payload, headers)
        except (ConnectionError, OSError) as exc:
            if attempt == max_retries:
                raise EmbeddingError(f"embedding request failed: {exc}") from exc
            sleep(delay)
            delay *= 2
            continue
        if status == 200:
            return body["data"]
        if status in (401, 403):
            raise EmbeddingError(f"embedding service auth failure (HTTP {status})")
        if status == 429 or status >= 500:
            if attempt == max_retries:
                raise EmbeddingError(f"embedding service failed after {max_retries} retries (HTTP {status})")
            sleep(delay)
            delay *= 2
            continue
        raise EmbeddingError(f"embedding service returned HTTP {status}")
    raise EmbeddingError("unreachable")


@dataclass
class Projection:
    """Affine map from raw text vectors (d_raw) into model space (d)."""

    weight: np.ndarray  # (d_raw, d)
    bias: np.ndarray  # (d,)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise EmbeddingError(
                f"projection shapes mismatch: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise EmbeddingError("projection parameters contain non-finite values")


def init_projection(d_raw: int, d: int, rng: np.random.Generator) -> Projection:
    # Glorot-style uniform bound keeps projected activations at unit scale.
    bound = np.sqrt(6.0 / (d_raw + d))
    weight = rng.uniform(-bound, bound, size=(d_raw, d))
    return Projection(weight, np.zeros(d))


def project(raw: np.ndarray, projection: Projection) -> np.ndarray:
    """Apply the affine projection to one vector or a batch of rows."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != projection.weight.shape[0]:
        raise EmbeddingError(
            f"input dim {raw.shape[-1]} does not match projection input {projection.weight.shape[0]}"
        )
    return raw @ projection.weight + projection.bias
