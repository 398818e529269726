"""Reasoning prompts, text-embedding backends, alignment, and the embedding file format.

The pooled LLM embedding is abstracted behind three backends:

``StubBackend``
    Deterministic pseudo-embedding seeded from a 64-bit hash of the rendered
    prompt and the backend seed, normalized to unit length.
``FileBackend``
    Vectors precomputed elsewhere, looked up by timestamp.
``HttpBackend``
    POSTs ``{"prompt": ...}`` and expects ``{"embedding": [...]}`` back.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TextDoc", "Prompt", "TextEmbedding", "StubBackend", "FileBackend", "HttpBackend",
    "EmbeddingStore", "TextSource", "BackendError", "MissingEmbeddingError",
    "EmbeddingFormatError", "build_prompt", "encode_text", "align_docs_to_window",
    "select_doc", "write_embeddings", "read_embeddings", "read_text_jsonl",
    "write_text_jsonl", "make_backend",
]

EMB_MAGIC = b"TIMIEMB1"
_HEADER = struct.Struct("<8sII")
NO_REPORT = "No report available."

TREND_OPTIONS = ("strong increase", "weak increase", "stable", "weak decrease", "strong decrease")
FREQUENCY_OPTIONS = ("higher", "unchanged", "lower")
NOISE_OPTIONS = ("calmer", "unchanged", "more volatile")


class BackendError(RuntimeError):
    pass


class MissingEmbeddingError(LookupError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TextDoc:
    ts_start: int
    ts_end: int
    text: str

    def __post_init__(self):
        if self.ts_start > self.ts_end:
            raise ValueError(f"ts_start {self.ts_start} after ts_end {self.ts_end}")


@dataclass(frozen=True)
class Prompt:
    domain_anchor: str
    system: str
    body: str
    questions: tuple[tuple[str, tuple[str, ...]], ...]

    def render(self) -> str:
        parts = [self.domain_anchor, "", "Report:", self.body, "", self.system, ""]
        for header, options in self.questions:
            parts.append(header)
            parts.extend(f"  ({chr(ord('A') + i)}) {opt}" for i, opt in enumerate(options))
            parts.append("")
        return "\n".join(parts)


def build_prompt(domain_name: str, doc: TextDoc, horizon: int) -> Prompt:
    if not domain_name:
        raise ValueError("domain_name must be non-empty")
    anchor = (f"You are an analyst for the {domain_name} domain. The report below was published "
              f"for the period ending at timestamp {doc.ts_end}. Consider only how it bears on "
              f"the {domain_name} series over the next {horizon} steps.")
    system = ("Answer each question with exactly one option letter. "
              "Do not explain, do not add text beyond the letters.")
    questions = (
        (f"Q1 [Trend] How will the level of the series move over the next {horizon} steps?",
         TREND_OPTIONS),
        ("Q2 [Frequency] How will the frequency of fluctuations change?", FREQUENCY_OPTIONS),
        ("Q3 [Noise] How will the noise level change?", NOISE_OPTIONS),
    )
    return Prompt(anchor, system, doc.text if doc.text else NO_REPORT, questions)


@dataclass
class TextEmbedding:
    vector: np.ndarray
    source: str
    ts: int | None = None  # None when no text was available

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or self.vector.size < 1:
            raise ValueError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.size


# ---------------------------------------------------------------- backends

@dataclass(frozen=True)
class StubBackend:
    seed: int = 0
    dim: int = 32
    domain: str = "Synthetic"
    horizon: int = 1

    name = "stub"

    def encode(self, doc: TextDoc) -> TextEmbedding:
        prompt = build_prompt(self.domain, doc, self.horizon).render()
        h = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8,
                            key=struct.pack("<q", self.seed)).digest()
        rng = np.random.default_rng(int.from_bytes(h, "little"))
        v = rng.standard_normal(self.dim)
        return TextEmbedding(v / np.linalg.norm(v), self.name, doc.ts_end)


@dataclass
class FileBackend:
    path: str
    store: "EmbeddingStore" = field(init=False, repr=False)

    name = "file"

    def __post_init__(self):
        self.store = read_embeddings(self.path)

    @property
    def dim(self) -> int:
        return self.store.dim

    def encode(self, doc: TextDoc) -> TextEmbedding:
        vec = self.store.exact(doc.ts_end)
        if vec is None:
            raise MissingEmbeddingError(f"{self.path}: no embedding for timestamp {doc.ts_end}")
        return TextEmbedding(vec, self.name, doc.ts_end)


class HttpBackend:
    """One request at a time per client; timeout in seconds."""

    name = "http"

    def __init__(self, url: str, dim: int, timeout: float | None = None,
                 domain: str = "Synthetic", horizon: int = 1):
        if timeout is None:
            timeout = float(os.environ.get("TIMI_HTTP_TIMEOUT_MS", "10000")) / 1000.0
        self.url = url
        self.dim = dim
        self.timeout = timeout
        self.domain = domain
        self.horizon = horizon
        self._lock = threading.Lock()

    def encode(self, doc: TextDoc) -> TextEmbedding:
        prompt = build_prompt(self.domain, doc, self.horizon).render()
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with self._lock:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = resp.read()
            except urllib.error.HTTPError as e:
                raise BackendError(f"{self.url}: HTTP {e.code}") from e
            except (urllib.error.URLError, TimeoutError, OSError) as e:
                raise BackendError(f"{self.url}: request failed: {e}") from e
        try:
            vec = json.loads(payload)["embedding"]
            vec = np.array(vec, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise BackendError(f"{self.url}: malformed response") from e
        if vec.shape != (self.dim,):
            raise BackendError(f"{self.url}: expected {self.dim} floats, got shape {vec.shape}")
        try:
            return TextEmbedding(vec, self.name, doc.ts_end)
        except ValueError as e:
            raise BackendError(f"{self.url}: {e}") from e


def make_backend(kind: str, *, seed: int = 0, dim: int = 32, path=None, url=None,
                 domain: str = "Synthetic", horizon: int = 1):
    if kind == "stub":
        return StubBackend(seed=seed, dim=dim, domain=domain, horizon=horizon)
    if kind == "file":
        if path is None:
            raise ValueError("file backend needs a path")
        return FileBackend(str(path))
    if kind == "http":
        if url is None:
            raise ValueError("http backend needs a url")
        return HttpBackend(url, dim, domain=domain, horizon=horizon)
    raise ValueError(f"unknown text backend {kind!r}")


def encode_text(doc: TextDoc, backend) -> TextEmbedding:
    return backend.encode(doc)


# ---------------------------------------------------------------- embedding store

class EmbeddingStore:
    """Timestamped vectors, kept in file order and indexed by timestamp."""

    def __init__(self, timestamps, vectors, dim: int | None = None):
        self.timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float64)
        if self.timestamps.size == 0:
            vectors = vectors.reshape(0, dim or 0)
        self.vectors = vectors
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.timestamps.size:
            raise ValueError("need one vector per timestamp")
        self.dim = self.vectors.shape[1]
        self._order = np.argsort(self.timestamps, kind="stable")
        self._sorted = self.timestamps[self._order]

    def __len__(self):
        return self.timestamps.size

    def exact(self, ts: int):
        i = np.searchsorted(self._sorted, ts, side="right") - 1
        if i >= 0 and self._sorted[i] == ts:
            return self.vectors[self._order[i]]
        return None

    def latest_index(self, end_ts) -> np.ndarray:
        """Position of the latest record with timestamp <= ``end_ts``, or -1."""
        end_ts = np.asarray(end_ts)
        if len(self) == 0:
            return np.full(end_ts.shape, -1, dtype=np.intp)
        i = np.searchsorted(self._sorted, end_ts, side="right") - 1
        return np.where(i >= 0, self._order[np.maximum(i, 0)], -1)


def write_embeddings(path, records, dim: int | None = None) -> None:
    """Write ``(timestamp, vector)`` records as little-endian i64 + f32[dim]."""
    records = list(records)
    if records:
        dims = {len(v) for _, v in records}
        if len(dims) != 1:
            raise ValueError(f"vectors have mixed dims {sorted(dims)}")
        (rec_dim,) = dims
        if dim is not None and dim != rec_dim:
            raise ValueError(f"dim {dim} does not match vector length {rec_dim}")
        dim = rec_dim
    dim = dim or 0
    rec = np.dtype([("ts", "<i8"), ("v", "<f4", (dim,))])
    arr = np.empty(len(records), dtype=rec)
    for i, (ts, v) in enumerate(records):
        arr[i]["ts"] = int(ts)
        arr[i]["v"] = np.asarray(v, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, dim, len(records)))
        fh.write(arr.tobytes())


def read_embeddings(path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    rec = np.dtype([("ts", "<i8"), ("v", "<f4", (dim,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(raw) != expected:
        off = min(len(raw), expected)
        raise EmbeddingFormatError(
            f"{path}: {count} records of dim {dim} need {expected} bytes, file has {len(raw)} "
            f"(mismatch at byte offset {off})")
    arr = np.frombuffer(raw, dtype=rec, count=count, offset=_HEADER.size)
    return EmbeddingStore(arr["ts"].astype(np.int64), arr["v"].astype(np.float64), dim=dim)


# ---------------------------------------------------------------- text documents

def read_text_jsonl(path) -> list[TextDoc]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(TextDoc(int(obj["ts_start"]), int(obj["ts_end"]), str(obj["text"])))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from e
    return docs


def write_text_jsonl(path, docs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(json.dumps({"ts_start": d.ts_start, "ts_end": d.ts_end, "text": d.text},
                                ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- alignment

def select_doc(end_ts: int, docs) -> TextDoc | None:
    """Latest document with ``ts_end <= end_ts``; later entries win ties."""
    best = None
    for d in docs:
        if d.ts_end <= end_ts and (best is None or d.ts_end >= best.ts_end):
            best = d
    return best


def align_docs_to_window(end_ts: int, source, backend=None) -> TextEmbedding:
    """Most recent non-future text for a window ending at ``end_ts``.

    ``source`` is an :class:`EmbeddingStore` or a sequence of :class:`TextDoc`
    (then ``backend`` encodes the chosen document). When nothing qualifies the
    result is a zero vector with source ``"none"``.
    """
    if isinstance(source, EmbeddingStore):
        i = int(source.latest_index(end_ts))
        if i < 0:
            return TextEmbedding(np.zeros(max(source.dim, 1)), "none")
        return TextEmbedding(source.vectors[i], "file", int(source.timestamps[i]))
    if backend is None:
        raise ValueError("aligning documents needs a backend to encode them")
    doc = select_doc(end_ts, source)
    if doc is None:
        return TextEmbedding(np.zeros(backend.dim), "none")
    return encode_text(doc, backend)


class TextSource:
    """Supplies the text embedding for each window end timestamp.

    Built from an embedding store, from documents plus a backend, or as a
    constant zero source.
    """

    def __init__(self, dim: int, store: EmbeddingStore | None = None, docs=None, backend=None):
        self.dim = dim
        self.store = store
        self.docs = None if docs is None else sorted(docs, key=lambda d: d.ts_end)
        self.backend = backend
        self._cache: dict[TextDoc, np.ndarray] = {}

    @classmethod
    def from_store(cls, store: EmbeddingStore) -> "TextSource":
        return cls(store.dim, store=store)

    @classmethod
    def from_docs(cls, docs, backend) -> "TextSource":
        return cls(backend.dim, docs=list(docs), backend=backend)

    @classmethod
    def zeros(cls, dim: int) -> "TextSource":
        return cls(dim)

    def for_windows(self, end_ts) -> np.ndarray:
        end_ts = np.asarray(end_ts, dtype=np.int64).reshape(-1)
        out = np.zeros((end_ts.size, self.dim))
        if self.store is not None:
            idx = self.store.latest_index(end_ts)
            hit = idx >= 0
            out[hit] = self.store.vectors[idx[hit]]
        elif self.docs is not None:
            ends = np.array([d.ts_end for d in self.docs], dtype=np.int64)
            pos = np.searchsorted(ends, end_ts, side="right") - 1
            for row, p in enumerate(pos):
                if p < 0:
                    continue
                doc = self.docs[p]
                if doc not in self._cache:
                    vec = encode_text(doc, self.backend).vector
                    if vec.size != self.dim:
                        raise BackendError(f"backend returned dim {vec.size}, expected {self.dim}")
                    self._cache[doc] = vec
                out[row] = self._cache[doc]
        return out
