"""Completion, embedding and annotation backends behind one record/replay gateway."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEDUP_MODEL = "sentence-transformers/sentence-t5-base"
MATCH_MODEL = "sentence-transformers/all-MiniLM-L6-v2"


class BackendUnavailable(RuntimeError):
    """A live backend could not be reached or returned an unusable answer."""


class ReplayMiss(KeyError):
    """Replay mode was asked for a request that the transcript does not hold."""

    def __init__(self, tag: str, fingerprint: str):
        self.tag = tag
        self.fingerprint = fingerprint
        super().__init__(f"no transcript entry for {tag} ({fingerprint[:12]})")

    def __str__(self) -> str:
        return self.args[0]


class ZeroNorm(ValueError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int = 4096
    tag: str = "completion"

    def __post_init__(self) -> None:
        if not self.system_prompt and not self.user_prompt:
            raise ValueError("a completion request needs a prompt")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature must be in [0, 1], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.tag, self.system_prompt, self.user_prompt, self.temperature)

    def retry(self, attempt: int) -> CompletionRequest:
        """Same prompts under a distinct tag, so a retry gets its own transcript entry."""
        base = self.tag.split("#", 1)[0]
        tag = base if attempt <= 1 else f"{base}#{attempt}"
        return CompletionRequest(self.system_prompt, self.user_prompt, self.temperature, self.max_tokens, tag)


def fingerprint(tag: str, *parts: Any) -> str:
    payload = json.dumps([tag, *parts], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Transcript:
    """Append-only fingerprint -> response store backed by a JSON-lines file."""

    def __init__(self, path: str | Path | None = None, entries: Iterable[tuple[str, str, Any]] = ()):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, tuple[str, Any]] = {}
        self._lock = threading.Lock()
        for fp, tag, response in entries:
            self._entries.setdefault(fp, (tag, response))

    @classmethod
    def load(cls, path: str | Path) -> Transcript:
        path = Path(path)
        entries = []
        if path.exists():
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    entries.append((obj["fingerprint"], obj.get("tag", ""), obj["response"]))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed transcript line ({exc})") from exc
        return cls(path, entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, fp: str) -> bool:
        return fp in self._entries

    def get(self, fp: str) -> Any:
        entry = self._entries.get(fp)
        return None if entry is None else entry[1]

    def items(self) -> list[tuple[str, str, Any]]:
        return [(fp, tag, resp) for fp, (tag, resp) in self._entries.items()]

    def append(self, fp: str, tag: str, response: Any) -> Any:
        """Store ``response`` unless ``fp`` is already present; return the stored value."""
        with self._lock:
            if fp in self._entries:
                return self._entries[fp][1]
            self._entries[fp] = (tag, response)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"fingerprint": fp, "tag": tag, "response": response},
                                        ensure_ascii=False) + "\n")
            return response


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    model_tag: str = ""

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValueError("embedding must be a finite 1-d vector")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, EmbeddingVector) and self.model_tag == other.model_tag
                and np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]


def cos_sim(u: EmbeddingVector | Sequence[float], v: EmbeddingVector | Sequence[float]) -> float:
    a = u.values if isinstance(u, EmbeddingVector) else np.asarray(u, dtype=float)
    b = v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine similarity is undefined for a zero vector")
    if np.array_equal(a, b):
        return 1.0
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0] if b.ndim == 2 else 0))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroNorm("cosine similarity is undefined for a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


# --------------------------------------------------------------------------
# Symbolic annotation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    triplets: tuple[tuple[str, str, str], ...] = ()
    pos_tags: tuple[tuple[str, str], ...] = ()
    # Sentence index of each triplet, parallel to ``triplets``.
    triplet_sentences: tuple[int, ...] = field(default=(), compare=False)


def parse_corenlp(payload: Mapping[str, Any] | str) -> Annotation:
    """Read triplets and POS tags out of a CoreNLP server JSON response."""
    if isinstance(payload, str):
        payload = json.loads(payload)
    triplets, sent_ids, tags = [], [], []
    for idx, sentence in enumerate(payload.get("sentences", [])):
        for tok in sentence.get("tokens", []):
            tags.append((str(tok.get("word", tok.get("originalText", ""))), str(tok.get("pos", ""))))
        for trip in sentence.get("openie", []):
            triplets.append((str(trip.get("subject", "")).strip(), str(trip.get("relation", "")).strip(),
                             str(trip.get("object", "")).strip()))
            sent_ids.append(idx)
    return Annotation(tuple(triplets), tuple(tags), tuple(sent_ids))


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------

Completer = Callable[[CompletionRequest], str]
Embedder = Callable[[Sequence[str]], np.ndarray]
Annotator = Callable[[str], Any]


def _with_retries(call: Callable[[], Any], what: str, attempts: int = 3, base_delay: float = 1.0,
                  sleep: Callable[[float], None] = time.sleep) -> Any:
    import httpx

    last: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            return call()
        except (httpx.HTTPError, ValueError, KeyError) as exc:
            last = exc
            log.warning("%s attempt %d/%d failed: %s", what, attempt, attempts, exc)
            if attempt < attempts:
                sleep(base_delay * 2 ** (attempt - 1))
    raise BackendUnavailable(f"{what} failed after {attempts} attempts: {last}") from last


class OpenAIChatBackend:
    """Chat-completion client for any OpenAI-compatible HTTP endpoint."""

    def __init__(self, url: str, model: str, api_key: str | None = None, timeout: float = 120.0,
                 attempts: int = 3, base_delay: float = 1.0):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts
        self.base_delay = base_delay

    def _endpoint(self) -> str:
        return self.url if self.url.endswith("/chat/completions") else self.url + "/chat/completions"

    def __call__(self, request: CompletionRequest) -> str:
        import httpx

        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": request.user_prompt})
        body = {"model": self.model, "messages": messages, "temperature": request.temperature,
                "max_tokens": request.max_tokens}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def call() -> str:
            resp = httpx.post(self._endpoint(), json=body, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"]["content"]
            if not isinstance(content, str):
                raise ValueError("completion content is not text")
            return content

        return _with_retries(call, f"completion {request.tag}", self.attempts, self.base_delay)


class HttpEmbedder:
    """Embedding client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, url: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 attempts: int = 3):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        endpoint = self.url if self.url.endswith("/embeddings") else self.url + "/embeddings"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def call() -> np.ndarray:
            resp = httpx.post(endpoint, json={"model": self.model, "input": list(texts)},
                              headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
            return np.asarray([d["embedding"] for d in data], dtype=float)

        return _with_retries(call, f"embedding {self.model}", self.attempts)


class SentenceTransformerEmbedder:
    """Local sentence-transformers model, loaded on first use."""

    def __init__(self, model_name: str, device: str | None = None):
        self.model_name = model_name
        self.device = device
        self._model = None
        self._lock = threading.Lock()

    def _load(self) -> Any:
        with self._lock:
            if self._model is None:
                try:
                    from sentence_transformers import SentenceTransformer
                except ImportError as exc:
                    raise BackendUnavailable(
                        "sentence-transformers is not installed; install the 'embeddings' extra") from exc
                try:
                    self._model = SentenceTransformer(self.model_name, device=self.device)
                except Exception as exc:  # model download or load failure
                    raise BackendUnavailable(f"cannot load {self.model_name}: {exc}") from exc
            return self._model

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        model = self._load()
        with self._lock:
            return np.asarray(model.encode(list(texts), convert_to_numpy=True), dtype=float)


_WORD_RE = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Deterministic offline embedder: hashed word unigrams plus character trigrams.

    Texts that share most of their characters land close together, which is
    enough for near-duplicate detection and fuzzy value matching in tests.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _features(self, text: str) -> list[tuple[str, float]]:
        low = text.casefold().strip()
        feats = [("w:" + w, 1.0) for w in _WORD_RE.findall(low)]
        padded = f"  {low}  "
        feats.extend(("c:" + padded[i:i + 3], 0.5) for i in range(len(padded) - 2))
        return feats

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for feat, weight in self._features(text):
            digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            vec[h % self.dim] += weight if (h >> 63) & 1 else -weight
        if not np.any(vec):
            vec[0] = 1.0
        return vec

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray([self._vector(t) for t in texts]).reshape(len(texts), self.dim)


class ExactMatchEmbedder:
    """One-hot embedder: cosine similarity is 1 for equal strings and 0 otherwise."""

    def __init__(self, dim: int = 4096):
        self.dim = dim
        self._axes: dict[str, int] = {}
        self._lock = threading.Lock()

    def _axis(self, text: str) -> int:
        with self._lock:
            if text not in self._axes:
                if len(self._axes) >= self.dim:
                    raise BackendUnavailable(f"exact-match embedder exhausted its {self.dim} axes")
                self._axes[text] = len(self._axes)
            return self._axes[text]

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            out[i, self._axis(t)] = 1.0
        return out


class CoreNLPBackend:
    """Client for a CoreNLP server running the tokenize/ssplit/pos/openie annotators."""

    def __init__(self, url: str, timeout: float = 60.0, attempts: int = 3):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.attempts = attempts

    def __call__(self, text: str) -> dict[str, Any]:
        import httpx

        props = json.dumps({"annotators": "tokenize,ssplit,pos,lemma,depparse,natlog,openie",
                            "outputFormat": "json"})

        def call() -> dict[str, Any]:
            resp = httpx.post(self.url, params={"properties": props}, content=text.encode("utf-8"),
                              timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()

        return _with_retries(call, "annotation", self.attempts)


# --------------------------------------------------------------------------
# Gateway
# --------------------------------------------------------------------------

MODES = ("live", "record", "replay")


class Gateway:
    """Single entry point for model calls; records or replays them through a Transcript.

    In ``replay`` mode nothing leaves the process. Embedding calls are replayed
    only when no local embedder exists for the model tag (remote embedders).
    """

    def __init__(self, completer: Completer | None = None, embedders: Mapping[str, Embedder] | None = None,
                 annotator: Annotator | None = None, transcript: Transcript | None = None,
                 mode: str = "live", record_embeddings: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("record", "replay") and transcript is None:
            raise ValueError(f"{mode} mode needs a transcript")
        self.completer = completer
        self.embedders = dict(embedders or {})
        self.annotator = annotator
        self.transcript = transcript
        self.mode = mode
        self.record_embeddings = record_embeddings
        self._ann_cache: dict[str, Annotation] = {}
        self._ann_lock = threading.Lock()
        self.calls = 0

    # -- completion ---------------------------------------------------------
    def complete(self, request: CompletionRequest) -> str:
        fp = request.fingerprint
        self.calls += 1
        if self.mode == "replay":
            hit = self.transcript.get(fp)
            if hit is None:
                raise ReplayMiss(request.tag, fp)
            return hit
        if self.mode == "record" and fp in self.transcript:
            return self.transcript.get(fp)
        if self.completer is None:
            raise BackendUnavailable("no completion backend configured")
        text = self.completer(request)
        if self.mode == "record":
            text = self.transcript.append(fp, request.tag, text)
        return text

    # -- embeddings ---------------------------------------------------------
    def has_embedder(self, model_tag: str) -> bool:
        return model_tag in self.embedders

    def embed_matrix(self, texts: Sequence[str], model_tag: str) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        embedder = self.embedders.get(model_tag)
        recordable = self.transcript is not None and (self.record_embeddings or embedder is None)
        if recordable:
            fp = fingerprint("embed", model_tag, texts)
            hit = self.transcript.get(fp)
            if hit is not None:
                return np.asarray(hit, dtype=float)
            if self.mode == "replay":
                raise ReplayMiss(f"embed:{model_tag}", fp)
        if embedder is None:
            raise BackendUnavailable(f"no embedder configured for {model_tag!r}")
        # Embed unique strings once so identical inputs get identical vectors.
        unique = list(dict.fromkeys(texts))
        mat = np.asarray(embedder(unique), dtype=float)
        if mat.shape[0] != len(unique) or not np.all(np.isfinite(mat)):
            raise BackendUnavailable(f"embedder {model_tag!r} returned an unusable matrix")
        index = {t: i for i, t in enumerate(unique)}
        out = mat[[index[t] for t in texts]]
        if recordable and self.mode == "record":
            self.transcript.append(fingerprint("embed", model_tag, texts), f"embed:{model_tag}", out.tolist())
        return out

    def embed(self, texts: Sequence[str], model_tag: str) -> list[EmbeddingVector]:
        return [EmbeddingVector(row, model_tag) for row in self.embed_matrix(texts, model_tag)]

    # -- annotation ---------------------------------------------------------
    @property
    def can_annotate(self) -> bool:
        """A live annotator exists, or (replaying) the transcript holds annotations."""
        if self.mode == "replay":
            return any(tag == "annotate" for _, tag, _ in self.transcript.items())
        return self.annotator is not None

    def annotate_symbolic(self, text: str) -> Annotation:
        if not text.strip():
            return Annotation()
        with self._ann_lock:
            cached = self._ann_cache.get(text)
        if cached is not None:
            return cached
        fp = fingerprint("annotate", text)
        raw: Any = None
        if self.transcript is not None and self.mode != "live":
            raw = self.transcript.get(fp)
            if raw is None and self.mode == "replay":
                raise ReplayMiss("annotate", fp)
        if raw is None:
            if self.annotator is None:
                raise BackendUnavailable("no annotation backend configured")
            raw = self.annotator(text)
            if self.mode == "record":
                raw = self.transcript.append(fp, "annotate", raw)
        ann = parse_corenlp(raw)
        with self._ann_lock:
            self._ann_cache[text] = ann
        return ann


def stable_round(x: float, ndigits: int = 12) -> float:
    """Round away float noise so reports are byte-stable across platforms."""
    if not math.isfinite(x):
        return x
    return round(x, ndigits) + 0.0
