"""Data model and file formats for embeddings and caption-image corpora.

The package consumes *precomputed* sentence and image embeddings; this
module defines how they are stored on disk, the caption-to-image cluster
structure that drives the grounding losses, and a seeded synthetic
generator producing desk-scale corpora with correlated text/visual
structure.

File formats (all little-endian, see README):

* embeddings  -- binary ``GEMB``: magic, u8 version, u8 precision (4|8),
  u32 n, u32 d, then n*d floats row-major, then CRC32 of the payload.
* corpus      -- UTF-8 TSV, one caption per line:
  ``caption_id <TAB> image_id [<TAB> text]``.
* relatedness -- TSV ``caption_id_a <TAB> caption_id_b <TAB> gold_score``.
* lexicon     -- TSV ``word <TAB> score`` with scores in [0, 5].
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import (
    DanglingImageRef,
    DataFormatError,
    DuplicateCaptionId,
    EmptyCluster,
    InvalidParam,
    MalformedHeader,
    NonFiniteValue,
    ShapeMismatch,
    UnknownCaptionId,
)

GEMB_MAGIC = b"GEMB"
GEMB_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class EmbeddingMatrix:
    """Dense n x d matrix of embedding rows, float32 or float64.

    ``data`` is always a C-contiguous 2-D array; every entry must be
    finite. The dtype doubles as the file-precision flag.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeMismatch(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.shape[1] < 1:
            raise ShapeMismatch("embedding dimension must be positive")
        self.data = np.ascontiguousarray(arr)
        _check_finite_rows(self.data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def precision(self) -> int:
        """Bytes per stored value: 4 for float32, 8 for float64."""
        return self.data.dtype.itemsize

    def as_f64(self) -> np.ndarray:
        """Training/eval math runs in float64; upcast storage on demand."""
        return self.data.astype(np.float64, copy=False)


def _check_finite_rows(data: np.ndarray, path=None) -> None:
    if data.size == 0:
        return
    finite = np.isfinite(data)
    if not finite.all():
        row = int(np.argwhere(~finite)[0][0])
        where = f"{path}: " if path is not None else ""
        raise NonFiniteValue(f"{where}non-finite value in embedding row {row}")


def as_array(space) -> np.ndarray:
    """Accept an EmbeddingMatrix or a bare 2-D ndarray; return float64 rows."""
    if isinstance(space, EmbeddingMatrix):
        return space.as_f64()
    arr = np.asarray(space, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected 2-D embedding array, got shape {arr.shape}")
    return arr


def save_embeddings(m: EmbeddingMatrix, path) -> None:
    """Write a GEMB file. Round-trips bit-exactly through load_embeddings."""
    dtype = np.dtype(f"<f{m.precision}")
    header = GEMB_MAGIC + struct.pack("<BBII", GEMB_VERSION, m.precision, m.n, m.d)
    payload = _binio.pack_tensors([m.data], dtype)
    _binio.write_file(path, _binio.finish(header, payload))


def load_embeddings(path) -> EmbeddingMatrix:
    """Read a GEMB file, rejecting malformed headers, wrong payload sizes,
    checksum mismatches and non-finite values."""
    blob = _binio.read_file(path)
    _binio.check_magic(blob, GEMB_MAGIC, path)
    version, precision, n, d = _binio.unpack_header(blob, "<BBII", 4, path)
    if version != GEMB_VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version} at byte offset 4")
    if precision not in (4, 8):
        raise MalformedHeader(f"{path}: precision byte must be 4 or 8, got {precision} at byte offset 5")
    if d < 1:
        raise MalformedHeader(f"{path}: dimension d must be positive, got {d} at byte offset 10")
    dtype = np.dtype(f"<f{precision}")
    payload = _binio.check_payload(blob, 14, n * d * precision, path)
    data = np.frombuffer(payload, dtype=dtype).reshape(n, d)
    data = data.astype(dtype.newbyteorder("="), copy=True)
    _check_finite_rows(data, path)
    return EmbeddingMatrix(data)


@dataclass
class CaptionCorpus:
    """Caption-to-image association: the cluster structure.

    A *cluster* is the set of captions owned by one image. Caption and
    image indices align with the rows of the associated sentence and
    image embedding matrices; image indices follow first appearance in
    the corpus file.
    """

    caption_ids: list[str]
    image_ids: list[str]
    caption_to_image: np.ndarray
    texts: list = field(default_factory=list)
    image_to_captions: list = field(init=False)

    def __post_init__(self):
        self.caption_to_image = np.asarray(self.caption_to_image, dtype=np.int64)
        if len(self.caption_ids) != len(self.caption_to_image):
            raise ShapeMismatch("caption_ids and caption_to_image lengths differ")
        if not self.texts:
            self.texts = [None] * len(self.caption_ids)
        if len(set(self.caption_ids)) != len(self.caption_ids):
            seen = set()
            for cid in self.caption_ids:
                if cid in seen:
                    raise DuplicateCaptionId(f"caption id {cid!r} appears more than once")
                seen.add(cid)
        n_img = len(self.image_ids)
        self.image_to_captions = [[] for _ in range(n_img)]
        for c, v in enumerate(self.caption_to_image):
            if not 0 <= v < n_img:
                raise DanglingImageRef(
                    f"caption {self.caption_ids[c]!r} references image index {v} "
                    f"outside [0, {n_img})"
                )
            self.image_to_captions[int(v)].append(c)
        for v, members in enumerate(self.image_to_captions):
            if not members:
                raise EmptyCluster(f"image {self.image_ids[v]!r} owns no captions")

    @property
    def n_captions(self) -> int:
        return len(self.caption_ids)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.image_to_captions], dtype=np.int64)

    def caption_index(self, caption_id: str) -> int:
        try:
            return self._id_index[caption_id]
        except AttributeError:
            self._id_index = {cid: i for i, cid in enumerate(self.caption_ids)}
            return self.caption_index(caption_id)
        except KeyError:
            raise UnknownCaptionId(f"caption id {caption_id!r} not in corpus") from None

    def validate_against(self, sentences: EmbeddingMatrix, images: EmbeddingMatrix) -> None:
        """Check index ranges against the two embedding matrices."""
        if sentences.n != self.n_captions:
            raise ShapeMismatch(
                f"corpus has {self.n_captions} captions but sentence matrix has {sentences.n} rows"
            )
        if images.n < self.n_images:
            raise DanglingImageRef(
                f"corpus references {self.n_images} images but image matrix has {images.n} rows"
            )
        if images.n > self.n_images:
            raise EmptyCluster(
                f"image matrix has {images.n} rows but corpus references only "
                f"{self.n_images}; trailing rows own no captions"
            )


def save_corpus(corpus: CaptionCorpus, path) -> None:
    lines = []
    for c, cid in enumerate(corpus.caption_ids):
        iid = corpus.image_ids[int(corpus.caption_to_image[c])]
        text = corpus.texts[c]
        if text is None:
            lines.append(f"{cid}\t{iid}\n")
        else:
            lines.append(f"{cid}\t{iid}\t{text}\n")
    _binio.write_file(path, "".join(lines).encode("utf-8"))


def load_corpus(path, sentences: EmbeddingMatrix = None, images: EmbeddingMatrix = None) -> CaptionCorpus:
    """Parse a corpus TSV. Image indices are assigned by first appearance.

    When embedding matrices are supplied, index ranges are validated
    against their row counts.
    """
    blob = _binio.read_file(path)
    caption_ids, texts, image_ids = [], [], []
    image_index: dict[str, int] = {}
    caption_to_image = []
    for lineno, raw in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t", 2)
        if len(parts) < 2 or not parts[0] or not parts[1]:
            raise DataFormatError(f"{path}:{lineno}: expected 'caption_id<TAB>image_id[<TAB>text]'")
        cid, iid = parts[0], parts[1]
        text = parts[2] if len(parts) == 3 else None
        if iid not in image_index:
            image_index[iid] = len(image_ids)
            image_ids.append(iid)
        caption_ids.append(cid)
        texts.append(text)
        caption_to_image.append(image_index[iid])
    try:
        corpus = CaptionCorpus(caption_ids, image_ids, np.array(caption_to_image, dtype=np.int64), texts)
    except DuplicateCaptionId as exc:
        raise DuplicateCaptionId(f"{path}: {exc}") from None
    if sentences is not None and images is not None:
        corpus.validate_against(sentences, images)
    return corpus


@dataclass
class RelatednessPair:
    """A sentence pair with a human-labeled similarity score."""

    index_a: int
    index_b: int
    gold_score: float


def load_relatedness(path, corpus: CaptionCorpus) -> list:
    """Parse a relatedness TSV, resolving caption ids through the corpus."""
    blob = _binio.read_file(path)
    pairs = []
    for lineno, raw in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'id_a<TAB>id_b<TAB>score'")
        a = corpus.caption_index(parts[0])
        b = corpus.caption_index(parts[1])
        try:
            score = float(parts[2])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: score {parts[2]!r} is not a number") from None
        if not np.isfinite(score):
            raise NonFiniteValue(f"{path}:{lineno}: gold score must be finite")
        pairs.append(RelatednessPair(a, b, score))
    return pairs


class ConcretenessLexicon:
    """Word -> concreteness score in [0, 5], lowercased keys."""

    def __init__(self, scores: dict):
        for word, score in scores.items():
            if not 0.0 <= score <= 5.0:
                raise DataFormatError(f"concreteness score for {word!r} outside [0, 5]: {score}")
        self.scores = {w.lower(): float(s) for w, s in scores.items()}

    def __len__(self) -> int:
        return len(self.scores)

    def get(self, word: str):
        return self.scores.get(word)


def load_lexicon(path) -> ConcretenessLexicon:
    blob = _binio.read_file(path)
    scores = {}
    for lineno, raw in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected 'word<TAB>score'")
        try:
            scores[parts[0]] = float(parts[1])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: score {parts[1]!r} is not a number") from None
    try:
        return ConcretenessLexicon(scores)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def tokenize(text: str) -> list:
    """Lowercase and split on non-alphanumeric runs (lexicon lookup units)."""
    return _TOKEN_RE.findall(text.lower())


def gen_synthetic(
    n_clusters: int,
    captions_per_cluster: int,
    d_t: int,
    d_i: int,
    noise_sigma: float,
    seed: int,
):
    """Generate a synthetic corpus with correlated text/visual structure.

    Each image gets a random unit prototype in the visual space; its
    captions are the prototype pushed through one fixed random linear
    map into the text space, plus per-caption Gaussian noise. The shared
    map makes text and visual similarity structure correlate by
    construction, so structure-transfer effects are measurable.

    Deterministic: identical arguments (including seed) give bit-identical
    outputs.
    """
    if n_clusters < 1 or captions_per_cluster < 1 or d_t < 1 or d_i < 1:
        raise InvalidParam("cluster, caption and dimension counts must be positive")
    if not np.isfinite(noise_sigma) or noise_sigma < 0:
        raise InvalidParam(f"noise_sigma must be finite and >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    prototypes = rng.standard_normal((n_clusters, d_i))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    lin_map = rng.standard_normal((d_i, d_t)) / np.sqrt(d_i)
    projected = prototypes @ lin_map

    n = n_clusters * captions_per_cluster
    noise = rng.standard_normal((n, d_t))
    sentences = np.repeat(projected, captions_per_cluster, axis=0) + noise_sigma * noise

    caption_ids = [f"c{i:06d}" for i in range(n)]
    image_ids = [f"i{k:06d}" for k in range(n_clusters)]
    caption_to_image = np.repeat(np.arange(n_clusters, dtype=np.int64), captions_per_cluster)
    corpus = CaptionCorpus(caption_ids, image_ids, caption_to_image)
    return EmbeddingMatrix(sentences), EmbeddingMatrix(prototypes), corpus
