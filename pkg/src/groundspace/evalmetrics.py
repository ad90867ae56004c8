"""Intrinsic evaluation of embedding spaces.

Structural measures over a caption space and its image space:

* mnno          -- mean nearest-neighbor overlap: fraction of shared
  neighbors between each caption (mapped to image ids) and its image.
* rho_vis       -- Pearson correlation between text-space and
  visual-space pairwise cosine similarities.
* cluster_stats -- mean within-cluster and across-cluster cosine,
  percent-scaled.

Plus the correlation primitives (pearson, spearman with mean ranks),
the human-relatedness protocol, kNN listings, and average concreteness.

All metrics are pure cosine geometry: invariant under global rotation
and positive uniform scaling of either space. Pairwise loops accept a
thread count; work is split into fixed-size chunks reduced in chunk
order, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embedstore import as_array, tokenize
from .errors import (
    DegenerateVariance,
    EmptyExpectation,
    InvalidK,
    InvalidParam,
    NoCoveredToken,
    ZeroNorm,
)
from .grounding import sample_pairs

_CHUNK = 256


def _unit_rows(space, what: str = "embedding") -> np.ndarray:
    arr = as_array(space)
    norms = np.linalg.norm(arr, axis=1)
    if arr.shape[0] and norms.min() < 1e-12:
        raise ZeroNorm(f"{what} row {int(np.argmin(norms))} has (near-)zero norm")
    return arr / norms[:, None]


def _chunked(n: int, threads: int, fn):
    """Apply fn(start, stop) over fixed-size chunks; reduce in chunk order."""
    spans = [(s, min(s + _CHUNK, n)) for s in range(0, n, _CHUNK)]
    if threads <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


def pearson(x, y) -> float:
    """Pearson correlation coefficient, clamped to [-1, 1].

    Exactly constant sequences are rejected (zero variance)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidParam(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InvalidParam("pearson needs >= 2 samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateVariance("correlation of a constant sequence is undefined")
    xt = x - x.mean()
    yt = y - y.mean()
    r = float(np.dot(xt, yt)) / np.sqrt(float(np.dot(xt, xt)) * float(np.dot(yt, yt)))
    return min(1.0, max(-1.0, r))


def ranks_with_ties(x) -> np.ndarray:
    """1-based ranks; runs of equal values share their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    sx = x[order]
    out = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        out[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return out


def spearman(x, y) -> float:
    """Spearman rank correlation: pearson of mean-ranked sequences."""
    return pearson(ranks_with_ties(x), ranks_with_ties(y))


def _topk_excluding(sims_row: np.ndarray, self_index: int, k: int) -> np.ndarray:
    """Indices of the k largest entries, excluding self, ties by index."""
    order = np.argsort(-sims_row, kind="stable")
    order = order[order != self_index]
    return order[:k]


def mnno(space, images, corpus, k: int = 10, threads: int = 1) -> float:
    """Mean nearest-neighbor overlap between the caption and image spaces.

    For each caption: its k nearest captions map to a set of image ids,
    its image's k nearest images form another set; the score is the
    intersection size over k, averaged over captions. In [0, 1].
    """
    wc = _unit_rows(space, "caption")
    wi = _unit_rows(images, "image")
    n_c, n_i = wc.shape[0], wi.shape[0]
    if k < 1 or k >= n_i:
        raise InvalidK(f"k must satisfy 1 <= k < n_images, got k={k}, n_images={n_i}")
    if n_c != corpus.n_captions or n_i < corpus.n_images:
        raise InvalidParam("corpus does not match the given embedding matrices")
    c2i = corpus.caption_to_image

    img_sims = wi @ wi.T
    img_nbrs = [frozenset(_topk_excluding(img_sims[v], v, k).tolist()) for v in range(n_i)]

    def chunk_score(a: int, b: int) -> float:
        sims = wc[a:b] @ wc.T
        total = 0.0
        for i in range(b - a):
            c = a + i
            nbr_rows = _topk_excluding(sims[i], c, k)
            cap_ids = frozenset(int(c2i[r]) for r in nbr_rows)
            total += len(cap_ids & img_nbrs[int(c2i[c])]) / k
        return total

    partials = _chunked(n_c, threads, chunk_score)
    return float(sum(partials) / n_c)


def rho_vis(space, images, corpus, n_pairs: int = None, seed: int = 0) -> float:
    """Pearson correlation between caption-pair and image-pair cosines
    over sampled cross-image caption pairs.

    Defaults to 10 * n_captions pairs; requests covering every valid
    pair switch to exhaustive enumeration (seed then has no effect).
    """
    wc = _unit_rows(space, "caption")
    wi = _unit_rows(images, "image")
    if corpus.n_images < 2:
        raise InvalidParam("rho_vis needs >= 2 images")
    if n_pairs is None:
        n_pairs = 10 * corpus.n_captions
    pairs = sample_pairs(corpus, n_pairs, np.random.default_rng(seed))
    k1 = np.array([p.k1 for p in pairs])
    k2 = np.array([p.k2 for p in pairs])
    v1 = np.array([p.v1 for p in pairs])
    v2 = np.array([p.v2 for p in pairs])
    text_sims = np.clip(np.sum(wc[k1] * wc[k2], axis=1), -1.0, 1.0)
    vis_sims = np.clip(np.sum(wi[v1] * wi[v2], axis=1), -1.0, 1.0)
    return pearson(text_sims, vis_sims)


def cluster_stats(space, corpus, seed: int = 0, max_exhaustive: int = 10**6, threads: int = 1):
    """(c_intra, c_inter): mean cosine over same-image caption pairs and
    over different-image caption pairs, both percent-scaled.

    c_inter is exhaustive up to ``max_exhaustive`` cross pairs, then a
    seeded sample of that many pairs.
    """
    w = _unit_rows(space, "caption")
    sizes = corpus.cluster_sizes()
    intra_count = int(np.sum(sizes * (sizes - 1) // 2))
    if intra_count == 0:
        raise EmptyExpectation("c_intra needs a cluster of size >= 2")
    if corpus.n_images < 2:
        raise EmptyExpectation("c_inter needs >= 2 clusters")

    intra_sum = 0.0
    for members in corpus.image_to_captions:
        if len(members) < 2:
            continue
        block = w[np.asarray(members)]
        g = np.clip(block @ block.T, -1.0, 1.0)
        intra_sum += (float(g.sum()) - float(np.trace(g))) / 2.0
    c_intra = 100.0 * intra_sum / intra_count

    n = corpus.n_captions
    total_pairs = n * (n - 1) // 2
    inter_count = total_pairs - intra_count
    if inter_count <= max_exhaustive:
        def chunk_sum(a: int, b: int) -> float:
            g = np.clip(w[a:b] @ w.T, -1.0, 1.0)
            # upper triangle only: zero out columns <= row index
            mask = np.arange(n)[None, :] > np.arange(a, b)[:, None]
            return float(np.sum(g * mask))
        all_sum = sum(_chunked(n, threads, chunk_sum))
        inter_sum = all_sum - intra_sum
        c_inter = 100.0 * inter_sum / inter_count
    else:
        rng = np.random.default_rng(seed)
        c2i = corpus.caption_to_image
        got = 0
        acc = 0.0
        while got < max_exhaustive:
            take = min(131072, max_exhaustive - got)
            i = rng.integers(0, n, size=take)
            j = rng.integers(0, n, size=take)
            keep = c2i[i] != c2i[j]
            i, j = i[keep], j[keep]
            acc += float(np.sum(np.clip(np.sum(w[i] * w[j], axis=1), -1.0, 1.0)))
            got += int(i.size)
        c_inter = 100.0 * acc / got
    return c_intra, c_inter


def relatedness(space, pairs) -> float:
    """Spearman correlation of pair cosine similarities against gold scores."""
    if len(pairs) < 2:
        raise InvalidParam(f"relatedness needs >= 2 pairs, got {len(pairs)}")
    w = _unit_rows(space, "caption")
    a = np.array([p.index_a for p in pairs])
    b = np.array([p.index_b for p in pairs])
    sims = np.clip(np.sum(w[a] * w[b], axis=1), -1.0, 1.0)
    gold = np.array([p.gold_score for p in pairs], dtype=np.float64)
    return spearman(sims, gold)


def relatedness_pearson(space, pairs) -> float:
    """Pearson variant of the relatedness protocol."""
    if len(pairs) < 2:
        raise InvalidParam(f"relatedness needs >= 2 pairs, got {len(pairs)}")
    w = _unit_rows(space, "caption")
    a = np.array([p.index_a for p in pairs])
    b = np.array([p.index_b for p in pairs])
    sims = np.clip(np.sum(w[a] * w[b], axis=1), -1.0, 1.0)
    gold = np.array([p.gold_score for p in pairs], dtype=np.float64)
    return pearson(sims, gold)


def knn_report(query: int, space, corpus, k: int = 10) -> list:
    """k nearest captions of a query caption by cosine, self excluded.

    Returns (caption_id, image_id, cosine) tuples in descending cosine
    order, ties broken by caption index.
    """
    w = _unit_rows(space, "caption")
    n = w.shape[0]
    if not 0 <= query < n:
        raise InvalidParam(f"query index {query} outside [0, {n})")
    if k < 1 or k > n - 1:
        raise InvalidK(f"k must satisfy 1 <= k <= n-1, got k={k}, n={n}")
    sims = np.clip(w @ w[query], -1.0, 1.0)
    order = _topk_excluding(sims, query, k)
    c2i = corpus.caption_to_image
    return [
        (corpus.caption_ids[int(r)], corpus.image_ids[int(c2i[r])], float(sims[r]))
        for r in order
    ]


def avg_concreteness(texts, lexicon) -> float:
    """Mean lexicon score over all token occurrences covered by the lexicon."""
    if len(lexicon) == 0:
        raise InvalidParam("concreteness lexicon is empty")
    total = 0.0
    hits = 0
    for text in texts:
        if text is None:
            continue
        for token in tokenize(text):
            score = lexicon.get(token)
            if score is not None:
                total += score
                hits += 1
    if hits == 0:
        raise NoCoveredToken("no token of the given texts appears in the lexicon")
    return total / hits


@dataclass
class MetricReport:
    """Structural measures of one space; mnno in [0,1] and rho_vis in
    [-1,1] internally, percent-scaled alongside c_intra/c_inter when
    serialized."""

    mnno: float
    rho_vis: float
    c_intra: float
    c_inter: float
    k: int

    def as_dict(self) -> dict:
        return {
            "mnno": 100.0 * self.mnno,
            "rho_vis": 100.0 * self.rho_vis,
            "c_intra": self.c_intra,
            "c_inter": self.c_inter,
            "k": self.k,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def compute_report(
    space,
    images,
    corpus,
    k: int = 10,
    n_pairs: int = None,
    seed: int = 0,
    threads: int = 1,
) -> MetricReport:
    """All structural measures of a caption space against its image space."""
    m = mnno(space, images, corpus, k=k, threads=threads)
    r = rho_vis(space, images, corpus, n_pairs=n_pairs, seed=seed)
    c_intra, c_inter = cluster_stats(space, corpus, seed=seed, threads=threads)
    return MetricReport(mnno=m, rho_vis=r, c_intra=c_intra, c_inter=c_inter, k=k)
