"""Grounding objectives and the samplers that feed them.

Three signals are implemented over a projected ("grounded") copy of the
sentence space:

* cluster loss    -- max-margin ranking: captions of the same image must
  be closer than captions of different images by a margin gamma.
* perceptual loss -- negative Pearson correlation between pairwise
  sentence similarities and the matching pairwise image similarities.
* cross-modal (CM) baseline loss -- max-margin projection of sentences
  directly into the visual space.

Every loss returns its exact analytic gradient. The projector may be a
2-layer MLP or the identity; with the identity (or with finetuning
enabled) gradients flow into the touched sentence-embedding rows
themselves, and only those rows appear in the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedstore import as_array
from .errors import (
    DegenerateVariance,
    InvalidParam,
    NoValidTriplet,
    ShapeMismatch,
    ZeroNorm,
)
from .numcore import MlpGrads, ZERO_NORM_EPS, mlp_backward, mlp_forward

VARIANCE_EPS = 1e-12


@dataclass
class Triplet:
    """(anchor, positive, negative) caption indices: positive shares the
    anchor's image, negative does not."""

    anchor: int
    positive: int
    negative: int


@dataclass
class SimPair:
    """Two captions of distinct clusters plus their image indices."""

    k1: int
    k2: int
    v1: int
    v2: int


@dataclass
class CmItem:
    """A caption, its matching image, and one non-matching image."""

    caption: int
    image_pos: int
    image_neg: int


@dataclass
class LossWeights:
    alpha_c: float = 0.01
    alpha_p: float = 0.01
    gamma: float = 0.5
    gamma_prime: float = 0.5

    def __post_init__(self):
        if self.alpha_c < 0 or self.alpha_p < 0:
            raise InvalidParam("loss weights alpha_c/alpha_p must be >= 0")
        if self.gamma <= 0 or self.gamma_prime <= 0:
            raise InvalidParam("margins gamma/gamma_prime must be > 0")


@dataclass
class LossGradients:
    """Gradients of one loss evaluation.

    ``proj`` holds MLP parameter gradients (None for the identity
    projector); ``rows`` maps touched sentence-row indices to their
    gradients and is empty unless rows are trainable.
    """

    proj: MlpGrads = None
    rows: dict = field(default_factory=dict)


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _eligible_anchors(corpus) -> np.ndarray:
    sizes = corpus.cluster_sizes()
    keep = sizes[corpus.caption_to_image] >= 2
    return np.nonzero(keep)[0]


def sample_triplets(corpus, count: int, rng, anchors=None) -> list:
    """Draw triplets: positive uniform over the anchor's cluster mates,
    negative uniform over captions of other images (rejection sampling).

    Deterministic given the rng state. When ``anchors`` is given, one
    triplet is built per listed anchor, in order.
    """
    rng = _as_rng(rng)
    eligible = _eligible_anchors(corpus)
    if corpus.n_images < 2 or eligible.size == 0:
        raise NoValidTriplet(
            "triplet sampling needs >= 2 images and >= 1 cluster of size >= 2"
        )
    if anchors is None:
        if count < 1:
            raise InvalidParam(f"triplet count must be positive, got {count}")
        anchors = eligible[rng.integers(0, eligible.size, size=count)]
    out = []
    c2i = corpus.caption_to_image
    n = corpus.n_captions
    for a in anchors:
        a = int(a)
        members = corpus.image_to_captions[int(c2i[a])]
        if len(members) < 2:
            raise NoValidTriplet(f"anchor {a} has no cluster mate")
        r = int(rng.integers(0, len(members) - 1))
        pos = members[r] if members[r] != a else members[-1]
        while True:
            neg = int(rng.integers(0, n))
            if c2i[neg] != c2i[a]:
                break
        out.append(Triplet(a, int(pos), neg))
    return out


def sample_pairs(corpus, count: int, rng, allow_same_image: bool = False) -> list:
    """Draw unordered-unique caption pairs, across distinct images by
    default (same-image pairs have visual similarity exactly 1 and
    compress the correlation).

    If ``count`` is at least the number of distinct valid pairs, all of
    them are returned in index order (no randomness consumed).
    """
    if count < 1:
        raise InvalidParam(f"pair count must be positive, got {count}")
    rng = _as_rng(rng)
    n = corpus.n_captions
    c2i = corpus.caption_to_image
    sizes = corpus.cluster_sizes()
    total = n * (n - 1) // 2
    if not allow_same_image:
        total -= int(np.sum(sizes * (sizes - 1) // 2))
        if corpus.n_images < 2:
            raise InvalidParam("cross-image pairs need >= 2 images")
    if total == 0:
        raise InvalidParam("corpus admits no valid caption pair")

    def make(i, j):
        return SimPair(i, j, int(c2i[i]), int(c2i[j]))

    if count >= total:
        return [
            make(i, j)
            for i in range(n)
            for j in range(i + 1, n)
            if allow_same_image or c2i[i] != c2i[j]
        ]
    seen = set()
    out = []
    while len(out) < count:
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        if i == j or (not allow_same_image and c2i[i] == c2i[j]):
            continue
        key = (i, j) if i < j else (j, i)
        if key in seen:
            continue
        seen.add(key)
        out.append(make(i, j))
    return out


def sample_cm_items(corpus, count: int, rng, anchors=None) -> list:
    """Draw (caption, matching image, one non-matching image) items."""
    rng = _as_rng(rng)
    if corpus.n_images < 2:
        raise NoValidTriplet("cross-modal negatives need >= 2 images")
    if anchors is None:
        if count < 1:
            raise InvalidParam(f"item count must be positive, got {count}")
        anchors = rng.integers(0, corpus.n_captions, size=count)
    c2i = corpus.caption_to_image
    n_img = corpus.n_images
    out = []
    for a in anchors:
        a = int(a)
        pos = int(c2i[a])
        while True:
            neg = int(rng.integers(0, n_img))
            if neg != pos:
                break
        out.append(CmItem(a, pos, neg))
    return out


# --- shared projection/gradient plumbing -------------------------------------


def _project_rows(sentences: np.ndarray, proj, rows: np.ndarray):
    """Forward the selected rows through proj (or identity).

    Returns (projected, unit_rows, norms, cache)."""
    x = sentences[rows]
    if proj is None:
        u, cache = x, None
    else:
        u, cache = mlp_forward(proj, x)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = rows[int(np.argmin(norms))]
        raise ZeroNorm(f"projected sentence row {int(bad)} has (near-)zero norm")
    return u, u / norms[:, None], norms, cache


def _unit_image_rows(images: np.ndarray, rows: np.ndarray):
    x = images[rows]
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = rows[int(np.argmin(norms))]
        raise ZeroNorm(f"image row {int(bad)} has (near-)zero norm")
    return x / norms[:, None]


def _finish_gradients(rows, out_grad, cache, proj, finetune: bool) -> LossGradients:
    """Backpropagate accumulated output-side gradients into parameters
    and (when trainable) into the touched sentence rows."""
    result = LossGradients()
    if proj is None:
        result.rows = {int(r): out_grad[i].copy() for i, r in enumerate(rows)}
        return result
    grads, grad_in = mlp_backward(cache, out_grad)
    result.proj = grads
    if finetune:
        result.rows = {int(r): grad_in[i].copy() for i, r in enumerate(rows)}
    return result


def _index_map(indices_list):
    """Unique sorted row indices plus a mapper from original indices."""
    rows = np.unique(np.concatenate([np.asarray(ix, dtype=np.int64) for ix in indices_list]))
    lookup = {int(r): i for i, r in enumerate(rows)}
    return rows, lambda ix: np.array([lookup[int(i)] for i in ix], dtype=np.int64)


# --- losses -------------------------------------------------------------------


def cluster_loss(sentences, proj, triplets, gamma: float, finetune: bool = False):
    """Max-margin ranking loss over triplets in the projected space.

    loss = sum over triplets of max(0, gamma - cos(u_a, u_p) + cos(u_a, u_n)).
    The subgradient at the hinge kink is 0, so satisfied triplets
    contribute nothing.
    """
    if gamma <= 0:
        raise InvalidParam(f"margin gamma must be > 0, got {gamma}")
    sents = as_array(sentences)
    ia_orig = [t.anchor for t in triplets]
    ip_orig = [t.positive for t in triplets]
    in_orig = [t.negative for t in triplets]
    rows, remap = _index_map([ia_orig, ip_orig, in_orig])
    u, w, norms, cache = _project_rows(sents, proj, rows)
    ia, ip, ineg = remap(ia_orig), remap(ip_orig), remap(in_orig)

    cos_p = np.clip(np.sum(w[ia] * w[ip], axis=1), -1.0, 1.0)
    cos_n = np.clip(np.sum(w[ia] * w[ineg], axis=1), -1.0, 1.0)
    args = gamma - cos_p + cos_n
    active = args > 0
    loss = float(np.sum(args[active]))

    out_grad = np.zeros_like(u)
    if np.any(active):
        aa, pp, nn = ia[active], ip[active], ineg[active]
        cp = cos_p[active][:, None]
        cn = cos_n[active][:, None]
        # d(-cos_p)/du_a + d(+cos_n)/du_a, then the symmetric endpoint terms
        np.add.at(
            out_grad,
            aa,
            -(w[pp] - cp * w[aa]) / norms[aa][:, None]
            + (w[nn] - cn * w[aa]) / norms[aa][:, None],
        )
        np.add.at(out_grad, pp, -(w[aa] - cp * w[pp]) / norms[pp][:, None])
        np.add.at(out_grad, nn, (w[aa] - cn * w[nn]) / norms[nn][:, None])
    return loss, _finish_gradients(rows, out_grad, cache, proj, finetune)


def _pearson_with_grad(a: np.ndarray, b: np.ndarray):
    """Pearson of a against constant b, plus d(rho)/da."""
    if np.var(a) <= VARIANCE_EPS or np.var(b) <= VARIANCE_EPS:
        raise DegenerateVariance(
            "similarity sequences are (near-)constant; correlation undefined"
        )
    at = a - a.mean()
    bt = b - b.mean()
    s_ab = float(np.dot(at, bt))
    s_aa = float(np.dot(at, at))
    s_bb = float(np.dot(bt, bt))
    denom = np.sqrt(s_aa * s_bb)
    rho = s_ab / denom
    grad = bt / denom - rho * at / s_aa
    return min(1.0, max(-1.0, rho)), grad


def perceptual_loss(sentences, images, proj, pairs, finetune: bool = False):
    """Negative Pearson correlation between projected-sentence pair
    similarities and the matching image pair similarities.

    loss = -rho({cos(u_k1, u_k2)}, {cos(i_k1, i_k2)}) in [-1, 1]; only the
    textual side carries gradient.
    """
    if len(pairs) < 2:
        raise InvalidParam(f"perceptual loss needs >= 2 pairs, got {len(pairs)}")
    sents = as_array(sentences)
    imgs = as_array(images)
    k1_orig = [p.k1 for p in pairs]
    k2_orig = [p.k2 for p in pairs]
    rows, remap = _index_map([k1_orig, k2_orig])
    u, w, norms, cache = _project_rows(sents, proj, rows)
    k1, k2 = remap(k1_orig), remap(k2_orig)

    v_rows, v_remap = _index_map([[p.v1 for p in pairs], [p.v2 for p in pairs]])
    wi = _unit_image_rows(imgs, v_rows)
    v1, v2 = v_remap([p.v1 for p in pairs]), v_remap([p.v2 for p in pairs])

    text_sims = np.clip(np.sum(w[k1] * w[k2], axis=1), -1.0, 1.0)
    vis_sims = np.clip(np.sum(wi[v1] * wi[v2], axis=1), -1.0, 1.0)
    rho, drho_dsim = _pearson_with_grad(text_sims, vis_sims)
    loss = -rho
    dsim = -drho_dsim

    out_grad = np.zeros_like(u)
    c = text_sims[:, None]
    s = dsim[:, None]
    np.add.at(out_grad, k1, s * (w[k2] - c * w[k1]) / norms[k1][:, None])
    np.add.at(out_grad, k2, s * (w[k1] - c * w[k2]) / norms[k2][:, None])
    return loss, _finish_gradients(rows, out_grad, cache, proj, finetune)


def grounded_loss(sentences, images, proj, triplets, pairs, weights: LossWeights, finetune: bool = False):
    """Weighted combination alpha_c * cluster + alpha_p * perceptual.

    Components with zero weight are skipped entirely, so their
    preconditions are not exercised.
    """
    total = 0.0
    combined = LossGradients()
    if weights.alpha_c > 0:
        loss_c, grads_c = cluster_loss(sentences, proj, triplets, weights.gamma, finetune)
        total += weights.alpha_c * loss_c
        _accumulate(combined, grads_c, weights.alpha_c, proj)
    if weights.alpha_p > 0:
        loss_p, grads_p = perceptual_loss(sentences, images, proj, pairs, finetune)
        total += weights.alpha_p * loss_p
        _accumulate(combined, grads_p, weights.alpha_p, proj)
    return total, combined


def _accumulate(into: LossGradients, part: LossGradients, weight: float, proj) -> None:
    if part.proj is not None:
        if into.proj is None:
            into.proj = MlpGrads.zeros_like(proj)
        into.proj.add_scaled(part.proj, weight)
    for row, g in part.rows.items():
        if row in into.rows:
            into.rows[row] = into.rows[row] + weight * g
        else:
            into.rows[row] = weight * g


def cm_loss(sentences, images, proj_f, items, gamma_prime: float, finetune: bool = False):
    """Cross-modal projection baseline: push f(s) toward the matching
    image and away from a sampled non-matching one.

    loss = sum over items of max(0, gamma' + cos(f(s), i_neg) - cos(f(s), i_pos)).
    """
    if gamma_prime <= 0:
        raise InvalidParam(f"margin gamma_prime must be > 0, got {gamma_prime}")
    sents = as_array(sentences)
    imgs = as_array(images)
    d_i = imgs.shape[1]
    d_out = sents.shape[1] if proj_f is None else proj_f.d_out
    if d_out != d_i:
        raise ShapeMismatch(
            f"cross-modal projection must land in the visual space: "
            f"output width {d_out} != image width {d_i}"
        )
    rows, remap = _index_map([[it.caption for it in items]])
    u, w, norms, cache = _project_rows(sents, proj_f, rows)
    ic = remap([it.caption for it in items])

    v_rows, v_remap = _index_map([[it.image_pos for it in items], [it.image_neg for it in items]])
    wi = _unit_image_rows(imgs, v_rows)
    vp = v_remap([it.image_pos for it in items])
    vn = v_remap([it.image_neg for it in items])

    cos_p = np.clip(np.sum(w[ic] * wi[vp], axis=1), -1.0, 1.0)
    cos_n = np.clip(np.sum(w[ic] * wi[vn], axis=1), -1.0, 1.0)
    args = gamma_prime + cos_n - cos_p
    active = args > 0
    loss = float(np.sum(args[active]))

    out_grad = np.zeros_like(u)
    if np.any(active):
        cc = ic[active]
        cp = cos_p[active][:, None]
        cn = cos_n[active][:, None]
        np.add.at(
            out_grad,
            cc,
            (wi[vn[active]] - cn * w[cc]) / norms[cc][:, None]
            - (wi[vp[active]] - cp * w[cc]) / norms[cc][:, None],
        )
    return loss, _finish_gradients(rows, out_grad, cache, proj_f, finetune)
