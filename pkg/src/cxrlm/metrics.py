"""Text, image-distribution, and classification metrics.

Definitions are pinned exactly so fixtures are reproducible:
  - BLEU: modified n-gram precision, orders 1..min(4, len(candidate)),
    add-1 smoothing on numerator and denominator only when the clipped
    count is zero, brevity penalty from the closest reference length
    (ties -> shorter).
  - ROUGE-L: LCS-based F with beta=1.
  - METEOR-lite: exact-match unigram alignment (earliest unmatched
    reference occurrence, left to right), F_mean = 10PR/(R+9P),
    penalty = 0.5 (chunks/matches)^3.
  - CIDEr: mean over n=1..4 of TF-IDF cosine, x10, no length penalty.
  - Frechet distance: Gaussian fit with sample covariance (ddof=1) plus
    1e-6 I shrinkage; matrix square root via eigendecomposition of the
    symmetrized product, eigenvalues clamped at zero.
  - AUROC: Mann-Whitney, ties count one half.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import extract_findings, tokenize_text


class MetricError(ValueError):
    """Metric preconditions violated (empty corpus, mixed lineages, ...)."""


class UndefinedMetricError(MetricError):
    """The metric has no value on this input (e.g. single-class AUROC)."""


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------

def bleu(candidate, references, max_n: int = 4) -> float:
    """Corpus-free sentence BLEU in [0, 1]."""
    candidate = list(candidate)
    references = [list(r) for r in references]
    if not candidate:
        warnings.warn("BLEU on an empty candidate is 0 by convention")
        return 0.0
    if not references:
        raise MetricError("BLEU needs at least one reference")

    log_sum, orders = 0.0, 0
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(candidate, n)
        guess = sum(cand_counts.values())
        if guess == 0:
            break  # candidate shorter than n
        max_ref = Counter()
        for ref in references:
            for gram, count in _ngrams(ref, n).items():
                max_ref[gram] = max(max_ref[gram], count)
        correct = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        p = correct / guess if correct > 0 else (correct + 1.0) / (guess + 1.0)
        log_sum += np.log(p)
        orders += 1

    c = len(candidate)
    ref_len = min((abs(len(r) - c), len(r)) for r in references)[1]
    brevity = 1.0 if c >= ref_len else float(np.exp(1.0 - ref_len / c))
    return brevity * float(np.exp(log_sum / orders))


# -- ROUGE-L ---------------------------------------------------------------------

def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.0) -> float:
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta**2) * p * r / (r + beta**2 * p)


# -- METEOR-lite --------------------------------------------------------------------

def meteor_lite(candidate, reference) -> float:
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    taken = [False] * len(reference)
    aligned = []  # reference position per matched candidate token, in order
    for tok in candidate:
        for j, ref_tok in enumerate(reference):
            if not taken[j] and ref_tok == tok:
                taken[j] = True
                aligned.append(j)
                break
    matches = len(aligned)
    if matches == 0:
        return 0.0
    chunks = 1
    for prev, cur in zip(aligned, aligned[1:]):
        if cur != prev + 1:
            chunks += 1
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


# -- CIDEr -----------------------------------------------------------------------------

def _tfidf(tokens, n, idf):
    counts = _ngrams(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, 0.0) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = np.sqrt(sum(v * v for v in a.values()))
    nb = np.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return float(dot / (na * nb))


def cider(candidates, references, corpus, max_n: int = 4) -> float:
    """Mean over items of the TF-IDF cosine score, x10."""
    corpus = [tuple(doc) for doc in corpus]
    if not corpus:
        raise MetricError("CIDEr needs a non-empty corpus for document frequencies")
    candidates = [list(c) for c in candidates]
    refs_per_item = [[list(r) for r in (refs if refs and isinstance(refs[0], (list, tuple)) else [refs])]
                     for refs in references]
    if len(candidates) != len(refs_per_item):
        raise MetricError(f"{len(candidates)} candidates vs {len(refs_per_item)} reference sets")
    corpus_set = set(corpus)
    for refs in refs_per_item:
        for r in refs:
            if tuple(r) not in corpus_set:
                raise MetricError(f"reference {r!r} is not a corpus document")

    n_docs = len(corpus)
    idf_by_order = []
    for n in range(1, max_n + 1):
        df = Counter()
        for doc in corpus:
            df.update(set(_ngrams(list(doc), n)))
        idf_by_order.append({g: np.log(n_docs / c) for g, c in df.items()})

    scores = []
    for cand, refs in zip(candidates, refs_per_item):
        per_order = []
        for n in range(1, max_n + 1):
            idf = idf_by_order[n - 1]
            cand_vec = _tfidf(cand, n, idf)
            per_order.append(float(np.mean([_cosine(cand_vec, _tfidf(r, n, idf)) for r in refs])))
        scores.append(10.0 * float(np.mean(per_order)))
    return float(np.mean(scores))


# -- Frechet distance --------------------------------------------------------------------

@dataclass
class FeatureCloud:
    """Feature vectors from one image population under a fixed encoder."""

    features: np.ndarray  # (n, d)
    source_tag: str  # real | generated
    phi_hash: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise MetricError(f"features must be (n, d), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise MetricError("features contain non-finite values")


def _gaussian_fit(features):
    mu = features.mean(axis=0)
    if features.shape[0] < 2:
        cov = np.zeros((features.shape[1], features.shape[1]))
    else:
        cov = np.cov(features, rowvar=False)
        cov = np.atleast_2d(cov)
    return mu, cov + 1e-6 * np.eye(features.shape[1])


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(cloud_a: FeatureCloud, cloud_b: FeatureCloud) -> float:
    if cloud_a.phi_hash != cloud_b.phi_hash:
        raise MetricError(
            f"feature encoders differ ({cloud_a.phi_hash[:12]} vs {cloud_b.phi_hash[:12]}); "
            "clouds are not comparable"
        )
    mu_a, cov_a = _gaussian_fit(cloud_a.features)
    mu_b, cov_b = _gaussian_fit(cloud_b.features)
    sqrt_a = _sqrtm_psd(cov_a)
    inner = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner))
    return max(value, 0.0)


# -- classification metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredBinary:
    score: float
    label: int


def auroc(items) -> float:
    """P(random positive outranks random negative), ties count one half."""
    scores = np.array([it.score for it in items], dtype=np.float64)
    labels = np.array([it.label for it in items], dtype=np.int64)
    if not np.isfinite(scores).all():
        raise MetricError("AUROC scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes ({n_pos} positives, {n_neg} negatives)")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def finding_f1(predicted_reports, gold_label_sets):
    """Micro-averaged F over (kind, side) pairs extracted from predictions."""
    if len(predicted_reports) != len(gold_label_sets):
        raise MetricError(f"{len(predicted_reports)} predictions vs {len(gold_label_sets)} gold sets")
    tp = fp = fn = 0
    for text, gold in zip(predicted_reports, gold_label_sets):
        pred_pairs = {(k, s) for k, s, _ in extract_findings(text)}
        gold_pairs = {(g[0], g[1]) for g in gold}
        tp += len(pred_pairs & gold_pairs)
        fp += len(pred_pairs - gold_pairs)
        fn += len(gold_pairs - pred_pairs)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def vqa_accuracy(transcripts: dict, gold: dict) -> float:
    """Exact match on normalized answer tokens, keyed by item id."""
    missing = sorted(set(gold) - set(transcripts))
    if missing:
        raise MetricError(f"transcripts missing ids: {missing[:5]}")
    if not gold:
        raise MetricError("no gold items")
    hits = sum(
        1 for item_id, answer in gold.items()
        if tokenize_text(transcripts[item_id]) == tokenize_text(answer)
    )
    return hits / len(gold)
