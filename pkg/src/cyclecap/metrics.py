"""Caption metrics, inception score and the exact binomial test.

Text metrics take :class:`EvalPair` items: a tokenized candidate and its
tokenized references (EOS already stripped).
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BETA_ROUGE = 1.2
CIDER_SIGMA = 6.0
BINOM_RTOL = 1e-7


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple
    references: tuple

    def __init__(self, candidate: Sequence[str], references: Sequence[Sequence[str]]):
        refs = tuple(tuple(r) for r in references)
        if not refs:
            raise ValueError("EvalPair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(candidate))
        object.__setattr__(self, "references", refs)


def _pairs(corpus) -> list[EvalPair]:
    out = [p if isinstance(p, EvalPair) else EvalPair(*p) for p in corpus]
    if not out:
        raise ValueError("empty corpus")
    return out


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU

def bleu4(corpus, max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts, add-one smoothing for n >= 2."""
    pairs = _pairs(corpus)
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for p in pairs:
        c = len(p.candidate)
        cand_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in p.references)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(p.candidate, n)
            best: Counter = Counter()
            for r in p.references:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(k, best[g]) for g, k in counts.items())
            total[n - 1] += max(c - n + 1, 0)
    if cand_len == 0 or matched[0] == 0:
        return 0.0
    log_p = math.log(matched[0] / total[0])
    for n in range(1, max_n):
        log_p += math.log((matched[n] + 1) / (total[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)


# ---------------------------------------------------------------- ROUGE-L

def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_pair(cand, ref, beta: float) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def rouge_l(corpus, beta: float = BETA_ROUGE) -> float:
    pairs = _pairs(corpus)
    return float(np.mean([max(_rouge_pair(p.candidate, r, beta) for r in p.references) for p in pairs]))


# ---------------------------------------------------------------- METEOR-lite

_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    """Crude suffix stripper standing in for a real stemmer."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches; leftmost free reference slot wins."""
    used_c, used_r, pairs = set(), set(), []
    for key in (lambda w: w, stem):
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            kw = key(w)
            for j, r in enumerate(ref):
                if j not in used_r and key(r) == kw:
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def count_chunks(alignment: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _meteor_pair(cand, ref) -> float:
    a = align(cand, ref)
    m = len(a)
    if m == 0:
        return 0.0
    prec, rec = m / len(cand), m / len(ref)
    fmean = 10 * prec * rec / (rec + 9 * prec)
    penalty = 0.5 * ((count_chunks(a) - 1) / max(m - 1, 1)) ** 3
    return fmean * (1 - penalty)


def meteor_lite(corpus) -> float:
    """Unigram-alignment F-mean with a fragmentation penalty (no synonym table).

    The penalty counts chunk breaks, so a perfect match scores exactly 1.
    """
    pairs = _pairs(corpus)
    return float(np.mean([max(_meteor_pair(p.candidate, r) for r in p.references) for p in pairs]))


# ---------------------------------------------------------------- CIDEr-D

def _tfidf(tokens, n: int, df: Counter, log_n: float) -> tuple[dict, float]:
    vec = {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in ngrams(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider(corpus, max_n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D over the corpus; document frequencies come from its references."""
    pairs = _pairs(corpus)
    log_n = math.log(float(len(pairs)))
    dfs = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for p in pairs:
            df.update(set(g for r in p.references for g in ngrams(r, n)))
        dfs.append(df)
    scores = []
    for p in pairs:
        per_n = []
        for n in range(1, max_n + 1):
            vh, nh = _tfidf(p.candidate, n, dfs[n - 1], log_n)
            sims = []
            for r in p.references:
                vr, nr = _tfidf(r, n, dfs[n - 1], log_n)
                num = sum(min(v, vr.get(g, 0.0)) * vr.get(g, 0.0) for g, v in vh.items())
                sim = num / (nh * nr) if nh > 0 and nr > 0 else 0.0
                delta = len(p.candidate) - len(r)
                sims.append(sim * math.exp(-delta * delta / (2 * sigma * sigma)))
            per_n.append(float(np.mean(sims)))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


# ---------------------------------------------------------------- inception score

def inception_score_from_probs(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"probs must be (N, C) with N > 0, got {probs.shape}")
    if splits < 1 or splits > probs.shape[0]:
        raise ValueError(f"splits must be in [1, {probs.shape[0]}], got {splits}")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images, classifier: Callable[[np.ndarray], np.ndarray], splits: int = 1,
                    batch_size: int = 256) -> tuple[float, float]:
    """Score ``images`` with a frozen classifier returning class probabilities."""
    images = np.asarray(images)
    probs = np.concatenate([classifier(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    return inception_score_from_probs(probs, splits)


# ---------------------------------------------------------------- binomial test

def _log_pmf(i: int, n: int, p: float) -> float:
    if p == 0.0:
        return 0.0 if i == 0 else -math.inf
    if p == 1.0:
        return 0.0 if i == n else -math.inf
    return (math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
            + i * math.log(p) + (n - i) * math.log1p(-p))


def binomial_test_two_sided(k: int, n: int, p0: float = 0.5) -> float:
    """Exact two-sided p-value: total probability of outcomes no likelier than ``k``."""
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise TypeError("k and n must be integers")
    if n < 0 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 <= p0 <= 1.0:
        raise ValueError(f"p0 must lie in [0, 1], got {p0}")
    logs = np.array([_log_pmf(i, n, p0) for i in range(n + 1)])
    cutoff = logs[k] + math.log1p(BINOM_RTOL)
    keep = logs[logs <= cutoff]
    if keep.size == n + 1:
        return 1.0
    top = keep.max()
    total = math.exp(top) * float(np.exp(keep - top).sum())
    return min(1.0, total)


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    meteor_lite: float
    cider: float
    inception_mean: float
    inception_std: float
    binomial: tuple | None = None
    extra: dict = field(default_factory=dict)

    COLUMNS = ("bleu4", "rouge_l", "meteor_lite", "cider", "inception_mean", "inception_std")

    def __post_init__(self):
        for name in self.COLUMNS:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")
        for name in ("bleu4", "rouge_l", "meteor_lite"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def row(self) -> dict:
        out = {c: getattr(self, c) for c in self.COLUMNS}
        if self.binomial is not None:
            out.update(binom_k=self.binomial[0], binom_n=self.binomial[1], binom_p=self.binomial[2])
        out.update(self.extra)
        return out


def reports_to_csv(reports: dict[str, MetricReport]) -> str:
    cols = ["method", *MetricReport.COLUMNS]
    extra = sorted({k for r in reports.values() for k in r.row()} - set(cols))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols + extra)
    for method, rep in reports.items():
        row = rep.row()
        w.writerow([method] + [_fmt(row.get(c, "")) for c in cols[1:] + extra])
    return buf.getvalue()


def reports_to_table(reports: dict[str, MetricReport]) -> str:
    """Fixed-width method x metric table (METEOR is the lite variant)."""
    headers = ["Method", "BLEU-4", "ROUGE-L", "METEOR-lite", "CIDEr", "Inception"]
    rows = [[m, f"{r.bleu4:.4f}", f"{r.rouge_l:.4f}", f"{r.meteor_lite:.4f}", f"{r.cider:.4f}",
             f"{r.inception_mean:.3f} ± {r.inception_std:.3f}"] for m, r in reports.items()]
    widths = [max(len(x) for x in col) for col in zip(headers, *rows)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])] + [line(r) for r in rows]
    binoms = [(m, r.binomial) for m, r in reports.items() if r.binomial is not None]
    if binoms:
        out += ["", "Binomial test (two-sided, p0 = 0.5)"]
        out += [f"{m}: k={k} n={n} p={p:.4g}" for m, (k, n, p) in binoms]
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def corpus_scores(pairs: Iterable) -> dict[str, float]:
    pairs = _pairs(pairs)
    return {"bleu4": bleu4(pairs), "rouge_l": rouge_l(pairs), "meteor_lite": meteor_lite(pairs),
            "cider": cider(pairs)}
