"""Caption metrics (BLEU, ROUGE-L, CIDEr) and navigation metrics (NE, TL, SR, SPL).

Caption metrics operate on token strings. Corpus BLEU pools clipped n-gram
counts across sentences; ROUGE-L and CIDEr corpus scores are sentence means.
Navigation distances are counted in edges (hops) times ``unit_length``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .errors import ParameterError, ValidationError

SENTENCE_SMOOTHING = 1e-9


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _clipped(cand: Sequence[str], refs: Sequence[Sequence[str]], n: int):
    counts = ngrams(cand, n)
    max_ref: Counter = Counter()
    for r in refs:
        for g, k in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], k)
    matched = sum(min(k, max_ref[g]) for g, k in counts.items())
    return matched, max(len(cand) - n + 1, 0)


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
         max_n: int = 4) -> List[float]:
    """Corpus BLEU-1..max_n (unsmoothed), as a list indexed n-1."""
    if len(candidates) != len(references):
        raise ValidationError("one reference set per candidate required")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValidationError("each candidate needs at least one reference")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            m, t = _clipped(cand, refs, n)
            matched[n - 1] += m
            total[n - 1] += t
    bp = 1.0 if c_len > r_len else (math.exp(1 - r_len / c_len) if c_len else 0.0)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def sentence_bleu(candidate: Sequence[str], references: Sequence[Sequence[str]],
                  max_n: int = 4) -> List[float]:
    """Per-sentence BLEU with add-epsilon smoothing on zero counts."""
    c = len(candidate)
    r = _closest_ref_len(c, references)
    bp = 1.0 if c > r else (math.exp(1 - r / c) if c else 0.0)
    scores, log_sum = [], 0.0
    for n in range(1, max_n + 1):
        m, t = _clipped(candidate, references, n)
        log_sum += math.log(max(m, SENTENCE_SMOOTHING) / max(t, 1))
        scores.append(bp * math.exp(log_sum / n))
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2) -> float:
    """LCS F-measure; precision and recall are maximised over references separately."""
    if not candidate:
        return 0.0
    precs, recs = [], []
    for ref in references:
        lcs = lcs_length(candidate, ref)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(ref) if ref else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def document_frequencies(corpus: Sequence[Sequence[Sequence[str]]], max_n: int = 4) -> Counter:
    """n-gram document frequency; each reference set counts as one document."""
    df: Counter = Counter()
    for refs in corpus:
        seen = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(ngrams(ref, n))
        df.update(seen)
    return df


def _tfidf(tokens, n, df, n_docs):
    return {g: k * (math.log((1.0 + n_docs) / (1.0 + df[g])) + 1.0)
            for g, k in ngrams(tokens, n).items()}


def _cosine(u: Dict, v: Dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
          corpus: Optional[Sequence[Sequence[Sequence[str]]]] = None,
          max_n: int = 4) -> tuple:
    """Return (corpus score, per-sentence scores) on the 0..10 scale.

    IDF is smoothed, idf(g) = ln((1 + D) / (1 + df(g))) + 1, over the D
    reference sets in ``corpus`` (defaults to ``references``).
    """
    corpus = references if corpus is None else corpus
    if len(corpus) == 0:
        raise ParameterError("CIDEr needs a non-empty reference corpus")
    df = document_frequencies(corpus, max_n)
    D = len(corpus)
    per = []
    for cand, refs in zip(candidates, references):
        total = 0.0
        for n in range(1, max_n + 1):
            vc = _tfidf(cand, n, df, D)
            total += sum(_cosine(vc, _tfidf(r, n, df, D)) for r in refs) / len(refs)
        per.append(10.0 * total / max_n)
    return (sum(per) / len(per) if per else 0.0), per


@dataclass
class EvalReport:
    bleu: List[float]
    rouge_l: float
    cider: float
    count: int
    per_sentence: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {f"bleu{i + 1}": s for i, s in enumerate(self.bleu)}
        d.update(rouge_l=self.rouge_l, cider=self.cider, count=self.count)
        return d


def evaluate_captions(candidates, references) -> EvalReport:
    corpus_cider, per_cider = cider(candidates, references)
    per = []
    rouges = []
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        rl = rouge_l(cand, refs)
        rouges.append(rl)
        per.append({"index": i, "bleu": sentence_bleu(cand, refs), "rouge_l": rl,
                    "cider": per_cider[i]})
    return EvalReport(bleu(candidates, references), sum(rouges) / max(len(rouges), 1),
                      corpus_cider, len(candidates), per)


# ---------------------------------------------------------------- navigation

def path_length(path: Sequence[int], graph, unit_length: float = 1.0) -> float:
    for a, b in zip(path, path[1:]):
        if b not in graph.neighbors(a):
            raise ValidationError(f"path steps {a} -> {b} are not adjacent")
    return (len(path) - 1) * unit_length


def nav_metrics(predicted: Sequence[int], reference: Sequence[int], graph,
                success_threshold: float = 1.0, unit_length: float = 1.0) -> dict:
    from .world import bfs_distances

    tl = path_length(predicted, graph, unit_length)
    r = path_length(reference, graph, unit_length)
    dist = bfs_distances(graph, predicted[-1])
    ne = dist.get(reference[-1], math.inf) * unit_length
    sr = 1.0 if ne <= success_threshold * unit_length else 0.0
    spl = sr * r / max(r, tl) if max(r, tl) > 0 else sr
    return {"NE": ne, "TL": tl, "SR": sr, "SPL": spl}


def aggregate_nav(results: Sequence[dict]) -> dict:
    keys = ("NE", "TL", "SR", "SPL")
    n = max(len(results), 1)
    return {k: sum(r[k] for r in results) / n for k in keys}
