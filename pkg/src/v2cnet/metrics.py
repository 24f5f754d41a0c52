"""Corpus-level caption metrics with a single reference per clip.

BLEU-1..4, ROUGE-L (beta 1.2), plain CIDEr (x10, no length penalty), an
exact-match METEOR variant and the action success rate.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
CIDER_SCALE = 10.0
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
_METEOR_SEARCH_LIMIT = 20000


@dataclass(frozen=True)
class EvalPair:
    clip_id: str
    candidate: tuple[str, ...]
    reference: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "reference", tuple(self.reference))
        if not self.reference:
            raise ValueError(f"clip {self.clip_id}: empty reference")

    @classmethod
    def from_strings(cls, clip_id: str, candidate: str, reference: str) -> "EvalPair":
        return cls(clip_id, tuple(candidate.split()), tuple(reference.split()))


def _ngrams(words: Sequence[str], k: int) -> Counter:
    return Counter(tuple(words[i:i + k]) for i in range(len(words) - k + 1))


def _require(pairs) -> list[EvalPair]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    return pairs


def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus BLEU-n with clipped k-gram precisions and the brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ValueError("bleu: n must be in 1..4")
    pairs = _require(pairs)
    log_p = 0.0
    for k in range(1, n + 1):
        matched = possible = 0
        for p in pairs:
            cand = _ngrams(p.candidate, k)
            ref = _ngrams(p.reference, k)
            matched += sum(min(c, ref[g]) for g, c in cand.items())
            possible += max(len(p.candidate) - k + 1, 0)
        if matched == 0:
            return 0.0
        log_p += math.log(matched / possible)
    cand_len = sum(len(p.candidate) for p in pairs)
    ref_len = sum(len(p.reference) for p in pairs)
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p / n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(candidate)
    rec = lcs / len(reference)
    return ((1 + beta ** 2) * rec * prec) / (rec + beta ** 2 * prec)


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    pairs = _require(pairs)
    return sum(rouge_l_pair(p.candidate, p.reference) for p in pairs) / len(pairs)


def _tfidf(counts: Counter, df: Counter, n_docs: int) -> dict:
    return {g: c * math.log(n_docs / df[g]) if df[g] else 0.0 for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(pairs: Sequence[EvalPair]) -> list[float]:
    """Per-pair CIDEr; document frequencies come from the references."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("cider needs at least two pairs for document frequencies")
    N = len(pairs)
    df = [Counter() for _ in range(CIDER_MAX_N + 1)]
    for p in pairs:
        for k in range(1, CIDER_MAX_N + 1):
            df[k].update(_ngrams(p.reference, k).keys())
    scores = []
    for p in pairs:
        s = 0.0
        for k in range(1, CIDER_MAX_N + 1):
            vc = _tfidf(_ngrams(p.candidate, k), df[k], N)
            vr = _tfidf(_ngrams(p.reference, k), df[k], N)
            s += CIDER_SCALE * _cosine(vc, vr)
        scores.append(s / CIDER_MAX_N)
    return scores


def cider(pairs: Sequence[EvalPair]) -> float:
    scores = cider_scores(pairs)
    return sum(scores) / len(scores)


def meteor_alignment(candidate: Sequence[str], reference: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of a maximal exact one-to-one alignment with fewest chunks.

    Depth-first search over candidate positions; the chunk count only grows,
    so branches that cannot beat the best found are pruned. When the node
    budget runs out the best full alignment so far is used; if none was found
    yet, chunks come from a greedy left-to-right alignment.
    """
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(reference):
        ref_positions.setdefault(w, []).append(j)
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    target = sum(min(c, ref_counts[w]) for w, c in cand_counts.items())
    if target == 0:
        return 0, 0

    remaining = Counter()
    for w in candidate:
        remaining[w] += 1
    used: set[int] = set()
    taken = Counter()
    best = [math.inf]
    budget = [_METEOR_SEARCH_LIMIT]

    def search(i: int, prev_j: int | None, chunks: int, matched: int) -> None:
        if chunks >= best[0] or budget[0] <= 0:
            return
        budget[0] -= 1
        if i == len(candidate):
            if matched == target:
                best[0] = chunks
            return
        w = candidate[i]
        remaining[w] -= 1
        quota = min(cand_counts[w], ref_counts[w])
        for j in ref_positions.get(w, ()):
            if j in used:
                continue
            used.add(j)
            taken[w] += 1
            extends = prev_j is not None and j == prev_j + 1
            search(i + 1, j, chunks + (0 if extends else 1), matched + 1)
            taken[w] -= 1
            used.discard(j)
        # leave position i unaligned only if later occurrences can still fill the quota
        if taken[w] + remaining[w] >= quota:
            search(i + 1, None, chunks, matched)
        remaining[w] += 1

    search(0, None, 0, 0)
    if best[0] is math.inf:
        return target, _greedy_chunks(candidate, reference)
    return target, int(best[0])


def _greedy_chunks(candidate, reference) -> int:
    used: set[int] = set()
    chunks = 0
    prev = None
    for w in candidate:
        j = next((j for j, r in enumerate(reference) if r == w and j not in used), None)
        if j is None:
            prev = None
            continue
        used.add(j)
        if prev is None or j != prev + 1:
            chunks += 1
        prev = j
    return chunks


def meteor_exact_pair(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not candidate or not reference:
        return 0.0
    m, chunks = meteor_alignment(candidate, reference)
    if m == 0:
        return 0.0
    prec = m / len(candidate)
    rec = m / len(reference)
    fmean = prec * rec / (METEOR_ALPHA * prec + (1 - METEOR_ALPHA) * rec)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


def meteor_exact(pairs: Sequence[EvalPair]) -> float:
    pairs = _require(pairs)
    return sum(meteor_exact_pair(p.candidate, p.reference) for p in pairs) / len(pairs)


def action_success_rate(predicted: Sequence[str], groundtruth: Sequence[str]) -> float:
    if len(predicted) != len(groundtruth):
        raise ValueError(f"{len(predicted)} predictions for {len(groundtruth)} clips")
    if not groundtruth:
        raise ValueError("no clips to score")
    return sum(1 for p, g in zip(predicted, groundtruth) if p and p == g) / len(groundtruth)


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    action_success_rate: float
    action_success_translation: float
    action_success_classification: float

    def as_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        head = ["Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "METEOR", "ROUGE_L", "CIDEr"]
        vals = [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l, self.cider]
        lines = ["\t".join(head), "\t".join(f"{v:.3f}" for v in vals),
                 f"action success (translation branch)\t{100 * self.action_success_translation:.2f}%",
                 f"action success (classification branch)\t{100 * self.action_success_classification:.2f}%"]
        return "\n".join(lines)


def score_pairs(pairs: Sequence[EvalPair], predicted_actions: Sequence[str],
                actions_from_commands: Sequence[str], actions_from_classifier: Sequence[str],
                groundtruth_actions: Sequence[str]) -> EvalReport:
    pairs = _require(pairs)
    return EvalReport(
        bleu1=bleu(pairs, 1), bleu2=bleu(pairs, 2), bleu3=bleu(pairs, 3), bleu4=bleu(pairs, 4),
        meteor=meteor_exact(pairs), rouge_l=rouge_l(pairs),
        cider=cider(pairs) if len(pairs) >= 2 else 0.0,
        action_success_rate=action_success_rate(predicted_actions, groundtruth_actions),
        action_success_translation=action_success_rate(actions_from_commands, groundtruth_actions),
        action_success_classification=action_success_rate(actions_from_classifier, groundtruth_actions),
    )


@dataclass
class ClipResult:
    clip_id: str
    groundtruth: str
    generated: str
    action: str
    action_from_translation: str
    action_from_classification: str


def evaluate_all(model, corpus) -> tuple[EvalReport, list[ClipResult]]:
    """Decode every clip of ``corpus`` with ``model`` and score the outputs."""
    preds = model.infer_batch(corpus.features)
    rows = [ClipResult(r.clip_id, r.command, p.command, r.action, p.action_from_command,
                       p.action_from_classifier) for r, p in zip(corpus.records, preds)]
    pairs = [EvalPair.from_strings(x.clip_id, x.generated, x.groundtruth) for x in rows]
    report = score_pairs(pairs, [p.action for p in preds],
                         [x.action_from_translation for x in rows],
                         [x.action_from_classification for x in rows],
                         [x.action for x in rows])
    return report, rows


def write_dump(rows: Sequence[ClipResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x in rows:
            fh.write("\t".join([x.clip_id, x.groundtruth, x.generated, x.action,
                                x.action_from_translation, x.action_from_classification]) + "\n")
