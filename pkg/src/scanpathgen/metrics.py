"""Scanpath similarity metrics.

Four-dimensional 1-D MultiMatch (vector, length, position, duration; the
direction dimension is meaningless on a line and is dropped), normalized
Levenshtein distance over temporally binned fixation strings, an
inter-subject top line, and a skipping-behavior weighted F1.

MultiMatch here operates on normalized fixation lists: sequences of
(position, duration) with both coordinates in [0, 1]. NLD operates on raw
scanpaths (word indices, milliseconds) because binning is defined in ms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numba
import numpy as np
from sklearn.metrics import f1_score

from .corpus import Scanpath
from .errors import DegenerateScanpathError, ValidationError

BIN_MS = 50.0
MAX_BIN_SYMBOLS = 94  # word indices map to code points 'A'+i; i < 94 enforced


# --- Levenshtein ---


@numba.njit(cache=True)
def _lev_kernel(a: np.ndarray, b: np.ndarray) -> int:
    """Two-row DP over code-point arrays. Costs: insert/delete/substitute = 1."""
    n = a.shape[0]
    m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.empty(m + 1, dtype=np.int64)
    curr = np.empty(m + 1, dtype=np.int64)
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        curr[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = curr[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            curr[j] = best
        prev, curr = curr, prev
    return prev[m]


def _codes(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def levenshtein(s1: str, s2: str) -> int:
    """Minimal number of single-character edits turning s1 into s2."""
    return int(_lev_kernel(_codes(s1), _codes(s2)))


# --- temporal binning and NLD ---


def temporal_bin(sp: Scanpath, bin_ms: float = BIN_MS) -> str:
    """Expand each fixation into max(1, ceil(duration/bin)) copies of its
    word symbol, so the string length carries dwell time."""
    if not bin_ms > 0:
        raise ValidationError(f"bin_ms must be > 0, got {bin_ms}")
    parts: list[str] = []
    for fx in sp.fixations:
        if fx.word_index >= MAX_BIN_SYMBOLS:
            raise ValidationError(
                f"word_index {fx.word_index} has no bin symbol (limit {MAX_BIN_SYMBOLS})"
            )
        reps = max(1, math.ceil(fx.duration_ms / bin_ms))
        parts.append(chr(ord("A") + fx.word_index) * reps)
    return "".join(parts)


def nld(g: Scanpath, r: Scanpath, bin_ms: float = BIN_MS) -> float:
    """Levenshtein distance between binned strings over the longer length."""
    gs = temporal_bin(g, bin_ms)
    rs = temporal_bin(r, bin_ms)
    return levenshtein(gs, rs) / max(len(gs), len(rs))


# --- saccades and alignment ---


@dataclass(frozen=True)
class SaccadeVector:
    amplitude: float  # end_pos - start_pos, signed
    start_pos: float
    end_pos: float
    start_dur: float
    end_dur: float


FixationList = Sequence[tuple[float, float]]  # (position, duration), both in [0,1]


def to_saccades(fixations: FixationList) -> list[SaccadeVector]:
    """n fixations -> n-1 saccade vectors; a single fixation has none."""
    if len(fixations) == 0:
        raise ValidationError("empty scanpath has no saccades")
    out = []
    for (p0, d0), (p1, d1) in zip(fixations, fixations[1:]):
        out.append(SaccadeVector(p1 - p0, p0, p1, d0, d1))
    return out


def align(a: Sequence[SaccadeVector], b: Sequence[SaccadeVector]) -> list[tuple[int, int]]:
    """Monotonic one-to-one-with-gaps alignment minimizing total cost.

    Matched pair (i, j) costs |a_i.amplitude - b_j.amplitude|; a gapped vector
    costs its own |amplitude|. Global DP; ties broken deterministically by
    preferring match, then gap-in-a, then gap-in-b during backtrack.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("align needs nonempty saccade lists")
    n, m = len(a), len(b)
    amp_a = [v.amplitude for v in a]
    amp_b = [v.amplitude for v in b]
    cost = np.zeros((n + 1, m + 1), dtype=np.float64)
    for i in range(1, n + 1):
        cost[i, 0] = cost[i - 1, 0] + abs(amp_a[i - 1])
    for j in range(1, m + 1):
        cost[0, j] = cost[0, j - 1] + abs(amp_b[j - 1])
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            match = cost[i - 1, j - 1] + abs(amp_a[i - 1] - amp_b[j - 1])
            gap_a = cost[i - 1, j] + abs(amp_a[i - 1])
            gap_b = cost[i, j - 1] + abs(amp_b[j - 1])
            cost[i, j] = min(match, gap_a, gap_b)
    pairs: list[tuple[int, int]] = []
    i, j = n, m
    while i > 0 and j > 0:
        here = cost[i, j]
        if here == cost[i - 1, j - 1] + abs(amp_a[i - 1] - amp_b[j - 1]):
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
        elif here == cost[i - 1, j] + abs(amp_a[i - 1]):
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


def alignment_cost(a: Sequence[SaccadeVector], b: Sequence[SaccadeVector]) -> float:
    """Total cost of the optimal alignment (matched + gapped contributions)."""
    pairs = align(a, b)
    matched_a = {i for i, _ in pairs}
    matched_b = {j for _, j in pairs}
    total = sum(abs(a[i].amplitude - b[j].amplitude) for i, j in pairs)
    total += sum(abs(v.amplitude) for i, v in enumerate(a) if i not in matched_a)
    total += sum(abs(v.amplitude) for j, v in enumerate(b) if j not in matched_b)
    return total


# --- MultiMatch ---


def multimatch(g: FixationList, r: FixationList) -> tuple[float, float, float, float]:
    """(vector, length, position, duration) similarity in [0, 1].

    Computed over the matched saccade pairs of the optimal alignment; position
    and duration compare the end fixations of matched pairs. Duration pairs
    where both durations are 0 are skipped; if none remain the duration
    dimension is NaN. If both paths are single fixations the vector and length
    dimensions are trivially 1 and position/duration compare the lone pair;
    if exactly one path is single there is nothing to align and the pair is
    degenerate (raises).
    """
    if len(g) == 0 or len(r) == 0:
        raise ValidationError("multimatch needs nonempty scanpaths")
    if len(g) == 1 and len(r) == 1:
        fix_pairs = [(g[0], r[0])]
        vector_sim, length_sim = 1.0, 1.0
    elif len(g) == 1 or len(r) == 1:
        raise DegenerateScanpathError(
            "one scanpath has no saccades; the pair cannot be aligned"
        )
    else:
        sac_g = to_saccades(g)
        sac_r = to_saccades(r)
        pairs = align(sac_g, sac_r)
        vector_sim = float(
            np.mean([1.0 - abs(sac_g[i].amplitude - sac_r[j].amplitude) / 2.0 for i, j in pairs])
        )
        length_sim = float(
            np.mean(
                [1.0 - abs(abs(sac_g[i].amplitude) - abs(sac_r[j].amplitude)) / 2.0
                 for i, j in pairs]
            )
        )
        fix_pairs = [(g[i + 1], r[j + 1]) for i, j in pairs]  # end fixations
    position_sim = float(np.mean([1.0 - abs(pg - pr) for (pg, _), (pr, _) in fix_pairs]))
    dur_terms = [
        1.0 - abs(dg - dr) / max(dg, dr)
        for (_, dg), (_, dr) in fix_pairs
        if max(dg, dr) > 0
    ]
    duration_sim = float(np.mean(dur_terms)) if dur_terms else float("nan")

    def clip(x: float) -> float:
        return x if math.isnan(x) else float(min(1.0, max(0.0, x)))

    return clip(vector_sim), clip(length_sim), clip(position_sim), clip(duration_sim)


# --- corpus-level reports ---


@dataclass
class MetricReport:
    """Averaged similarity scores plus how many pairs fed each dimension."""

    vector: float
    length: float
    position: float
    duration: float
    nld: float
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "vector": self.vector,
            "length": self.length,
            "position": self.position,
            "duration": self.duration,
            "nld": self.nld,
        }
        if self.counts:
            out["counts"] = dict(self.counts)
        return out


def normalized_fixation_list(
    sp: Scanpath, sentence_len: int, p99: float
) -> list[tuple[float, float]]:
    """Raw scanpath -> [(position, duration)] in the unit square."""
    if sentence_len <= 0 or not p99 > 0:
        raise ValidationError("sentence_len and p99 must be positive")
    return [
        (fx.word_index / sentence_len, min(fx.duration_ms / p99, 1.0))
        for fx in sp.fixations
    ]


def score_pairs(
    pairs: Sequence[tuple[Scanpath, Scanpath]],
    sentence_lens: Mapping[str, int],
    p99: float,
    bin_ms: float = BIN_MS,
) -> MetricReport:
    """Average metrics over (generated, real) scanpath pairs.

    Every pair contributes to NLD. MultiMatch dimensions skip degenerate
    pairs (exactly one side single-fixation); the duration dimension also
    skips pairs with no positive-duration aligned fixation. Counts record
    how many pairs fed each dimension.
    """
    if len(pairs) == 0:
        raise ValidationError("no pairs to score")
    mm_vals: list[tuple[float, float, float, float]] = []
    nld_vals: list[float] = []
    degenerate = 0
    for g, r in pairs:
        n_words = sentence_lens[r.sentence_id]
        nld_vals.append(nld(g, r, bin_ms))
        gl = normalized_fixation_list(g, n_words, p99)
        rl = normalized_fixation_list(r, n_words, p99)
        try:
            mm_vals.append(multimatch(gl, rl))
        except DegenerateScanpathError:
            degenerate += 1
    if mm_vals:
        arr = np.array(mm_vals, dtype=np.float64)
        vector, length, position = (float(np.mean(arr[:, k])) for k in range(3))
        dur_col = arr[:, 3]
        dur_valid = dur_col[~np.isnan(dur_col)]
        duration = float(np.mean(dur_valid)) if dur_valid.size else float("nan")
        duration_pairs = int(dur_valid.size)
    else:
        vector = length = position = duration = float("nan")
        duration_pairs = 0
    return MetricReport(
        vector=vector,
        length=length,
        position=position,
        duration=duration,
        nld=float(np.mean(nld_vals)),
        counts={
            "pairs_total": len(pairs),
            "pairs_multimatch": len(mm_vals),
            "pairs_degenerate": degenerate,
            "pairs_duration": duration_pairs,
            "pairs_nld": len(nld_vals),
        },
    )


def inter_subject(
    corpus: Sequence[Scanpath],
    sentence_lens: Mapping[str, int],
    p99: float,
    bin_ms: float = BIN_MS,
) -> MetricReport:
    """Score every participant against the others on shared sentences.

    For each sentence read by >= 2 participants: each participant's path is
    scored against every other participant's path as ground truth, averaged
    per participant, then over participants, then over sentences.
    """
    by_sentence: dict[str, list[Scanpath]] = {}
    for sp in corpus:
        by_sentence.setdefault(sp.sentence_id, []).append(sp)
    shared = {
        sid: sps
        for sid, sps in by_sentence.items()
        if len({sp.participant_id for sp in sps}) >= 2
    }
    if not shared:
        raise ValidationError("inter-subject score needs >= 2 participants sharing a sentence")
    dims = {"vector": [], "length": [], "position": [], "duration": [], "nld": []}
    degenerate = 0
    for sid in sorted(shared):
        sps = shared[sid]
        n_words = sentence_lens[sid]
        sent_acc: dict[str, list[float]] = {k: [] for k in dims}
        for cand in sps:
            part_acc: dict[str, list[float]] = {k: [] for k in dims}
            for gt in sps:
                if gt.participant_id == cand.participant_id:
                    continue
                part_acc["nld"].append(nld(cand, gt, bin_ms))
                cl = normalized_fixation_list(cand, n_words, p99)
                gl = normalized_fixation_list(gt, n_words, p99)
                try:
                    v, l, p, d = multimatch(cl, gl)
                except DegenerateScanpathError:
                    degenerate += 1
                    continue
                part_acc["vector"].append(v)
                part_acc["length"].append(l)
                part_acc["position"].append(p)
                if not math.isnan(d):
                    part_acc["duration"].append(d)
            for k in dims:
                if part_acc[k]:
                    sent_acc[k].append(float(np.mean(part_acc[k])))
        for k in dims:
            if sent_acc[k]:
                dims[k].append(float(np.mean(sent_acc[k])))
    return MetricReport(
        vector=float(np.mean(dims["vector"])) if dims["vector"] else float("nan"),
        length=float(np.mean(dims["length"])) if dims["length"] else float("nan"),
        position=float(np.mean(dims["position"])) if dims["position"] else float("nan"),
        duration=float(np.mean(dims["duration"])) if dims["duration"] else float("nan"),
        nld=float(np.mean(dims["nld"])) if dims["nld"] else float("nan"),
        counts={
            "shared_sentences": len(shared),
            "pairs_degenerate": degenerate,
        },
    )


# --- skipping F1 ---


def skipping_f1(
    gen_by_sentence: Mapping[str, Scanpath],
    real_corpus: Sequence[Scanpath],
    sentence_lens: Mapping[str, int],
    pooled: bool = False,
) -> float:
    """Weighted F1 of attended-vs-skipped word labels, generated vs real.

    Each word of a sentence is labeled attended (appears in the scanpath) or
    skipped. Real labels are ground truth. Per-sentence scores average over
    that sentence's real paths, then over sentences; pooled=True instead
    concatenates all word labels and scores once.
    """
    by_sentence: dict[str, list[Scanpath]] = {}
    for sp in real_corpus:
        by_sentence.setdefault(sp.sentence_id, []).append(sp)
    if not by_sentence:
        raise ValidationError("no real scanpaths to compare against")
    pooled_true: list[int] = []
    pooled_pred: list[int] = []
    sentence_scores: list[float] = []
    for sid in sorted(by_sentence):
        if sid not in gen_by_sentence:
            raise ValidationError(f"no generated scanpath for sentence {sid!r}")
        n_words = sentence_lens[sid]
        gen_attended = {fx.word_index for fx in gen_by_sentence[sid].fixations}
        pred = [1 if w in gen_attended else 0 for w in range(n_words)]
        path_scores = []
        for real_sp in by_sentence[sid]:
            real_attended = {fx.word_index for fx in real_sp.fixations}
            true = [1 if w in real_attended else 0 for w in range(n_words)]
            pooled_true.extend(true)
            pooled_pred.extend(pred)
            path_scores.append(
                float(f1_score(true, pred, average="weighted", zero_division=0))
            )
        sentence_scores.append(float(np.mean(path_scores)))
    if pooled:
        return float(f1_score(pooled_true, pooled_pred, average="weighted", zero_division=0))
    return float(np.mean(sentence_scores))
