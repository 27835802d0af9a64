"""Levenshtein alignment and character error rate.

CER = (deletions + substitutions + insertions) / reference length, from a
minimal-cost unit-cost alignment. Deletions count reference characters
missing from the hypothesis; insertions count hypothesis characters with no
reference counterpart. Newlines are scored as ordinary characters: line
breaks are part of the reading order the model must get right. SOP/EOP are
structural and never reach the scored text.

Corpus CER is micro-averaged (total edits over total reference characters);
the macro mean of per-sample CERs is reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class EditCounts:
    deletions: int
    substitutions: int
    insertions: int

    @property
    def total(self) -> int:
        return self.deletions + self.substitutions + self.insertions


def levenshtein_counts(hyp: str, ref: str) -> EditCounts:
    """Edit-operation counts of a minimal unit-cost alignment of ``hyp`` to
    ``ref``.

    Ties are broken in favour of a substitution over an insert+delete pair;
    this affects the count split, never the total distance.
    """
    n, m = len(hyp), len(ref)
    # dp[i][j]: (distance, deletions, substitutions, insertions) aligning
    # hyp[:i] with ref[:j]. Preference on equal distance: diagonal, then
    # deletion, then insertion.
    prev = [(j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        hi = hyp[i - 1]
        for j in range(1, m + 1):
            dd, ds, dsub, dins = prev[j - 1]
            diag = (dd + (0 if hi == ref[j - 1] else 1), ds, dsub + (0 if hi == ref[j - 1] else 1), dins)
            ld, ls, lsub, lins = prev[j]
            ins = (ld + 1, ls, lsub, lins + 1)  # extra hypothesis character
            ud, us, usub, uins = cur[j - 1]
            dele = (ud + 1, us + 1, usub, uins)  # reference character missing
            best = diag
            if dele[0] < best[0]:
                best = dele
            if ins[0] < best[0]:
                best = ins
            cur.append(best)
        prev = cur
    d, dels, subs, inss = prev[m]
    assert d == dels + subs + inss
    return EditCounts(dels, subs, inss)


def levenshtein_distance(hyp: str, ref: str) -> int:
    """Plain edit distance; equals ``levenshtein_counts(hyp, ref).total`` but
    skips the per-operation bookkeeping."""
    if hyp == ref:
        return 0
    # Matching affixes never contribute edits; stripping them shrinks the DP.
    n, m = len(hyp), len(ref)
    lim = n if n < m else m
    k = 0
    while k < lim and hyp[k] == ref[k]:
        k += 1
    e = 0
    while e < lim - k and hyp[n - 1 - e] == ref[m - 1 - e]:
        e += 1
    hyp = hyp[k:n - e]
    ref = ref[k:m - e]
    if not hyp or not ref:
        return len(hyp) or len(ref)
    row = list(range(len(ref) + 1))
    i = 0
    for hc in hyp:
        diag = row[0]
        i += 1
        row[0] = left = i
        j = 0
        for rc in ref:
            j += 1
            up = row[j]
            left = diag if hc == rc else 1 + min(diag, up, left)
            row[j] = left
            diag = up
    return left


def cer(hyp: str, ref: str) -> float:
    """Per-sample character error rate; +inf when the reference is empty but
    the hypothesis is not."""
    if not ref:
        return 0.0 if not hyp else math.inf
    return levenshtein_counts(hyp, ref).total / len(ref)


@dataclass
class SampleResult:
    sample_id: str
    counts: EditCounts
    ref_len: int
    cer: float
    flags: tuple[str, ...] = ()


@dataclass
class CERReport:
    """Per-sample edit counts plus micro-averaged corpus totals."""

    samples: list[SampleResult] = field(default_factory=list)
    errored_samples: list[str] = field(default_factory=list)

    def add(self, sample_id: str, hyp: str, ref: str, flags: tuple[str, ...] = ()) -> SampleResult:
        counts = levenshtein_counts(hyp, ref)
        if len(ref) == 0:
            sample_cer = 0.0 if len(hyp) == 0 else math.inf
            if sample_cer == math.inf:
                flags = flags + ("empty-reference",)
        else:
            sample_cer = counts.total / len(ref)
        result = SampleResult(sample_id, counts, len(ref), sample_cer, flags)
        self.samples.append(result)
        return result

    @property
    def total_counts(self) -> EditCounts:
        return EditCounts(
            sum(s.counts.deletions for s in self.samples),
            sum(s.counts.substitutions for s in self.samples),
            sum(s.counts.insertions for s in self.samples),
        )

    @property
    def total_ref_len(self) -> int:
        return sum(s.ref_len for s in self.samples)

    @property
    def corpus_cer(self) -> float:
        """Micro-averaged CER: total edits over total reference characters."""
        n = self.total_ref_len
        if n == 0:
            return 0.0 if self.total_counts.total == 0 else math.inf
        return self.total_counts.total / n

    @property
    def macro_cer(self) -> float:
        finite = [s.cer for s in self.samples if math.isfinite(s.cer)]
        if any(not math.isfinite(s.cer) for s in self.samples):
            return math.inf
        return sum(finite) / len(finite) if finite else 0.0

    def summary(self) -> str:
        t = self.total_counts
        lines = [
            f"samples: {len(self.samples)}  (errored: {len(self.errored_samples)})",
            f"deletions={t.deletions} substitutions={t.substitutions} "
            f"insertions={t.insertions} ref_chars={self.total_ref_len}",
            f"corpus CER (micro): {self.corpus_cer:.4f}",
            f"macro CER: {self.macro_cer:.4f}",
        ]
        return "\n".join(lines)

    def to_jsonl(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            f.write(
                json.dumps(
                    {
                        "sample_id": "__corpus__",
                        "corpus_cer": self.corpus_cer,
                        "macro_cer": self.macro_cer,
                        "errored": self.errored_samples,
                    }
                )
                + "\n"
            )

    def to_records(self) -> list[dict]:
        recs = []
        for s in self.samples:
            recs.append(
                {
                    "sample_id": s.sample_id,
                    "deletions": s.counts.deletions,
                    "substitutions": s.counts.substitutions,
                    "insertions": s.counts.insertions,
                    "ref_len": s.ref_len,
                    "cer": s.cer,
                    "flags": list(s.flags),
                }
            )
        return recs


def evaluate_dataset(model, manifest, batch_size: int = 8) -> CERReport:
    """Greedy-decode every manifest record and score against its transcript.

    Newlines count as characters. Reference characters outside the model's
    vocabulary are flagged (the model cannot emit them, so they are
    guaranteed errors). Unreadable images are excluded and listed in
    ``errored_samples``.
    """
    from .training import Sample, predict_transcripts
    from .imaging import load_image
    from .vocab import encode_transcript, TokenSequence

    report = CERReport()
    samples = []
    for rec in manifest:
        try:
            img = load_image(rec.image_path, channels=model.config.input_channels)
        except Exception:
            report.errored_samples.append(rec.image_path)
            continue
        samples.append(Sample(img, TokenSequence(()), rec.transcript, rec))
    hyps = predict_transcripts(model, samples, batch_size)
    for s, hyp in zip(samples, hyps):
        flags = ()
        if any(c != "\n" and c not in model.vocab for c in s.transcript):
            flags = ("oov-reference",)
        report.add(s.record.image_path, hyp, s.transcript, flags)
    return report
