"""WER/CER scoring grouped by dialect and speaking style."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from . import DataError
from .tokenizer import normalize_text

# Column order of the evaluation table: (style, dialect, label)
CONDITIONS = (
    ("whisper", "SG", "Whisper-SG"),
    ("normal", "SG", "Normal-SG"),
    ("whisper", "US", "Whisper-US"),
    ("normal", "US", "Normal-US"),
    ("whisper", "IRI", "Whisper-IRI"),
)
CSV_FIELDS = ("dialect", "style", "mode", "wer", "cer", "subs", "ins", "dels", "n_utts")


def edit_distance(ref, hyp) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein alignment, returning ``(distance, S, I, D)``.

    Among minimal alignments the backtrace prefers substitution (or match),
    then insertion, then deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i][j] = min(sub, dist[i][j - 1] + 1, dist[i - 1][j] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return dist[n][m], s, ins, dels


@dataclass
class GroupScore:
    dialect: str
    style: str
    mode: str
    subs: int = 0
    ins: int = 0
    dels: int = 0
    ref_words: int = 0
    char_errors: int = 0
    ref_chars: int = 0
    n_utts: int = 0
    missing: int = 0

    @property
    def wer(self) -> float:
        return 100.0 * (self.subs + self.ins + self.dels) / self.ref_words if self.ref_words else 0.0

    @property
    def cer(self) -> float:
        return 100.0 * self.char_errors / self.ref_chars if self.ref_chars else 0.0

    def add(self, ref: str, hyp: str | None) -> None:
        ref_w = ref.split()
        hyp_w = [] if hyp is None else hyp.split()
        _, s, i, d = edit_distance(ref_w, hyp_w)
        self.subs, self.ins, self.dels = self.subs + s, self.ins + i, self.dels + d
        self.ref_words += len(ref_w)
        self.char_errors += edit_distance(ref, hyp or "")[0]
        self.ref_chars += len(ref)
        self.n_utts += 1
        self.missing += hyp is None


@dataclass
class ScoreReport:
    groups: list[GroupScore] = field(default_factory=list)

    def get(self, dialect: str, style: str, mode: str) -> GroupScore | None:
        for g in self.groups:
            if (g.dialect, g.style, g.mode) == (dialect, style, mode):
                return g
        return None

    def merge(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.groups + other.groups)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for g in self.groups:
            w.writerow([g.dialect, g.style, g.mode, f"{g.wer:.2f}", f"{g.cer:.2f}",
                        g.subs, g.ins, g.dels, g.n_utts])
        return buf.getvalue()


def score(refs, hyps: dict[str, str], mode: str = "beam") -> ScoreReport:
    """Micro-averaged WER/CER per (dialect, style) plus an ``ALL/all`` row.

    ``refs`` are manifest entries; ``hyps`` maps utt_id to hypothesis text.
    A reference without a hypothesis counts as all deletions.
    """
    refs = list(refs)
    known = {e.utt_id for e in refs}
    unknown = set(hyps) - known
    if unknown:
        raise DataError(f"hypotheses for unknown utterances: {sorted(unknown)[:5]}")
    groups: dict[tuple[str, str], GroupScore] = {}
    overall = GroupScore("ALL", "all", mode)
    for e in refs:
        g = groups.setdefault((e.dialect, e.style), GroupScore(e.dialect, e.style, mode))
        ref = normalize_text(e.transcript)
        hyp = hyps.get(e.utt_id)
        hyp = None if hyp is None else normalize_text(hyp)
        g.add(ref, hyp)
        overall.add(ref, hyp)
    ordered = sorted(groups.values(), key=lambda g: (g.dialect, g.style))
    return ScoreReport(ordered + ([overall] if refs else []))


def render_table(report: ScoreReport, modes=("greedy", "beam")) -> tuple[str, str]:
    """Text table with one column pair per condition, and the report as CSV."""
    head1 = f"{'Mode':<8}" + "".join(f" | {label:>11}" for _, _, label in CONDITIONS)
    lines = [head1, "-" * len(head1)]
    for mode in modes:
        if not any(g.mode == mode for g in report.groups):
            continue
        cells = []
        for style, dialect, _ in CONDITIONS:
            g = report.get(dialect, style, mode)
            cells.append(f" | {g.wer:>11.2f}" if g else f" | {'-':>11}")
        lines.append(f"{mode:<8}" + "".join(cells))
    return "\n".join(lines) + "\n", report.to_csv()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in ("subs", "ins", "dels", "n_utts"):
            r[k] = int(r[k])
        for k in ("wer", "cer"):
            r[k] = float(r[k])
    return rows


def group_as_row(g: GroupScore) -> dict:
    d = asdict(g)
    return {"dialect": d["dialect"], "style": d["style"], "mode": d["mode"],
            "wer": round(g.wer, 2), "cer": round(g.cer, 2), "subs": g.subs,
            "ins": g.ins, "dels": g.dels, "n_utts": g.n_utts}
