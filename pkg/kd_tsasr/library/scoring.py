"""Token error rate scoring and system comparison tables."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

LOG = logging.getLogger("scoring")


class EditCounts(NamedTuple):
    distance: int
    # Reference tokens replaced by a different hypothesis token.
    substitutions: int
    # Hypothesis tokens with no reference counterpart.
    insertions: int
    # Reference tokens missing from the hypothesis.
    deletions: int


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> EditCounts:
    """Unit-cost Levenshtein distance with S/I/D counts from one optimal alignment.

    The backtrace prefers substitution (or match), then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i -= 1
            j -= 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(dp[n, m]), subs, ins, dels)


@dataclass
class ScoreReport:
    system: str
    seed: int
    # TER in percent per condition label.
    condition_ter: Dict[float, float]
    # Pooled TER over every utterance of the report.
    average: float
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_tokens: int = 0
    utterances: Dict[float, int] = field(default_factory=dict)

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _ter(edits: int, tokens: int) -> float:
    if tokens == 0:
        raise ValueError('Cannot compute TER without reference tokens')
    return 100.0 * edits / tokens


def _condition_order(item):
    # Unlabelled utterances (None) sort last.
    return (item[0] is None, item[0] or 0.0)


def score_split(hyps: Mapping[str, Sequence[int]], refs: Mapping[str, Sequence[int]],
                conditions: Mapping[str, Optional[float]], system: str = '',
                seed: int = 0) -> ScoreReport:
    """Per-condition and pooled TER; hypothesis and reference ids must match exactly."""
    if set(hyps) != set(refs):
        missing = sorted(set(refs) - set(hyps))
        extra = sorted(set(hyps) - set(refs))
        raise ValueError(f'Hypothesis ids do not match reference ids '
                         f'(missing {missing[:5]}, unexpected {extra[:5]})')
    per_condition: Dict[Optional[float], List[int]] = {}
    totals = [0, 0, 0, 0]
    for utt_id in sorted(refs):
        counts = edit_distance(hyps[utt_id], refs[utt_id])
        condition = conditions.get(utt_id)
        key = None if condition is None else float(condition)
        entry = per_condition.setdefault(key, [0, 0, 0])
        entry[0] += counts.distance
        entry[1] += len(refs[utt_id])
        entry[2] += 1
        totals[0] += counts.substitutions
        totals[1] += counts.insertions
        totals[2] += counts.deletions
        totals[3] += len(refs[utt_id])
    ordered = sorted(per_condition.items(), key=_condition_order)
    condition_ter = {c: _ter(e[0], e[1]) for c, e in ordered}
    report = ScoreReport(
        system=system, seed=seed, condition_ter=condition_ter,
        average=_ter(sum(e[0] for e in per_condition.values()), totals[3]),
        substitutions=totals[0], insertions=totals[1], deletions=totals[2],
        reference_tokens=totals[3],
        utterances={c: e[2] for c, e in ordered})
    LOG.debug(f'{system} seed {seed}: average TER {report.average:.2f}')
    return report


@dataclass(frozen=True)
class Comparison:
    mean_a: float
    mean_b: float
    # (mean_a - mean_b) / mean_a in percent; positive when b is better.
    relative_reduction: float
    wins_a: int
    wins_b: int
    ties: int
    seeds: Tuple[int, ...]


def relative_reduction(mean_a: float, mean_b: float) -> float:
    if mean_a == 0:
        return 0.0
    return (mean_a - mean_b) / mean_a * 100.0


def compare_systems(reports_a: Sequence[ScoreReport],
                    reports_b: Sequence[ScoreReport]) -> Comparison:
    by_seed_a = {r.seed: r for r in reports_a}
    by_seed_b = {r.seed: r for r in reports_b}
    if set(by_seed_a) != set(by_seed_b) or not by_seed_a:
        raise ValueError(f'Report seed sets differ: {sorted(by_seed_a)} vs {sorted(by_seed_b)}')
    seeds = tuple(sorted(by_seed_a))
    wins_a = wins_b = ties = 0
    for seed in seeds:
        a, b = by_seed_a[seed].average, by_seed_b[seed].average
        if a < b:
            wins_a += 1
        elif b < a:
            wins_b += 1
        else:
            ties += 1
    mean_a = float(np.mean([by_seed_a[s].average for s in seeds]))
    mean_b = float(np.mean([by_seed_b[s].average for s in seeds]))
    return Comparison(mean_a=mean_a, mean_b=mean_b,
                      relative_reduction=relative_reduction(mean_a, mean_b),
                      wins_a=wins_a, wins_b=wins_b, ties=ties, seeds=seeds)


# Report tables.

@dataclass
class TableRow:
    system: str
    mode: str
    description: str
    lam: Optional[float]
    # Mean TER over seeds per condition.
    condition_ter: Dict[float, float]
    average: float
    seeds: int
    best_lambda: Optional[float] = None


def table_row(system: str, mode: str, description: str, lam: Optional[float],
              reports: Sequence[ScoreReport], best_lambda: Optional[float] = None) -> TableRow:
    if not reports:
        raise ValueError(f'No reports for system {system}')
    conditions = sorted(reports[0].condition_ter)
    condition_ter = {c: float(np.mean([r.condition_ter[c] for r in reports])) for c in conditions}
    return TableRow(system=system, mode=mode, description=description, lam=lam,
                    condition_ter=condition_ter,
                    average=float(np.mean([r.average for r in reports])),
                    seeds=len(reports), best_lambda=best_lambda)


def _fmt_lambda(lam: Optional[float]) -> str:
    return '-' if lam is None else f'{lam:g}'


def format_csv(rows: Sequence[TableRow]) -> str:
    conditions = sorted(rows[0].condition_ter) if rows else []
    header = ['system', 'mode', 'description', 'lambda']
    header += [f'snr{c:g}' for c in conditions] + ['avg', 'seeds', 'best_lambda']
    lines = [','.join(header)]
    for row in rows:
        cells = [row.system, row.mode, row.description, _fmt_lambda(row.lam)]
        cells += [f'{row.condition_ter[c]:.2f}' for c in conditions]
        cells += [f'{row.average:.2f}', str(row.seeds), _fmt_lambda(row.best_lambda)]
        lines.append(','.join(cells))
    return '\n'.join(lines) + '\n'


def format_table(rows: Sequence[TableRow], comparisons: Mapping[str, Comparison] = None) -> str:
    """Aligned systems x SNR table, offline block first, then streaming."""
    if not rows:
        return ''
    conditions = sorted(rows[0].condition_ter)
    header = ['ID', 'System', 'lambda'] + [f'{c:g}dB' for c in conditions] + ['Avg.']
    body = []
    for mode in ('offline', 'streaming'):
        block = [r for r in rows if r.mode == mode]
        if not block:
            continue
        body.append([f'[{mode}]'] + [''] * (len(header) - 1))
        for row in block:
            body.append([row.system, row.description, _fmt_lambda(row.lam)]
                        + [f'{row.condition_ter[c]:.1f}' for c in conditions]
                        + [f'{row.average:.1f}'])
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    out = ['  '.join(cell.ljust(w) for cell, w in zip(header, widths)).rstrip()]
    out.append('  '.join('-' * w for w in widths))
    for line in body:
        out.append('  '.join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    for name, c in (comparisons or {}).items():
        out.append(f'{name}: {c.mean_a:.2f} -> {c.mean_b:.2f} '
                   f'({c.relative_reduction:.1f}% relative, wins {c.wins_b}/{len(c.seeds)})')
    return '\n'.join(out) + '\n'
