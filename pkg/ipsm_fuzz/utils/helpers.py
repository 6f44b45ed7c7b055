"""
Effect-size statistics and aggregation of multi-trial fuzzing experiments.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ('mode', 'trials', 'mean_branches', 'mean_states',
                  'mean_transitions', 'a12_vs_baseline', 'a12_states',
                  'improv_branches', 'improv_states', 'effect', 'p_value')

# A12 above (below 1 - ...) these marks is a small / medium / large effect.
EFFECT_SMALL = 0.56
EFFECT_MEDIUM = 0.64
EFFECT_LARGE = 0.71


def a12(group_x: Sequence[float], group_y: Sequence[float]) -> float:
    """ Vargha-Delaney A12: probability that a random trial of group_x
    beats a random trial of group_y, ties counting one half.
    :param group_x: per-trial values of the first group
    :param group_y: per-trial values of the second group
    :return effect size in [0, 1] """
    x = np.asarray(group_x, dtype=float)
    y = np.asarray(group_y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("a12 needs two non-empty groups")
    greater = np.count_nonzero(x[:, None] > y[None, :])
    same = np.count_nonzero(x[:, None] == y[None, :])
    return (greater + 0.5 * same) / (x.size * y.size)


def effect_size_categorization(effect_size: float) -> str:
    """ '+L', '+M', '+S' for large, medium, small advantages, the same with
    '-' for disadvantages and '=' for a negligible difference. """
    if not 0. <= effect_size <= 1.:
        raise ValueError(f"effect size must be in [0, 1], got {effect_size}")
    if effect_size > EFFECT_LARGE:
        return '+L'
    if effect_size > EFFECT_MEDIUM:
        return '+M'
    if effect_size > EFFECT_SMALL:
        return '+S'
    if effect_size < 1 - EFFECT_LARGE:
        return '-L'
    if effect_size < 1 - EFFECT_MEDIUM:
        return '-M'
    if effect_size < 1 - EFFECT_SMALL:
        return '-S'
    return '='


def is_substantial(effect_size: float) -> bool:
    return effect_size >= EFFECT_LARGE or effect_size <= 1 - EFFECT_LARGE


def mann_whitney_p(group_x: Sequence[float],
                   group_y: Sequence[float]) -> float:
    """ Two-sided Mann-Whitney U p-value; 1.0 when all values are equal. """
    x = np.asarray(group_x, dtype=float)
    y = np.asarray(group_y, dtype=float)
    if np.unique(np.concatenate([x, y])).size < 2:
        return 1.
    return float(stats.mannwhitneyu(x, y, alternative='two-sided').pvalue)


def improvement(value: float, baseline: float) -> float:
    """ Percentage gain of value over baseline (nan for a zero baseline). """
    if baseline == 0:
        return float('nan')
    return 100. * (value - baseline) / baseline


def summarize_experiment(results: Mapping[str, Sequence[Mapping]],
                         baseline: str) -> List[Dict]:
    """ One summary row per mode from the final stats of its trials.
    :param results: mode name -> list of per-trial stats dictionaries with
    branches_covered, states_covered and transitions_covered
    :param baseline: mode the others are compared with
    :return rows keyed by SUMMARY_HEADER, baseline first """
    if baseline not in results:
        raise ValueError(f"baseline mode {baseline} has no results")

    def column(mode: str, key: str) -> np.ndarray:
        return np.array([trial[key] for trial in results[mode]], dtype=float)

    base_branches = column(baseline, 'branches_covered')
    base_states = column(baseline, 'transitions_covered')
    modes = [baseline] + [m for m in results if m != baseline]

    rows = []
    for mode in modes:
        branches = column(mode, 'branches_covered')
        states = column(mode, 'states_covered')
        transitions = column(mode, 'transitions_covered')
        effect = a12(branches, base_branches)
        rows.append({
            'mode': mode,
            'trials': len(results[mode]),
            'mean_branches': float(np.mean(branches)),
            'mean_states': float(np.mean(states)),
            'mean_transitions': float(np.mean(transitions)),
            'a12_vs_baseline': effect,
            'a12_states': a12(transitions, base_states),
            'improv_branches': improvement(np.mean(branches),
                                           np.mean(base_branches)),
            'improv_states': improvement(
                np.mean(transitions), np.mean(base_states)),
            'effect': effect_size_categorization(effect),
            'p_value': mann_whitney_p(branches, base_branches),
        })
    return rows


def write_summary_tsv(rows: Sequence[Mapping], path: Path) -> None:
    with Path(path).open('w', newline='') as fh:
        writer = csv.writer(fh, delimiter='\t')
        writer.writerow(SUMMARY_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[key]) for key in SUMMARY_HEADER])
    logger.info("experiment summary written to %s", path)


def read_summary_tsv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline='') as fh:
        return list(csv.DictReader(fh, delimiter='\t'))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)
