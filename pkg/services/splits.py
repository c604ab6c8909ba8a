"""
splits.py

Dataset splits stratified by class. Each tile is filed under its rarest
positive class. An integer table (split x class) then fixes how many tiles
of each class every split gets, each cell at the floor or ceiling of its
exact share, so single-label data lands within one tile of the
proportional count. With several labels per tile a swap pass between
splits evens out the classes the table did not see.
"""

import logging
from collections import deque

import numpy as np

from utils.errors import ConfigError
from utils.seeding import numpy_rng

logger = logging.getLogger('omnifuse.data')

REMAINDER = '__rest__'


def split_sizes(n_tiles, fractions):
    """Tiles per split: floor of the exact share, leftovers by largest remainder."""
    names = list(fractions)
    exact = np.array([fractions[name] * n_tiles for name in names])
    sizes = np.floor(exact + 1e-9).astype(int)
    budget = int(round(min(1.0, sum(fractions.values())) * n_tiles + 1e-9)) - sizes.sum()
    order = sorted(range(len(names)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:max(0, budget)]:
        sizes[i] += 1
    return dict(zip(names, sizes.tolist()))


def primary_classes(labels):
    """Rarest positive class per tile (ties to the lower index); tiles without positives get K."""
    counts = labels.sum(axis=0)
    k = labels.shape[1]
    key = np.where(labels > 0, counts[None, :] * k + np.arange(k)[None, :], np.iinfo(np.int64).max)
    return np.where(labels.any(axis=1), key.argmin(axis=1), k)


# --- Table rounding ---

def _raise_along_path(table, base, row_need, col, can_raise):
    """
    Adds one unit to column `col`. When every row that may take it is full,
    a unit is moved out of that row into another column's cell elsewhere;
    breadth-first over rows. Returns False when no path exists.
    """
    n_rows, n_cols = table.shape
    came_from_col = {}
    came_from_row = {}
    queue = deque([col])
    seen_cols = {col}
    while queue:
        c = queue.popleft()
        for s in range(n_rows):
            if s in came_from_col or not can_raise(s, c):
                continue
            came_from_col[s] = c
            if row_need[s] > 0:
                row_need[s] -= 1
                while True:
                    c = came_from_col[s]
                    table[s, c] += 1
                    if c == col:
                        return True
                    s = came_from_row[c]
                    table[s, c] -= 1
            for c2 in range(n_cols):
                if c2 not in seen_cols and table[s, c2] > base[s, c2]:
                    seen_cols.add(c2)
                    came_from_row[c2] = s
                    queue.append(c2)
    return False


def round_table(exact, row_totals):
    """
    Integer table whose cells are the floor or ceiling of `exact`, whose rows
    sum to `row_totals` and whose columns keep the (integral) column sums of
    `exact`. Falls back to relaxing the cell bound only where no such table
    exists.
    """
    base = np.floor(exact + 1e-9).astype(np.int64)
    table = base.copy()
    row_need = np.asarray(row_totals, dtype=np.int64) - base.sum(axis=1)
    col_need = np.rint(exact.sum(axis=0)).astype(np.int64) - base.sum(axis=0)
    fractional = exact - base > 1e-9

    def strict(s, c):
        return fractional[s, c] and table[s, c] == base[s, c]

    def relaxed(s, c):
        return True

    for can_raise in (strict, relaxed):
        progress = True
        while progress:
            progress = False
            for c in range(table.shape[1]):
                while col_need[c] > 0 and _raise_along_path(table, base, row_need, c, can_raise):
                    col_need[c] -= 1
                    progress = True
    if (col_need > 0).any():
        raise ConfigError("Split sizes do not add up to the number of tiles.")
    return table


# --- Multilabel balancing ---

def balance_labels(split_of, labels, shares, strata, max_swaps):
    """
    Swaps pairs of same-stratum tiles between splits while the swap lowers
    the squared distance of every split's class counts from its share.
    Tiles with identical labels never swap. Works in place on `split_of`.
    """
    n_splits = len(shares)
    labels = labels.astype(np.float64)
    want = np.asarray(shares)[:, None] * labels.sum(axis=0)[None, :]
    counts = np.stack([labels[split_of == s].sum(axis=0) for s in range(n_splits)])
    squared = (labels ** 2).sum(axis=1)
    swaps = 0
    while swaps < max_swaps:
        dev = counts - want
        best, pick = -1e-9, None
        for k in np.unique(strata):
            in_k = strata == k
            members = [np.flatnonzero(in_k & (split_of == s)) for s in range(n_splits)]
            for a in range(n_splits):
                for b in range(a + 1, n_splits):
                    rows_a, rows_b = members[a], members[b]
                    if rows_a.size == 0 or rows_b.size == 0:
                        continue
                    la, lb = labels[rows_a], labels[rows_b]
                    g = dev[a] - dev[b]
                    cross = squared[rows_a][:, None] + squared[rows_b][None, :] - 2 * la @ lb.T
                    delta = -2 * (la @ g)[:, None] + 2 * (lb @ g)[None, :] + 2 * cross
                    i, j = np.unravel_index(int(delta.argmin()), delta.shape)
                    if delta[i, j] < best:
                        best, pick = float(delta[i, j]), (rows_a[i], a, rows_b[j], b)
        if pick is None:
            break
        i, a, j, b = pick
        moved = labels[i] - labels[j]
        counts[a] -= moved
        counts[b] += moved
        split_of[i], split_of[j] = b, a
        swaps += 1
    return swaps


# --- Assignment ---

def stratified_split(manifest, fractions, seed, labels=None, tile_ids=None):
    """
    Assigns tiles to splits. `labels` is an (N, K) binary matrix aligned with
    `tile_ids` (default: every manifest tile); without labels the split is
    a seeded proportional one. Returns the manifest with `splits` replaced
    by the new assignment. Fractions may sum to less than one; the rest of
    the tiles stay unassigned.
    """
    tile_ids = list(manifest.tile_ids if tile_ids is None else tile_ids)
    assignment = assign_splits(tile_ids, fractions, seed, labels)
    manifest.splits = assignment
    manifest.validate()
    return manifest


def assign_splits(tile_ids, fractions, seed, labels=None):
    if not fractions or any(v <= 0 for v in fractions.values()):
        raise ConfigError("Every split fraction must be positive.")
    total = sum(fractions.values())
    if total > 1 + 1e-9:
        raise ConfigError(f"Split fractions sum to {total}, more than 1.")
    if len(tile_ids) < len(fractions):
        raise ConfigError(f"Cannot build {len(fractions)} splits from {len(tile_ids)} tiles.")

    fractions = dict(fractions)
    if total < 1 - 1e-9:
        fractions[REMAINDER] = 1 - total
    names = list(fractions)
    n = len(tile_ids)
    capacity = split_sizes(n, fractions)
    shares = np.array([fractions[name] for name in names]) / sum(fractions.values())

    if labels is None:
        strata = np.zeros(n, dtype=np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 2 or labels.shape[0] != n:
            raise ConfigError(f"Got {labels.shape[0]} label rows for {n} tiles.")
        strata = primary_classes(labels)

    sizes = np.bincount(strata)
    table = round_table(shares[:, None] * sizes[None, :], [capacity[name] for name in names])

    order = numpy_rng(seed, 'split').permutation(n)
    split_of = np.empty(n, dtype=np.int64)
    for k in range(len(sizes)):
        members = order[strata[order] == k]
        split_of[members] = np.repeat(np.arange(len(names)), table[:, k])

    if labels is not None:
        swaps = balance_labels(split_of, labels, shares, strata, max_swaps=n)
        if swaps:
            logger.debug(f"Swapped {swaps} tile pair(s) to balance co-occurring classes.")

    result = {name: [tile_ids[i] for i in np.flatnonzero(split_of == s)]
              for s, name in enumerate(names) if name != REMAINDER}
    logger.info("Split sizes: " + ", ".join(f"{name}={len(members)}" for name, members in result.items()))
    return result


def label_subset(tile_ids, fraction, seed, labels=None):
    """Stratified subset holding `fraction` of `tile_ids` (the labelled share for fine-tuning)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"Label fraction must lie in (0, 1], got {fraction}.")
    if fraction == 1:
        return list(tile_ids)
    if int(np.floor(fraction * len(tile_ids) + 1e-9)) < 1:
        raise ConfigError(f"Label fraction {fraction} of {len(tile_ids)} tiles selects no tile.")
    return assign_splits(list(tile_ids), {'labelled': fraction}, seed, labels)['labelled']
