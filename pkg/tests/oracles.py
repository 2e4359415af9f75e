"""Independent reference implementations used as test oracles.

Each function here recomputes a quantity the package produces, using a
different construction (pure Python, exhaustive enumeration, high-precision
accumulation) so the two sides can disagree when either is wrong.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple


def fnv1a32_ref(data: bytes, seed: int = 0) -> int:
    """FNV-1a re-implemented from its published constants."""
    h = (2166136261 ^ seed) % 2 ** 32
    for byte in data:
        h = ((h ^ byte) * 16777619) % 2 ** 32
    return h


def signed_bucket_ref(token: str, buckets: int, seed: int) -> Tuple[int, int]:
    h = fnv1a32_ref(token.encode("utf-8"), seed)
    return h % buckets, (1 if h < 2 ** 31 else -1)


def byte_entropy_histogram_ref(data: bytes, window: int = 2048,
                               step: int = 1024,
                               min_partial: int = 256) -> List[float]:
    """Pure-Python windowed entropy histogram with fsum accumulation."""
    grid = [[0 for _ in range(16)] for _ in range(16)]
    n = len(data)
    windows = []
    if n == 0:
        pass
    elif n < window:
        windows = [(0, n)]
    else:
        i = 0
        while i + window <= n:
            windows.append((i, i + window))
            i += step
        if i < n and n - i >= min_partial:
            windows.append((i, n))
    for start, stop in windows:
        counts = [0] * 16
        for byte in data[start:stop]:
            counts[byte >> 4] += 1
        total = stop - start
        h_bits = -math.fsum(
            (c / total) * math.log2(c / total) for c in counts if c)
        row = min(int(h_bits * 4), 15)
        for col in range(16):
            grid[row][col] += counts[col]
    total = sum(map(sum, grid))
    if total == 0:
        return [0.0] * 256
    return [grid[r][c] / total for r in range(16) for c in range(16)]


def skipgram_counter_ref(data: bytes, n: int, k: int) -> Counter:
    """Exhaustive index-tuple enumeration filtered by the gap constraint.

    Iterates the full combination space for short inputs and a pruned but
    still exhaustive nested scan for longer ones (identical result set).
    """
    counts: Counter = Counter()
    length = len(data)
    if length <= 24 or n != 3:
        for idx in itertools.combinations(range(length), n):
            if all(idx[j + 1] - idx[j] - 1 <= k for j in range(n - 1)):
                counts[tuple(data[i] for i in idx)] += 1
        return counts
    for i in range(length):
        for j in range(i + 1, min(i + k + 2, length)):
            for l in range(j + 1, min(j + k + 2, length)):
                counts[(data[i], data[j], data[l])] += 1
    return counts


def skipgram_vector_ref(data: bytes, n: int, k: int, buckets: int,
                        seed: int) -> List[int]:
    out = [0] * buckets
    for tup, count in skipgram_counter_ref(data, n, k).items():
        out[fnv1a32_ref(bytes(tup), seed) % buckets] += count
    return out


def string_scan_ref(data: bytes, min_len: int = 5) -> List[Tuple[int, str]]:
    """Printable-run scanner written as an explicit state machine."""
    runs = []
    start = None
    for i, byte in enumerate(data):
        if 0x20 <= byte <= 0x7E:
            if start is None:
                start = i
        else:
            if start is not None and i - start >= min_len:
                runs.append((start, data[start:i].decode("ascii")))
            start = None
    if start is not None and len(data) - start >= min_len:
        runs.append((start, data[start:].decode("ascii")))
    return runs


def tree_eval_ref(model_dict: Dict, x: Sequence[float]) -> float:
    """Recursive node-by-node evaluation over the serialized model dict."""

    def eval_tree(nodes, index):
        node = nodes[index]
        if "v" in node:
            return node["v"]
        value = x[node["f"]]
        if value != value:   # NaN
            branch = node["l"] if node.get("d", "left") == "left" else node["r"]
        else:
            branch = node["l"] if value <= node["t"] else node["r"]
        return eval_tree(nodes, branch)

    raw = model_dict["base_score"] + math.fsum(
        eval_tree(nodes, 0) for nodes in model_dict["trees"])
    return 1.0 / (1.0 + math.exp(-raw))


def best_split_1d_ref(xs: Sequence[float], gs: Sequence[float],
                      hs: Sequence[float], lam: float,
                      min_leaf: int = 1) -> Optional[float]:
    """Exhaustive best-gain threshold over all midpoints of a 1-D feature."""
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    uniq = sorted(set(xs))
    total_g = math.fsum(gs)
    total_h = math.fsum(hs)
    parent = total_g ** 2 / (total_h + lam)
    best_gain, best_thr = -math.inf, None
    for a, b in zip(uniq, uniq[1:]):
        thr = (a + b) / 2
        left = [i for i in order if xs[i] <= thr]
        right = [i for i in order if xs[i] > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        gl = math.fsum(gs[i] for i in left)
        hl = math.fsum(hs[i] for i in left)
        gr, hr = total_g - gl, total_h - hl
        gain = gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - parent
        if gain > best_gain:
            best_gain, best_thr = gain, thr
    return best_thr


def l1_nearest_ref(stored: List[Sequence[float]],
                   probe: Sequence[float]) -> float:
    best = math.inf
    for row in stored:
        dist = math.fsum(abs(a - b) for a, b in zip(row, probe))
        best = min(best, dist)
    return best


def auc_ranksum_ref(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    pos = [i for i, y in enumerate(labels) if y == 1]
    n1, n0 = len(pos), len(labels) - len(pos)
    rank_sum = math.fsum(ranks[i] for i in pos)
    return (rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0)


def shift_oracle_sections(sections, grow: int):
    """Expected section table after a header extension of ``grow`` bytes."""
    return [(s.name, s.virtual_size, s.virtual_address, s.size_of_raw_data,
             s.pointer_to_raw_data + (grow if s.size_of_raw_data else 0),
             s.characteristics)
            for s in sections]
