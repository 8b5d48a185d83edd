"""Independent oracles shared by the unit and acceptance suites."""

import math
import random

from sectorsphere.benchmarks import SplitResult, midpoint_key
from sectorsphere.scheduler import SpeHandle
from sectorsphere.sphere import DataSegment


def linear_scan_successor(members, id):
    candidates = [m for m in members if m.id >= id]
    if candidates:
        return min(candidates, key=lambda m: m.id)
    return min(members, key=lambda m: m.id)


def exhaustive_split(pairs):
    """Evaluate the information gain of every candidate threshold from exact
    integer class counts; bit-identical arithmetic, independent enumeration."""
    pairs = list(pairs)
    n = len(pairs)
    t0 = sum(1 for _, label in pairs if label == 0)
    t1 = n - t0
    if t0 == 0 or t1 == 0:
        return SplitResult(None, 0.0, (0, 0), (t0, t1))

    def h(c0, c1):
        total = c0 + c1
        out = 0.0
        for c in (c0, c1):
            if c:
                p = c / total
                out -= p * math.log2(p)
        return out

    # prefix class counts per record position, then one gain per key boundary
    prefix0 = [0] * (n + 1)
    prefix1 = [0] * (n + 1)
    for i, (_, label) in enumerate(pairs):
        prefix0[i + 1] = prefix0[i] + (1 - label)
        prefix1[i + 1] = prefix1[i] + label
    parent = h(t0, t1)
    best = None
    for i in range(n - 1):
        if pairs[i][0] == pairs[i + 1][0]:
            continue  # not a key boundary
        l0, l1 = prefix0[i + 1], prefix1[i + 1]
        gain = parent - ((l0 + l1) / n) * h(l0, l1) \
            - ((n - l0 - l1) / n) * h(t0 - l0, t1 - l1)
        if best is None or gain > best[1]:
            best = (midpoint_key(pairs[i][0], pairs[i + 1][0]), gain,
                    (l0, l1), (t0 - l0, t1 - l1))
    if best is None:
        return SplitResult(None, 0.0, (0, 0), (t0, t1))
    return SplitResult(best[0], max(best[1], 0.0), best[2], best[3])


def random_schedule_instance(rng: random.Random):
    nodes = ["node%d" % i for i in range(rng.randint(1, 4))]
    segments = []
    for f in range(rng.randint(1, 6)):
        locations = tuple(rng.sample(nodes, rng.randint(1, len(nodes))))
        for _ in range(rng.randint(1, 5)):
            segments.append(DataSegment(file="file%d" % f, offset=len(segments),
                                        rows=1, ordinal=len(segments),
                                        locations=locations))
    spes = [SpeHandle(n, slot) for n in nodes for slot in range(rng.randint(1, 2))]
    return segments, spes
