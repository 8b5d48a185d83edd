"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines as they complete. The heavyweight data criteria (1, 3, 8) take tens
of seconds each.
"""

import hashlib
import math
import random
import time

import numpy as np

from sectorsphere.angle import EmergentCluster, cluster_drift, emergence_score
from sectorsphere.benchmarks import KEY_SIZE, terasplit_pairs
from sectorsphere.cluster import quick_cluster
from sectorsphere.records import RecordIndex
from sectorsphere.routing import RING_SIZE, RingView
from sectorsphere.scenarios import (
    scenario_angle_synthetic,
    scenario_replication_uniformity,
    scenario_terasort_local,
    scenario_terasort_wan,
)
from sectorsphere.scheduler import check_work_conservation, simulate_schedule, validate_schedule

from oracles import exhaustive_split, linear_scan_successor, random_schedule_instance


def report(number, name, ok, detail=""):
    print("ACCEPTANCE %d %-24s %s %s" % (number, name, "PASS" if ok else "FAIL", detail))
    assert ok, "criterion %d (%s) failed: %s" % (number, name, detail)


def test_criterion_1_terasort_correctness(tmp_path):
    """4 in-process nodes x 25 MB each (1,000,000 records): global sortedness
    and order-independent checksum equality, zero tolerance."""
    started = time.monotonic()
    metrics, ok = scenario_terasort_local(tmp_path, records_total=1_000_000, nodes=4)
    elapsed = time.monotonic() - started
    detail = "records=%d sorted=%s multiset=%s %.1fs" % (
        metrics["output_records"], metrics["sorted"], metrics["multiset_match"], elapsed)
    report(1, "terasort-correctness",
           ok and metrics["output_records"] == 1_000_000 and elapsed < 120.0, detail)


def test_criterion_2_terasplit_oracle_equivalence():
    """50 random labeled datasets of 10^4 records: (threshold, gain) equals the
    exhaustive-threshold oracle exactly; gain within [0, parent entropy]."""
    rng = random.Random(202)
    failures = 0
    for trial in range(50):
        key_space = rng.choice([2**8, 2**16, 2**40, 2**79])
        pairs = sorted((rng.randrange(key_space).to_bytes(KEY_SIZE, "big"),
                        rng.randrange(2)) for _ in range(10_000))
        mine = terasplit_pairs(pairs)
        oracle = exhaustive_split(pairs)
        total0 = mine.left_counts[0] + mine.right_counts[0]
        total1 = mine.left_counts[1] + mine.right_counts[1]
        parent = 0.0
        for c in (total0, total1):
            if c:
                p = c / (total0 + total1)
                parent -= p * math.log2(p)
        if not (mine.threshold == oracle.threshold and mine.gain == oracle.gain
                and mine.left_counts == oracle.left_counts
                and 0.0 <= mine.gain <= parent):
            failures += 1
    report(2, "terasplit-oracle", failures == 0, "datasets=50 mismatches=%d" % failures)


def test_criterion_3_wide_area_scaling(tmp_path):
    """6 nodes / 3 sites with 16/55/71 ms rtts: the sort stays correct and
    costs < 2.5x the zero-latency run."""
    metrics, ok = scenario_terasort_wan(tmp_path)
    detail = "ratio=%.2f wan=%.1fs base=%.1fs valid=%s/%s" % (
        metrics["ratio"], metrics["wan_s"], metrics["baseline_s"],
        metrics["wan_valid"], metrics["baseline_valid"])
    report(3, "wide-area-scaling", ok and metrics["ratio"] < 2.5, detail)


def test_criterion_4_scheduler_properties():
    """500 randomized scheduling instances pass the validator for locality,
    same-file exclusion with the idle exception, and work conservation."""
    rng = random.Random(404)
    bad = 0
    for _ in range(500):
        segments, spes = random_schedule_instance(rng)
        durations = {}

        def duration(segment, spe):
            key = (segment.ordinal, spe.key)
            if key not in durations:
                durations[key] = rng.uniform(0.5, 3.0)
            return durations[key]

        events = simulate_schedule(segments, spes, duration)
        violations = validate_schedule(events, spes)
        violations += check_work_conservation(events, spes, segments)
        assigned = sorted(ev.ordinal for ev in events if ev.kind == "assign")
        if violations or assigned != [s.ordinal for s in segments]:
            bad += 1
    report(4, "scheduler-properties", bad == 0, "instances=500 violating=%d" % bad)


def test_criterion_5_replication(tmp_path):
    """From 1 replica toward target 3 on 8 nodes: exactly 3 within 3
    accelerated daily cycles; placement uniformity at p > 0.01."""
    metrics, ok = scenario_replication_uniformity(tmp_path, files=100, nodes=8,
                                                  target=3, cycles=3)
    detail = "cycles=%s placements=%d p=%.3f" % (
        metrics["cycles_to_target"], metrics["placements"], metrics["p_value"])
    report(5, "replication-uniformity",
           ok and metrics["placements"] == 200 and metrics["p_value"] > 0.01, detail)


def test_criterion_6_chord_lookups():
    """Rings of size 2..64: every lookup matches the linear-scan oracle and
    finger routing stays within ceil(log2 n) + 1 hops."""
    rng = random.Random(606)
    lookups = 0
    mismatches = 0
    hop_violations = 0
    for size in range(2, 65):
        ring = RingView.from_addresses("accept-%d-%02d" % (size, i) for i in range(size))
        bound = math.ceil(math.log2(size)) + 1
        for _ in range(160):
            id = rng.randrange(RING_SIZE)
            start = rng.choice(ring.members).address
            owner, hops = ring.route(start, id)
            lookups += 1
            if owner != linear_scan_successor(ring.members, id):
                mismatches += 1
            if hops > bound:
                hop_violations += 1
    report(6, "chord-lookups", mismatches == 0 and hop_violations == 0,
           "lookups=%d mismatches=%d hop_violations=%d" % (lookups, mismatches,
                                                           hop_violations))


def test_criterion_7_angle_statistics(tmp_path):
    """Exact drift values, the planted-shift flag, and closed-form scores."""
    centers = np.array([[1.5, -2.0], [0.0, 4.0], [3.0, 3.0]])
    drift_self = cluster_drift(centers, centers)
    shifted = cluster_drift(np.array([[1.0, 1.0]]), np.array([[1.0, 4.0]]))

    metrics, scenario_ok = scenario_angle_synthetic(tmp_path)
    flags_ok = metrics["flags"] == "20"  # the 21st window, 0-based index 20

    top = EmergentCluster(center=(2.0, 2.0), variance=1.0, weight=0.9, mix=0.5)
    other = EmergentCluster(center=(80.0, 80.0), variance=1.0, weight=0.4, mix=0.5)
    score_top = emergence_score(np.array([2.0, 2.0]), [top, other])
    unit = EmergentCluster(center=(0.0,), variance=1.0, weight=1.0, mix=1.0)
    score_exp = emergence_score(np.array([math.sqrt(2.0)]), [unit])

    ok = (drift_self == 0.0 and shifted == 9.0 and scenario_ok and flags_ok
          and abs(score_top - 0.9) < 1e-9
          and abs(score_exp - math.exp(-1.0)) < 1e-9)
    report(7, "angle-statistics", ok,
           "drift(M,M)=%g shifted=%g flags=%s score_err=%.1e" % (
               drift_self, shifted, metrics["flags"],
               abs(score_exp - math.exp(-1.0))))


def test_criterion_8_sector_round_trip(tmp_path):
    """100 random files up to 64 MiB: upload, replicate to 3, kill one replica
    holder, download all with byte identity."""
    rng = random.Random(808)
    with quick_cluster(tmp_path / "cluster", 8, replica_target=3, seed=808) as cluster:
        client = cluster.client(entry="node-0")
        digests = {}
        for i in range(100):
            if i == 0:
                size = 64 * 1024 * 1024  # the full payload bound, exactly
            elif i == 1:
                size = 0
            else:
                size = int(math.exp(rng.uniform(0.0, math.log(64 * 1024 * 1024))))
            data = rng.randbytes(size)
            name = "rt/file-%03d.bin" % i
            client.upload(data, name)
            digests[name] = hashlib.sha1(data).hexdigest()
            del data
        cycles = 0
        for cycle in range(3):
            cycles += 1
            cluster.replication_cycle()
            counts = cluster.location_counts(digests)
            if all(c == 3 for c in counts.values()):
                break
        replicas_ok = all(c == 3 for c in cluster.location_counts(digests).values())

        victim = next(a for a in sorted(cluster.nodes)
                      if a != "node-0" and cluster.nodes[a].files)
        cluster.kill(victim)

        mismatches = 0
        for i, (name, digest) in enumerate(sorted(digests.items())):
            dest = tmp_path / "down" / ("%03d.bin" % i)
            client.forget(name)
            client.download(name, dest)
            if hashlib.sha1(dest.read_bytes()).hexdigest() != digest:
                mismatches += 1
            dest.unlink()
    report(8, "sector-round-trip", replicas_ok and mismatches == 0,
           "files=100 replicas3=%s cycles=%d killed=%s mismatches=%d" % (
               replicas_ok, cycles, victim, mismatches))


def test_criterion_9_sphere_semantics(tmp_path):
    """Identity jobs preserve the record multiset; dual runs of a seeded job
    produce identical output multisets."""
    rng = random.Random(909)
    with quick_cluster(tmp_path / "cluster", 3, replica_target=1, seed=909) as cluster:
        client = cluster.client()
        records = [rng.randbytes(rng.randrange(10, 200)) for _ in range(2000)]
        client.upload(b"".join(records), "sem/in.dat",
                      RecordIndex.from_sizes(len(r) for r in records))

        outputs = []
        for _ in range(2):
            from sectorsphere.sphere import SegmentLimits
            out, job_report = client.run_job(["sem/in.dat"], "identity",
                                             limits=SegmentLimits(20_000, 40_000))
            got = []
            for f in out.files:
                got.extend(client.read_records(f.name, 0, f.records))
            outputs.append(sorted(got))
        identity_ok = outputs[0] == sorted(records)
        dual_ok = outputs[0] == outputs[1]
    report(9, "sphere-semantics", identity_ok and dual_ok,
           "identity=%s dual_run=%s records=%d" % (identity_ok, dual_ok, len(records)))
