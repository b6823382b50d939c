"""Evaluation harness: fixed test sets, greedy and sampling decodes, gap tables, grids."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from clusterpdp import baselines, env
from clusterpdp.decoder import ModelConfig, rollout_batch, tour_lengths, with_ablation
from clusterpdp.encoder import encode_batch
from clusterpdp.errors import CheckpointError, InvalidReference, InvalidTour
from clusterpdp.instances import PdpInstance, coords_array, gen_dataset, load_dataset, make_rng, save_dataset
from clusterpdp.numcore import ParamStore
from clusterpdp.trainer import SAMPLE_TAG, TrainConfig, load_checkpoint, pickup_starts, train

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("method", "n", "dist", "decode", "instance_id", "obj", "time_ms", "gap_pct")
DEFAULT_TEST_SIZE = 100
DEFAULT_TEST_SEED = 1234


@dataclass
class TestSet:
    __test__ = False  # not a pytest class

    n: int
    distribution: str
    seed: int
    instances: list[PdpInstance]

    @classmethod
    def generate(cls, n: int, distribution: str, seed: int, count: int = DEFAULT_TEST_SIZE) -> "TestSet":
        return cls(n, distribution, seed, gen_dataset(n, distribution, count, seed))

    @classmethod
    def load(cls, path: str | Path) -> "TestSet":
        instances = load_dataset(path)
        if not instances:
            raise ValueError(f"empty test set {path}")
        first = instances[0]
        if any(i.n != first.n for i in instances):
            raise ValueError("test set mixes instance sizes")
        return cls(first.n, first.distribution, first.seed, instances)

    def save(self, path: str | Path) -> None:
        save_dataset(self.instances, path)

    def __len__(self) -> int:
        return len(self.instances)


@dataclass
class EvalReport:
    method: str
    n: int
    dist: str
    decode: str
    objs: np.ndarray
    times_s: np.ndarray
    orders: list[tuple[int, ...]] = field(repr=False, default_factory=list)
    reference: Optional[np.ndarray] = field(repr=False, default=None)

    @property
    def mean_obj(self) -> float:
        return float(np.mean(self.objs))

    @property
    def mean_time_s(self) -> float:
        return float(np.mean(self.times_s))

    @property
    def gap_pct(self) -> Optional[float]:
        if self.reference is None:
            return None
        return gap(self.mean_obj, float(np.mean(self.reference)))

    def rows(self) -> list[dict]:
        out = []
        for i, (obj, t) in enumerate(zip(self.objs, self.times_s)):
            g = "" if self.reference is None else gap(float(obj), float(self.reference[i]))
            out.append({
                "method": self.method, "n": self.n, "dist": self.dist, "decode": self.decode,
                "instance_id": i, "obj": float(obj), "time_ms": float(t) * 1000.0, "gap_pct": g,
            })
        return out


def gap(obj: float, ref: float) -> float:
    """Relative excess of ``obj`` over ``ref`` in percent, rounded to 2 decimals."""
    if not ref > 0:
        raise InvalidReference(f"reference objective must be positive, got {ref}")
    return round((obj - ref) / ref * 100.0, 2)


def _check_tours(instances: Sequence[PdpInstance], orders: np.ndarray) -> None:
    for inst, order in zip(instances, orders):
        violation = env.validate_tour(inst, order)
        if violation is not None:
            raise InvalidTour(f"model produced an infeasible tour on instance seed {inst.seed}: {violation}")


def eval_greedy(
    params: ParamStore,
    cfg: ModelConfig,
    testset: TestSet,
    multi_start: bool = True,
    method: Optional[str] = None,
    chunk: int = 100,
) -> EvalReport:
    """Greedy decoding; with ``multi_start`` the best tour over all pickup starts is kept."""
    instances = testset.instances
    n = testset.n
    objs, times, best_orders = [], [], []
    with torch.no_grad():
        for i in range(0, len(instances), chunk):
            part = instances[i : i + chunk]
            coords = torch.as_tensor(coords_array(part), dtype=params.dtype)
            starts = pickup_starts(len(part), n) if multi_start else torch.ones(len(part), 1, dtype=torch.long)
            t0 = time.perf_counter()
            orders, _ = rollout_batch(coords, params, cfg, starts, "greedy")
            elapsed = time.perf_counter() - t0
            lengths = tour_lengths(coords, orders)
            best = lengths.argmin(dim=-1)
            chosen = orders[torch.arange(len(part)), best].numpy()
            _check_tours(part, chosen)
            best_orders.extend(tuple(o) for o in chosen.tolist())
            objs.append(np.array([env.tour_length(inst, o) for inst, o in zip(part, chosen)]))
            times.append(np.full(len(part), elapsed / len(part)))
    return EvalReport(
        method or cfg.ablation, n, testset.distribution, "greedy" if multi_start else "greedy1",
        np.concatenate(objs), np.concatenate(times), best_orders,
    )


def sample_stream(seed: int, instance_id: int) -> np.random.Generator:
    """Sample randomness for one test instance.

    Rows of uniforms are drawn off this generator in order, so the stream used
    for ``K`` samples is a prefix of the stream for any larger ``K``.
    """
    return make_rng(seed, SAMPLE_TAG, instance_id)


def eval_sampling(
    params: ParamStore,
    cfg: ModelConfig,
    testset: TestSet,
    samples: int,
    seed: int = 0,
    method: Optional[str] = None,
    chunk: int = 1280,
) -> EvalReport:
    """Best of ``samples`` sampled rollouts per instance, starts cycled over the pickups."""
    if samples < 1:
        raise ValueError("need at least one sample")
    n = testset.n
    objs, times, best_orders = [], [], []
    with torch.no_grad():
        for idx, inst in enumerate(testset.instances):
            rng = sample_stream(seed, idx)
            coords = torch.tensor(inst.coords[None], dtype=params.dtype)
            t0 = time.perf_counter()
            H = encode_batch(coords, params, cfg.encoder)
            best_len, best_order = np.inf, None
            for k0 in range(0, samples, chunk):
                size = min(chunk, samples - k0)
                u = torch.as_tensor(1.0 - rng.random((size, 2 * n)), dtype=params.dtype)[None]
                starts = (torch.arange(k0, k0 + size) % n + 1)[None]
                orders, _ = rollout_batch(coords, params, cfg, starts, "sample", u, H=H)
                lengths = tour_lengths(coords, orders)[0]
                j = int(lengths.argmin())
                if float(lengths[j]) < best_len:
                    best_len, best_order = float(lengths[j]), orders[0, j].tolist()
            times.append(time.perf_counter() - t0)
            _check_tours([inst], np.array([best_order]))
            best_orders.append(tuple(best_order))
            objs.append(env.tour_length(inst, best_order))
    return EvalReport(
        method or cfg.ablation, n, testset.distribution, f"sample{samples}",
        np.array(objs), np.array(times), best_orders,
    )


def oracle_reports(testset: TestSet, methods: Iterable[str] = ("exact", "greedy-nf")) -> list[EvalReport]:
    out = []
    for method in methods:
        objs, times, orders = [], [], []
        for inst in testset.instances:
            t0 = time.perf_counter()
            if method == "exact":
                res = baselines.exact_dp(inst)
                order, length = res.order, res.length
            elif method == "greedy-nf":
                tour = baselines.greedy_nearest_feasible(inst)
                order, length = tour.order, tour.length
            else:
                raise ValueError(f"unknown oracle method {method!r}")
            times.append(time.perf_counter() - t0)
            objs.append(length)
            orders.append(order)
        out.append(EvalReport(method, testset.n, testset.distribution, "exact" if method == "exact" else "greedy",
                              np.array(objs), np.array(times), orders))
    return out


def exact_reference(testset: TestSet) -> Optional[np.ndarray]:
    if 2 * testset.n > baselines.DP_MAX_CUSTOMERS:
        return None
    return np.array([baselines.exact_dp(inst).length for inst in testset.instances])


def write_results(reports: Iterable[EvalReport], path: str | Path, append: bool = True) -> None:
    path = Path(path)
    new = not path.exists() or not append
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(RESULT_COLUMNS))
        if new:
            w.writeheader()
        for rep in reports:
            w.writerows(rep.rows())


def read_results(paths: Iterable[str | Path]) -> list[dict]:
    rows = []
    for p in paths:
        with Path(p).open(newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


@dataclass
class SummaryRow:
    method: str
    n: int
    dist: str
    decode: str
    obj: float
    gap_pct: float
    time_s: float
    count: int
    ref_obj: Optional[float] = None  # exact optimum mean, when known


def summarize(rows: Sequence[dict], references: Optional[dict[tuple[int, str], float]] = None) -> list[SummaryRow]:
    """Mean objective and time per (method, n, dist, decode).

    Gaps are taken against the exact mean of the (n, dist) cell, either from
    ``references`` or from ``exact`` rows in the input; cells without one use
    the best mean among the evaluated methods.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], int(r["n"]), r["dist"], r["decode"]), []).append(r)
    means = {k: float(np.mean([float(r["obj"]) for r in v])) for k, v in groups.items()}
    exact = dict(references or {})
    for (method, n, dist, _), m in means.items():
        if method == "exact":
            exact.setdefault((n, dist), m)
    best: dict[tuple, float] = {}
    for (_, n, dist, _), m in means.items():
        best[(n, dist)] = min(best.get((n, dist), np.inf), m)
    out = []
    for key, m in sorted(means.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0], kv[0][3])):
        method, n, dist, decode = key
        v = groups[key]
        ref = exact.get((n, dist), best[(n, dist)])
        out.append(SummaryRow(method, n, dist, decode, m, gap(m, ref),
                              float(np.mean([float(r["time_ms"]) for r in v])) / 1000.0, len(v),
                              exact.get((n, dist))))
    return out


def format_summary(rows: Sequence[SummaryRow], fmt: str = "md") -> str:
    header = ["method", "n", "dist", "decode", "obj", "gap_pct", "time_s", "count", "exact_obj"]
    cells = [[r.method, str(r.n), r.dist, r.decode, f"{r.obj:.3f}", f"{r.gap_pct:.2f}", f"{r.time_s:.4f}", str(r.count),
              "" if r.ref_obj is None else f"{r.ref_obj:.3f}"]
             for r in rows]
    if fmt == "csv":
        return "\n".join(",".join(c) for c in [header, *cells]) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(c) + " |" for c in cells]
    return "\n".join(lines) + "\n"


@dataclass
class MatrixSpec:
    """A grid of train/test cells.

    ``checkpoints`` maps ``"{ablation}/{dist}/{train_n}"`` to a checkpoint path;
    cells without one are trained when ``train`` overrides are given and
    skipped otherwise. ``test_sizes`` defaults to the training size, which
    makes every other entry a cross-size cell.
    """

    train_sizes: list[int]
    distributions: list[str] = field(default_factory=lambda: ["clustered"])
    ablations: list[str] = field(default_factory=lambda: ["full"])
    decodes: list[str] = field(default_factory=lambda: ["greedy"])
    test_sizes: Optional[list[int]] = None
    checkpoints: dict[str, str] = field(default_factory=dict)
    train: Optional[dict] = None
    test_count: int = DEFAULT_TEST_SIZE
    test_seed: int = DEFAULT_TEST_SEED
    sample_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixSpec":
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "MatrixSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def run_decode(params: ParamStore, cfg: ModelConfig, testset: TestSet, decode: str, method: str, seed: int = 0):
    if decode == "greedy":
        return eval_greedy(params, cfg, testset, True, method)
    if decode == "greedy1":
        return eval_greedy(params, cfg, testset, False, method)
    if decode.startswith("sample"):
        return eval_sampling(params, cfg, testset, int(decode[len("sample"):] or 1280), seed, method)
    raise ValueError(f"unknown decode {decode!r}")


def run_matrix(spec: MatrixSpec, out_dir: str | Path) -> dict:
    """Evaluate every grid cell; writes ``results.csv``, ``report.md`` and ``report.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_sizes = spec.test_sizes or []
    reports: list[EvalReport] = []
    skipped: list[str] = []
    testsets: dict[tuple, TestSet] = {}
    references: dict[tuple, Optional[np.ndarray]] = {}

    def testset_for(n: int, dist: str) -> TestSet:
        key = (n, dist)
        if key not in testsets:
            testsets[key] = TestSet.generate(n, dist, spec.test_seed, spec.test_count)
            references[key] = exact_reference(testsets[key])
        return testsets[key]

    for dist in spec.distributions:
        for ablation in spec.ablations:
            for train_n in spec.train_sizes:
                key = f"{ablation}/{dist}/{train_n}"
                path = spec.checkpoints.get(key)
                params = cfg = None
                if path is not None:
                    try:
                        params, cfg = load_checkpoint(path)
                    except CheckpointError as exc:
                        log.warning("skipping %s: %s", key, exc)
                elif spec.train is not None:
                    tc = TrainConfig.from_dict(dict(spec.train, n=train_n, distribution=dist, ablation=ablation))
                    result = train(tc, out / "train" / key.replace("/", "_"))
                    params, cfg = result.params, result.model
                if params is None:
                    skipped.append(key)
                    continue
                cfg = with_ablation(cfg, ablation)
                for test_n in [train_n, *[t for t in test_sizes if t != train_n]]:
                    ts = testset_for(test_n, dist)
                    method = ablation if test_n == train_n else f"{ablation}@n{train_n}"
                    for decode in spec.decodes:
                        rep = run_decode(params, cfg, ts, decode, method, spec.sample_seed)
                        rep.reference = references[(test_n, dist)]
                        reports.append(rep)

    write_results(reports, out / "results.csv", append=False)
    exact_means = {k: float(np.mean(v)) for k, v in references.items() if v is not None}
    summary = summarize(read_results([out / "results.csv"]), exact_means)
    md = format_summary(summary, "md")
    if skipped:
        md += "\nSkipped cells (no checkpoint): " + ", ".join(skipped) + "\n"
    (out / "report.md").write_text(md)
    (out / "report.csv").write_text(format_summary(summary, "csv"))
    return {"reports": reports, "skipped": skipped, "summary": summary}
