"""Dataset pipeline and persistence.

Pools and datasets are JSON-lines: line 1 is a header carrying the schema
tag, the record kind, a record count (for truncation checks), and caller
metadata; every following line is one record. Reals are written with 17
significant digits so float64 values round-trip bit-exactly and re-running
a seeded pipeline reproduces files byte for byte. Observations and
communication matrices are rebuilt from stored positions on load unless the
dataset was saved dense.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    InfeasibleCase,
    MapfGnnError,
    ParseError,
    PlanInfeasible,
    SolverTimeout,
    VersionMismatch,
)
from .executor import MetricsReport, Trajectory
from .expert import Plan, cbs_solve, validate_plan
from .gridworld import (
    DEFAULT_COMM_RADIUS,
    DEFAULT_FOV_RADIUS,
    Case,
    GridMap,
    build_gso,
    generate_case,
    generate_map,
    team_observations,
)
from .policy import PolicyNetwork
from .training import Dataset, Sample

SCHEMA_VERSION = "mapfgnn-files-v1"

# seed-stream offsets so map, case, and split draws never collide
_MAP_STREAM = 32452843
_CASE_STREAM = 49979687


# ---------------------------------------------------------------------------
# canonical JSON: fixed key order comes from the caller, floats are printed
# with 17 significant digits (exact for float64), separators are compact


def format_real(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"cannot store non-finite real {x!r}")
    return format(float(x), ".17g")


def _dump_value(value, out: list) -> None:
    if value is None:
        out.append("null")
    elif isinstance(value, bool):
        out.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        out.append(format_real(value))
    elif isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _dump_value(item, out)
        out.append("]")
    elif isinstance(value, np.ndarray):
        _dump_value(value.tolist(), out)
    elif isinstance(value, dict):
        out.append("{")
        for i, (key, item) in enumerate(value.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _dump_value(item, out)
        out.append("}")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_canonical(value) -> str:
    out: list = []
    _dump_value(value, out)
    return "".join(out)


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file and rename so readers never see partials."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_line(line: str, path: str, lineno: int) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, line=lineno)
    if not isinstance(doc, dict):
        raise ParseError("expected a JSON object", path=path, line=lineno)
    return doc


def _require(doc: dict, key: str, path: str, lineno: int):
    if key not in doc:
        raise ParseError(f"missing field {key!r}", path=path, line=lineno)
    return doc[key]


def _check_header(doc: dict, kind: str, path: str) -> None:
    tag = doc.get("schema")
    if tag != SCHEMA_VERSION:
        raise VersionMismatch(
            f"{path}: schema tag {tag!r}, expected {SCHEMA_VERSION!r}"
        )
    if doc.get("kind") != kind:
        raise ParseError(
            f"expected kind {kind!r}, found {doc.get('kind')!r}", path=path, line=1
        )


def _write_jsonl(path: str, kind: str, records: list, header_extra=None, meta=None):
    header = {"schema": SCHEMA_VERSION, "kind": kind, "count": len(records)}
    if header_extra:
        header.update(header_extra)
    header["meta"] = dict(meta) if meta else {}
    lines = [dumps_canonical(header)]
    lines.extend(dumps_canonical(rec) for rec in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_jsonl(path: str, kind: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path=path)
    if not lines:
        raise ParseError("empty file", path=path, line=1)
    header = _parse_line(lines[0], path, 1)
    _check_header(header, kind, path)
    records = [
        (_parse_line(line, path, i + 2), i + 2)
        for i, line in enumerate(lines[1:])
        if line.strip()
    ]
    count = header.get("count")
    if count is not None and len(records) != count:
        raise ParseError(
            f"header promises {count} records, found {len(records)}",
            path=path,
            line=len(lines),
        )
    return header, records


# ---------------------------------------------------------------------------
# domain record types


@dataclass(frozen=True)
class CaseRecord:
    """A case plus its expert solution and solver metadata."""

    case_id: str
    case: Case
    plan: Plan | None = None
    timed_out: bool = False
    runtime_s: float | None = None

    @property
    def map_id(self) -> str:
        return self.case.map_id


@dataclass
class PoolStats:
    """Per-item outcomes of a generation pipeline run."""

    requested: int = 0
    stored: int = 0
    duplicates: int = 0
    infeasible: int = 0
    timeouts: int = 0
    unsolvable: int = 0

    def as_dict(self) -> dict:
        return {
            "requested": self.requested,
            "stored": self.stored,
            "duplicates": self.duplicates,
            "infeasible": self.infeasible,
            "timeouts": self.timeouts,
            "unsolvable": self.unsolvable,
        }


# ---------------------------------------------------------------------------
# maps


def _cells_to_lists(cells) -> list:
    return [[int(x), int(y)] for x, y in cells]


def _cells_from_lists(items, path, lineno) -> tuple:
    try:
        return tuple((int(x), int(y)) for x, y in items)
    except (TypeError, ValueError):
        raise ParseError("malformed cell list", path=path, line=lineno)


def save_maps(path: str, maps: dict[str, GridMap], meta=None) -> None:
    records = []
    for map_id, grid in maps.items():
        records.append(
            {
                "map_id": map_id,
                "width": grid.width,
                "height": grid.height,
                "density": grid.density,
                "seed": grid.seed,
                "obstacles": _cells_to_lists(sorted(grid.obstacles)),
            }
        )
    _write_jsonl(path, "maps", records, meta=meta)


def load_maps(path: str) -> dict[str, GridMap]:
    _, records = _read_jsonl(path, "maps")
    maps: dict[str, GridMap] = {}
    for doc, lineno in records:
        map_id = _require(doc, "map_id", path, lineno)
        if map_id in maps:
            raise ParseError(f"duplicate map_id {map_id!r}", path=path, line=lineno)
        maps[map_id] = GridMap(
            width=int(_require(doc, "width", path, lineno)),
            height=int(_require(doc, "height", path, lineno)),
            obstacles=frozenset(
                _cells_from_lists(_require(doc, "obstacles", path, lineno), path, lineno)
            ),
            density=float(_require(doc, "density", path, lineno)),
            seed=int(_require(doc, "seed", path, lineno)),
        )
    return maps


# ---------------------------------------------------------------------------
# cases


def _plan_to_doc(plan: Plan) -> dict:
    return {
        "paths": [_cells_to_lists(p) for p in plan.paths],
        "flowtime": plan.flowtime,
        "makespan": plan.makespan,
    }


def _plan_from_doc(doc: dict, path: str, lineno: int) -> Plan:
    paths = tuple(
        _cells_from_lists(p, path, lineno) for p in _require(doc, "paths", path, lineno)
    )
    plan = Plan(
        paths=paths,
        flowtime=int(_require(doc, "flowtime", path, lineno)),
        makespan=int(_require(doc, "makespan", path, lineno)),
    )
    if plan.makespan != max(len(p) - 1 for p in paths):
        raise ParseError("makespan does not match paths", path=path, line=lineno)
    if plan.flowtime != sum(len(p) - 1 for p in paths):
        raise ParseError("flowtime does not match paths", path=path, line=lineno)
    return plan


def save_cases(path: str, records: list[CaseRecord], meta=None) -> None:
    docs = []
    for rec in records:
        docs.append(
            {
                "case_id": rec.case_id,
                "map_id": rec.case.map_id,
                "starts": _cells_to_lists(rec.case.starts),
                "goals": _cells_to_lists(rec.case.goals),
                "plan": _plan_to_doc(rec.plan) if rec.plan is not None else None,
                "timed_out": rec.timed_out,
                "runtime_s": rec.runtime_s,
            }
        )
    _write_jsonl(path, "cases", docs, meta=meta)


def load_cases(path: str, maps: dict[str, GridMap]) -> list[CaseRecord]:
    """Load case records; every stored plan is re-validated against its map."""
    _, records = _read_jsonl(path, "cases")
    out = []
    for doc, lineno in records:
        map_id = _require(doc, "map_id", path, lineno)
        if map_id not in maps:
            raise ParseError(f"unknown map_id {map_id!r}", path=path, line=lineno)
        case = Case(
            map_id=map_id,
            starts=_cells_from_lists(_require(doc, "starts", path, lineno), path, lineno),
            goals=_cells_from_lists(_require(doc, "goals", path, lineno), path, lineno),
        )
        plan_doc = _require(doc, "plan", path, lineno)
        plan = None
        if plan_doc is not None:
            plan = _plan_from_doc(plan_doc, path, lineno)
            try:
                validate_plan(maps[map_id], case, plan)
            except ValueError as exc:
                raise ParseError(f"stored plan invalid: {exc}", path=path, line=lineno)
        runtime = doc.get("runtime_s")
        out.append(
            CaseRecord(
                case_id=_require(doc, "case_id", path, lineno),
                case=case,
                plan=plan,
                timed_out=bool(doc.get("timed_out", False)),
                runtime_s=None if runtime is None else float(runtime),
            )
        )
    return out


# ---------------------------------------------------------------------------
# datasets (per-timestep samples)


def save_dataset(
    path: str,
    dataset: Dataset,
    fov_radius: int = DEFAULT_FOV_RADIUS,
    comm_radius: float = DEFAULT_COMM_RADIUS,
    dense: bool = False,
    meta=None,
) -> None:
    """Samples as geometry (positions, goals, labels); dense adds tensors."""
    docs = []
    for s in dataset.samples:
        doc = {
            "case_id": s.case_id,
            "map_id": s.map_id,
            "t": s.t,
            "positions": _cells_to_lists(s.positions),
            "goals": _cells_to_lists(s.goals),
            "labels": [int(a) for a in s.labels],
        }
        if dense:
            doc["obs"] = s.obs.astype(int).tolist()
            doc["gso"] = s.gso.tolist()
        docs.append(doc)
    extra = {
        "split": dataset.split,
        "fov_radius": int(fov_radius),
        "comm_radius": float(comm_radius),
        "dense": bool(dense),
    }
    _write_jsonl(path, "dataset", docs, header_extra=extra, meta=meta)


def load_dataset(path: str, maps: dict[str, GridMap]) -> Dataset:
    header, records = _read_jsonl(path, "dataset")
    fov = int(header.get("fov_radius", DEFAULT_FOV_RADIUS))
    comm = float(header.get("comm_radius", DEFAULT_COMM_RADIUS))
    dense = bool(header.get("dense", False))
    samples = []
    for doc, lineno in records:
        map_id = _require(doc, "map_id", path, lineno)
        if map_id not in maps:
            raise ParseError(f"unknown map_id {map_id!r}", path=path, line=lineno)
        positions = _cells_from_lists(_require(doc, "positions", path, lineno), path, lineno)
        goals = _cells_from_lists(_require(doc, "goals", path, lineno), path, lineno)
        labels = np.asarray(_require(doc, "labels", path, lineno), dtype=np.int64)
        if labels.size != len(positions):
            raise ParseError("label count != robot count", path=path, line=lineno)
        if dense:
            obs = np.asarray(doc["obs"], dtype=np.uint8)
            gso = np.asarray(doc["gso"], dtype=np.float64)
        else:
            obs = team_observations(maps[map_id], positions, goals, fov).astype(np.uint8)
            gso = build_gso(positions, comm).matrix
        samples.append(
            Sample(
                case_id=_require(doc, "case_id", path, lineno),
                t=int(_require(doc, "t", path, lineno)),
                obs=obs,
                gso=gso,
                labels=labels,
                map_id=map_id,
                positions=positions,
                goals=goals,
            )
        )
    return Dataset(split=str(header.get("split", "train")), samples=samples)


# ---------------------------------------------------------------------------
# weights, traces


def save_weights(path: str, net: PolicyNetwork, meta=None) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": "weights",
        "meta": dict(meta) if meta else {},
        "model": net.to_jsonable(),
    }
    atomic_write_text(path, dumps_canonical(doc) + "\n")


def load_weights(path: str) -> PolicyNetwork:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path=path)
    doc = _parse_line(text, path, 1)
    _check_header(doc, "weights", path)
    return PolicyNetwork.from_jsonable(_require(doc, "model", path, 1))


def save_trace(path: str, traj: Trajectory, case_id: str = "", meta=None) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": "trace",
        "meta": dict(meta) if meta else {},
        "case_id": case_id,
        "map_id": traj.case.map_id,
        "goals": _cells_to_lists(traj.case.goals),
        "t_max": traj.t_max,
        "success": traj.success,
        "robot_success": list(traj.robot_success),
        "arrivals": list(traj.arrivals),
        "positions": [_cells_to_lists(step) for step in traj.positions],
        "shielded": [[int(b) for b in step] for step in traj.shielded],
    }
    atomic_write_text(path, dumps_canonical(doc) + "\n")


def load_trace(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path=path)
    doc = _parse_line(text, path, 1)
    _check_header(doc, "trace", path)
    for key in ("case_id", "map_id", "positions", "success", "arrivals"):
        _require(doc, key, path, 1)
    return doc


# ---------------------------------------------------------------------------
# CSV artifacts: line 1 is a '#' comment holding the schema header, then a
# regular CSV table; reals use the same 17-significant-digit format


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        # CSV cells may be missing (e.g. no validation split): leave empty
        return format_real(value) if np.isfinite(value) else ""
    return str(value)


def write_csv(path: str, kind: str, fieldnames: list[str], rows: list[dict], meta=None):
    header = {"schema": SCHEMA_VERSION, "kind": kind, "meta": dict(meta) if meta else {}}
    buf = io.StringIO()
    buf.write("# " + dumps_canonical(header) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([_format_cell(row.get(name)) for name in fieldnames])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str, kind: str | None = None):
    """Returns (header dict, fieldnames, rows as string dicts)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path=path)
    if not lines or not lines[0].startswith("# "):
        raise ParseError("missing schema comment line", path=path, line=1)
    header = _parse_line(lines[0][2:], path, 1)
    if kind is not None:
        _check_header(header, kind, path)
    elif header.get("schema") != SCHEMA_VERSION:
        raise VersionMismatch(
            f"{path}: schema tag {header.get('schema')!r}, expected {SCHEMA_VERSION!r}"
        )
    body = list(csv.reader(lines[1:]))
    if not body:
        raise ParseError("missing CSV column header", path=path, line=2)
    fieldnames = body[0]
    rows = []
    for i, cells in enumerate(body[1:]):
        if len(cells) != len(fieldnames):
            raise ParseError(
                f"row has {len(cells)} cells, expected {len(fieldnames)}",
                path=path,
                line=i + 3,
            )
        rows.append(dict(zip(fieldnames, cells)))
    return header, fieldnames, rows


REPORT_FIELDS = [
    "label",
    "num_cases",
    "num_success",
    "alpha",
    "flowtime",
    "expert_flowtime",
    "delta_ft",
]

HIST_FIELDS = ["label", "robots_at_goal", "case_count", "proportion"]

TRAINING_LOG_FIELDS = [
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "valid_loss",
    "valid_acc",
    "train_size",
    "oe_rolled",
    "oe_failed",
    "oe_repaired",
    "oe_added",
]


def save_report_csv(path: str, reports: list[tuple[str, MetricsReport]], meta=None):
    rows = []
    for label, rep in reports:
        rows.append(
            {
                "label": label,
                "num_cases": rep.num_cases,
                "num_success": rep.num_success,
                "alpha": rep.alpha,
                "flowtime": rep.flowtime,
                "expert_flowtime": rep.expert_flowtime,
                "delta_ft": rep.delta_ft,
            }
        )
    write_csv(path, "report", REPORT_FIELDS, rows, meta=meta)


def save_hist_csv(path: str, reports: list[tuple[str, MetricsReport]], meta=None):
    rows = []
    for label, rep in reports:
        for robots_at_goal in sorted(rep.histogram):
            count = rep.histogram[robots_at_goal]
            rows.append(
                {
                    "label": label,
                    "robots_at_goal": robots_at_goal,
                    "case_count": count,
                    "proportion": count / rep.num_cases,
                }
            )
    write_csv(path, "hist", HIST_FIELDS, rows, meta=meta)


def save_training_log(path: str, history: list[dict], meta=None):
    write_csv(path, "training-log", TRAINING_LOG_FIELDS, list(history), meta=meta)


def write_long_csv(in_path: str, out_path: str, id_fields: list[str], meta=None):
    """Wide CSV -> long (id..., metric, value) rows, one per value column."""
    header, fieldnames, rows = read_csv(in_path)
    missing = [f for f in id_fields if f not in fieldnames]
    if missing:
        raise ParseError(f"id fields {missing} not in columns", path=in_path, line=2)
    value_fields = [f for f in fieldnames if f not in id_fields]
    out_rows = []
    for row in rows:
        for metric in value_fields:
            out = {f: row[f] for f in id_fields}
            out["metric"] = metric
            out["value"] = row[metric]
            out_rows.append(out)
    merged = dict(header.get("meta", {}))
    if meta:
        merged.update(meta)
    write_csv(out_path, "long", id_fields + ["metric", "value"], out_rows, meta=merged)


# ---------------------------------------------------------------------------
# generation pipeline


def generate_map_pool(
    num_maps: int, width: int, height: int, density: float, seed: int
) -> dict[str, GridMap]:
    """Seeded map pool keyed m0000, m0001, ... in generation order."""
    rng = np.random.default_rng([seed, _MAP_STREAM])
    maps: dict[str, GridMap] = {}
    for i in range(num_maps):
        map_seed = int(rng.integers(2**63))
        maps[f"m{i:04d}"] = generate_map(width, height, density, seed=map_seed)
    return maps


def generate_case_pool(
    maps: dict[str, GridMap],
    cases_per_map: int,
    num_robots: int,
    seed: int,
    stats: PoolStats | None = None,
    log=None,
) -> list[CaseRecord]:
    """Unsolved case records; duplicate (starts, goals) per map are filtered
    and per-item generation failures are counted without aborting the pool.
    """
    rng = np.random.default_rng([seed, _CASE_STREAM])
    stats = stats if stats is not None else PoolStats()
    records = []
    for map_id, grid in maps.items():
        seen = set()
        for k in range(cases_per_map):
            stats.requested += 1
            case_seed = int(rng.integers(2**63))
            try:
                case = generate_case(grid, num_robots, seed=case_seed, map_id=map_id)
            except InfeasibleCase as exc:
                stats.infeasible += 1
                if log is not None:
                    log(f"skipped {map_id} case {k}: {exc}")
                continue
            key = (case.starts, case.goals)
            if key in seen:
                stats.duplicates += 1
                continue
            seen.add(key)
            records.append(CaseRecord(case_id=f"{map_id}/c{k:04d}", case=case))
    stats.stored = len(records)
    return records


def _solve_one(args):
    # runtime_s stays None here on purpose: stored files must be seed-pure
    grid, record, timeout_s = args
    try:
        plan = cbs_solve(grid, record.case, timeout_s=timeout_s)
    except SolverTimeout:
        return replace(record, timed_out=True), "timeout"
    except (PlanInfeasible, MapfGnnError):
        return record, "unsolvable"
    return replace(record, plan=plan), "solved"


def solve_case_pool(
    maps: dict[str, GridMap],
    records: list[CaseRecord],
    timeout_s: float = 300.0,
    workers: int = 1,
    stats: PoolStats | None = None,
    log=None,
) -> list[CaseRecord]:
    """Attach expert plans; timeouts and unsolvable cases are dropped and
    counted. Output order follows input order regardless of worker count.
    """
    stats = stats if stats is not None else PoolStats()
    jobs = [(maps[rec.case.map_id], rec, timeout_s) for rec in records]
    if workers <= 1:
        results = [_solve_one(job) for job in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_one, jobs))
    solved = []
    for rec, outcome in results:
        if outcome == "solved":
            solved.append(rec)
        elif outcome == "timeout":
            stats.timeouts += 1
            if log is not None:
                log(f"expert timeout on {rec.case_id}")
        else:
            stats.unsolvable += 1
            if log is not None:
                log(f"unsolvable case {rec.case_id}")
    return solved


def build_dataset(
    num_maps: int,
    cases_per_map: int,
    num_robots: int,
    width: int,
    height: int,
    density: float,
    seed: int,
    timeout_s: float = 300.0,
    workers: int = 1,
    log=None,
):
    """generate_map -> generate_case -> cbs_solve, a pure function of
    (seed, config). Returns (maps, solved case records, stats).
    """
    stats = PoolStats()
    maps = generate_map_pool(num_maps, width, height, density, seed)
    records = generate_case_pool(
        maps, cases_per_map, num_robots, seed, stats=stats, log=log
    )
    solved = solve_case_pool(
        maps, records, timeout_s=timeout_s, workers=workers, stats=stats, log=log
    )
    stats.stored = len(solved)
    return maps, solved, stats


def expand_samples(
    pool: list[CaseRecord],
    maps: dict[str, GridMap],
    split: str = "train",
    fov_radius: int = DEFAULT_FOV_RADIUS,
    comm_radius: float = DEFAULT_COMM_RADIUS,
) -> Dataset:
    """One sample per expert timestep for every solved record in the pool."""
    from .training import expand_case

    samples = []
    for rec in pool:
        if rec.plan is None:
            raise ValueError(f"record {rec.case_id} has no plan to expand")
        samples.extend(
            expand_case(
                maps[rec.case.map_id],
                rec.case,
                rec.plan,
                case_id=rec.case_id,
                fov_radius=fov_radius,
                comm_radius=comm_radius,
            )
        )
    return Dataset(split=split, samples=samples)
