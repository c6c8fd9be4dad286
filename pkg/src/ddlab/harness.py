"""Experiment configs, dispatch and report files.

A config is a JSON object with a ``kind`` discriminator::

    {
      "kind": "convergence",
      "sequence": "tilt_seq(a=1)",
      "n_schedule": [1, 2, 4, 8, 16],
      "t": 1.0,
      "sde": {"h": 0.001, "T": 1.0},
      "mc": {"n_paths": 20000, "seed": 7},
      "output": "out/tilt"
    }

Each run writes ``manifest.json`` (hash, version, wall time, seeds,
warnings), one CSV per table and ``summary.json`` (pass/fail per
assertion).  Every CSV starts with ``# run <hash>``; the hash covers the
config minus ``lanes`` and ``output``, so CSV files are byte-identical for
any lane count.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import re
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from ddlab import __version__, streams
from ddlab.capacity import capacity_decay_experiment, hitting_probabilities, non_increasing
from ddlab.distortion import FamilySpecError, good_sets, parse_family, parse_sequence
from ddlab.divergence import compare, convergence_experiment, non_increasing_within, theorem_bound_chain
from ddlab.gaussian_space import SpaceConfig, expect_mu
from ddlab.sde_engine import MeasureSpec, SdeConfig, run_ensemble, unit_measure

KINDS = ("simulate", "divergence", "convergence", "bound-chain", "capacity")

COMMON_KEYS = ("kind", "space", "sde", "mc", "lanes", "output")
KIND_KEYS = {
    "simulate": ("family", "record", "stride"),
    "divergence": ("pairs", "ref"),
    "convergence": ("sequence", "n_schedule", "t", "final_tv_below"),
    "bound-chain": ("sequence", "k", "m_schedule", "t", "sup_samples"),
    "capacity": ("family", "n_schedule", "m_schedule", "t", "hit_final_below", "assert"),
}
SPACE_KEYS = ("d", "method", "order", "samples", "seed", "tol")
SDE_KEYS = ("h", "T", "b_max")
MC_KEYS = ("n_paths", "seed")

CAPACITY_ASSERTIONS = (
    "bound_non_increasing",
    "I_n_le_inv_n2",
    "II_n_le_grad_sq",
    "II_n_le_grad_sq_over_n2",
    "hit_decreasing",
)
CAPACITY_DEFAULT_ASSERT = ("bound_non_increasing", "I_n_le_inv_n2", "II_n_le_grad_sq", "hit_decreasing")

COLUMNS = {
    "simulate": ("path_id", "t", "x"),
    "divergence": ("p1", "p2", "h", "t", "n_paths", "tv_hat", "tv_se", "kl_hat", "kl_se", "pinsker_ok"),
    "convergence": ("n", "d12", "tv_hat", "tv_se", "kl_hat", "kl_se", "pinsker_ok"),
    "bound-chain": (
        "m", "lhs", "lhs_se", "tv_tilde", "tv_tilde_se", "hit_prob", "hit_se", "rhs_total", "kl_bound",
        "kl_stopped", "kl_stopped_se", "sobolev_term", "uniform_term", "sup_deviation", "initial_kl",
    ),
    "capacity": ("n", "I_n", "II_n", "bound", "I_err", "II_err", "grad_sq"),
    "hitting": ("m", "t", "hit_prob", "hit_se", "n_paths"),
}


class ConfigError(ValueError):
    """An invalid experiment config; the message names the key and its line."""


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    kind: str
    params: dict
    space: dict = field(default_factory=dict)
    sde: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    lanes: int | None = None
    output: str | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for name in ("space", "sde", "mc"):
            if getattr(self, name):
                out[name] = dict(getattr(self, name))
        out.update(self.params)
        if self.lanes is not None:
            out["lanes"] = self.lanes
        if self.output is not None:
            out["output"] = self.output
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("lanes", None)
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # -- typed views -------------------------------------------------------

    def space_config(self) -> SpaceConfig:
        d = int(self.space.get("d", 1))
        base = SpaceConfig.default(d)
        kw = {k: self.space[k] for k in SPACE_KEYS if k in self.space}
        return dataclasses.replace(base, **kw)

    def sde_config(self) -> SdeConfig:
        h = float(self.sde.get("h", 1e-3))
        T = float(self.sde.get("T", self.params.get("t", 1.0)))
        b_max = float(self.sde.get("b_max", 1.0 / h))
        return SdeConfig(h=h, T=T, b_max=b_max, seed=self.seed)

    @property
    def n_paths(self) -> int:
        return int(self.mc.get("n_paths", 10_000))

    @property
    def seed(self) -> int:
        return int(self.mc.get("seed", 0))


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text, key):
    line = _line_of(text, key) if text else None
    return f" (line {line})" if line else ""


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _check_keys(obj, allowed, text, scope):
    if not isinstance(obj, dict):
        raise ConfigError(f"{scope} must be an object{_where(text, scope)}")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r} in {scope}{_where(text, k)}; allowed: {list(allowed)}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config string."""
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, text)


def config_from_dict(raw: dict, text: str = "") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "kind" not in raw:
        raise ConfigError(f"missing key 'kind'; one of {list(KINDS)}")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigError(f"key 'kind'{_where(text, 'kind')}: unknown kind {kind!r}; one of {list(KINDS)}")
    _check_keys(raw, COMMON_KEYS + KIND_KEYS[kind], text, f"{kind} config")
    for scope, keys in (("space", SPACE_KEYS), ("sde", SDE_KEYS), ("mc", MC_KEYS)):
        if scope in raw:
            _check_keys(raw[scope], keys, text, scope)
    params = {k: raw[k] for k in KIND_KEYS[kind] if k in raw}
    lanes = raw.get("lanes")
    if lanes is not None and (not isinstance(lanes, int) or lanes < 1):
        raise ConfigError(f"key 'lanes'{_where(text, 'lanes')}: must be a positive integer")
    cfg = ExperimentConfig(
        kind=kind,
        params=params,
        space=dict(raw.get("space", {})),
        sde=dict(raw.get("sde", {})),
        mc=dict(raw.get("mc", {})),
        lanes=lanes,
        output=raw.get("output"),
    )
    _validate(cfg, text)
    return cfg


def _require(cfg, key, text):
    if key not in cfg.params:
        raise ConfigError(f"{cfg.kind} config needs key {key!r}")
    return cfg.params[key]


def _int_list(cfg, key, text, default=None):
    v = cfg.params.get(key, default)
    if v is None:
        raise ConfigError(f"{cfg.kind} config needs key {key!r}")
    if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and x >= 1 for x in v):
        raise ConfigError(f"key {key!r}{_where(text, key)}: expected a non-empty list of numbers >= 1")
    return v


def _validate(cfg: ExperimentConfig, text: str):
    """Build every typed object once so that bad values fail at validation time."""
    for scope, build in (("space", cfg.space_config), ("sde", cfg.sde_config)):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                build()
        except (ValueError, TypeError) as exc:
            key = next(iter(getattr(cfg, scope)), scope)
            raise ConfigError(f"key {scope!r}{_where(text, key)}: {exc}") from None
    for key in MC_KEYS:
        v = cfg.mc.get(key)
        if v is not None and (not isinstance(v, int) or v < (1 if key == "n_paths" else 0)):
            raise ConfigError(f"key {key!r}{_where(text, key)}: must be a {'positive' if key == 'n_paths' else 'non-negative'} integer")
    d = cfg.space_config().d
    k = cfg.kind
    try:
        if k in ("simulate", "capacity"):
            parse_family(_require(cfg, "family", text), d)
        if k in ("convergence", "bound-chain"):
            parse_sequence(_require(cfg, "sequence", text), d)
        if k == "divergence":
            pairs = _require(cfg, "pairs", text)
            if not isinstance(pairs, list) or not pairs or not all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(s, str) for s in p) for p in pairs
            ):
                raise ConfigError(f"key 'pairs'{_where(text, 'pairs')}: expected a list of [p1, p2] family strings")
            for p in pairs:
                for s in p:
                    parse_family(s, d)
            if cfg.params.get("ref", "p2") not in ("p2", "unit"):
                raise ConfigError(f"key 'ref'{_where(text, 'ref')}: expected 'p2' or 'unit'")
    except FamilySpecError as exc:
        key = {"simulate": "family", "capacity": "family", "divergence": "pairs"}.get(k, "sequence")
        raise ConfigError(f"key {key!r}{_where(text, key)}: {exc}") from None
    if k == "convergence":
        _int_list(cfg, "n_schedule", text)
    if k == "bound-chain":
        _int_list(cfg, "m_schedule", text)
        kk = _require(cfg, "k", text)
        if not isinstance(kk, int) or kk < 1:
            raise ConfigError(f"key 'k'{_where(text, 'k')}: must be a positive integer")
    if k == "capacity":
        _int_list(cfg, "n_schedule", text)
        bad = [a for a in cfg.params.get("assert", []) if a not in CAPACITY_ASSERTIONS]
        if bad:
            raise ConfigError(f"key 'assert'{_where(text, 'assert')}: unknown assertion(s) {bad}; known: {list(CAPACITY_ASSERTIONS)}")
    for key in ("t",):
        if key in cfg.params:
            t = cfg.params[key]
            h = cfg.sde_config().h
            if not isinstance(t, (int, float)) or t <= 0 or abs(t / h - round(t / h)) > 1e-9 * (t / h):
                raise ConfigError(f"key 't'{_where(text, 't')}: must be a positive multiple of h={h}")
    for key in ("record", "stride", "sup_samples"):
        if key in cfg.params and (not isinstance(cfg.params[key], int) or cfg.params[key] < 1):
            raise ConfigError(f"key {key!r}{_where(text, key)}: must be a positive integer")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# results


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class RunResult:
    tables: dict[str, tuple[tuple[str, ...], list[tuple]]]
    checks: list[Check]
    warnings: list[str]
    seeds: list[int]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render_csv(run_hash: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# run {run_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _finite_check(tables) -> Check:
    bad = []
    for name, (cols, rows) in tables.items():
        for i, r in enumerate(rows):
            for c, v in zip(cols, r):
                if isinstance(v, (float, np.floating)) and not math.isfinite(v):
                    bad.append(f"{name}.csv row {i + 1} column {c}")
    return Check("finite_cells", not bad, "; ".join(bad[:5]))


# ---------------------------------------------------------------------------
# runners


def _run_simulate(cfg: ExperimentConfig, lanes: int) -> RunResult:
    space = cfg.space_config()
    phi = parse_family(cfg.params["family"], space.d)
    sde = cfg.sde_config()
    law = MeasureSpec(phi, sde, space=space)
    record = min(int(cfg.params.get("record", 10)), cfg.n_paths)
    stride = int(cfg.params.get("stride", max(1, sde.n_steps // 100)))
    ens = run_ensemble(law, cfg.n_paths, cfg.seed, record=record, lanes=lanes)
    rows = []
    for p in ens.paths:
        for j in range(0, p.n_steps + 1, stride):
            rows.append((p.path_index, float(p.times[j]), float(p.states[j, 0])))
    xT = ens.x_final[:, 0]
    n = len(xT)
    m1 = expect_mu(space, lambda x: x[:, 0] * phi.value(x) ** 2, phi.kinks).value
    m2 = expect_mu(space, lambda x: x[:, 0] ** 2 * phi.value(x) ** 2, phi.kinks).value
    target = m2 - m1 * m1
    var = float(xT.var(ddof=1))
    c = xT - xT.mean()
    se = math.sqrt(max(float(np.mean(c**4)) - var * var, 0.0) / n)
    checks = [Check("stationary_variance", abs(var - target) <= 3 * se, f"var={var:.6g} target={target:.6g} se={se:.3g}")]
    if phi.is_unit:
        ks = stats.kstest(xT, "norm")
        checks.append(Check("ks_normal", ks.pvalue > 0.01, f"D={ks.statistic:.4g} p={ks.pvalue:.4g}"))
    warn = []
    if ens.clip_events.any():
        warn.append(f"{int(ens.clip_events.sum())} drift clip events over {n} paths")
    return RunResult({"paths": (COLUMNS["simulate"], rows)}, checks, warn, [cfg.seed])


def _run_divergence(cfg: ExperimentConfig, lanes: int) -> RunResult:
    space = cfg.space_config()
    sde = cfg.sde_config()
    rows, checks, warn = [], [], []
    for j, (s1, s2) in enumerate(cfg.params["pairs"]):
        p1 = MeasureSpec(parse_family(s1, space.d), sde, space=space, label=s1)
        p2 = MeasureSpec(parse_family(s2, space.d), sde, space=space, label=s2)
        ref = None if cfg.params.get("ref", "p2") == "p2" else unit_measure(sde, space.d)
        rep = compare(p1, p2, ref, cfg.n_paths, cfg.seed, lanes)
        rows.append((s1, s2, sde.h, sde.T, cfg.n_paths, rep.tv_hat, rep.tv_se, rep.kl_hat, rep.kl_se, rep.pinsker_ok))
        checks.append(Check(f"pinsker[{s1} vs {s2}]", bool(rep.pinsker_ok)))
        warn.extend(f"{s1} vs {s2}: {w}" for w in rep.warnings)
    return RunResult({"divergence": (COLUMNS["divergence"], rows)}, checks, warn, [cfg.seed])


def _run_convergence(cfg: ExperimentConfig, lanes: int) -> RunResult:
    space = cfg.space_config()
    seq = parse_sequence(cfg.params["sequence"], space.d)
    sde = cfg.sde_config()
    t = float(cfg.params.get("t", sde.T))
    sched = [int(n) for n in cfg.params["n_schedule"]]
    table = convergence_experiment(seq, t, sde, cfg.n_paths, sched, cfg.seed, space, lanes)
    rows = [(r.n, r.d12, r.tv_hat, r.tv_se, r.kl_hat, r.kl_se, r.pinsker_ok) for r in table.rows]
    checks = [
        Check("tv_non_increasing_3se", table.monotone_ok),
        Check("pinsker_all_rows", table.pinsker_ok),
    ]
    if "final_tv_below" in cfg.params:
        thr = float(cfg.params["final_tv_below"])
        last = table.rows[-1].tv_hat
        checks.append(Check(f"final_tv_below_{thr:g}", last < thr, f"tv_hat={last:.6g}"))
    return RunResult({"convergence": (COLUMNS["convergence"], rows)}, checks, list(table.warnings), [cfg.seed])


def _run_bound_chain(cfg: ExperimentConfig, lanes: int) -> RunResult:
    space = cfg.space_config()
    seq = parse_sequence(cfg.params["sequence"], space.d)
    sde = cfg.sde_config()
    t = float(cfg.params.get("t", sde.T))
    k = int(cfg.params["k"])
    G = good_sets(seq.limit, seq)
    rows, checks, warn = [], [], []
    for m in cfg.params["m_schedule"]:
        rep = theorem_bound_chain(
            seq, k, G, int(m), t, sde, cfg.n_paths, cfg.seed, space,
            sup_samples=int(cfg.params.get("sup_samples", 100_000)), lanes=lanes,
        )
        c = rep.components
        rows.append((
            c.m, c.lhs, c.lhs_se, c.tv_tilde, c.tv_tilde_se, c.hit_prob, c.hit_se, c.rhs_total, c.kl_bound,
            c.kl_stopped, c.kl_stopped_se, c.sobolev_term, c.uniform_term, c.sup_deviation, c.initial_kl,
        ))
        checks += [
            Check(f"chain[m={c.m}]", c.chain_ok, f"lhs={c.lhs:.4g} rhs={c.rhs_total:.4g}"),
            Check(f"pinsker_stopped[m={c.m}]", c.pinsker_stopped_ok),
            Check(f"kl_bound[m={c.m}]", c.kl_bound_ok, f"kl={c.kl_stopped:.4g} bound={c.kl_bound:.4g}"),
            Check(f"truncation_agreement[m={c.m}]", c.truncation_agreement),
        ]
        warn.extend(f"m={c.m}: {w}" for w in rep.warnings)
    return RunResult({"bound_chain": (COLUMNS["bound-chain"], rows)}, checks, warn, [cfg.seed])


def _run_capacity(cfg: ExperimentConfig, lanes: int) -> RunResult:
    space = cfg.space_config()
    phi = parse_family(cfg.params["family"], space.d)
    reports = capacity_decay_experiment(phi, cfg.params["n_schedule"], space)
    rows = [(r.n, r.I_n, r.II_n, r.bound, r.I_err, r.II_err, r.grad_sq) for r in reports]
    wanted = cfg.params.get("assert", list(CAPACITY_DEFAULT_ASSERT))
    tol = max((r.I_err + r.II_err for r in reports), default=0.0)
    checks = []
    if "bound_non_increasing" in wanted:
        checks.append(Check("bound_non_increasing", non_increasing([r.bound for r in reports], tol)))
    if "I_n_le_inv_n2" in wanted:
        checks.append(Check("I_n_le_inv_n2", all(r.i_ok for r in reports)))
    if "II_n_le_grad_sq" in wanted:
        checks.append(Check("II_n_le_grad_sq", all(r.ii_dominated for r in reports)))
    if "II_n_le_grad_sq_over_n2" in wanted:
        bad = [r.n for r in reports if not r.ii_scaled_ok]
        checks.append(Check("II_n_le_grad_sq_over_n2", not bad, f"fails at n={bad}" if bad else ""))
    tables = {"capacity": (COLUMNS["capacity"], rows)}
    if "m_schedule" in cfg.params:
        sde = cfg.sde_config()
        t = float(cfg.params.get("t", sde.T))
        ms = [int(m) for m in cfg.params["m_schedule"]]
        hits = hitting_probabilities(phi, good_sets(phi), ms, t, sde, cfg.n_paths, cfg.seed, lanes)
        tables["hitting"] = (COLUMNS["hitting"], [(e.m, e.t, e.estimate, e.se, e.n_paths) for e in hits])
        if "hit_decreasing" in wanted:
            checks.append(Check(
                "hit_decreasing_3se",
                non_increasing_within([e.estimate for e in hits], [e.se for e in hits]),
            ))
        if "hit_final_below" in cfg.params:
            thr = float(cfg.params["hit_final_below"])
            checks.append(Check(f"hit_final_below_{thr:g}", hits[-1].estimate < thr, f"estimate={hits[-1].estimate:.4g}"))
    return RunResult(tables, checks, [], [cfg.seed])


RUNNERS = {
    "simulate": _run_simulate,
    "divergence": _run_divergence,
    "convergence": _run_convergence,
    "bound-chain": _run_bound_chain,
    "capacity": _run_capacity,
}


def execute(cfg: ExperimentConfig, lanes: int | None = None) -> RunResult:
    """Run an experiment in memory."""
    lanes = streams.resolve_lanes(lanes if lanes is not None else cfg.lanes)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = RUNNERS[cfg.kind](cfg, lanes)
    seen = set()
    for w in caught:
        msg = f"{w.category.__name__}: {w.message}"
        if msg not in seen:
            seen.add(msg)
            result.warnings.append(msg)
    result.checks.append(_finite_check(result.tables))
    return result


def run(cfg: ExperimentConfig, output: str | Path | None = None, lanes: int | None = None) -> tuple[RunResult, Path]:
    """Run an experiment and write manifest, CSVs and summary to the output directory."""
    started = time.time()
    result = execute(cfg, lanes)
    wall = time.time() - started
    out = Path(output or cfg.output or f"ddlab-out/{cfg.kind}-{cfg.hash}")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, (cols, rows) in result.tables.items():
        (out / f"{name}.csv").write_text(render_csv(cfg.hash, cols, rows))
        files.append(f"{name}.csv")
    summary = {
        "run": cfg.hash,
        "kind": cfg.kind,
        "passed": result.passed,
        "checks": [{"name": c.name, "passed": bool(c.passed), "detail": c.detail} for c in result.checks],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    manifest = {
        "config_hash": cfg.hash,
        "tool": "ddlab",
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "wall_time_s": round(wall, 3),
        "lanes": streams.resolve_lanes(lanes if lanes is not None else cfg.lanes),
        "seeds": result.seeds,
        "warnings": result.warnings,
        "files": files + ["summary.json"],
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return result, out
