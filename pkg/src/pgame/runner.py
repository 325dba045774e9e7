"""Experiment orchestration: INI configs, replications, ablations and CSV output.

Config schema (sections and keys; ``*`` marks required keys)::

    [experiment]  master_seed, n_replications, output_dir
    [task]        name*, uncertain
    [algorithm]   name*, eval_budget*, plus any AlgoConfig field
                  (n_init_episodes, n_crit, samples_m, depth_d, n_centroids,
                  cvt_samples, cvt_seed, actor_hidden, critic_hidden)
    [variation]   any VariationConfig field
    [td3]         any Td3Config field
    [metrics]     n_reeval, reeval_seed

Replication ``i`` runs with seed ``master_seed + i``; the algorithms split
that seed into independent streams with ``numpy.random.SeedSequence``.
Relative output directories are resolved against the config file location.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import itertools
import logging
import os
import re
import traceback
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import envs, metrics, neuro
from .archive import build_cvt, dump_archive, load_archive
from .qd_loop import ALGORITHMS, AlgoConfig, RunResult, run_algorithm
from .rl_core import Td3Config
from .variation import VariationConfig

log = logging.getLogger(__name__)

SECTIONS = ("experiment", "task", "algorithm", "variation", "td3", "metrics")
REQUIRED = {"task": ("name",), "algorithm": ("name", "eval_budget")}
METRIC_COLUMNS = ("evaluations", "qd_score", "coverage", "max_fitness")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task_name: str
    uncertain: bool
    algo: AlgoConfig
    master_seed: int = 0
    n_replications: int = 1
    output_dir: str = "results"
    n_reeval: int = 0
    reeval_seed: int = 0
    source: Optional[str] = None
    raw_text: str = ""

    def __post_init__(self):
        if self.n_replications < 1:
            raise ConfigError("n_replications must be >= 1")
        if self.n_reeval < 0:
            raise ConfigError("n_reeval must be >= 0")

    @property
    def eval_budget(self) -> int:
        return self.algo.eval_budget

    def task(self) -> envs.TaskSpec:
        return envs.make_task(self.task_name, self.uncertain)

    def replication_seeds(self) -> List[int]:
        return [replication_seed(self.master_seed, i) for i in range(self.n_replications)]


def replication_seed(master_seed: int, index: int) -> int:
    return int(master_seed) + int(index)


# Parsing ---------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^([^\s#;=:][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """(section, key) -> 1-based line number, for error messages."""
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = no
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw.strip('"').strip("'")
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else "comma-separated integers"
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None


def _defaults(cls) -> Dict[str, object]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse an INI config; every error message names the file, line and key."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        loc = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{loc}: {exc}") from None
    lines = _key_lines(text)

    def where(section, key):
        no = lines.get((section, key)) or lines.get((section, ""))
        return f"{source}:{no}: [{section}] {key}" if no else f"{source}: [{section}] {key}"

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{where(section, '')}: unknown section (expected one of {', '.join(SECTIONS)})")
    for section, keys in REQUIRED.items():
        for key in keys:
            if not parser.has_option(section, key):
                raise ConfigError(f"{source}: missing required field '{key}' in section [{section}]")

    schema = {
        "experiment": {"master_seed": 0, "n_replications": 1, "output_dir": "results"},
        "task": {"name": "", "uncertain": False},
        "algorithm": {"name": ""},
        "variation": _defaults(VariationConfig),
        "td3": _defaults(Td3Config),
        "metrics": {"n_reeval": 0, "reeval_seed": 0},
    }
    algo_defaults = {k: v for k, v in _defaults(AlgoConfig).items()
                     if k not in ("algorithm", "variation", "td3")}
    schema["algorithm"].update(algo_defaults)

    values: Dict[str, Dict[str, object]] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in schema[section]:
                raise ConfigError(f"{where(section, key)}: unknown key")
            values[section][key] = _convert(raw, schema[section][key], where(section, key))

    def build(cls, section, extra=None):
        kwargs = dict(values[section])
        kwargs.update(extra or {})
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            # point at the offending key when the message names one
            named = [k for k in values[section] if re.search(rf"\b{k}\b", str(exc))]
            raise ConfigError(f"{where(section, named[0] if named else '')}: {exc}") from None

    algo_vals = dict(values["algorithm"])
    algo_name = algo_vals.pop("name")
    values["algorithm"] = algo_vals
    if algo_name not in ALGORITHMS:
        raise ConfigError(f"{where('algorithm', 'name')}: unknown algorithm {algo_name!r} "
                          f"(expected one of {', '.join(ALGORITHMS)})")
    variation = build(VariationConfig, "variation")
    td3 = build(Td3Config, "td3")
    algo = build(AlgoConfig, "algorithm", {"algorithm": algo_name, "variation": variation, "td3": td3})

    task = values["task"]
    try:
        envs.make_task(task["name"], task.get("uncertain", False))
    except ValueError as exc:
        raise ConfigError(f"{where('task', 'name')}: {exc}") from None
    exp, met = values["experiment"], values["metrics"]
    try:
        return RunConfig(task_name=task["name"], uncertain=task.get("uncertain", False), algo=algo,
                         master_seed=exp.get("master_seed", 0), n_replications=exp.get("n_replications", 1),
                         output_dir=exp.get("output_dir", "results"), n_reeval=met.get("n_reeval", 0),
                         reeval_seed=met.get("reeval_seed", 0), source=source, raw_text=text)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    cfg = parse_config_text(text, source=path)
    if not os.path.isabs(cfg.output_dir):
        cfg.output_dir = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.output_dir)
    return cfg


# CSV emission -----------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_metrics_csv(path: str, result: RunResult) -> None:
    write_csv(path, ("generation",) + METRIC_COLUMNS,
              ((r.generation, r.evaluations, r.qd_score, r.coverage, r.max_fitness) for r in result.records))


def write_operators_csv(path: str, result: RunResult) -> None:
    rows = []
    for r in result.records:
        for op in sorted(r.additions):
            rows.append((r.generation, op, r.additions[op]))
    write_csv(path, ("generation", "op", "additions"), rows)


def phase_summary(operators_csv: str) -> List[Tuple[str, int, int, float]]:
    """Per operator: (op, early additions, late additions, early share).

    The early phase is the first half of the generations listed in the file
    (generation < n_generations / 2).
    """
    with open(operators_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    n_gen = max(int(r["generation"]) for r in rows) + 1
    early: Dict[str, int] = {}
    late: Dict[str, int] = {}
    for r in rows:
        op, n = r["op"], int(r["additions"])
        early.setdefault(op, 0)
        late.setdefault(op, 0)
        if 2 * int(r["generation"]) < n_gen:
            early[op] += n
        else:
            late[op] += n
    out = []
    for op in sorted(early):
        total = early[op] + late[op]
        out.append((op, early[op], late[op], early[op] / total if total else 0.0))
    return out


def write_archive_meta(path: str, cfg: RunConfig, seed: int, result: RunResult) -> None:
    a = cfg.algo
    meta = [
        ("task", cfg.task_name), ("uncertain", int(cfg.uncertain)), ("algorithm", a.algorithm),
        ("seed", seed), ("actor_layers", ",".join(map(str, result.actor_spec.layer_sizes))),
        ("n_centroids", a.n_centroids), ("cvt_samples", a.cvt_samples), ("cvt_seed", a.cvt_seed),
        ("evaluations", result.evaluations),
    ]
    write_csv(path, ("key", "value"), meta)


def read_archive_meta(directory: str) -> Dict[str, str]:
    with open(os.path.join(directory, "archive_meta.csv"), newline="") as fh:
        return {r["key"]: r["value"] for r in csv.DictReader(fh)}


def write_corrected_csv(path: str, run_id: str, report: metrics.CorrectedReport) -> None:
    o, c = report.original, report.corrected
    write_csv(path, ("run_id", "metric", "original", "corrected", "loss"), [
        (run_id, "qd_score", o.qd_score, c.qd_score, report.qd_score_loss),
        (run_id, "max_fitness", o.max_fitness, c.max_fitness, report.max_fitness_loss),
        (run_id, "coverage", o.coverage, c.coverage, report.coverage_loss),
    ])


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root: str, status: Dict[str, str]) -> None:
    """manifest.csv: every file under root with its sha256 and a status flag."""
    rows = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            if rel == "manifest.csv":
                continue
            # files in a subdirectory follow that directory's flag, top-level files the "" flag
            key = rel.split("/")[0] if "/" in rel else ""
            rows.append((rel, sha256_file(full), status.get(key, "complete")))
    write_csv(os.path.join(root, "manifest.csv"), ("path", "sha256", "status"), rows)


# Experiments ------------------------------------------------------------------

@dataclass
class ExperimentOutcome:
    ok: bool
    output_dir: str
    results: List[RunResult] = field(default_factory=list)
    reports: List[Optional[metrics.CorrectedReport]] = field(default_factory=list)
    error: Optional[str] = None


def run_replication(cfg: RunConfig, index: int, directory: str):
    seed = replication_seed(cfg.master_seed, index)
    task = cfg.task()
    log.info("replication %d (seed %d): %s on %s", index, seed, cfg.algo.algorithm, task.name)
    result = run_algorithm(cfg.algo, task, seed)
    os.makedirs(directory, exist_ok=True)
    write_metrics_csv(os.path.join(directory, "metrics.csv"), result)
    write_operators_csv(os.path.join(directory, "operators.csv"), result)
    write_csv(os.path.join(directory, "operator_phases.csv"),
              ("op", "early_additions", "late_additions", "early_share"),
              phase_summary(os.path.join(directory, "operators.csv")))
    archive = result.reported_archive()
    dump_archive(archive, directory)
    write_archive_meta(os.path.join(directory, "archive_meta.csv"), cfg, seed, result)
    if result.ensemble is not None:
        write_csv(os.path.join(directory, "critic_log.csv"), ("step", "loss"), result.critic_log)
    report = None
    if cfg.n_reeval > 0:
        report = metrics.corrected_report(archive, task, result.actor_spec, cfg.n_reeval,
                                          cfg.reeval_seed + seed)
        write_corrected_csv(os.path.join(directory, "corrected.csv"), f"rep_{index:03d}", report)
    return result, report


def summarize(results: Sequence[RunResult]) -> List[Tuple]:
    """(generation, metric, median, q1, q3) over replications, for generations all runs reached."""
    n_gen = min(len(r.records) for r in results)
    rows = []
    for g in range(n_gen):
        for col in METRIC_COLUMNS:
            vals = np.array([getattr(r.records[g], col) for r in results], dtype=np.float64)
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            rows.append((g, col, float(med), float(q1), float(q3)))
    return rows


def execute(cfg: RunConfig, output_dir: Optional[str] = None) -> ExperimentOutcome:
    """Run every replication of ``cfg`` and write the output tree."""
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(cfg.raw_text)
    outcome = ExperimentOutcome(True, out)
    status: Dict[str, str] = {}
    for i in range(cfg.n_replications):
        rep_dir = f"rep_{i:03d}"
        try:
            result, report = run_replication(cfg, i, os.path.join(out, rep_dir))
        except Exception as exc:
            log.error("replication %d failed: %s", i, exc)
            status[rep_dir] = "partial"
            status[""] = "partial"
            outcome.ok = False
            outcome.error = f"replication {i}: {type(exc).__name__}: {exc}"
            with open(os.path.join(out, "error.txt"), "w") as fh:
                fh.write(outcome.error + "\n\n" + traceback.format_exc())
            break
        outcome.results.append(result)
        outcome.reports.append(report)
    if outcome.results:
        write_csv(os.path.join(out, "summary.csv"), ("generation", "metric", "median", "q1", "q3"),
                  summarize(outcome.results))
    write_manifest(out, status)
    return outcome


def run_experiment(config_path: str, seed: Optional[int] = None, out: Optional[str] = None) -> int:
    """CLI entry: 0 on success, 2 on config errors, 1 on run failures."""
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2
    if seed is not None:
        cfg.master_seed = int(seed)
    return 0 if execute(cfg, out).ok else 1


FINAL_METRICS = ("qd_score", "coverage", "max_fitness", "qd_score_loss")


def _final_values(outcome: ExperimentOutcome) -> Dict[str, List[float]]:
    vals = {m: [] for m in FINAL_METRICS}
    for res, rep in zip(outcome.results, outcome.reports):
        last = res.records[-1]
        vals["qd_score"].append(last.qd_score)
        vals["coverage"].append(last.coverage)
        vals["max_fitness"].append(last.max_fitness)
        if rep is not None:
            vals["qd_score_loss"].append(rep.qd_score_loss)
    return vals


def ablation(cfg: RunConfig, proportions: Sequence[float], output_dir: Optional[str] = None) -> bool:
    """One PGA experiment per GA proportion, all sharing the replication seeds."""
    for p in proportions:
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"proportion {p} outside [0, 1]")
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    outcomes = {}
    ok = True
    for p in proportions:
        var = dataclasses.replace(cfg.algo.variation, proportion_ga=float(p))
        algo = dataclasses.replace(cfg.algo, algorithm="pga_map_elites", variation=var)
        sub = dataclasses.replace(cfg, algo=algo)
        outcomes[p] = execute(sub, os.path.join(out, f"p_{p:g}"))
        ok = ok and outcomes[p].ok

    rows = []
    finals = {}
    for p, oc in outcomes.items():
        finals[p] = _final_values(oc)
        for i, res in enumerate(oc.results):
            last = res.records[-1]
            rep = oc.reports[i]
            rows.append((p, i, replication_seed(cfg.master_seed, i), last.evaluations, last.qd_score,
                         last.coverage, last.max_fitness, "" if rep is None else rep.qd_score_loss))
    write_csv(os.path.join(out, "ablation_summary.csv"),
              ("proportion", "replication", "seed", "evaluations", "qd_score", "coverage",
               "max_fitness", "qd_score_loss"), rows)

    pairs = list(itertools.combinations(proportions, 2))
    stats = []
    for metric in FINAL_METRICS:
        tested = [(a, b) for a, b in pairs if finals[a][metric] and finals[b][metric]]
        raw = [metrics.wilcoxon_rank_sum(finals[a][metric], finals[b][metric]) for a, b in tested]
        for (a, b), r, adj in zip(tested, raw, metrics.bonferroni(raw, max(len(tested), 1))):
            stats.append((f"{a:g}_vs_{b:g}", metric, r, adj))
    write_csv(os.path.join(out, "stats.csv"), ("pairing", "metric", "raw_p", "bonferroni_p"), stats)
    write_manifest(out, {f"p_{p:g}": ("complete" if oc.ok else "partial") for p, oc in outcomes.items()})
    return ok


def run_ablation(config_path: str, proportions: Sequence[float], out: Optional[str] = None) -> int:
    try:
        cfg = load_config(config_path)
        return 0 if ablation(cfg, proportions, out) else 1
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2


def correct_archive(directory: str, n_reeval: int = 50, seed: int = 0,
                    out: Optional[str] = None) -> metrics.CorrectedReport:
    """Rebuild a dumped archive, re-evaluate it and write corrected.csv."""
    meta = read_archive_meta(directory)
    task = envs.make_task(meta["task"], meta["uncertain"] == "1")
    layers = tuple(int(x) for x in meta["actor_layers"].split(","))
    spec = neuro.MlpSpec(layers, "tanh")
    centroids = build_cvt(task.bd_dim, int(meta["n_centroids"]), int(meta["cvt_samples"]), int(meta["cvt_seed"]))
    archive = load_archive(directory, centroids)
    report = metrics.corrected_report(archive, task, spec, n_reeval, seed)
    target = out or directory
    os.makedirs(target, exist_ok=True)
    write_corrected_csv(os.path.join(target, "corrected.csv"), os.path.basename(os.path.normpath(directory)), report)
    return report
