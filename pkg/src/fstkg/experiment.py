"""End-to-end experiment pipeline: data -> split -> pretrain -> meta-train -> adapt -> rank."""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kgstore
from .encoder import EncoderContext, ModelParams, init_params, save_checkpoint
from .kgstore import ROLES, FewShotTask, SplitAssignment, TaskConstructionError, TemporalKG
from .meta import MODES, MetaState, TrainConfig, config_dict, meta_test_adapt, meta_train, pretrain_background
from .objective import (CSV_FIELDS, OBJECT, SUBJECT, CandidateScorer, FilterIndex, MetricsReport,
                        RankedQuery, aggregate_metrics, metrics_csv, rank_query)
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    synthetic: SyntheticSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ratios: tuple = (0.4, 0.25, 0.1, 0.25)
    mode: str = "full"
    time_aware_filter: bool = False
    directions: bool = False
    eval_shots: int | None = None  # support size at meta-test; defaults to train.shots
    eval_role: str = "meta_test"
    out_dir: str = "out"
    seed: int = 0

    def validate(self):
        if (self.dataset is None) == (self.synthetic is None):
            raise ValueError("exactly one of dataset or synthetic must be set")
        if self.dataset is not None and not os.path.exists(self.dataset):
            raise FileNotFoundError(self.dataset)
        if self.synthetic is not None:
            self.synthetic.validate()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eval_role not in ROLES[1:]:
            raise ValueError(f"eval_role must be one of {ROLES[1:]}")
        self.train.validate()


# -- config files ----------------------------------------------------------

def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat keys: experiment fields, TrainConfig fields, and ``synth_<field>`` for the generator."""
    exp = base or ExperimentConfig()
    train_kw, synth_kw, exp_kw = {}, {}, {}
    train_types = {f.name: f.default for f in fields(TrainConfig)}
    synth_types = {f.name: f.default for f in fields(SyntheticSpec)}
    for k, v in values.items():
        if k == "seed":  # one seed drives data, initialisation and sampling
            exp_kw[k] = int(v)
        elif k.startswith("synth_") and k[6:] in synth_types:
            synth_kw[k[6:]] = _coerce(v, synth_types[k[6:]])
        elif k in train_types:
            train_kw[k] = _coerce(v, train_types[k])
        elif k == "ratios":
            exp_kw[k] = tuple(float(x) for x in v.replace(":", ",").split(","))
        elif k in ("dataset", "mode", "out_dir", "eval_role"):
            exp_kw[k] = v
        elif k in ("time_aware_filter", "directions"):
            exp_kw[k] = _coerce(v, True)
        elif k == "eval_shots":
            exp_kw[k] = int(v)
        elif k == "synthetic":
            if _coerce(v, True):
                synth_kw.setdefault("seed", exp.seed)
        else:
            raise ValueError(f"unknown config key {k!r}")
    train = replace(exp.train, **train_kw)
    synth = exp.synthetic
    if synth_kw:
        synth = replace(synth or SyntheticSpec(), **synth_kw)
    out = replace(exp, train=train, synthetic=synth, **exp_kw)
    if "seed" in exp_kw:
        out = with_seed(out, exp_kw["seed"])
    return out


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return build_config(parse_config_text(fh.read()))


def with_seed(exp: ExperimentConfig, seed: int) -> ExperimentConfig:
    synth = replace(exp.synthetic, seed=seed) if exp.synthetic is not None else None
    return replace(exp, seed=seed, train=replace(exp.train, seed=seed), synthetic=synth)


# -- data preparation ------------------------------------------------------

def fact_roles(kg: TemporalKG, split: SplitAssignment) -> np.ndarray:
    """Each fact belongs to the later-appearing of its two endpoints."""
    r = split.roles
    return np.maximum(r[kg.quads[:, 0]], r[kg.quads[:, 2]])


def role_tasks(kg: TemporalKG, split: SplitAssignment, froles: np.ndarray, role: str, K: int, M: int) -> list[FewShotTask]:
    k = ROLES.index(role)
    tasks = []
    for e in split.entities_with(role):
        own = [f for f in kg.facts_of(e) if froles[f] == k]
        try:
            tasks.append(kgstore.build_task(kg, e, K, M, facts=own))
        except TaskConstructionError:
            continue
    return tasks


@dataclass
class Prepared:
    kg: TemporalKG
    split: SplitAssignment
    froles: np.ndarray
    background_facts: list[int]
    train_tasks: list[FewShotTask]
    eval_tasks: list[FewShotTask]
    pretrain_ctx: EncoderContext
    train_ctx: EncoderContext
    eval_ctx: EncoderContext
    filter_index: FilterIndex
    known_entities: set[int]


def _hidden_mask(kg: TemporalKG, tasks: list[FewShotTask]) -> np.ndarray:
    hidden = np.zeros(len(kg), dtype=bool)
    for t in tasks:
        hidden[t.query] = True
    return hidden


def load_graph(exp: ExperimentConfig) -> TemporalKG:
    if exp.dataset is not None:
        return kgstore.ingest_tsv(exp.dataset)
    return generate_synthetic(exp.synthetic)


def prepare(exp: ExperimentConfig, kg: TemporalKG | None = None) -> Prepared:
    """Split the graph and build leakage-free encoder views.

    The encoder never sees query facts of the tasks it is scored on: meta-train
    queries are hidden during meta-training, evaluation queries during
    evaluation, and later-role facts are invisible to earlier stages.
    """
    cfg = exp.train
    kg = kg if kg is not None else load_graph(exp)
    split = kgstore.chronological_split(kg, exp.ratios)
    froles = fact_roles(kg, split)
    background = np.flatnonzero(froles == 0).tolist()
    train_tasks = role_tasks(kg, split, froles, "meta_train", cfg.shots, cfg.intervals)
    if cfg.task_fraction < 1 and train_tasks:
        rng = np.random.default_rng([cfg.seed, 7])
        keep = max(1, int(round(cfg.task_fraction * len(train_tasks))))
        pick = sorted(rng.choice(len(train_tasks), keep, replace=False).tolist())
        train_tasks = [train_tasks[i] for i in pick]
    eval_k = exp.eval_shots or cfg.shots
    eval_level = ROLES.index(exp.eval_role)
    eval_tasks = role_tasks(kg, split, froles, exp.eval_role, eval_k, cfg.intervals)

    def ctx(mask):
        return EncoderContext(kg.subgraph(mask), cfg.budget, cfg.time_bound, cfg.layers)

    pre_ctx = ctx(froles == 0)
    train_ctx = ctx((froles <= 1) & ~_hidden_mask(kg, train_tasks))
    eval_ctx = ctx((froles <= eval_level) & ~_hidden_mask(kg, eval_tasks))
    known = set(np.flatnonzero((split.roles >= 0) & (split.roles < eval_level)).tolist())
    return Prepared(kg, split, froles, background, train_tasks, eval_tasks, pre_ctx, train_ctx, eval_ctx,
                    FilterIndex.from_kg(kg, exp.time_aware_filter), known)


# -- stages ----------------------------------------------------------------

def pretrain(prep: Prepared, cfg: TrainConfig) -> tuple[ModelParams, list[float]]:
    phi = init_params(prep.kg.num_entities, prep.kg.num_relations, cfg.dim, cfg.seed)
    if cfg.pretrain_epochs == 0:
        return phi, []
    rng = np.random.default_rng([cfg.seed, 1])
    return pretrain_background(prep.kg, prep.background_facts, cfg, prep.pretrain_ctx, phi, rng)


def train(prep: Prepared, cfg: TrainConfig, phi0: ModelParams, mode: str, on_record=None) -> MetaState:
    rng = np.random.default_rng([cfg.seed, 2])
    if mode == "finetune_only":
        return MetaState(phi0)
    return meta_train(prep.kg, prep.train_tasks, cfg, prep.train_ctx, phi0, mode, rng, on_record)


def evaluate(prep: Prepared, cfg: TrainConfig, phi: ModelParams, tasks: list[FewShotTask] | None = None) -> list[RankedQuery]:
    """Adapt to every evaluation entity and rank both masked slots of each query fact."""
    tasks = prep.eval_tasks if tasks is None else tasks
    ranked = []
    for task in tasks:
        rng = np.random.default_rng([cfg.seed, 3, task.entity])
        adapted = meta_test_adapt(phi, prep.eval_ctx, prep.kg, task.entity, task.support, cfg, rng,
                                  known_entities=prep.known_entities)
        scorer = CandidateScorer(prep.eval_ctx, adapted, cfg.time_offset)
        for m, facts in enumerate(task.query_intervals, start=1):
            for f in facts:
                q = tuple(int(x) for x in prep.kg.quads[f])
                for slot in (OBJECT, SUBJECT):
                    ranked.append(rank_query(scorer, q, slot, prep.filter_index, interval=m))
    return ranked


@dataclass
class RunResult:
    report: MetricsReport | None
    state: MetaState
    pretrain_losses: list[float]
    ranked: list[RankedQuery]

    @property
    def mean_drift(self) -> float:
        d = [r["drift"] for r in self.state.log if r.get("steps")]
        return float(np.mean(d)) if d else 0.0


def run_pipeline(exp: ExperimentConfig, prep: Prepared | None = None, phi0: ModelParams | None = None,
                 pretrain_losses: list[float] | None = None, on_record=None) -> RunResult:
    stage = "prepare"
    try:
        prep = prep or prepare(exp)
        stage = "pretrain"
        if phi0 is None:
            phi0, pretrain_losses = pretrain(prep, exp.train)
        stage = "meta_train"
        if not prep.train_tasks and exp.mode != "finetune_only":
            raise ValueError("no meta-training entity has more than K facts")
        state = train(prep, exp.train, phi0, exp.mode, on_record)
        stage = "evaluate"
        ranked = evaluate(prep, exp.train, state.phi)
        report = aggregate_metrics(ranked) if ranked else None
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - tag and re-raise
        raise StageError(stage, err) from err
    return RunResult(report, state, pretrain_losses or [], ranked)


def _dump(report: MetricsReport | None, directions: bool) -> str:
    if report is None:
        empty = {"mrr": 0.0, "hits1": 0.0, "hits3": 0.0, "hits10": 0.0, "query_count": 0, "per_interval": {}}
        return json.dumps(empty, indent=2, sort_keys=True) + "\n"
    return report.to_json(directions)


def run_experiment(exp: ExperimentConfig) -> RunResult:
    """Full pipeline writing metrics.json, metrics.csv, train_log.jsonl, checkpoint.json and split.txt.

    Outputs are staged and moved into ``out_dir`` only on success.
    """
    exp.validate()
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        records = []
        prep = prepare(exp)
        res = run_pipeline(exp, prep, on_record=records.append)
        with open(staging / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for i, loss in enumerate(res.pretrain_losses):
                fh.write(json.dumps({"stage": "pretrain", "epoch": i, "emp_loss": loss}) + "\n")
            for r in records:
                fh.write(json.dumps({"stage": "meta", **r}) + "\n")
        (staging / "metrics.json").write_text(_dump(res.report, exp.directions), encoding="utf-8")
        row = res.report.csv_row(mode=exp.mode, seed=exp.seed) if res.report else {"mode": exp.mode, "seed": exp.seed}
        (staging / "metrics.csv").write_text(metrics_csv([row], ["mode", "seed"] + CSV_FIELDS), encoding="utf-8")
        save_checkpoint(res.state.phi, staging / "checkpoint.json",
                        extra={"mode": exp.mode, "train_config": config_dict(exp.train)})
        kgstore.write_split_manifest(prep.kg, prep.split, staging / "split.txt")
        for p in staging.iterdir():
            os.replace(p, out / p.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return res


# -- protocols -------------------------------------------------------------

def interval_mrr(report: MetricsReport | None, M: int) -> list[float]:
    if report is None:
        return [0.0] * M
    return [report.per_interval.get(m, {}).get("mrr", 0.0) for m in range(1, M + 1)]


def run_ablation_suite(exp: ExperimentConfig, seeds=(0,), modes=("finetune_only", "static_maml", "no_regularizer", "full")):
    """Every mode on identical data and pretraining per seed; rows plus per-mode means."""
    rows = []
    results: dict[tuple[int, str], RunResult] = {}
    M = exp.train.intervals
    for seed in seeds:
        e = with_seed(exp, seed)
        prep = prepare(e)
        phi0, losses = pretrain(prep, e.train)
        for mode in modes:
            res = run_pipeline(replace(e, mode=mode), prep, phi0, losses)
            results[(seed, mode)] = res
            row = {"seed": seed, "mode": mode}
            row.update(res.report.summary() if res.report else {k: 0.0 for k in CSV_FIELDS})
            for m, v in enumerate(interval_mrr(res.report, M), start=1):
                row[f"mrr_interval{m}"] = v
            row["mean_drift"] = res.mean_drift
            rows.append(row)
    for mode in modes:
        mine = [r for r in rows if r["mode"] == mode and r["seed"] != "mean"]
        mean = {"seed": "mean", "mode": mode}
        for k in mine[0]:
            if k not in ("seed", "mode"):
                mean[k] = float(np.mean([r[k] for r in mine]))
        rows.append(mean)
    return rows, results


def run_cross_shot(exp: ExperimentConfig, train_shots=(1, 3), test_shots=(1, 3, 5)):
    rows = []
    for k_train in train_shots:
        e = replace(exp, train=replace(exp.train, shots=k_train))
        prep = prepare(e)
        phi0, losses = pretrain(prep, e.train)
        state = train(prep, e.train, phi0, e.mode)
        for k_test in test_shots:
            p2 = prepare(replace(e, eval_shots=k_test), kg=prep.kg)
            ranked = evaluate(p2, e.train, state.phi)
            report = aggregate_metrics(ranked) if ranked else None
            row = {"train_shots": k_train, "test_shots": k_test}
            row.update(report.summary() if report else {k: 0.0 for k in CSV_FIELDS})
            rows.append(row)
    return rows


def uniform_rank_mrr(ranked: list[RankedQuery]) -> float:
    """Expected MRR of a uniformly random ranking: mean over queries of H_n / n."""
    vals = []
    for q in ranked:
        n = q.candidate_count
        vals.append(sum(1.0 / k for k in range(1, n + 1)) / n)
    return float(np.mean(vals)) if vals else math.nan


# -- drift benchmark -------------------------------------------------------

def drift_benchmark_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale drift benchmark: 2 blocks x 30 entities, horizon 100, drift every 25 steps, K = M = 3."""
    spec = SyntheticSpec(entities_per_block=30, blocks=2, relations=2, event_rate=0.3, horizon=100,
                         drift_period=25, arrival_rate=0.3, locality=12.0, seed=seed)
    train = TrainConfig(dim=16, shots=3, intervals=3, epochs=50, pretrain_epochs=20, pretrain_lr=1e-2,
                        inner_lr=1e-3, outer_lr=1e-3, batch_size=5, seed=seed)
    return ExperimentConfig(synthetic=spec, train=train, seed=seed)


@dataclass
class DriftSeedResult:
    seed: int
    mrr: dict[str, float]
    interval_mrr: dict[str, list[float]]
    drift: dict[str, float]
    uniform_mrr: float
    seconds: dict[str, float]


def run_drift_benchmark(seeds=range(5), base: ExperimentConfig | None = None) -> list[DriftSeedResult]:
    """Ablation on the drift benchmark; per-mode wall time includes the shared pretraining."""
    import time

    modes = ("finetune_only", "static_maml", "no_regularizer", "full")
    out = []
    for seed in seeds:
        e = with_seed(base, seed) if base is not None else drift_benchmark_config(seed)
        t0 = time.perf_counter()
        prep = prepare(e)
        phi0, losses = pretrain(prep, e.train)
        shared = time.perf_counter() - t0
        mrr, ivs, drift, secs = {}, {}, {}, {}
        uniform = math.nan
        for mode in modes:
            t1 = time.perf_counter()
            res = run_pipeline(replace(e, mode=mode), prep, phi0, losses)
            secs[mode] = shared + time.perf_counter() - t1
            mrr[mode] = res.report.mrr if res.report else 0.0
            ivs[mode] = interval_mrr(res.report, e.train.intervals)
            drift[mode] = res.mean_drift
            uniform = uniform_rank_mrr(res.ranked)
        out.append(DriftSeedResult(seed, mrr, ivs, drift, uniform, secs))
    return out


def drift_criteria(results: list[DriftSeedResult]) -> dict[str, tuple[bool, str]]:
    """Evaluate outcomes (a)-(d) of the drift benchmark; returns {name: (passed, detail)}."""
    mean = {m: float(np.mean([r.mrr[m] for r in results])) for m in results[0].mrr}
    uniform = float(np.mean([r.uniform_mrr for r in results]))
    ratio_a = mean["full"] / uniform
    rel_b = mean["full"] / mean["finetune_only"] - 1.0 if mean["finetune_only"] > 0 else math.inf
    mono = 0
    for r in results:
        gap = np.array(r.interval_mrr["full"]) - np.array(r.interval_mrr["static_maml"])
        mono += bool(np.all(np.diff(gap) >= 0))
    drift_ok = [r.drift["full"] <= r.drift["no_regularizer"] for r in results]
    return {
        "a_full_vs_uniform": (ratio_a >= 3.0, f"full MRR {mean['full']:.4f} = {ratio_a:.2f}x uniform {uniform:.4f}"),
        "b_full_vs_finetune": (rel_b >= 0.20, f"relative gain {rel_b:+.3f} (full {mean['full']:.4f}, "
                                              f"finetune_only {mean['finetune_only']:.4f})"),
        "c_gap_monotone": (mono >= min(4, len(results)), f"non-decreasing full-static gap on {mono}/{len(results)} seeds"),
        "d_drift_bounded": (all(drift_ok), f"full drift <= no_regularizer on {sum(drift_ok)}/{len(results)} seeds"),
    }
