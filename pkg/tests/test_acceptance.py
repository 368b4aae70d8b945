"""Acceptance criteria, one test per outcome. Each prints a PASS/FAIL line (collected in the summary)."""
import json
import math
import time

import jsonschema
import numpy as np
import pytest

from fstkg import numkernel as nk
from fstkg.encoder import TRAINABLE, EncoderContext, encode_entity, init_params
from fstkg.experiment import ExperimentConfig, drift_criteria, run_drift_benchmark, run_experiment
from fstkg.kgstore import build_task, from_quads
from fstkg.meta import TrainConfig, kl_point_gaussian, make_episode, meta_objective, penalty_grad, bound_penalty, \
    temporal_regularizer
from fstkg.objective import (METRICS_SCHEMA, OBJECT, SUBJECT, CandidateScorer, FilterIndex, RankedQuery,
                             aggregate_metrics, batch_loss, make_loss_batch, rank_query)
from fstkg.sampler import sample_temporal_neighbors

from conftest import DATA, random_quads
from test_meta import bilevel_fd, cfg, tiny_world
from test_objective import oracle_rank
from test_sampler import named, oracle_bfs

RESULTS: list[str] = []


def report(label: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_1_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    kg = from_quads(random_quads(rng, 16, 3, 60, t_max=12))
    task = next(build_task(kg, e, 3, 3) for e in range(kg.num_entities) if len(kg.facts_of(e)) > 3)
    p = init_params(kg.num_entities, kg.num_relations, 8, seed=0)
    ctx = EncoderContext(kg, budget=16)
    batch = make_loss_batch(kg, task.support, 10, rng, focus=task.entity)

    def loss(*arrays):
        return batch_loss(ctx, dict(zip(TRAINABLE, arrays)), p, batch, 0.5)

    rep = nk.grad_check(loss, [getattr(p, k) for k in TRAINABLE], step=1e-5)
    err, where = rep.max_rel_error_smooth()
    dt = time.perf_counter() - t0
    report("1", err < 1e-4 and dt < 30 and kg.num_entities <= 20,
           f"max rel error {err:.2e} at {where} ({len(rep.flagged)} kink coords excluded), "
           f"{kg.num_entities} entities, d=8, {dt:.1f}s")


def test_2_sampler_oracle():
    t0 = time.perf_counter()
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        quads = random_quads(rng, int(rng.integers(2, 51)), 4, int(rng.integers(1, 301)), t_max=30)
        kg = from_quads(quads)
        for _ in range(3):
            e, t = int(rng.integers(kg.num_entities)), int(rng.integers(31))
            bound = [math.inf, 5.0, 12.0][int(rng.integers(3))]
            want = oracle_bfs(quads, kg.entities.name(e), t, bound)
            got = named(kg, sample_temporal_neighbors(kg, e, t, len(want) + 1, bound))
            b = int(rng.integers(0, len(want) + 1))
            prefix = named(kg, sample_temporal_neighbors(kg, e, t, b, bound))
            bad += (got != want) + (prefix != want[:b])
    dt = time.perf_counter() - t0
    report("2", bad == 0 and dt < 10, f"{bad} mismatches over 100 graphs x 3 queries, {dt:.1f}s")


def test_3_ranking_oracle():
    mismatches, n = 0, 0
    seed = 0
    while n < 500:
        rng = np.random.default_rng(seed)
        kg = from_quads(random_quads(rng, int(rng.integers(3, 9)), 2, 20, t_max=8))
        p = init_params(kg.num_entities, kg.num_relations, 3, seed=seed)
        ctx = EncoderContext(kg, budget=5)
        scorer = CandidateScorer(ctx, p)
        known = FilterIndex.from_kg(kg)
        triples = kg.triples()
        for _ in range(5):
            q = tuple(int(x) for x in kg.quads[rng.integers(len(kg))])
            s, r, o, t = q
            H = np.array([encode_entity(ctx, p, e, t - 1) for e in range(kg.num_entities)])
            slot = OBJECT if rng.random() < 0.5 else SUBJECT
            if slot == OBJECT:
                sc = [-float(np.sum((H[s] + p.relation[r] - H[c]) ** 2)) for c in range(kg.num_entities)]
                filt, true = {c for (a, b, c) in triples if (a, b) == (s, r)}, o
            else:
                sc = [-float(np.sum((H[c] + p.relation[r] - H[o]) ** 2)) for c in range(kg.num_entities)]
                filt, true = {a for (a, b, c) in triples if (b, c) == (r, o)}, s
            mismatches += rank_query(scorer, q, slot, known).rank != oracle_rank(sc, true, filt)
            n += 1
        seed += 1
    rep = aggregate_metrics([RankedQuery((0, 0, 0, 0), OBJECT, 0, k, 10) for k in (1, 2, 4)])
    ok = (mismatches == 0 and abs(rep.mrr - 0.58333) < 1e-5 and abs(rep.mrr - 7 / 12) < 1e-9
          and rep.hits[1] == 1 / 3 and rep.hits[3] == 2 / 3)
    report("3", ok, f"{mismatches}/{n} rank mismatches; ranks [1,2,4] -> MRR {rep.mrr:.9f}, "
                    f"H@1 {rep.hits[1]:.6f}, H@3 {rep.hits[3]:.6f}")


def test_4_regularizer_arithmetic():
    value = temporal_regularizer(0.3, 0.0, 10, 0.1)
    p, anchor = init_params(5, 2, 3, seed=7), init_params(5, 2, 3, seed=8)
    kl_same = kl_point_gaussian(p, p.copy(), 1.0)
    g = np.concatenate([v.ravel() for v in penalty_grad(p, anchor, 12, 0.1, 1.0).values()])
    flat, num = p.flat(), []
    shapes = [(k, getattr(p, k).shape) for k in TRAINABLE]

    def unflat(x):
        out, i = {}, 0
        for k, shp in shapes:
            size = int(np.prod(shp))
            out[k] = x[i:i + size].reshape(shp)
            i += size
        return p.replace(**out)

    for j in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[j] += 1e-6
        lo[j] -= 1e-6
        f = lambda x: bound_penalty(kl_point_gaussian(unflat(x), anchor, 1.0), 12, 0.1)  # noqa: E731
        num.append((f(hi) - f(lo)) / 2e-6)
    rel = float(np.max(nk.rel_error(g, np.array(num))))
    report("4", abs(value - 0.79232) <= 1e-5 and kl_same == 0.0 and rel < 1e-6,
           f"R = {value:.6f}, KL(identical) = {kl_same}, penalty grad rel error {rel:.2e}")


def test_5_first_order_audit():
    kg = tiny_world()
    n = kg.entities["n"]
    cosines = []
    for seed in range(20):
        task = build_task(kg, n, 3, 3)
        c = cfg(dim=1, inner_lr=1e-2)
        p = init_params(kg.num_entities, 1, 1, seed=seed)
        rng = np.random.default_rng(seed)
        anchor = p.replace(entity=p.entity + rng.normal(0, 0.1, p.entity.shape))
        ctx = EncoderContext(kg, 4)
        eps = [make_episode(kg, task, task.query_intervals[0], c, np.random.default_rng(seed), p.entity.shape[0])]
        fo = meta_objective(p, anchor, eps, c, ctx).grads
        fo = np.concatenate([fo[k].ravel() for k in TRAINABLE])
        fd = bilevel_fd(p, anchor, eps, c, ctx)
        cosines.append(float(fo @ fd / (np.linalg.norm(fo) * np.linalg.norm(fd))))
    size = init_params(kg.num_entities, 1, 1).flat().size
    report("5", min(cosines) > 0.9 and size <= 20,
           f"{size} parameters, inner rate 1e-2, cosine min {min(cosines):.4f} mean {np.mean(cosines):.4f}")


@pytest.fixture(scope="module")
def drift_results():
    return run_drift_benchmark(range(5))


def test_6_runtime(drift_results):
    per_mode = {m: sum(r.seconds[m] for r in drift_results) for m in drift_results[0].seconds}
    worst = max(per_mode.values())
    report("6-runtime", worst < 300, ", ".join(f"{m} {s:.0f}s" for m, s in per_mode.items()))


@pytest.mark.parametrize("key", ["a_full_vs_uniform", "b_full_vs_finetune", "c_gap_monotone", "d_drift_bounded"])
def test_6_drift_benchmark(drift_results, key):
    ok, detail = drift_criteria(drift_results)[key]
    report(f"6{key[0]}", ok, detail)


def _small_run(out_dir):
    from test_experiment import small
    return run_experiment(small(out_dir))


def test_7_determinism(tmp_path):
    _small_run(tmp_path / "one")
    _small_run(tmp_path / "two")
    a, b = (tmp_path / "one" / "metrics.json").read_bytes(), (tmp_path / "two" / "metrics.json").read_bytes()
    report("7", a == b, f"metrics.json {len(a)} bytes, identical={a == b}")


def test_8_icews_smoke(tmp_path):
    t0 = time.perf_counter()
    exp = ExperimentConfig(dataset=str(DATA / "icews_excerpt.tsv"), mode="full", out_dir=str(tmp_path),
                           train=TrainConfig(pretrain_epochs=2, epochs=2, pretrain_lr=1e-2))
    res = run_experiment(exp)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    jsonschema.validate(doc, METRICS_SCHEMA)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    dt = time.perf_counter() - t0
    n_quads = sum(1 for line in open(DATA / "icews_excerpt.tsv", encoding="utf-8") if line.strip())
    ok = n_quads == 5000 and dt < 180 and res.report is not None and len(recs) == 2 + 2 * 3
    report("8", ok, f"{n_quads} quadruples, {doc['query_count']} ranked queries, MRR {doc['mrr']:.4f}, {dt:.1f}s")
