import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from fstkg import cli, meta
from fstkg.experiment import (ExperimentConfig, StageError, build_config, load_config, parse_config_text, prepare,
                              run_ablation_suite, run_cross_shot, run_experiment, uniform_rank_mrr)
from fstkg.kgstore import ROLES
from fstkg.meta import TrainConfig
from fstkg.objective import METRICS_SCHEMA, OBJECT, RankedQuery
from fstkg.synthetic import SyntheticSpec

from conftest import DATA


def small(out_dir=None, **train):
    spec = SyntheticSpec(entities_per_block=10, horizon=40, drift_period=10, arrival_rate=0.4, event_rate=0.4, seed=1)
    kw = dict(dim=4, epochs=1, pretrain_epochs=1, pretrain_lr=1e-2, inner_lr=1e-2, outer_lr=1e-2, batch_size=4,
              budget=6, seed=1)
    kw.update(train)
    return ExperimentConfig(synthetic=spec, train=TrainConfig(**kw), seed=1, out_dir=str(out_dir or "out"))


def test_config_text_parsing(tmp_path):
    text = "# profile\nmode = static_maml\ndim = 8\nsynth_horizon = 60\nratios = 0.5, 0.2, 0.1, 0.2\n" \
           "time_aware_filter = yes\nseed = 4\n"
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    exp = load_config(path)
    assert exp.mode == "static_maml" and exp.train.dim == 8 and exp.synthetic.horizon == 60
    assert exp.ratios == (0.5, 0.2, 0.1, 0.2) and exp.time_aware_filter
    assert exp.seed == exp.train.seed == exp.synthetic.seed == 4


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError, match="unknown config key"):
        build_config({"learning_rate": "0.1"})
    with pytest.raises(ValueError):
        build_config({"warm_start": "maybe"})


def test_source_must_be_exclusive(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig().validate()
    with pytest.raises(ValueError):
        replace(small(), dataset=str(DATA / "icews_excerpt.tsv")).validate()
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(dataset=str(tmp_path / "missing.tsv")).validate()


def test_pipeline_outputs_are_valid_and_deterministic(tmp_path):
    texts = []
    for run in ("a", "b"):
        exp = small(tmp_path / run)
        res = run_experiment(exp)
        out = tmp_path / run
        assert {p.name for p in out.iterdir()} == {"metrics.json", "metrics.csv", "train_log.jsonl",
                                                   "checkpoint.json", "split.txt"}
        doc = json.loads((out / "metrics.json").read_text())
        jsonschema.validate(doc, METRICS_SCHEMA)
        assert set(doc["per_interval"]) <= {"1", "2", "3"} and doc["query_count"] == res.report.query_count
        log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        meta_recs = [r for r in log if r["stage"] == "meta"]
        assert [r["interval"] for r in meta_recs] == [1, 2, 3]
        texts.append((out / "metrics.json").read_bytes())
    assert texts[0] == texts[1]


def test_stage_error_removes_partial_outputs(tmp_path):
    exp = small(tmp_path / "bad", shots=500)
    with pytest.raises(StageError) as err:
        run_experiment(exp)
    assert err.value.stage == "meta_train"
    assert list((tmp_path / "bad").iterdir()) == []


def test_training_never_reads_evaluation_queries(monkeypatch):
    exp = small()
    prep = prepare(exp)
    assert prep.eval_tasks
    hidden = {f for t in prep.eval_tasks for f in t.query}
    hidden_quads = {tuple(prep.kg.quads[f]) for f in hidden}
    for ctx in (prep.pretrain_ctx, prep.train_ctx):
        assert hidden_quads.isdisjoint(map(tuple, ctx.kg.quads.tolist()))
    seen = []
    real = meta.make_loss_batch

    def logged(kg, fact_ids, *a, **k):
        seen.extend(int(f) for f in fact_ids)
        return real(kg, fact_ids, *a, **k)

    monkeypatch.setattr(meta, "make_loss_batch", logged)
    from fstkg import experiment
    phi0, _ = experiment.pretrain(prep, exp.train)
    experiment.train(prep, exp.train, phi0, "full")
    assert seen and hidden.isdisjoint(seen)
    # meta-training queries stay out of the meta-training encoder view
    train_q = {tuple(prep.kg.quads[f]) for t in prep.train_tasks for f in t.query}
    assert train_q.isdisjoint(map(tuple, prep.train_ctx.kg.quads.tolist()))


def test_task_facts_match_entity_role():
    prep = prepare(small())
    for tasks, role in ((prep.train_tasks, "meta_train"), (prep.eval_tasks, "meta_test")):
        for t in tasks:
            assert prep.split.role_of(t.entity) == role
            assert all(ROLES[prep.froles[f]] == role for f in t.facts())


def test_ablation_table_shape():
    rows, _ = run_ablation_suite(small(), seeds=(1,))
    assert len(rows) == 8
    assert [r["mode"] for r in rows[:4]] == ["finetune_only", "static_maml", "no_regularizer", "full"]
    assert all(r["seed"] == "mean" for r in rows[4:])
    assert all("mrr_interval1" in r and "mean_drift" in r for r in rows)


def test_cross_shot_runs():
    rows = run_cross_shot(small(), train_shots=(1,), test_shots=(3,))
    assert rows[0]["train_shots"] == 1 and rows[0]["test_shots"] == 3 and rows[0]["query_count"] > 0


def test_uniform_expectation():
    q = lambda n: RankedQuery((0, 0, 0, 0), OBJECT, 0, 1, n)  # noqa: E731
    assert uniform_rank_mrr([q(1)]) == 1.0
    assert uniform_rank_mrr([q(2), q(4)]) == pytest.approx((0.75 + (1 + 1 / 2 + 1 / 3 + 1 / 4) / 4) / 2)


def _write_cfg(tmp_path):
    exp = small()
    lines = [f"synth_{k} = {getattr(exp.synthetic, k)}" for k in ("entities_per_block", "horizon", "drift_period",
                                                                  "arrival_rate", "event_rate")]
    lines += [f"{k} = {getattr(exp.train, k)}" for k in ("dim", "epochs", "pretrain_epochs", "pretrain_lr",
                                                          "inner_lr", "outer_lr", "batch_size", "budget")]
    path = tmp_path / "small.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_cli_round_trip(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "cli"
    assert cli.main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
    assert cli.main(["ingest", str(out / "synthetic.tsv")]) == 0
    assert '"quadruples"' in capsys.readouterr().out
    assert cli.main(["train", "--config", str(cfg), "--seed", "1", "--mode", "full", "--out", str(out)]) == 0
    assert cli.main(["eval", "--config", str(cfg), "--seed", "1", "--checkpoint", str(out / "checkpoint.json"),
                     "--out", str(out)]) == 0
    jsonschema.validate(json.loads((out / "metrics.json").read_text()), METRICS_SCHEMA)
    assert cli.main(["split", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "split.txt").exists()


def test_cli_reports_stage_errors(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    code = cli.main(["run", "--config", str(cfg), "--set", "shots=500", "--out", str(tmp_path / "x")])
    assert code == 1 and "[meta_train]" in capsys.readouterr().err
