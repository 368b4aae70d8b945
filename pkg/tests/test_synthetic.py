import numpy as np
import pytest
from hypothesis import given, strategies as st

from fstkg.synthetic import SyntheticSpec, audit_synthetic, block_of, generate_synthetic, target_block


def test_sixty_entities_pass_audit():
    spec = SyntheticSpec(entities_per_block=30, blocks=2, horizon=100, seed=0)
    kg = generate_synthetic(spec)
    assert audit_synthetic(kg, spec) == []
    assert kg.num_entities <= 60 and len(kg) > 0
    assert np.all(np.diff(kg.quads[:, 3]) >= 0)
    assert kg.quads[:, 3].max() < spec.horizon


@given(st.integers(0, 1000))
def test_generation_is_pure(seed):
    spec = SyntheticSpec(entities_per_block=8, horizon=30, drift_period=10, seed=seed)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.entities.names == b.entities.names
    np.testing.assert_array_equal(a.quads, b.quads)


def test_seed_changes_graph():
    a = generate_synthetic(SyntheticSpec(entities_per_block=8, horizon=30, drift_period=10, seed=1))
    b = generate_synthetic(SyntheticSpec(entities_per_block=8, horizon=30, drift_period=10, seed=2))
    assert len(a) != len(b) or not np.array_equal(a.quads, b.quads)


def _targets(kg, lo, hi):
    out = {}
    for s, r, o, t in kg.quads.tolist():
        if lo <= t < hi:
            key = (block_of(kg.entities.name(s)), kg.relations.name(r))
            out.setdefault(key, set()).add(block_of(kg.entities.name(o)))
    return out


def test_static_rule_without_drift():
    spec = SyntheticSpec(entities_per_block=10, horizon=50, drift_period=50, seed=3)
    targets = _targets(generate_synthetic(spec), 0, 50)
    assert targets and all(len(v) == 1 for v in targets.values())


def test_rule_rotates_at_drift_point():
    spec = SyntheticSpec(entities_per_block=10, horizon=50, drift_period=25, seed=3)
    kg = generate_synthetic(spec)
    before, after = _targets(kg, 0, 25), _targets(kg, 25, 50)
    shared = set(before) & set(after)
    assert shared
    for key in shared:
        assert before[key] != after[key]
    assert target_block(spec, 0, 0, 24) != target_block(spec, 0, 0, 25)


def test_arrivals_spread_over_time():
    kg = generate_synthetic(SyntheticSpec(seed=4))
    first = kg.first_seen[kg.first_seen >= 0]
    assert (first == 0).sum() >= 2 and (first > 50).sum() > 0


@pytest.mark.parametrize("kw", [dict(blocks=0), dict(drift_period=200), dict(event_rate=0.0), dict(locality=-1.0)])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw).validate()
