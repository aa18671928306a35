"""MC-dropout tests: mask statistics, determinism, and mask constancy in time."""

import hashlib

import numpy as np
import pytest

from crashcast.dropout import (
    DropoutSpec,
    MaskSet,
    PredictiveDistribution,
    mix64,
    run_sfp,
    sample_masks,
    stochastic_forward,
)
from crashcast.network import dpm_forward, init_params

from test_network import make_samples, tiny_config


def test_mix64_is_deterministic_and_spreads():
    assert mix64(42, 0) == mix64(42, 0)
    outs = {mix64(42, i) for i in range(1000)}
    assert len(outs) == 1000
    assert all(0 <= v < 2**64 for v in outs)
    assert mix64(42, 0) != mix64(43, 0)


def test_dropout_spec_validation():
    with pytest.raises(ValueError):
        DropoutSpec(rate=1.0)
    with pytest.raises(ValueError):
        DropoutSpec(rate=-0.1)
    with pytest.raises(ValueError):
        DropoutSpec(targets=("inputs", "head"))


def test_zero_rate_masks_are_all_ones():
    config = tiny_config()
    params = init_params(config, seed=0)
    ms = sample_masks(DropoutSpec(rate=0.0), params, rng_seed=1)
    assert ms.masks
    for m in ms.masks.values():
        assert (m == 1.0).all()


def test_high_rate_mask_fraction_matches_binomial():
    config = tiny_config(rows=8, cols=8)
    params = init_params(config, seed=1)
    rate = 0.999
    ms = sample_masks(DropoutSpec(rate=rate), params, rng_seed=2)
    total = sum(m.size for m in ms.masks.values())
    zeros = sum(int((m == 0.0).sum()) for m in ms.masks.values())
    se = np.sqrt(rate * (1 - rate) / total)
    assert abs(zeros / total - rate) <= 3 * se


def test_empirical_drop_fraction_over_1e5_elements():
    config = tiny_config(rows=16, cols=16)
    params = init_params(config, seed=2)
    rate = 0.2
    total = 0
    zeros = 0
    i = 0
    while total < 100_000:
        ms = sample_masks(DropoutSpec(rate=rate), params, rng_seed=mix64(3, i))
        total += sum(m.size for m in ms.masks.values())
        zeros += sum(int((m == 0.0).sum()) for m in ms.masks.values())
        i += 1
    se = np.sqrt(rate * (1 - rate) / total)
    assert abs(zeros / total - rate) <= 3 * se


def test_masks_cover_exactly_the_recurrent_weight_families():
    config = tiny_config()  # images_state_action: conv branches plus lstm
    params = init_params(config, seed=3)
    ms = sample_masks(DropoutSpec(rate=0.5), params, rng_seed=4)
    suffixes = {name.split(".")[-1] for name in ms.masks}
    assert suffixes == {"w_xi", "w_xf", "w_xc", "w_xo",
                        "w_hi", "w_hf", "w_hc", "w_ho",
                        "w_ci", "w_cf", "w_co"}
    assert not any(name.startswith("head.") for name in ms.masks)
    assert any(name.startswith("lstm.") for name in ms.masks)
    # target subsets restrict the families
    ms_in = sample_masks(DropoutSpec(rate=0.5, targets=("inputs",)), params, rng_seed=4)
    assert {n.split(".")[-1] for n in ms_in.masks} == {"w_xi", "w_xf", "w_xc", "w_xo"}


def test_same_seed_same_masks():
    config = tiny_config()
    params = init_params(config, seed=4)
    a = sample_masks(DropoutSpec(rate=0.3), params, rng_seed=99)
    b = sample_masks(DropoutSpec(rate=0.3), params, rng_seed=99)
    assert set(a.masks) == set(b.masks)
    for name in a.masks:
        assert (a.masks[name] == b.masks[name]).all()


def test_stochastic_forward_zero_rate_equals_deterministic():
    config = tiny_config()
    params = init_params(config, seed=5)
    rng = np.random.default_rng(6)
    sample = make_samples(rng, config, 1)[0]
    p_det = float(dpm_forward(params, config, sample)[0])
    p_sto = stochastic_forward(params, config, sample, DropoutSpec(rate=0.0), rng_seed=7)
    assert p_sto == p_det


def test_stochastic_forward_seed_behaviour():
    config = tiny_config()
    params = init_params(config, seed=6)
    rng = np.random.default_rng(8)
    sample = make_samples(rng, config, 1)[0]
    spec = DropoutSpec(rate=0.2)
    assert stochastic_forward(params, config, sample, spec, 11) == \
        stochastic_forward(params, config, sample, spec, 11)
    assert stochastic_forward(params, config, sample, spec, 11) != \
        stochastic_forward(params, config, sample, spec, 12)


def test_run_sfp_small_cases():
    config = tiny_config()
    params = init_params(config, seed=7)
    rng = np.random.default_rng(9)
    sample = make_samples(rng, config, 1)[0]
    spec = DropoutSpec(rate=0.0)
    one = run_sfp(params, config, sample, spec, 1, rng_seed=5)
    assert one.n == 1
    assert one.samples[0] == stochastic_forward(params, config, sample, spec, mix64(5, 0))
    hundred = run_sfp(params, config, sample, spec, 100, rng_seed=5)
    assert hundred.n == 100
    assert len(set(hundred.samples)) == 1  # degenerate distribution, variance 0
    with pytest.raises(ValueError):
        run_sfp(params, config, sample, spec, 0, rng_seed=5)


def test_run_sfp_deterministic_and_pass_independent():
    config = tiny_config()
    params = init_params(config, seed=8)
    rng = np.random.default_rng(10)
    sample = make_samples(rng, config, 1)[0]
    spec = DropoutSpec(rate=0.2)
    a = run_sfp(params, config, sample, spec, 25, rng_seed=123)
    b = run_sfp(params, config, sample, spec, 25, rng_seed=123)
    assert a.samples == b.samples
    # pass i is exactly an independent stochastic pass at the split seed
    for i in (0, 7, 24):
        assert a.samples[i] == stochastic_forward(params, config, sample, spec, mix64(123, i))
    assert len(set(a.samples)) > 1


def _mask_digests_per_step(params, config, sample, spec, seed):
    """Digest of the effective first-conv-layer weights observed at each step."""
    records = []

    def hook(branch, layer_index, t, eff):
        if branch == config.cameras[0] and layer_index == 0:
            digest = hashlib.sha256(eff.w_xi.tobytes() + eff.w_hi.tobytes()).hexdigest()
            records.append((t, digest))

    stochastic_forward(params, config, sample, spec, seed, step_hook=hook)
    return records


def test_mask_constancy_across_time_steps():
    config = tiny_config(seq_len=5)
    params = init_params(config, seed=9)
    rng = np.random.default_rng(11)
    sample = make_samples(rng, config, 1)[0]
    spec = DropoutSpec(rate=0.2)
    per_pass = []
    for i in range(30):
        records = _mask_digests_per_step(params, config, sample, spec, mix64(77, i))
        assert [t for t, _ in records] == list(range(config.seq_len))
        digests = {d for _, d in records}
        assert len(digests) == 1  # one mask set across all L steps of a pass
        per_pass.append(records[0][1])
    pairs = 0
    differing = 0
    for i in range(len(per_pass)):
        for j in range(i + 1, len(per_pass)):
            pairs += 1
            differing += per_pass[i] != per_pass[j]
    assert differing / pairs >= 0.99


def test_default_rate_distribution_is_non_degenerate():
    # the headline use case: many passes at the default 1% rate spread out
    config = tiny_config()
    params = init_params(config, seed=11)
    rng = np.random.default_rng(12)
    sample = make_samples(rng, config, 1)[0]
    dist = run_sfp(params, config, sample, DropoutSpec(rate=0.01), 200, rng_seed=5)
    assert len(set(dist.samples)) > 1
    assert float(np.std(dist.samples)) > 0.0


def test_predictive_distribution_validation():
    with pytest.raises(ValueError):
        PredictiveDistribution(samples=(0.5, 1.2))
    d = PredictiveDistribution(samples=(0.25, 0.75))
    assert d.n == 2


def test_mask_set_records_seed():
    config = tiny_config()
    params = init_params(config, seed=10)
    ms = sample_masks(DropoutSpec(rate=0.1), params, rng_seed=321)
    assert isinstance(ms, MaskSet)
    assert ms.seed == 321


def test_write_distribution_csv(tmp_path):
    from crashcast.dropout import write_distribution_csv

    dist = PredictiveDistribution(samples=(0.25, 0.5, 1.0))
    path = tmp_path / "dist.csv"
    write_distribution_csv(dist, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "pass_index,p_collision"
    assert lines[1] == "0,0.25"
    assert lines[3] == "2,1.0"
