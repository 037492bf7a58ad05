import json

import numpy as np
import pytest

import odrt

TINY = {
    "seed": 3,
    "episodes": 2,
    "held_out": 1,
    "policy": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "diffusion_steps": 10},
    "env": {"max_steps": 24},
    "dense_training": {"epochs": 1, "demo_episodes": 3},
    "pruner": {"width": 8, "heads": 2, "ffn_hidden": 8},
    "pruner_training": {"epochs": 1, "trajectories": 1},
}


def tiny(out):
    cfg = dict(TINY)
    cfg["paths"] = {"out": str(out)}
    return odrt.parse_config(json.dumps(cfg))


def test_config_round_trip_and_overrides(tmp_path):
    cfg = tiny(tmp_path)
    assert cfg.seed == 3
    again = odrt.parse_config(cfg.dump())
    assert again.dump() == cfg.dump()
    assert again.hash() == cfg.hash()
    moved = odrt.apply_overrides(cfg, out=str(tmp_path / "elsewhere"), rho=0.8)
    assert moved.rho == 0.8
    assert moved.hash() != cfg.hash()  # rho changed
    assert odrt.apply_overrides(cfg, out="/tmp/else").hash() == cfg.hash()


def test_unknown_key_is_a_config_error():
    with pytest.raises(odrt.OdrtError) as info:
        odrt.parse_config('{"policy": {"d_modle": 8}}')
    assert info.value.kind == "config"
    assert info.value.exit_code == 2
    assert "d_modle" in str(info.value)


def test_exit_codes():
    assert [odrt.exit_code(k) for k in ("usage", "config", "data", "compat", "numeric", "training")] == [
        2, 2, 3, 4, 5, 5]


def test_missing_artifact_is_a_usage_error(tmp_path):
    with pytest.raises(odrt.OdrtError) as info:
        odrt.train_policy(tiny(tmp_path))
    assert info.value.kind == "usage"
    assert "demos.odrt" in str(info.value)


def test_tiny_pipeline(tmp_path):
    cfg = tiny(tmp_path)
    odrt.record_demos(cfg, "expert")
    odrt.train_policy(cfg)

    dense = odrt.bench(cfg, "sequential")
    assert dense["sparsity"] == 0.0
    assert dense["flops_ratio"] == 1.0
    assert set(dense["timings"]) == {"sequential"}

    odrt.record_demos(cfg, "policy")
    odrt.train_pruner(cfg)
    odrt.rollout(cfg)
    odrt.export_masks(cfg)

    text = (tmp_path / "masks.csv").read_text()
    assert f"run_config_hash={cfg.hash()}" in text
    masks = odrt.parse_mask_csv(text)
    masks.validate()
    assert len(masks) == len(masks.iterations()) * masks.steps * masks.num_blocks
    rows = masks.rows()
    assert all(abs(sum(r[4:8]) - 1.0) < 1e-9 for r in rows)
    top = [r for r in rows if r[1] == masks.steps]
    assert all(r[3] == "C" for r in top)
    svg = masks.render_svg(1)
    assert svg.startswith("<svg") and svg == masks.render_svg(1)
    with pytest.raises(odrt.OdrtError):
        masks.render_svg(999)

    policy = odrt.Policy.load(str(tmp_path / "policy.odrt"))
    a = policy.act([0.1, -0.2, 0.5, 0.5], seed=7)
    b = policy.act([0.1, -0.2, 0.5, 0.5], seed=7)
    assert isinstance(a, np.ndarray) and a.shape == (8, 2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, policy.act([0.1, -0.2, 0.5, 0.5], seed=8))


def test_stream_seed():
    assert odrt.stream_seed(1, "eval") == odrt.stream_seed(1, "eval")
    assert odrt.stream_seed(1, "eval") != odrt.stream_seed(1, "dref")
