import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bertswin.checkpoint import Checkpoint, checkpoint_hash, checkpoint_load, checkpoint_save
from bertswin.errors import ConfigError
from bertswin.harness import (EarlyStop, RunConfig, convergence_report, data_seeds, desk_cells, format_report,
                              load_model, run_compare, run_pretrain, steps_to_target, train_loss_reduction)


def tiny(**over):
    base = dict(volume_size=16, patch_size=4, embed_dim=16, depth=1, heads=2, window=2, stem_base=4,
                dec_channels=(4,), n_train=4, n_val=2, batch_size=2, steps=6, val_every=3)
    base.update(over)
    return RunConfig(**base)


def metrics_text(path):
    return (path / "metrics.jsonl").read_text()


def determinism_check(tmp_path, cfg=None):
    """Two identical runs: (metrics identical, checkpoint hashes identical)."""
    cfg = cfg or tiny()
    a = run_pretrain(cfg, tmp_path / "a")
    b = run_pretrain(cfg, tmp_path / "b")
    return metrics_text(tmp_path / "a") == metrics_text(tmp_path / "b"), a.checkpoint_hash == b.checkpoint_hash


def resume_check(tmp_path, cfg=None):
    """Interrupt at the midpoint, resume, and compare the stream and final state to a straight run."""
    cfg = cfg or tiny(checkpoint_every=3)
    full = run_pretrain(cfg, tmp_path / "full")
    half = run_pretrain(cfg.replace(steps=3), tmp_path / "part")
    resumed = run_pretrain(cfg, tmp_path / "part", resume=half.checkpoint)
    same_stream = metrics_text(tmp_path / "full") == metrics_text(tmp_path / "part")
    return same_stream, full.checkpoint_hash == resumed.checkpoint_hash


def test_identical_configs_are_bit_identical(tmp_path):
    assert determinism_check(tmp_path) == (True, True)


def test_different_seed_changes_run(tmp_path):
    a = run_pretrain(tiny(), tmp_path / "a")
    b = run_pretrain(tiny(seed=1), tmp_path / "b")
    assert a.checkpoint_hash != b.checkpoint_hash


@pytest.mark.parametrize("optimizer", ["gcond", "adamw"])
def test_resume_reproduces_stream(tmp_path, optimizer):
    assert resume_check(tmp_path, tiny(checkpoint_every=3, optimizer=optimizer)) == (True, True)


def test_resume_rejects_other_config(tmp_path):
    half = run_pretrain(tiny(steps=3), tmp_path / "a")
    with pytest.raises(ConfigError):
        run_pretrain(tiny(lr=1e-2), tmp_path / "a", resume=half.checkpoint)


def test_in_memory_run_matches_file_run(tmp_path):
    mem = run_pretrain(tiny(), None, write_files=False)
    disk = run_pretrain(tiny(), tmp_path / "a")
    assert json.dumps(mem.metrics, sort_keys=True) == json.dumps(disk.metrics, sort_keys=True)


def test_metrics_stream_layout(tmp_path):
    res = run_pretrain(tiny(loss="phys"), tmp_path / "a")
    recs = [json.loads(l) for l in metrics_text(tmp_path / "a").splitlines()]
    assert recs == json.loads(json.dumps(res.metrics))
    assert [r["step"] for r in recs if r["split"] == "val"] == [0, 3, 6]
    assert [r["step"] for r in recs if r["split"] == "train"] == list(range(1, 7))
    train = [r for r in recs if r["split"] == "train"][0]
    assert set(train["terms"]) >= {"global", "soft", "surf"}
    timing = (tmp_path / "a" / "timing.jsonl").read_text().splitlines()
    assert len(timing) == len(recs)
    assert "wall_ms" not in metrics_text(tmp_path / "a")


def test_config_toml_round_trip():
    cfg = tiny(loss="mvc", optimizer="adamw", mvc_all_patches=True)
    assert RunConfig.from_toml(cfg.to_toml()) == cfg


@pytest.mark.parametrize("text", ["steps = 'ten'", "colour = 3", "[model]\ndepth = 2", "loss = 'l1'",
                                  "batch_size = 0", "steps = "])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        RunConfig.from_toml(text)


def test_int_accepted_for_float_key():
    assert RunConfig.from_toml("lr = 1").lr == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 50), st.integers(1, 50))
def test_train_val_seeds_disjoint(seed, n_train, n_val):
    train, val = data_seeds(seed, n_train, n_val)
    assert len(set(train)) == n_train and len(set(val)) == n_val
    assert not set(train) & set(val)
    assert data_seeds(seed, n_train, n_val) == (train, val)


def test_load_model_reproduces_params(tmp_path):
    res = run_pretrain(tiny(), tmp_path / "a")
    cfg, model, stats, ck = load_model(res.checkpoint)
    assert cfg == tiny().replace(out_dir=cfg.out_dir) and ck.step == 6
    for k, p in model.params.items():
        np.testing.assert_array_equal(p.data, res.model.params[k].data)
    assert stats == res.stats


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _ck(tmp_path):
    ck = Checkpoint(3, {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)}, "seed = 0\n", {"k": "v"})
    return checkpoint_save(tmp_path / "ck", ck)


def test_checkpoint_round_trip(tmp_path):
    path = _ck(tmp_path)
    back = checkpoint_load(path)
    assert back.step == 3 and back.meta == {"k": "v"} and back.config_text == "seed = 0\n"
    np.testing.assert_array_equal(back.tensors["a"], np.arange(6.0).reshape(2, 3))
    assert back.tensors["b"].shape == ()
    assert checkpoint_hash(path) == checkpoint_hash(_ck(tmp_path))


@pytest.mark.parametrize("old,new,field", [("step 3", "step three", "step"),
                                           ("f64", "f32", "tensor.dtype"),
                                           ("tensors 2", "tensors x", "tensors")])
def test_corrupted_manifest_names_field_and_line(tmp_path, old, new, field):
    path = _ck(tmp_path)
    manifest = path / "manifest.txt"
    text = manifest.read_text()
    lineno = next(i for i, l in enumerate(text.splitlines(), 1) if old in l)
    manifest.write_text(text.replace(old, new, 1))
    with pytest.raises(ConfigError) as err:
        checkpoint_load(path)
    assert f"line {lineno}" in str(err.value) and field in str(err.value)


def test_truncated_blob_detected(tmp_path):
    path = _ck(tmp_path)
    blob = next(p for p in path.iterdir() if p.name != "manifest.txt")
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ConfigError, match="tensor.offset"):
        checkpoint_load(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        checkpoint_load(tmp_path)


# ---------------------------------------------------------------------------
# comparison and early stopping
# ---------------------------------------------------------------------------

def _val(step, v):
    return {"step": step, "split": "val", "masked_l2": v}


def test_steps_to_target_and_report():
    a = [_val(0, 1.0), _val(10, 0.6), _val(20, 0.4)]
    b = [_val(0, 1.0), _val(10, 0.45)]
    assert steps_to_target(a) == 20 and steps_to_target(b) == 10
    rep = convergence_report({"a": a, "b": b}, baseline="a")
    assert rep["runs"]["b"]["speedup_vs_baseline"] == 2.0
    assert rep["runs"]["a"]["speedup_vs_baseline"] == 1.0
    assert "not reached" not in format_report(rep)
    rep = convergence_report({"a": a, "c": [_val(0, 1.0)]}, baseline="a")
    assert rep["runs"]["c"]["speedup_vs_baseline"] is None
    assert "not reached" in format_report(rep)


def test_event_records_are_not_targets():
    assert steps_to_target([{"step": 5, "split": "val", "event": "early_stop", "masked_l2": 0.0}]) is None


def test_train_loss_reduction():
    recs = [{"split": "train", "loss": 4.0}] + [{"split": "train", "loss": 1.0}] * 10
    assert train_loss_reduction(recs) == 0.75


def test_zero_learning_rate_never_reaches_target():
    cfg = tiny(optimizer="adamw", lr=0.0)
    rep = run_compare(cfg, cfg, target_value=1e-6)
    assert rep["status"] == "not reached" and rep["ratio"] is None


def test_identical_configs_compare_at_ratio_one():
    cfg = tiny()
    rep = run_compare(cfg, cfg, target_value=10.0)
    assert rep["ratio"] == 1.0 and rep["status"] == "reached"


def test_compare_refuses_mismatched_data():
    with pytest.raises(ConfigError):
        run_compare(tiny(), tiny(seed=3))


def test_early_stop_logic():
    stop = EarlyStop("masked_l2", patience=2, threshold=0.0)
    assert [stop.update(v) for v in (1.0, 0.9, 0.95, 0.9)] == [False, False, False, True]
    never = EarlyStop("masked_l2", patience=0, threshold=0.0)
    assert not any(never.update(v) for v in (1.0, 2.0, 3.0, 4.0))


def test_early_stop_in_run(tmp_path):
    cfg = tiny(optimizer="adamw", lr=0.0, steps=30, val_every=1, early_stop_patience=2)
    res = run_pretrain(cfg, tmp_path / "a")
    assert res.stopped_early and res.step == 2
    assert res.metrics[-1]["event"] == "early_stop"


def test_desk_cells():
    cells = desk_cells(tiny())
    assert len(cells) == 5
    assert {(c.variant, c.loss, c.optimizer) for c in cells.values()} == {
        ("bertswin", "l2", "gcond"), ("bertswin", "l2", "adamw"), ("vit_sparse", "l2", "gcond"),
        ("vit_sparse", "l2", "adamw"), ("bertswin", "phys", "gcond")}


def test_identical_configs_compare_at_ratio_one_after_training():
    cfg = tiny(steps=9)
    vals = [r["masked_l2"] for r in run_pretrain(cfg, None, write_files=False).metrics
            if r["split"] == "val" and "event" not in r]
    rep = run_compare(cfg, cfg, target_value=float(min(vals)))
    assert rep["ratio"] == 1.0 and rep["runs"]["candidate"]["steps_to_target"] > 0


def test_speedup_when_candidate_starts_at_target():
    rep = convergence_report({"a": [_val(0, 1.0), _val(10, 0.1)], "b": [_val(0, 0.1)]}, baseline="a")
    assert rep["runs"]["b"]["speedup_vs_baseline"] == float("inf")
