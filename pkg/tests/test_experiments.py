import json
import math

import pytest
import torch

from sparseinterp import cli
from sparseinterp import experiments as ex
from sparseinterp.train import TrainConfig


def tiny_spec(**kw):
    base = dict(
        methods=["ours", "uniform"],
        gammas={"default": [0.0, 1e-3]},
        resolutions=[32, 16],
        seeds=[0],
        iters=4,
        n_eval=4,
        base={"batch_size": 2, "net": {"width": 8, "depth": 1,
                                        "block": {"channels": 8, "interp": {"radius": 2}, "grid_stride": 5}}},
    )
    base.update(kw)
    return ex.ExperimentSpec(**base)


def test_pareto_and_matched_flops_examples():
    pts = [(1.0, 50.0), (2.0, 60.0), (3.0, 55.0), (4.0, 70.0)]
    assert ex.pareto_front(pts) == [(1.0, 50.0), (2.0, 60.0), (4.0, 70.0)]
    assert ex.flops_at_metric(pts, 65.0) == 3.0
    assert ex.flops_at_metric(pts, 55.0) == 1.5
    # within tolerance of the ends snaps; beyond is undefined
    assert ex.flops_at_metric(pts, 70.4) == 4.0
    assert ex.flops_at_metric(pts, 49.6) == 1.0
    assert ex.flops_at_metric(pts, 71.0) == math.inf
    assert math.isnan(ex.flops_at_metric(pts, 49.0))
    assert ex.metric_at_flops(pts, 3.0) == 65.0
    assert math.isnan(ex.metric_at_flops(pts, 5.0))


def test_matched_points_ratios():
    curves = {"a": [(1.0, 50.0), (2.0, 60.0)], "b": [(2.0, 50.0), (4.0, 60.0)]}
    rows = ex.matched_points(curves, "a", [(1.5, 55.0)])
    assert rows[0]["flops_a"] == 1.5 and rows[0]["flops_b"] == 3.0 and rows[0]["ratio_b"] == 2.0
    # the reference is charged its measured cost even off its own front
    off = ex.matched_points(curves, "a", [(2.5, 55.0), (1.0, 61.0)])
    assert off[0]["flops_a"] == 2.5 and off[0]["ratio_b"] == 3.0 / 2.5
    assert off[1]["flops_b"] == math.inf


def test_seed_pairing_is_enforced():
    ex.check_paired({"a": (0, 1), "b": (1, 0)})
    with pytest.raises(ex.SeedMismatchError):
        ex.check_paired({"a": (0, 1), "b": (0,)})


def test_spec_validation_and_hash():
    with pytest.raises(ValueError):
        ex.ExperimentSpec(methods=["ours", "magic"])
    with pytest.raises(ValueError):
        ex.ExperimentSpec(seeds=[])
    a, b = tiny_spec(), tiny_spec()
    assert a.hash == b.hash and tiny_spec(seeds=[1]).hash != a.hash
    assert ex.ExperimentSpec.from_dict(json.loads(json.dumps(a.to_dict()))) == a


def test_make_config_per_method():
    spec = tiny_spec()
    assert ex.make_config(spec, "uniform", 16, 0).resolution == 16
    grid = ex.make_config(spec, "uniform_grid", 3, 0)
    assert grid.net.block.method == "grid" and grid.net.block.grid_stride == 3 and grid.gamma == 0
    fz = ex.make_config(spec, "fill_zeros", 1e-3, 2)
    assert fz.net.block.interp.kind == "fill_zeros" and fz.gamma == 1e-3 and fz.seed == fz.net.seed == 2
    assert fz.net.width == 8 and fz.net.block.interp.radius == 2
    assert ex.make_config(spec, "relu", 0.5, 0).net.block.method == "relu"


def test_csv_has_metadata_and_header(tmp_path):
    spec = tiny_spec()
    rows = [ex.ResultRow("ours", "gamma", 0.0, 50.0, 1e6).to_dict(),
            ex.ResultRow("ours", "gamma", 1e-3, 40.0, 5e5, repeats=1).to_dict()]
    ex.write_csv(tmp_path / "r.csv", rows, spec)
    meta, back = ex.read_csv(tmp_path / "r.csv")
    assert meta.startswith("# spec_hash=" + spec.hash) and "seeds=0" in meta and "version=" in meta
    assert "metric_std" not in back[0] and float(back[1]["metric_mean"]) == 40.0
    many = ex.ResultRow("ours", "gamma", 0.0, 50.0, 1e6, 0.1, 10.0, repeats=3).to_dict()
    assert "metric_std" in many and "flops_std" in many


def test_run_cache_trains_once(tmp_path, monkeypatch):
    calls = []
    real = ex.train

    def counting(cfg):
        calls.append(cfg)
        return real(cfg)

    monkeypatch.setattr(ex, "train", counting)
    spec = tiny_spec()
    cfg = ex.make_config(spec, "ours", 1e-3, 0)
    a, ha = ex.RunCache(tmp_path).get(cfg)
    b, hb = ex.RunCache(tmp_path).get(cfg)  # fresh cache object, same directory
    assert len(calls) == 1 and ha == hb
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert ex.config_key(cfg) != ex.config_key(ex.make_config(spec, "ours", 2e-3, 0))


def test_tradeoff_command_writes_rows(tmp_path):
    spec = tiny_spec()
    res = ex.cmd_tradeoff(spec, tmp_path, ex.RunCache(tmp_path / "runs"))
    assert [(r.method, r.value) for r in res["rows"]] == [("ours", 0.0), ("ours", 1e-3), ("uniform", 32.0), ("uniform", 16.0)]
    assert (tmp_path / "tradeoff.csv").exists() and (tmp_path / "tradeoff_matched.csv").exists()
    by = {(r.method, r.value): r for r in res["rows"]}
    assert by[("uniform", 16.0)].flops_mean < by[("uniform", 32.0)].flops_mean
    single = ex.cmd_tradeoff(tiny_spec(methods=["ours"]), tmp_path / "one", ex.RunCache(tmp_path / "runs"))
    assert single["matched"] == [] and not (tmp_path / "one" / "tradeoff_matched.csv").exists()


def test_full_mask_sanity_is_identical_across_interpolators(tmp_path):
    spec = tiny_spec(methods=["ours"], gammas={"default": [0.0]})
    res = ex.cmd_ablate_interp(spec, tmp_path, ex.RunCache(tmp_path / "runs"))
    metrics = {r["metric_mean"] for r in res["sanity"]}
    assert len(res["sanity"]) == 5 and len(metrics) == 1


def test_block_sparsity_columns(tmp_path):
    spec = tiny_spec(base={"batch_size": 2, "net": {"width": 8, "depth": 3,
                                                    "block": {"channels": 8, "interp": {"radius": 2}, "grid_stride": 5}}},
                     gammas={"default": [1e-3]})
    res = ex.cmd_block_sparsity(spec, tmp_path, ex.RunCache(tmp_path / "runs"))
    assert list(res["rows"][0]) == ["b0.conv1", "b0.conv23", "b1.conv1", "b1.conv23", "b2.conv1", "b2.conv23"]
    assert ex.depth_trend({"b0.conv1": 0.1, "b0.conv23": 0.1, "b1.conv1": 0.3, "b1.conv23": 0.3}) == pytest.approx(0.2)


def test_pearson_examples():
    assert ex.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert ex.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(ex.pearson([1, 1, 1], [1, 2, 3]))


def test_random_mask_exact_sparsity():
    m = ex.random_mask(8, 8, 0.75, seed=3)
    assert int(m.sum()) == 16 and ((m == 0) | (m == 1)).all()


def test_cpu_bench_small(tmp_path):
    res = ex.cmd_cpu_bench(tmp_path, shapes=((8, 12),), sparsities=(0.0, 0.75), repetitions=2)
    rows = res["rows"]
    assert rows[0]["theo_speedup"] == pytest.approx(1.0)
    assert rows[1]["theo_speedup"] == pytest.approx(4.0)
    assert (tmp_path / "cpu_bench.csv").exists()


def test_cli_train_eval_and_errors(tmp_path, capsys):
    cfg = TrainConfig(total_iters=3, batch_size=2, net=ex.toy_net("segmentation", width=8, depth=1,
                                                                 block={"channels": 8, "interp": {"radius": 2}}))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "model.ckpt").exists() and (tmp_path / "run" / "history.csv").exists()
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--n-samples", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["flops_mean"] > 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: ") and json.loads(err[len("error: "):])["type"]
    (tmp_path / "bad.json").write_text(json.dumps({"gamma": -1}))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 2


def test_cli_experiment_command(tmp_path):
    spec = tiny_spec()
    (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
    assert cli.main(["tradeoff", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "tradeoff.csv").exists() and (tmp_path / "o" / "tradeoff.png").exists()
