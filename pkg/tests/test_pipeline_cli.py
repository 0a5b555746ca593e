import csv
import io
import json

import numpy as np
import pytest

from dle import cli
from dle.attention import AttentionParams, FFNParams, save_params
from dle.numerics import make_rng
from dle.pipeline import Config, load_config, parse_config, run_pipeline
from dle.pointcloud import PointCloud, save_episode, write_ply
from dle.synthetic import SynthSpec, generate_synthetic_episode


@pytest.fixture
def manifest(tmp_path):
    ep = generate_synthetic_episode(SynthSpec(n_points=512, distractor_count=10), make_rng(0))
    return save_episode(ep, tmp_path / "ep", "ep")


def test_config_defaults():
    cfg = Config()
    assert (cfg.tau, cfg.theta, cfg.n_agents, cfg.n_bg_proto, cfg.knn_k, cfg.alpha) == (0.7, 0.8, 100, 5, 10, 0.99)
    assert (cfg.n_fg_proto, cfg.points_per_block, cfg.block_size) == (10, 2048, 1.0)
    assert "tau" in load_config(None).defaults_used


def test_parse_config():
    cfg = parse_config("# comment\ntau = 0.6\nN_a=50  # agents\nL=3\n")
    assert (cfg.tau, cfg.n_agents, cfg.n_bg_proto) == (0.6, 50, 3)
    assert "tau" not in cfg.defaults_used and "N_a" not in cfg.defaults_used
    assert "theta" in cfg.defaults_used and "k" in cfg.defaults_used
    for bad in ("tau", "nope=1", "N_a=1.5"):
        with pytest.raises(ValueError):
            parse_config(bad)


def test_pipeline_stages_and_determinism():
    ep = generate_synthetic_episode(SynthSpec(n_way=2, k_shot=2, n_points=600), make_rng(1))
    cfg = parse_config("N_a=30\n")
    a, b = run_pipeline(ep, cfg, 3), run_pipeline(ep, cfg, 3)
    assert json.dumps(a.report, sort_keys=True) == json.dumps(b.report, sort_keys=True)
    conf = a.confident > 0
    assert np.all(a.final[conf] == a.confident[conf])
    assert np.all((a.filtered > 0) <= (a.expanded > 0))
    assert set(a.report["stages"]) == {"baseline", "confident", "expanded", "final", "prediction"}
    assert 0 <= a.report["miou"] <= 1


def test_pipeline_loads_parameter_files(tmp_path):
    ep = generate_synthetic_episode(SynthSpec(n_points=256), make_rng(2))
    d, n_a = ep.query_features.shape[1], 8
    rng = make_rng(0)
    att, f, mca = AttentionParams.random(d, rng), FFNParams.zeros(d), AttentionParams.identity(d)
    tensors = {"slm.attention.w_q": att.w_q, "slm.attention.w_k": att.w_k, "slm.attention.w_v": att.w_v,
               "slm.ffn.w1": f.w1, "slm.ffn.b1": f.b1, "slm.ffn.w2": f.w2, "slm.ffn.b2": f.b2,
               "slm.fc.weight": np.eye(n_a), "slm.fc.bias": np.zeros(n_a),
               "sem.mca.w_q": mca.w_q, "sem.mca.w_k": mca.w_k, "sem.mca.w_v": mca.w_v}
    path = save_params(tmp_path / "params", tensors)
    res = run_pipeline(ep, parse_config(f"N_a={n_a}\nparams={path}\n"), 0)
    assert res.prediction.shape == (256,)
    with pytest.raises(ValueError):
        run_pipeline(ep, parse_config(f"N_a={n_a + 1}\nparams={path}\n"), 0)


def test_cli_run_writes_outputs(manifest, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("N_a=40\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--episode", str(manifest), "--config", str(cfg), "--seed", "4",
                     "--out", str(out)]) == 0
    rep = json.loads((out / "ep.report.json").read_text())
    assert rep["config"]["N_a"] == 40 and "theta" in rep["defaults_used"]
    labels = (out / "ep.prediction.labels").read_text().split()
    assert len(labels) == 512
    first = (out / "ep.report.json").read_bytes()
    cli.main(["run", "--episode", str(manifest), "--config", str(cfg), "--seed", "4", "--out", str(out)])
    assert (out / "ep.report.json").read_bytes() == first


def test_cli_run_csv(manifest, tmp_path):
    assert cli.main(["run", "--episode", str(manifest), "--format", "csv", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ep.metrics.csv").read_text())))
    assert rows[0]["episode"] == "ep"


def test_cli_invalid_input(tmp_path, capsys):
    assert cli.main(["run", "--episode", str(tmp_path / "missing.json")]) != 0
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key=1\n")
    assert cli.main(["run", "--episode", str(tmp_path / "x.json"), "--config", str(bad)]) != 0
    (tmp_path / "spec.json").write_text('{"n_points": 4, "fg_fraction": 0.0}')
    assert cli.main(["gen", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "g")]) != 0


def test_cli_sweep_grid_of_one_matches_run(manifest, tmp_path, capsys):
    grid = tmp_path / "grid.txt"
    grid.write_text("tau=0.7\ntheta=0.8\nN_a=100\n")
    assert cli.main(["sweep", "--episode", str(manifest), "--sweep", str(grid), "--seed", "2"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 1
    rep = cli.run_episode(manifest, None, 2)
    for key in ("miou", "coverage", "precision", "self_loss"):
        assert float(rows[0][key]) == rep[key]


def test_sweep_row_count(manifest):
    grid = cli.parse_grid("tau=0.6,0.8\nN_a=20\ntheta=0.7,0.8,0.9\n")
    rows = cli.sweep(manifest, None, grid, [0, 1])
    assert len(rows) == 2 * 3 * 1 * 2
    assert [(r["tau"], r["theta"], r["seed"]) for r in rows[:3]] == [(0.6, 0.7, 0), (0.6, 0.7, 1), (0.6, 0.8, 0)]
    assert cli.DEFAULT_GRID["N_a"] == [50, 100, 150, 200]
    with pytest.raises(ValueError):
        cli.parse_grid("alpha=0.5\n")


def test_cli_gen_round_trip(tmp_path, capsys):
    spec = tmp_path / "d.json"
    spec.write_text(json.dumps({"n_points": 300, "distractor_count": 12}))
    for sub in ("a", "b"):
        assert cli.main(["gen", "--spec", str(spec), "--out", str(tmp_path / sub), "--seed", "9"]) == 0
    m = json.loads((tmp_path / "a" / "d.json").read_text())
    assert m["distractor"] is True and m["distractor_count"] == 12
    assert (tmp_path / "a" / "d_query.fmat").read_bytes() == (tmp_path / "b" / "d_query.fmat").read_bytes()
    assert cli.main(["run", "--episode", str(tmp_path / "a" / "d.json"), "--seed", "0"]) == 0


def test_cli_gen_unwritable(tmp_path):
    spec = tmp_path / "d.json"
    spec.write_text("{}")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen", "--spec", str(spec), "--out", str(blocker / "sub")]) != 0


def test_cli_blocks(tmp_path, capsys):
    rng = make_rng(0)
    write_ply(tmp_path / "scene.ply", PointCloud(rng.uniform(0, 2, (300, 3))))
    cfg = tmp_path / "c.cfg"
    cfg.write_text("points_per_block=64\n")
    assert cli.main(["blocks", "--cloud", str(tmp_path / "scene.ply"), "--config", str(cfg),
                     "--out", str(tmp_path / "b")]) == 0
    assert len(capsys.readouterr().out.split()) == 4
