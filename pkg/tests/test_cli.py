import json

import pytest

from corrlab import cli
from corrlab.evaluation import evaluate_method, read_report
from corrlab.synthgen import derive_labels, read_dataset


def tiny_args(tmp_path, *extra):
    return [
        f"paths.dataset_dir={tmp_path / 'data'}",
        f"paths.checkpoint={tmp_path / 'model.npz'}",
        f"paths.train_log={tmp_path / 'train.log'}",
        f"paths.report={tmp_path / 'report.csv'}",
        f"paths.ablation={tmp_path / 'ablation.csv'}",
        "scene.n_correspondences=64",
        "n_train=3", "n_val=2", "n_test=2",
        "iterations=4", "eval_interval=2",
        "network.d=8", "network.oa_clusters=4",
        "ransac_iterations=50",
        *extra,
    ]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# --- configuration -------------------------------------------------------------


def test_defaults_are_desk_scale():
    cfg = cli.load_run_config(None)
    assert cfg.scene.n_correspondences == 512
    assert cfg.network.d == 32 and cfg.network.n_stages == 3 and cfg.network.oa_clusters == 64
    assert cfg.scene.outlier_ratio == 0.7
    assert cfg.iterations == 2000
    assert cfg.network.gamma == 0.5


def test_paper_scale_preset():
    cfg = cli.load_run_config(None, paper_scale=True)
    assert (cfg.scene.n_correspondences, cfg.network.d, cfg.network.oa_clusters) == (2000, 128, 500)


def test_file_then_flags_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\nscene:\n  outlier_ratio: 0.5\nnetwork:\n  d: 16\n")
    cfg = cli.load_run_config(str(path), ["network.d=24"], seed=9)
    assert cfg.network.d == 24
    assert cfg.scene.outlier_ratio == 0.5
    assert cfg.seed == 9
    # the root seed reaches every component
    assert cfg.scene.seed == 9 and cfg.network.seed == 9


def test_config_round_trip(tmp_path):
    cfg = cli.load_run_config(None, ["network.d=12", "scene.pixel_noise_std=0.002"], seed=4)
    path = tmp_path / "dump.json"
    path.write_text(cfg.dumps())
    again = cli.load_run_config(str(path))
    assert again.dumps() == cfg.dumps()


def test_unknown_key_is_usage_error():
    with pytest.raises(cli.UsageError):
        cli.load_run_config(None, ["bogus=1"])
    with pytest.raises(cli.UsageError):
        cli.load_run_config(None, ["network.nonexistent=1"])


def test_split_seeds_are_disjoint():
    cfg = cli.load_run_config(None, seed=5)
    seeds = {s: cli.split_config(cfg, s).seed for s in cli.SPLITS}
    assert len(set(seeds.values())) == 3
    assert seeds["val"] - seeds["train"] >= cli.SPLIT_SEED_STRIDE


# --- exit codes ----------------------------------------------------------------


def test_bad_command_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["explode"])
    assert exc.value.code == cli.EXIT_USAGE


def test_bad_override_exits_with_usage(capsys):
    code, _, err = run(["generate", "network.d"], capsys)
    assert code == cli.EXIT_USAGE
    assert "key=value" in err


def test_invalid_network_flags_exit_with_usage(capsys):
    code, _, _ = run(["generate", "network.ring_size=2"], capsys)
    assert code == cli.EXIT_USAGE


def test_missing_dataset_exits_with_io(tmp_path, capsys):
    code, _, err = run(["train", *tiny_args(tmp_path)], capsys)
    assert code == cli.EXIT_IO
    assert "I/O" in err


def test_missing_config_file_exits_with_io(tmp_path, capsys):
    code, _, _ = run(["generate", "--config", str(tmp_path / "absent.yaml")], capsys)
    assert code == cli.EXIT_IO


# --- commands ------------------------------------------------------------------


def test_generate_writes_three_splits(tmp_path, capsys):
    code, out, _ = run(["generate", *tiny_args(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    counts = {"train": 3, "val": 2, "test": 2}
    for split, n in counts.items():
        scenes = read_dataset(tmp_path / "data" / f"{split}.jsonl")
        assert len(scenes) == n
        assert f"split={split} scenes={n}" in out


def test_generate_is_bit_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["generate", "--seed", "7", *tiny_args(a)], capsys)
    run(["generate", "--seed", "7", *tiny_args(b)], capsys)
    for split in cli.SPLITS:
        assert (a / "data" / f"{split}.jsonl").read_bytes() == \
            (b / "data" / f"{split}.jsonl").read_bytes()


def test_generate_reports_outlier_ratio(tmp_path, capsys):
    code, out, _ = run(["generate", *tiny_args(tmp_path, "n_train=40",
                                               "scene.n_correspondences=512")], capsys)
    assert code == cli.EXIT_OK
    line = next(l for l in out.splitlines() if l.startswith("split=train"))
    ratio = float(line.split("outlier_ratio=")[1].split()[0])
    assert abs(ratio - 0.70) <= 0.01


def test_train_then_eval(tmp_path, capsys):
    args = tiny_args(tmp_path)
    assert run(["generate", *args], capsys)[0] == cli.EXIT_OK
    code, out, _ = run(["train", *args], capsys)
    assert code == cli.EXIT_OK
    log = (tmp_path / "train.log").read_text().splitlines()
    assert log[0].startswith("# train") and "gamma=0.5" in log[0]
    assert sum(l.startswith("step=") for l in log) == 4
    assert [l.split()[1] for l in log if l.startswith("eval")] == ["step=2", "step=4"]
    assert (tmp_path / "model.npz").exists()

    code, out, _ = run(["eval", *args], capsys)
    assert code == cli.EXIT_OK
    rows = read_report(tmp_path / "report.csv")
    footers = {r["method"]: r for r in rows if r["scene"] == "mean"}
    assert set(footers) == {"network", "ransac"}
    for key in ("map5", "map20", "auc5", "auc20"):
        assert all(f[key] != "" for f in footers.values())
    assert sum(r["scene"] != "mean" for r in rows) == 4


def test_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    args = tiny_args(tmp_path)
    run(["generate", *args], capsys)
    run(["train", *args], capsys)
    code, _, _ = run(["eval", *args, "network.d=16"], capsys)
    assert code == cli.EXIT_USAGE


def test_eval_oracle_passthrough(tmp_path, capsys):
    run(["generate", *tiny_args(tmp_path)], capsys)
    test = read_dataset(tmp_path / "data" / "test.jsonl")

    def oracle(sc):
        labels = derive_labels(sc.correspondences, sc.essential_gt, 1e-4)
        return labels, sc.essential_gt, labels

    for r in evaluate_method(test, "oracle", oracle, 1e-4):
        assert r.precision == r.recall == r.f_score == 1.0


def test_ablate_six_rows(tmp_path, capsys, monkeypatch):
    calls = []

    def fake_train(cfg, train, val, network=None, log=None):
        calls.append(network)
        return cli.CorrespondenceNet(network), 0.0

    monkeypatch.setattr(cli, "train_model", fake_train)
    args = tiny_args(tmp_path)
    run(["generate", *args], capsys)
    code, out, _ = run(["ablate", *args], capsys)
    assert code == cli.EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 7
    flags = [tuple(l.split(",")[1:4]) for l in lines[1:]]
    assert flags == [("0", "0", "0"), ("0", "1", "0"), ("1", "0", "0"), ("1", "1", "0"),
                     ("1", "0", "1"), ("1", "1", "1")]
    assert [l.split(",")[0] for l in lines[1:]][-1] == "Full"
    # matched seeds: every row differs only in its module flags
    assert len({c.seed for c in calls}) == 1
    assert len({(c.d, c.gamma, c.lr) for c in calls}) == 1


def test_gradcheck_exit_status(monkeypatch, capsys):
    from corrlab.gradsuite import GradCheckResult

    def fake_suite(results):
        return lambda *a, **k: results

    good = GradCheckResult("pointcn", 1e-9, 1e-4, 1, 10, 0, 0.0)
    bad = GradCheckResult("pointcn", 1e-2, 1e-4, 1, 10, 0, 0.0)
    monkeypatch.setattr(cli, "run_gradient_suite", fake_suite([good]))
    assert run(["gradcheck"], capsys)[0] == cli.EXIT_OK
    monkeypatch.setattr(cli, "run_gradient_suite", fake_suite([good, bad]))
    code, out, _ = run(["gradcheck"], capsys)
    assert code == cli.EXIT_NUMERIC
    assert "gradcheck FAIL" in out


def test_gradcheck_small_run(capsys):
    code, out, _ = run(["gradcheck", "gradcheck_seeds=1", "gradcheck_coords=5"], capsys)
    assert code == cli.EXIT_OK
    assert sum(l.startswith("PASS block=") for l in out.splitlines()) == 10


def test_dump_config_is_json(capsys):
    cli.main(["gradcheck", "--dump-config", "gradcheck_seeds=1", "gradcheck_coords=2"])
    first = capsys.readouterr().out.splitlines()[0]
    assert json.loads(first)["gradcheck_seeds"] == 1
