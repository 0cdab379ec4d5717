import json

import pytest

from msreid.cli import main
from msreid.config import RunConfig
from msreid.errors import ConfigError


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 3,
        "paths": {"data_dir": str(tmp_path / "data"), "output_dir": str(tmp_path / "run")},
        "data": {"n_identities": 4, "n_test_identities": 2, "n_samples_per_identity": 4, "image_size": [32, 16]},
        "train": {"epochs": 2, "warmup_epochs": 1, "decay_epochs": [], "decay_lrs": [], "P": 2, "N": 2},
    }
    for key, value in overrides.items():
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_gen_data_twice_same_digest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "-c", str(cfg)]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["gen-data", "-c", str(cfg), "--data-dir", str(tmp_path / "again")]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["sha256"] == second["sha256"]
    assert (tmp_path / "data" / "resolved_config.json").exists()


def test_gen_data_missing_parent_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path)
    target = tmp_path / "nope" / "deeper"
    assert main(["gen-data", "-c", str(cfg), "--data-dir", str(target)]) == 3
    err = error_line(capsys)
    assert str(target) in err["message"]


def test_gen_data_bad_field_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"data.n_identities": 0})
    assert main(["gen-data", "-c", str(cfg)]) == 2
    assert error_line(capsys)["field"] == "data.n_identities"


def test_seed_is_mandatory(tmp_path, capsys):
    cfg = write_config(tmp_path, seed=None)
    assert main(["gen-data", "-c", str(cfg)]) == 2
    assert error_line(capsys)["field"] == "seed"


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"train.learning_rate": 1.0})
    assert main(["train", "-c", str(cfg)]) == 2
    assert error_line(capsys)["field"] == "train.learning_rate"


def test_override_precedence(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path)).with_overrides(["train.epochs=5", "eval.protocol=strict"])
    assert cfg.train.epochs == 5 and cfg.eval.protocol == "strict"
    with pytest.raises(ConfigError):
        cfg.with_overrides(["train.nope=1"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["train.epochs=many"])


def test_config_round_trip(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path))
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp_path)
    assert main(["gen-data", "-c", str(cfg)]) == 0
    assert main(["train", "-c", str(cfg)]) == 0
    return tmp_path, cfg


def test_train_outputs(trained):
    tmp_path, _ = trained
    run = tmp_path / "run"
    assert (run / "checkpoints" / "last.pt").exists()
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2 * 4
    assert {"epoch", "iter", "total", "lr", "wall_time"} <= set(rows[0])
    assert json.loads((run / "resolved_config.json").read_text())["seed"] == 3


def test_eval_is_repeatable_and_strict_has_own_file(trained):
    tmp_path, cfg = trained
    run = tmp_path / "run"
    assert main(["eval", "-c", str(cfg)]) == 0
    first = (run / "eval_metrics.json").read_text()
    assert main(["eval", "-c", str(cfg)]) == 0
    assert (run / "eval_metrics.json").read_text() == first
    assert (run / "cmc.csv").read_text().startswith("rank,accuracy")
    assert main(["eval", "-c", str(cfg), "--protocol", "strict"]) == 0
    strict = json.loads((run / "eval_metrics_strict.json").read_text())
    assert strict["protocol"] == "strict"
    assert set(json.loads(first)) == set(strict)


def test_eval_mismatched_checkpoint_exit_5(trained, capsys):
    tmp_path, cfg = trained
    assert main(["eval", "-c", str(cfg), "--set", "model.backbone.embed_dim=32"]) == 5
    err = error_line(capsys)
    assert "(32, 64)" in err["message"] and "(64, 64)" in err["message"]


def test_resume_flag_continues(trained, tmp_path):
    src, cfg = trained
    out = tmp_path / "resumed"
    ckpt = src / "run" / "checkpoints" / "epoch_001.pt"
    assert main(["train", "-c", str(cfg), "--output-dir", str(out), "--resume", str(ckpt)]) == 0
    full = [json.loads(x) for x in (src / "run" / "metrics.jsonl").read_text().splitlines()]
    tail = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]

    def strip(rows):
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]

    assert strip(tail) == strip([r for r in full if r["epoch"] >= 1])


def test_nonfinite_exit_4(trained, capsys):
    tmp_path, cfg = trained
    code = main(["train", "-c", str(cfg), "--output-dir", str(tmp_path / "boom"),
                 "--set", "train.base_lr=1e30", "--set", "train.warmup_epochs=0"])
    assert code == 4
    assert error_line(capsys)["term"]


def test_report_tables(trained, tmp_path, capsys):
    src, cfg = trained
    assert main(["eval", "-c", str(cfg)]) == 0
    metrics = json.loads((src / "run" / "eval_metrics.json").read_text())
    capsys.readouterr()
    paths = []
    for i, (sic, al, adapter) in enumerate([(False, False, False), (True, False, False), (True, True, False),
                                            (False, False, True), (True, False, True), (True, True, True)]):
        for seed in (0, 1):
            m = dict(metrics, flags={"sic": sic, "al": al, "adapter": adapter}, seed=seed)
            m["mAP"] = 0.1 * i + 0.01 * seed
            p = tmp_path / f"m{i}_{seed}.json"
            p.write_text(json.dumps(m))
            paths.append(str(p))
    assert main(["report", *paths, "--csv", str(tmp_path / "t.csv")]) == 0
    text = capsys.readouterr().out.splitlines()
    assert [line[:3] for line in text[1:]] == ["(a)", "(b)", "(c)", "(d)", "(e)", "(f)"]
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert len(rows) == 7
    header = rows[0].split(",")
    first = dict(zip(header, rows[1].split(",")))
    assert float(first["mAP"]) == pytest.approx(0.005) and first["runs"] == "2"
    assert float(first["mAP_min"]) == 0.0 and float(first["mAP_max"]) == pytest.approx(0.01)

    assert main(["report", paths[0]]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_report_empty_input_exit_2(capsys):
    assert main(["report"]) == 2
    assert error_line(capsys)["error"] == "ConfigError"
